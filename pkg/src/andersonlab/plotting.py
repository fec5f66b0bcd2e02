"""Deterministic SVG figures for experiment artifacts."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PLOT_KINDS = ("ids", "weyl", "renorm", "besov")

_RC = {
    "svg.hashsalt": "andersonlab",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (5.0, 3.6),
    "lines.linewidth": 1.2,
}


class PlotError(ValueError):
    pass


def _read_csv(path: str | Path, required: list[str]) -> dict[str, list[str]]:
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise PlotError(f"{path}: missing columns {missing}")
        cols: dict[str, list[str]] = {c: [] for c in header}
        for row in reader:
            for c in header:
                cols[c].append(row[c])
    return cols


def _floats(values: list[str]) -> np.ndarray:
    return np.array([float(v) if v != "" else math.nan for v in values], dtype=float)


def _save(fig, out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return out


def plot_ids(paths, out: Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for p in paths:
            cols = _read_csv(p, ["bc", "L", "lambda", "mean_count_per_volume", "stderr"])
            if not cols["lambda"]:
                continue
            lam, mean, se = (_floats(cols[c]) for c in ("lambda", "mean_count_per_volume", "stderr"))
            label = f"L = {float(cols['L'][0]):g} ({cols['bc'][0]})"
            (line,) = ax.plot(lam, mean, label=label)
            ax.fill_between(lam, mean - 1.96 * se, mean + 1.96 * se, color=line.get_color(), alpha=0.2, lw=0)
        ax.set_xlabel(r"$\lambda$")
        ax.set_ylabel(r"$N(\lambda)/|U|$")
        if ax.lines:
            ax.legend(loc="upper left")
        return _save(fig, out)


def plot_weyl(paths, out: Path, volume: float = 1.0, dim: int = 2) -> Path:
    target = math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) / (2 * math.pi) ** dim
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for p in paths:
            cols = _read_csv(p, ["lambda", "count"])
            lam, cnt = _floats(cols["lambda"]), _floats(cols["count"])
            keep = lam > 0
            if keep.any():
                ax.plot(lam[keep], cnt[keep] / (volume * lam[keep] ** (dim / 2)), label=Path(p).stem)
        ax.axhline(target, color="k", ls="--", lw=0.8, label="Weyl constant")
        ax.set_xlabel(r"$\lambda$")
        ax.set_ylabel(r"$\lambda^{-d/2} N(\lambda)/|U|$")
        ax.legend(loc="lower right")
        return _save(fig, out)


def plot_renorm(paths, out: Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for p in paths:
            cols = _read_csv(p, ["epsilon", "c_eps", "stderr"])
            if not cols["epsilon"]:
                continue
            x = np.log(1.0 / _floats(cols["epsilon"]))
            y, se = _floats(cols["c_eps"]), _floats(cols["stderr"])
            ax.errorbar(x, y, yerr=se, marker="o", ms=3, capsize=2, label=Path(p).stem)
            if x.size >= 2:
                slope, icpt = np.polyfit(x, y, 1)
                ax.plot(x, slope * x + icpt, ls=":", color="gray", label=f"slope {slope:.4f}")
        ax.set_xlabel(r"$\log(1/\varepsilon)$")
        ax.set_ylabel(r"$c_\varepsilon$")
        if ax.lines:
            ax.legend(loc="upper left")
        return _save(fig, out)


def plot_besov(paths, out: Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for p in paths:
            cols = _read_csv(p, ["j", "mean_log2_norm"])
            if not cols["j"]:
                continue
            j, y = _floats(cols["j"]), _floats(cols["mean_log2_norm"])
            ax.plot(j, y, marker="o", ms=3, label=Path(p).stem)
            if j.size >= 2:
                slope, icpt = np.polyfit(j, y, 1)
                ax.plot(j, slope * j + icpt, ls=":", color="gray", label=f"slope {slope:.3f}")
        ax.set_xlabel(r"block $j$")
        ax.set_ylabel(r"$\log_2 \|\Delta_j f\|$")
        if ax.lines:
            ax.legend(loc="upper left")
        return _save(fig, out)


def plot(paths, kind: str, out: str | Path, **kwargs) -> Path:
    if kind not in PLOT_KINDS:
        raise PlotError(f"unknown plot kind {kind!r}")
    paths = [Path(p) for p in paths]
    for p in paths:
        if not p.exists():
            raise PlotError(f"{p} does not exist")
    func = {"ids": plot_ids, "weyl": plot_weyl, "renorm": plot_renorm, "besov": plot_besov}[kind]
    return func(paths, Path(out), **kwargs)
