"""Experiment configs, the field cache, the run registry and the experiment drivers."""
from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from filelock import FileLock

from . import __version__
from .eigensolve import EigenError, counting, eigen_smallest
from .field import (
    Box,
    Field,
    FieldError,
    Grid,
    Mollifier,
    load_field,
    mollify,
    riesz_spectral_constant,
    sample_riesz_noise,
    sample_white_noise,
    save_field,
    zero_field,
)
from .harmonic import lp_growth_slope
from .ids import IdsCurve, IdsError, additivity_check, estimate_ids, nested_monotonicity, weyl_fit
from .operator import assemble_direct, assemble_transformed
from .renorm import CutoffF, RenormSpec, build_pack_2d, build_Y, gradient_variance_sum, renorm_constant, select_M

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_BUDGET = 3
EXIT_ASSERTION = 4

KINDS = ("sample", "spectrum", "ids", "weyl", "renorm-scan", "besov-scan", "additivity", "transform-check")

# unknowns per eigenproblem / lattice sites per sampled field
MAX_UNKNOWNS = 2**21
MAX_SITES = 2**24


class ConfigError(ValueError):
    pass


class BudgetError(RuntimeError):
    pass


_box_schema = {
    "type": "object",
    "properties": {
        "origin": {"type": "array", "items": {"type": "number"}},
        "side": {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                           {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}]},
    },
    "required": ["origin", "side"],
    "additionalProperties": False,
}

_lambda_schema = {
    "oneOf": [
        {"type": "array", "items": {"type": "number"}, "minItems": 1},
        {
            "type": "object",
            "properties": {"start": {"type": "number"}, "stop": {"type": "number"},
                           "num": {"type": "integer", "minimum": 1}},
            "required": ["start", "stop", "num"],
            "additionalProperties": False,
        },
    ]
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "experiment": {"enum": list(KINDS)},
        "dim": {"enum": [1, 2, 3]},
        "side_length": {"type": "number", "exclusiveMinimum": 0},
        "n": {"type": "integer", "minimum": 2},
        "epsilon": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "potential": {"enum": ["white", "zero", "riesz"]},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "bc": {"enum": ["dirichlet", "neumann"]},
        "box": _box_schema,
        "k": {"type": "integer", "minimum": 1},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "lambda_grid": _lambda_schema,
        "L_list": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "tiled": {"type": "boolean"},
        "seeds": {
            "oneOf": [
                {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                {"type": "object", "properties": {"count": {"type": "integer", "minimum": 1},
                                                  "base": {"type": "integer", "minimum": 0}},
                 "required": ["count"], "additionalProperties": False},
            ]
        },
        "method": {"enum": ["fourier_sum", "monte_carlo"]},
        "samples": {"type": "integer", "minimum": 2},
        "levels": {"type": "array", "items": {"type": "integer", "minimum": -1}, "minItems": 2},
        "p": {"oneOf": [{"type": "number", "minimum": 1}, {"const": "inf"}]},
        "tiling": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "overlap": {"type": "number", "exclusiveMinimum": 0},
        "n_list": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "delta_minus": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "window": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "checks": {"type": "object", "additionalProperties": {"type": ["number", "boolean", "array"]}},
        "jobs": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "cache": {"type": "boolean"},
    },
    "required": ["experiment"],
    "additionalProperties": False,
}


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from exc
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return validate_config(cfg)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seeds(cfg: dict, seed_base: int = 0) -> list[int]:
    spec = cfg.get("seeds", {"count": 1})
    if isinstance(spec, list):
        return [int(s) + seed_base for s in spec]
    base = spec.get("base", 0) + seed_base
    return list(range(base, base + spec["count"]))


def resolve_lambdas(cfg: dict, default=(-30.0, 60.0, 120)) -> np.ndarray:
    spec = cfg.get("lambda_grid")
    if spec is None:
        return np.linspace(*default[:2], default[2])
    if isinstance(spec, list):
        grid = np.array(spec, dtype=float)
    else:
        grid = np.linspace(spec["start"], spec["stop"], spec["num"])
    if np.any(np.diff(grid) < 0):
        raise ConfigError("lambda_grid must be sorted")
    return grid


def grid_of(cfg: dict) -> Grid:
    try:
        return Grid(cfg.get("dim", 2), float(cfg.get("side_length", 1.0)), int(cfg.get("n", 64)))
    except FieldError as exc:
        raise ConfigError(str(exc)) from exc


def box_of(cfg: dict, grid: Grid) -> Box:
    b = cfg.get("box")
    if b is None:
        return Box.cube(grid.dim, grid.side_length)
    return Box(tuple(b["origin"]), b["side"])


# --- field cache -------------------------------------------------------------------------

def cache_dir() -> Path:
    env = os.environ.get("ANDERSON_CACHE_DIR")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "andersonlab"


def field_key(kind: str, seed: int, grid: Grid, epsilon: float | None, alpha: float | None = None) -> str:
    payload = {"kind": kind, "seed": seed, "grid": grid.to_json(), "epsilon": epsilon, "alpha": alpha,
               "version": __version__}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:32]


def potential_field(kind: str, grid: Grid, seed: int, epsilon: float | None, alpha: float | None = None,
                    use_cache: bool = False) -> Field:
    """Mollified sample (``epsilon`` given) or the raw one, cached by content key."""
    stem = cache_dir() / "fields" / field_key(kind, seed, grid, epsilon, alpha) if use_cache else None
    if stem is not None and stem.with_suffix(".json").exists():
        try:
            return load_field(stem)
        except (OSError, ValueError, KeyError):
            pass
    if kind == "zero":
        f = zero_field(grid)
    elif kind == "white":
        f = sample_white_noise(grid, seed)
    elif kind == "riesz":
        if alpha is None:
            raise ConfigError("riesz potential needs alpha")
        f = sample_riesz_noise(grid, alpha, 1.0 / riesz_spectral_constant(grid.dim, alpha), seed)
    else:
        raise ConfigError(f"unknown potential {kind!r}")
    if epsilon is not None and kind != "zero":
        f = mollify(f, Mollifier(epsilon))
    if stem is not None:
        stem.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(stem) + ".lock"):
            if not stem.with_suffix(".json").exists():
                save_field(f, stem)
    return f


# --- registry -----------------------------------------------------------------------------

def registry_path() -> Path:
    return Path(os.environ.get("ANDERSON_REGISTRY", cache_dir() / "registry.jsonl"))


def append_registry(record: dict, path: Path | None = None) -> Path:
    path = path or registry_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        with path.open("a", encoding="utf-8") as fh:
            fh.write(canonical_json(record) + "\n")
    return path


@dataclass
class RunRecord:
    experiment: str
    config_hash: str
    version: str
    wall_clock: float
    artifacts: dict[str, str] = field(default_factory=dict)
    assertions: dict[str, bool] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    out_dir: str = ""

    @property
    def passed(self) -> bool:
        return all(self.assertions.values())

    def to_json(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "version": self.version,
            "python": platform.python_version(),
            "wall_clock": self.wall_clock,
            "artifacts": dict(sorted(self.artifacts.items())),
            "assertions": dict(sorted(self.assertions.items())),
            "passed": self.passed,
            "summary": self.summary,
            "out_dir": self.out_dir,
        }


# --- experiments ---------------------------------------------------------------------------

@dataclass
class Context:
    cfg: dict
    out: Path
    seeds: list[int]
    jobs: int
    written: list[Path] = field(default_factory=list)
    assertions: dict[str, bool] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.written.append(p)
        return p

    def check(self, name: str, ok) -> None:
        self.assertions[name] = bool(ok)

    def write_json(self, name: str, payload) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        import csv

        p = self.path(name)
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        return p


def _pmap(func, items, jobs):
    if jobs <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def _budget(grid: Grid, unknowns: int | None = None) -> None:
    if grid.size > MAX_SITES:
        raise BudgetError(f"{grid.size} lattice sites exceed the budget {MAX_SITES}")
    if unknowns is not None and unknowns > MAX_UNKNOWNS:
        raise BudgetError(f"{unknowns} unknowns exceed the budget {MAX_UNKNOWNS}")


def _renorm_const(cfg: dict, grid: Grid) -> float:
    if cfg.get("potential", "white") == "zero" or cfg.get("epsilon") is None or grid.dim != 2:
        return 0.0
    return gradient_variance_sum(grid, Mollifier(cfg["epsilon"]))


def _potential(cfg: dict, grid: Grid, seed: int) -> Field:
    return potential_field(cfg.get("potential", "white"), grid, seed, cfg.get("epsilon"), cfg.get("alpha"),
                           cfg.get("cache", False))


def run_sample(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    _budget(grid)
    rows = []
    for s in ctx.seeds:
        f = _potential(cfg, grid, s)
        for suffix in (".bin", ".json"):
            ctx.written.append(ctx.out / f"field_seed{s}{suffix}")
        save_field(f, ctx.out / f"field_seed{s}")
        v = f.values
        rows.append([s, repr(float(v.mean())), repr(float(v.var())), repr(float(np.abs(v).max()))])
    ctx.write_csv("sample_stats.csv", ["seed", "mean", "variance", "sup"], rows)
    ctx.check("finite", all(np.isfinite(float(r[2])) for r in rows))
    ctx.summary["fields"] = len(rows)


def _spectrum_worker(args):
    cfg, seed = args
    grid = grid_of(cfg)
    xi = _potential(cfg, grid, seed)
    form = assemble_direct(xi, _renorm_const(cfg, grid), cfg.get("bc", "dirichlet"), box_of(cfg, grid))
    spec = eigen_smallest(form, cfg.get("k", 5), cfg.get("tol", 1e-10), vectors=False)
    return seed, spec


def run_spectrum(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    _budget(grid, grid.size)
    results = _pmap(_spectrum_worker, [(cfg, s) for s in ctx.seeds], ctx.jobs)
    tol = cfg.get("tol", 1e-10)
    lam1 = {}
    for seed, spec in results:
        spec.to_csv(ctx.path(f"spectrum_seed{seed}.csv"))
        lam1[str(seed)] = float(spec.eigenvalues[0])
        ctx.check(f"sorted_seed{seed}", np.all(np.diff(spec.eigenvalues) >= 0))
        ctx.check(f"residual_seed{seed}", np.all(spec.residuals <= max(tol, 1e-8)))
    ctx.summary["lambda_1"] = lam1
    ctx.write_json("spectrum_summary.json", {"lambda_1": lam1, "k": cfg.get("k", 5), "bc": cfg.get("bc", "dirichlet")})


def run_ids(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    _budget(grid, grid.size)
    lambdas = resolve_lambdas(cfg)
    bc = cfg.get("bc", "dirichlet")
    L_list = cfg.get("L_list", [grid.side_length])
    curves = estimate_ids(bc, L_list, cfg.get("epsilon"), ctx.seeds, lambdas, torus=grid,
                          potential=cfg.get("potential", "white"), tiled=cfg.get("tiled", False), jobs=ctx.jobs)
    summary = {"bc": bc, "curves": []}
    for c in curves:
        name = f"ids_{bc}_L{c.L:g}.csv"
        c.to_csv(ctx.path(name))
        ctx.check(f"monotone_L{c.L:g}", np.all(np.diff(c.mean) >= -1e-12))
        summary["curves"].append({"L": c.L, "file": name, "n_seeds": c.n_seeds, "partial": c.partial,
                                  "max_stderr": float(c.stderr.max())})
    ctx.summary.update(summary)
    ctx.write_json("ids_summary.json", summary)


def run_weyl(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    _budget(grid, grid.size)
    box = box_of(cfg, grid)
    lambdas = resolve_lambdas(cfg, (0.0, 3000.0, 61))
    seed = ctx.seeds[0]
    xi = _potential(cfg, grid, seed)
    form = assemble_direct(xi, _renorm_const(cfg, grid), cfg.get("bc", "dirichlet"), box)
    curve = counting(form, lambdas)
    curve.to_csv(ctx.path("weyl_counts.csv"))
    ids = IdsCurve(curve.lambdas, curve.counts / box.volume, np.zeros(curve.lambdas.size), 1, box.side[0],
                   form.bc, cfg.get("epsilon"), grid.dim)
    fit = weyl_fit(ids, tuple(cfg["window"]) if "window" in cfg else None)
    payload = fit.to_json() | {"raw_ratio_rel": fit.raw_ratio / fit.target, "leading_rel": fit.leading / fit.target}
    checks = cfg.get("checks", {})
    if "raw_band" in checks:
        lo, hi = checks["raw_band"]
        ctx.check("raw_ratio_band", lo <= payload["raw_ratio_rel"] <= hi)
    if "leading_band" in checks:
        lo, hi = checks["leading_band"]
        ctx.check("leading_band", lo <= payload["leading_rel"] <= hi)
    ctx.check("monotone", np.all(np.diff(curve.counts) >= 0))
    ctx.summary.update(payload)
    ctx.write_json("weyl_fit.json", payload)


def run_renorm_scan(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    _budget(grid)
    eps_list = sorted(cfg.get("epsilons", [2.0**-k for k in range(2, 7)]), reverse=True)
    method = cfg.get("method", "fourier_sum")
    rows, xs, ys = [], [], []
    for eps in eps_list:
        res = renorm_constant(RenormSpec(grid.dim, eps, method, cfg.get("samples", 0), ctx.seeds[0]), grid)
        rows.append([repr(eps), repr(math.log(1 / eps)), repr(res.value), repr(res.stderr), method])
        xs.append(math.log(1 / eps))
        ys.append(res.value)
    ctx.write_csv("renorm_scan.csv", ["epsilon", "log_inv_eps", "c_eps", "stderr", "method"], rows)
    payload = {"method": method}
    if len(xs) >= 2:
        slope, icpt = np.polyfit(xs, ys, 1)
        pred = slope * np.array(xs) + icpt
        tss = float(np.sum((np.array(ys) - np.mean(ys)) ** 2))
        r2 = 1 - float(np.sum((np.array(ys) - pred) ** 2)) / tss if tss > 0 else 1.0
        payload |= {"slope": float(slope), "intercept": float(icpt), "r2": r2,
                    "slope_rel": float(slope * 2 * math.pi)}
        if method == "fourier_sum":
            ctx.check("nondecreasing", np.all(np.diff(ys) >= -1e-12))
        band = cfg.get("checks", {}).get("slope_band")
        if band:
            ctx.check("slope_band", band[0] <= payload["slope_rel"] <= band[1])
    ctx.summary.update(payload)
    ctx.write_json("renorm_fit.json", payload)


def _besov_field(args):
    cfg, seed = args
    grid = grid_of(cfg)
    return _potential(cfg | {"epsilon": None}, grid, seed)


def run_besov_scan(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    _budget(grid)
    p = cfg.get("p", "inf")
    p = math.inf if p == "inf" else float(p)
    fields = _pmap(_besov_field, [(cfg, s) for s in ctx.seeds], ctx.jobs)
    g = lp_growth_slope(fields, cfg.get("levels"), p)
    rows = [[j, repr(m), repr(math.log2(m)), len(fields)] for j, m in zip(g.levels, g.mean_norms)]
    ctx.write_csv("besov_profile.csv", ["j", "mean_norm", "mean_log2_norm", "n_seeds"], rows)
    kind = cfg.get("potential", "white")
    target = grid.dim / 2 if kind == "white" else (grid.dim - cfg.get("alpha", 1.0)) / 2
    payload = {"slope": g.slope, "target": target, "levels": list(g.levels), "p": "inf" if p == math.inf else p}
    band = cfg.get("checks", {}).get("slope_band")
    if band:
        ctx.check("slope_band", band[0] <= g.slope <= band[1])
    ctx.summary.update(payload)
    ctx.write_json("besov_fit.json", payload)


def _additivity_worker(args):
    cfg, seed = args
    grid = grid_of(cfg)
    xi = _potential(cfg, grid, seed)
    c = _renorm_const(cfg, grid)
    box = box_of(cfg, grid)
    lambdas = resolve_lambdas(cfg)
    rep = additivity_check(box, cfg.get("tiling", [2] + [1] * (grid.dim - 1)), lambdas, xi, c, cfg.get("overlap"))
    inner = Box(box.origin, tuple(s / 2 for s in box.side))
    mono = nested_monotonicity(xi, c, inner, box, lambdas)
    return seed, rep, mono


def run_additivity(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    _budget(grid, grid.size)
    results = _pmap(_additivity_worker, [(cfg, s) for s in ctx.seeds], ctx.jobs)
    rows = []
    totals = {"super": 0, "sub": 0, "bracket": 0, "cover": 0, "nested": 0}
    for seed, rep, mono in results:
        rows.append([seed, rep.super_violations, rep.sub_violations, rep.bracket_violations, rep.cover_violations,
                     mono, "" if rep.ims_shift is None else repr(rep.ims_shift)])
        totals["super"] += rep.super_violations
        totals["sub"] += rep.sub_violations
        totals["bracket"] += rep.bracket_violations
        totals["cover"] += rep.cover_violations
        totals["nested"] += mono
    ctx.write_csv("additivity.csv", ["seed", "dirichlet_super", "neumann_sub", "bracketing", "ims_cover", "nested",
                                     "ims_shift"], rows)
    for k, v in totals.items():
        ctx.check(f"{k}_violations", v == 0)
    ctx.summary["violations"] = totals
    ctx.write_json("additivity_summary.json", {"violations": totals, "seeds": ctx.seeds})


def _transform_worker(args):
    cfg, seed = args
    from .field import coarsen

    eps = cfg.get("epsilon", 2.0**-4)
    k = cfg.get("k", 5)
    n_list = sorted(cfg.get("n_list", [cfg.get("n", 128)]))
    base = grid_of(cfg)
    fine = Grid(base.dim, base.side_length, n_list[-1])
    noise = sample_white_noise(fine, seed)
    out = []
    for n in n_list:
        xi = noise
        while xi.grid.n > n:
            xi = coarsen(xi, 2)
        grid = xi.grid
        box = box_of(cfg, grid)
        pack = build_pack_2d(xi, Mollifier(eps), cfg.get("levels", [0, 6])[-1])
        M = select_M(pack, cfg.get("delta_minus", 0.3), cfg.get("gamma", 1.0), box)
        Y = build_Y(pack, CutoffF(), M)
        direct = eigen_smallest(assemble_direct(pack.xi_eps, pack.c_eps, "dirichlet", box), k, vectors=False)
        trans = eigen_smallest(assemble_transformed(pack.W[M], Y, "dirichlet", box), k, vectors=False)
        rel = np.abs(direct.eigenvalues - trans.eigenvalues) / np.maximum(1.0, np.abs(direct.eigenvalues))
        out.append((n, M, direct.eigenvalues, trans.eigenvalues, rel))
    return seed, out


def run_transform_check(ctx: Context) -> None:
    cfg = ctx.cfg
    grid = grid_of(cfg)
    if grid.dim != 2:
        raise ConfigError("transform-check is implemented for d = 2")
    n_list = sorted(cfg.get("n_list", [grid.n]))
    _budget(Grid(grid.dim, grid.side_length, n_list[-1]), n_list[-1] ** grid.dim)
    results = _pmap(_transform_worker, [(cfg, s) for s in ctx.seeds], ctx.jobs)
    rows = []
    worst: dict[int, float] = {}
    for seed, out in results:
        for n, M, a, b, rel in out:
            for i, (x, y, r) in enumerate(zip(a, b, rel), start=1):
                rows.append([seed, n, M, i, repr(float(x)), repr(float(y)), repr(float(r))])
            worst[n] = max(worst.get(n, 0.0), float(rel.max()))
    ctx.write_csv("transform_check.csv", ["seed", "n", "M", "index", "direct", "transformed", "rel_diff"], rows)
    checks = cfg.get("checks", {})
    ctx.check("rel_tol", max(worst.values()) <= checks.get("rel_tol", 0.02))
    payload = {"max_rel_diff": {str(n): v for n, v in sorted(worst.items())}}
    if len(worst) >= 2:
        ns = sorted(worst)
        ratio = worst[ns[-1]] / worst[ns[-2]] if worst[ns[-2]] > 0 else 0.0
        payload["refinement_ratio"] = ratio
        if "ratio_max" in checks:
            ctx.check("refinement_ratio", ratio <= checks["ratio_max"])
    ctx.summary.update(payload)
    ctx.write_json("transform_summary.json", payload)


DRIVERS = {
    "sample": run_sample,
    "spectrum": run_spectrum,
    "ids": run_ids,
    "weyl": run_weyl,
    "renorm-scan": run_renorm_scan,
    "besov-scan": run_besov_scan,
    "additivity": run_additivity,
    "transform-check": run_transform_check,
}


def run(cfg: dict, out: str | Path | None = None, jobs: int | None = None, seed_base: int = 0,
        registry: bool = True) -> RunRecord:
    """Validate, execute, write artifacts and the run record; append to the registry."""
    cfg = validate_config(dict(cfg))
    out = Path(out or cfg.get("out") or f"runs/{cfg['experiment']}")
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs or cfg.get("jobs", 1)
    seeds = resolve_seeds(cfg, seed_base)
    ctx = Context(cfg, out, seeds, jobs)
    start = time.perf_counter()
    try:
        DRIVERS[cfg["experiment"]](ctx)
    except (FieldError, IdsError) as exc:
        raise ConfigError(str(exc)) from exc
    except EigenError as exc:
        raise BudgetError(str(exc)) from exc
    except MemoryError as exc:
        raise BudgetError("out of memory") from exc
    wall = time.perf_counter() - start
    keyed = {"config": cfg, "seeds": seeds}
    record = RunRecord(
        cfg["experiment"],
        config_hash(keyed),
        __version__,
        wall,
        {p.name: file_digest(p) for p in ctx.written},
        ctx.assertions,
        ctx.summary,
        str(out),
    )
    (out / "run.json").write_text(json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n")
    if registry:
        append_registry(record.to_json())
    return record
