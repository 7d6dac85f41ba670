"""Experiment configuration, protocol runs and artifact output.

Subcommands::

    ttias assemble    --config cfg.toml
    ttias forward     --config cfg.toml --out runs/fwd
    ttias reconstruct --config cfg.toml --out runs/rec
    ttias benchmark   --matrix bench.toml --out runs/bench
    ttias plots       runs/rec

Every ExperimentConfig field can also be given as a flag (``--n-basis 34 34``,
``--solver amen-kkt``, ...); flags override the config file. Exit codes: 0 on
success, 2 on invalid configuration, 3 when an inner solver fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, SolverError, TtiasError
from .forward import build_system, make_observation
from .geometry import BUILTIN, builtin_geometry, grid_geometry, load_control_net
from .ias import HyperModel, InverseProblem, ias_global_hybrid, ias_local_hybrid, ias_plain, support

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("ttias")

VARIANTS = ("plain", "global", "local")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


@dataclass
class ExperimentConfig:
    """One reconstruction run. ``seed`` has no default and must be given."""

    seed: Optional[int] = None
    geometry: str = "quarter_annulus"
    geometry_file: Optional[str] = None
    n_basis: list = field(default_factory=lambda: [34, 34])
    degree: int = 2
    eps_w: float = 1e-8
    N_t: int = 50
    T: float = 1.0
    nu: float = 0.1
    sigma: float = 0.1
    n_sources: int = 4
    source_amplitude: float = 1.0
    source_width: float = 2.0  # in knot spans; coefficients within width/2 of a centre are set
    variant: str = "plain"
    r1: float = 1.0
    r2: float = -1.0
    i_s: int = 10
    bound_c: float = 1.0
    threshold_exponent: float = 1.0
    solver: str = "full-cgls"
    max_iter: int = 50
    tol: float = 1e-6
    cgls_iter: int = 30
    cgls_tol: float = 1e-6
    matvec_eps: float = 1e-6
    amen_eps: float = 1e-4
    amen_sweeps: int = 20
    amen_inner_tol: Optional[float] = None
    amen_inner_maxiter: int = 3000
    rmax: Optional[int] = None
    warm_start: bool = False
    output: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ConfigError("seed", "a seed is required")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ConfigError("seed", f"must be an integer, got {self.seed!r}")
        if self.geometry_file is None and self.geometry not in BUILTIN:
            raise ConfigError("geometry", f"unknown geometry {self.geometry!r}; choose from {sorted(BUILTIN)}")
        for name in ("eps_w", "T", "tol", "cgls_tol", "matvec_eps", "amen_eps", "source_width"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)!r}")
        for name in ("N_t", "max_iter", "cgls_iter", "amen_sweeps", "i_s", "n_sources", "amen_inner_maxiter"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.sigma < 0 or self.nu < 0:
            raise ConfigError("sigma" if self.sigma < 0 else "nu", "must be nonnegative")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.solver not in InverseProblem.SOLVERS:
            raise ConfigError("solver", f"must be one of {InverseProblem.SOLVERS}, got {self.solver!r}")
        if self.variant == "local" and self.r2 in (0.0, 1.0):
            raise ConfigError("r2", "the local hybrid needs r2 outside {0, 1}")
        for name in ("r1", "r2"):
            try:
                HyperModel.preset(getattr(self, name))
            except TtiasError as exc:
                raise ConfigError(name, str(exc)) from None
        if self.amen_inner_tol is not None and not self.amen_inner_tol > 0:
            raise ConfigError("amen_inner_tol", "must be positive or null")
        if self.rmax is not None and self.rmax < 1:
            raise ConfigError("rmax", "must be a positive integer or null")
        if self.degree < 1:
            raise ConfigError("degree", "must be at least 1")
        nb = list(self.n_basis)
        if any(int(n) < self.degree + 3 for n in nb):
            raise ConfigError("n_basis", f"need at least degree + 3 = {self.degree + 3} functions per dimension")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_basis"] = [int(n) for n in self.n_basis]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        return cls(**data)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def read_config_file(path) -> dict:
    """TOML by default; files ending in ``.json`` (or failing TOML parsing) are read as JSON."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            raise ConfigError(str(path), f"neither TOML nor JSON: {exc}") from None


def load_config(path) -> ExperimentConfig:
    data = read_config_file(path)
    return ExperimentConfig.from_dict(data.get("experiment", data)).validate()


# ---------------------------------------------------------------------------
# problem setup


def _geometry(cfg: ExperimentConfig):
    if cfg.geometry_file:
        return load_control_net(cfg.geometry_file)
    return builtin_geometry(cfg.geometry)


def build(cfg: ExperimentConfig):
    net = _geometry(cfg)
    nb = list(cfg.n_basis)
    if len(nb) == 1:
        nb = nb * net.dim
    if len(nb) != net.dim:
        raise ConfigError("n_basis", f"{len(nb)} entries for a {net.dim}D geometry")
    sys_, disc = build_system(net, nb, cfg.degree, cfg.N_t, cfg.T, cfg.nu, cfg.eps_w)
    return net, sys_, disc


GRIDS_3D = {756: [9, 11, 14], 6048: [16, 20, 26]}  # interior 7x9x12 and 14x18x24


def protocol_2d(seed: int = 0, **kw) -> ExperimentConfig:
    """2D desk-scale protocol: 32^2 interior dofs on the quarter annulus, 50 steps, sigma 0.1."""
    base = dict(seed=seed, geometry="quarter_annulus", n_basis=[34, 34], N_t=50, T=1.0, nu=0.1,
                sigma=0.1, max_iter=50, cgls_iter=30, matvec_eps=1e-6, amen_eps=1e-4, amen_sweeps=20)
    base.update(kw)
    return ExperimentConfig(**base).validate()


def protocol_3d(dofs: int, N_t: int, seed: int = 0, **kw) -> ExperimentConfig:
    """3D scaling run on the quarter pipe with the block-AMEn KKT inner solver.

    The inner solves are deliberately loose (few sweeps, capped ranks and
    local MINRES steps) so that four sizes fit into an hour on one core;
    the output of interest is the IAS step count, not the accuracy.
    """
    base = dict(seed=seed, geometry="quarter_pipe", n_basis=list(GRIDS_3D[dofs]), N_t=N_t, sigma=1e-3,
                variant="global", r1=1.0, r2=-1.0, i_s=10, max_iter=25, tol=1e-2,
                solver="amen-kkt", amen_eps=1e-4, amen_sweeps=4, amen_inner_tol=1e-6,
                amen_inner_maxiter=300, rmax=40, warm_start=True)
    base.update(kw)
    return ExperimentConfig(**base).validate()


def source_centres(shape: Sequence[int], count: int) -> list:
    """Fixed interior positions, spread over the index box away from the boundary."""
    base = [(0.25, 0.3, 0.3), (0.7, 0.25, 0.65), (0.3, 0.72, 0.7), (0.72, 0.7, 0.35)]
    out = []
    for k in range(count):
        frac = base[k % len(base)]
        shift = 0.07 * (k // len(base))
        out.append(tuple(int(round((frac[d] + shift) % 1.0 * (n - 1))) for d, n in enumerate(shape)))
    return out


def true_field(shape: Sequence[int], count: int = 4, amplitude: float = 1.0, width: float = 2.0) -> np.ndarray:
    """Gaussian bumps of the given width (in knot spans) at :func:`source_centres`.

    A bump sets the coefficients within ``width/2`` index units of its centre
    to ``amplitude * exp(-2 d^2 / (width/2)^2)``; with the default width only
    the centre coefficient is nonzero.
    """
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    u = np.zeros(tuple(shape))
    half = 0.5 * width
    for c in source_centres(shape, count):
        d2 = sum((g - ci) ** 2 for g, ci in zip(grids, c))
        inside = d2 < half * half
        u[inside] = np.maximum(u[inside], amplitude * np.exp(-2.0 * d2[inside] / (half * half)))
    return u.ravel()


def _greville(space) -> np.ndarray:
    p, t = space.degree, space.knots
    if p == 0:
        return 0.5 * (t[:-1] + t[1:])
    return np.array([t[i + 1:i + p + 1].mean() for i in range(space.n)])


def field_points(net, disc) -> np.ndarray:
    """Physical points (Greville abscissae mapped by the geometry) of the interior coefficients."""
    pts = [_greville(s)[1:-1] for s in disc.spaces]
    X = grid_geometry(net, pts)  # (D, k_1, ..., k_D)
    D = X.shape[0]
    P = np.zeros((int(np.prod(X.shape[1:])), 3))
    P[:, :D] = X.reshape(D, -1).T
    return P


# ---------------------------------------------------------------------------
# artifact writers


def write_vtk(path, points: np.ndarray, dims: Sequence[int], values: np.ndarray, name: str = "u") -> None:
    """Legacy ASCII structured grid. ``points`` are in C order of ``dims``; VTK wants x fastest."""
    dims = list(dims) + [1] * (3 - len(dims))
    P = points.reshape(*dims, 3).transpose(2, 1, 0, 3).reshape(-1, 3)
    V = np.asarray(values).reshape(*dims).transpose(2, 1, 0).ravel()
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name}\nASCII\nDATASET STRUCTURED_GRID\n")
        fh.write(f"DIMENSIONS {dims[0]} {dims[1]} {dims[2]}\n")
        fh.write(f"POINTS {len(P)} double\n")
        for p in P:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        fh.write(f"POINT_DATA {len(V)}\nSCALARS {name} double 1\nLOOKUP_TABLE default\n")
        for v in V:
            fh.write(f"{float(v)!r}\n")


def read_vtk(path) -> tuple[np.ndarray, tuple, np.ndarray]:
    """Inverse of :func:`write_vtk`: (points in C order, dims, values in C order)."""
    lines = Path(path).read_text().splitlines()
    i = next(k for k, ln in enumerate(lines) if ln.startswith("DIMENSIONS"))
    dims = tuple(int(v) for v in lines[i].split()[1:])
    npts = int(lines[i + 1].split()[1])
    P = np.array([[float(v) for v in ln.split()] for ln in lines[i + 2:i + 2 + npts]])
    j = next(k for k, ln in enumerate(lines) if ln.startswith("LOOKUP_TABLE"))
    V = np.array([float(v) for v in lines[j + 1:j + 1 + npts]])
    P = P.reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3).reshape(-1, 3)
    V = V.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0).ravel()
    return P, dims, V


def write_coefficients(path, values: np.ndarray, shape: Sequence[int]) -> None:
    idx = np.array(np.unravel_index(np.arange(len(values)), tuple(shape))).T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"i{d}" for d in range(len(shape))] + ["value"])
        for ij, v in zip(idx, values):
            w.writerow(list(map(int, ij)) + [repr(float(v))])


def read_coefficients(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[-1]) for r in rows])


def _report_dict(rep) -> dict:
    extra = {k: (list(v) if isinstance(v, tuple) else v) for k, v in rep.extra.items()
             if isinstance(v, (int, float, str, bool, list, tuple))}
    return {"method": rep.method, "iterations": rep.iterations, "residual": float(rep.residual),
            "converged": bool(rep.converged), "trace": [float(t) for t in rep.trace],
            "warnings": list(rep.warnings), "extra": extra}


def _content_hash(run_dir: Path, names: Sequence[str]) -> str:
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update((run_dir / name).read_bytes())
    return h.hexdigest()


def write_manifest(run_dir: Path, cfg: ExperimentConfig, artifacts: Sequence[str], extra: dict) -> dict:
    man = {
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "artifacts": sorted(artifacts),
        "content_hash": _content_hash(run_dir, artifacts),
        **extra,
    }
    (run_dir / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


# ---------------------------------------------------------------------------
# operations


def run_assemble(cfg: ExperimentConfig) -> dict:
    t0 = time.perf_counter()
    net, sys_, disc = build(cfg)
    info = {
        "geometry": net.name,
        "interior_shape": list(sys_.space_shape),
        "dofs": sys_.n,
        "mass_terms": disc.mass.n_terms,
        "stiffness_terms": disc.stiffness.n_terms,
        "mass_tt_ranks": list(sys_.tt_mass.ranks),
        "step_tt_ranks": list(sys_.tt_step.ranks),
        "seconds": round(time.perf_counter() - t0, 3),
    }
    return info


def _observation(cfg, sys_):
    u_true = true_field(sys_.space_shape, cfg.n_sources, cfg.source_amplitude, cfg.source_width)
    path = "dense" if sys_.n <= 8192 else "tt"
    obs = make_observation(sys_, u_true, cfg.sigma, cfg.seed, path=path)
    return u_true, obs


def run_forward(cfg: ExperimentConfig, out) -> dict:
    run_dir = Path(out)
    run_dir.mkdir(parents=True, exist_ok=True)
    net, sys_, disc = build(cfg)
    u_true, obs = _observation(cfg, sys_)
    pts = field_points(net, disc)
    write_vtk(run_dir / "true.vtk", pts, sys_.space_shape, u_true, "u_true")
    write_vtk(run_dir / "observation.vtk", pts, sys_.space_shape, obs.z, "z")
    write_coefficients(run_dir / "true.csv", u_true, sys_.space_shape)
    write_coefficients(run_dir / "observation.csv", obs.z, sys_.space_shape)
    arts = ["true.vtk", "observation.vtk", "true.csv", "observation.csv"]
    return write_manifest(run_dir, cfg, arts, {"command": "forward"})


def make_problem(cfg: ExperimentConfig, sys_, z) -> InverseProblem:
    return InverseProblem(sys_, z, cfg.sigma, cfg.solver, cfg.cgls_iter, cfg.cgls_tol, cfg.matvec_eps,
                          cfg.amen_eps, cfg.amen_sweeps, cfg.rmax, warm_start=cfg.warm_start,
                          amen_inner_tol=cfg.amen_inner_tol, amen_inner_maxiter=cfg.amen_inner_maxiter)


def run_ias(cfg: ExperimentConfig, problem: InverseProblem, **kw):
    m1 = HyperModel.preset(cfg.r1)
    if cfg.variant == "plain":
        return ias_plain(problem, m1, cfg.max_iter, cfg.tol, **kw)
    m2 = HyperModel.preset(cfg.r2)
    if cfg.variant == "global":
        return ias_global_hybrid(problem, m1, m2, cfg.i_s, cfg.max_iter, cfg.tol, **kw)
    return ias_local_hybrid(problem, m1, m2, cfg.bound_c, cfg.max_iter, cfg.tol,
                            cfg.threshold_exponent, **kw)


def relative_error(u, u_true) -> float:
    return float(np.linalg.norm(u - u_true) / max(np.linalg.norm(u_true), 1e-300))


def run_reconstruct(cfg: ExperimentConfig, out=None) -> dict:
    """Synthetic observation, IAS reconstruction and all artifacts in ``out``.

    On a solver failure the forward artifacts are kept and the manifest
    records the error before the exception is re-raised.
    """
    cfg.validate()
    run_dir = Path(out or cfg.output)
    run_dir.mkdir(parents=True, exist_ok=True)
    net, sys_, disc = build(cfg)
    u_true, obs = _observation(cfg, sys_)
    pts = field_points(net, disc)
    shape = sys_.space_shape
    write_vtk(run_dir / "true.vtk", pts, shape, u_true, "u_true")
    write_vtk(run_dir / "observation.vtk", pts, shape, obs.z, "z")
    write_coefficients(run_dir / "true.csv", u_true, shape)
    write_coefficients(run_dir / "observation.csv", obs.z, shape)
    arts = ["true.vtk", "observation.vtk", "true.csv", "observation.csv"]
    problem = make_problem(cfg, sys_, obs.z)
    t0 = time.perf_counter()
    try:
        st = run_ias(cfg, problem, track_objective=cfg.solver == "full-cgls")
    except SolverError as exc:
        write_manifest(run_dir, cfg, arts, {"command": "reconstruct", "status": "solver-failure",
                                            "error": str(exc)})
        raise
    wall = time.perf_counter() - t0
    write_vtk(run_dir / "reconstruction.vtk", pts, shape, st.u, "u")
    write_coefficients(run_dir / "reconstruction.csv", st.u, shape)
    st.write_csv(run_dir / "trace.csv")
    (run_dir / "reports.json").write_text(json.dumps([_report_dict(r) for r in st.reports], indent=1) + "\n")
    arts += ["reconstruction.vtk", "reconstruction.csv", "trace.csv", "reports.json"]
    summary = {
        "command": "reconstruct",
        "status": "ok",
        "iterations": st.iteration,
        "converged": bool(st.converged),
        "residual": relative_error(st.u, u_true),
        "support_match": bool(np.array_equal(support(st.u), support(u_true))),
        "final_nonzeros": st.nonzeros[-1] if st.nonzeros else 0,
        "switch_iteration": cfg.i_s if cfg.variant == "global" else None,
    }
    # wall time is kept out of the hashed artifacts so reruns stay byte-identical
    man = write_manifest(run_dir, cfg, arts, summary)
    man["wall_time"] = wall
    man["state"] = st
    return man


# ---------------------------------------------------------------------------
# benchmark


BENCH_FIELDS = ["config_hash", "variant", "r2", "solver", "grid", "N_t", "iterations", "converged",
                "residual", "final_nonzeros", "wall_time", "status"]


def expand_matrix(data: dict) -> list:
    """``{"base": {...}, "cells": [{...}, ...]}`` or ``{"base": ..., "grid": {key: [values]}}``."""
    base = dict(data.get("base", {}))
    cells = [dict(base, **c) for c in data.get("cells", [])]
    grid = data.get("grid")
    if grid:
        keys = sorted(grid)
        combos = [{}]
        for k in keys:
            combos = [dict(c, **{k: v}) for c in combos for v in grid[k]]
        cells += [dict(base, **c) for c in combos]
    if not cells:
        raise ConfigError("cells", "benchmark matrix has no cells")
    return [ExperimentConfig.from_dict(c).validate() for c in cells]


def _bench_cell(args) -> dict:
    cfg, out = args
    row = {"config_hash": cfg.hash(), "variant": cfg.variant, "r2": cfg.r2, "solver": cfg.solver,
           "grid": "x".join(str(int(n)) for n in cfg.n_basis), "N_t": cfg.N_t}
    t0 = time.perf_counter()
    try:
        man = run_reconstruct(cfg, out)
        row.update(iterations=man["iterations"], converged=man["converged"], residual=man["residual"],
                   final_nonzeros=man["final_nonzeros"], status="ok")
    except (SolverError, TtiasError, np.linalg.LinAlgError) as exc:
        row.update(iterations="", converged=False, residual="", final_nonzeros="",
                   status=f"failed: {type(exc).__name__}: {exc}")
    row["wall_time"] = round(time.perf_counter() - t0, 3)
    return row


def run_benchmark(cells: Sequence[ExperimentConfig], out, workers: Optional[int] = None) -> list:
    """Run every cell in its own directory and append one row per cell to ``summary.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or int(os.environ.get("TTIAS_THREADS", "1"))
    jobs = [(c, out / f"cell_{k:03d}_{c.hash()}") for k, c in enumerate(cells)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_bench_cell, jobs))
    else:
        rows = [_bench_cell(j) for j in jobs]
    path = out / "summary.csv"
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, BENCH_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# plot data


def emit_plots(run_dir) -> list:
    """gnuplot ``.dat`` files from a finished reconstruction directory."""
    run_dir = Path(run_dir)
    need = ["trace.csv", "reconstruction.vtk", "manifest.json"]
    missing = [n for n in need if not (run_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"missing artifacts in {run_dir}: {', '.join(missing)}")
    man = json.loads((run_dir / "manifest.json").read_text())
    i_s = man.get("switch_iteration")
    with open(run_dir / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    written = []
    with open(run_dir / "nonzeros.dat", "w") as fh:
        fh.write("# iteration nonzero_count switched\n")
        for r in rows:
            it = int(r["iteration"])
            fh.write(f"{it} {r['nonzero_count']} {int(i_s is not None and it > i_s)}\n")
    written.append("nonzeros.dat")
    with open(run_dir / "inner_iterations.dat", "w") as fh:
        fh.write("# iteration inner_iterations model_switch_count\n")
        for r in rows:
            fh.write(f"{r['iteration']} {r['inner_iterations']} {r['model_switch_count']}\n")
    written.append("inner_iterations.dat")
    P, dims, V = read_vtk(run_dir / "reconstruction.vtk")
    shape = tuple(d for d in dims if d > 1) or (1,)
    full = V.reshape(dims[:len(shape)] if len(shape) == 2 else dims)
    Pg = P.reshape(full.shape + (3,))
    if full.ndim == 3:
        mid = full.shape[2] // 2
        full, Pg = full[:, :, mid], Pg[:, :, mid]
    with open(run_dir / "heatmap.dat", "w") as fh:
        fh.write("# x y value\n")
        for i in range(full.shape[0]):
            for j in range(full.shape[1]):
                fh.write(f"{float(Pg[i, j, 0])!r} {float(Pg[i, j, 1])!r} {float(full[i, j])!r}\n")
            fh.write("\n")
    written.append("heatmap.dat")
    return written


# ---------------------------------------------------------------------------
# command line


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML (or JSON) experiment file")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "n_basis":
            p.add_argument(flag, type=int, nargs="+", default=None)
        elif f.name == "warm_start":
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif f.name in ("seed", "degree", "N_t", "n_sources", "i_s", "max_iter", "cgls_iter",
                        "amen_sweeps", "rmax", "amen_inner_maxiter"):
            p.add_argument(flag, type=int, default=None)
        elif f.name in ("geometry", "geometry_file", "variant", "solver", "output"):
            p.add_argument(flag, default=None)
        else:
            p.add_argument(flag, type=float, default=None)


def _config_from_args(args) -> ExperimentConfig:
    data = {}
    if args.config:
        raw = read_config_file(args.config)
        data.update(raw.get("experiment", raw))
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            data[f.name] = v
    return ExperimentConfig.from_dict(data).validate()


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttias", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("assemble", help="build the discretization and print operator sizes")
    _add_config_flags(a)
    f = sub.add_parser("forward", help="write the true field and the noisy observation")
    _add_config_flags(f)
    f.add_argument("--out", default=None)
    r = sub.add_parser("reconstruct", help="run IAS and write fields, traces and a manifest")
    _add_config_flags(r)
    r.add_argument("--out", default=None)
    b = sub.add_parser("benchmark", help="run a matrix of reconstructions")
    b.add_argument("--matrix", required=True, help="TOML/JSON with 'base' and 'cells' or 'grid'")
    b.add_argument("--out", required=True)
    b.add_argument("--workers", type=int, default=None)
    pl = sub.add_parser("plots", help="write gnuplot data files for a reconstruction directory")
    pl.add_argument("run_dir")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "assemble":
            print(json.dumps(run_assemble(_config_from_args(args)), indent=2))
        elif args.command == "forward":
            cfg = _config_from_args(args)
            man = run_forward(cfg, args.out or cfg.output)
            print(f"wrote {len(man['artifacts'])} artifacts to {args.out or cfg.output}")
        elif args.command == "reconstruct":
            cfg = _config_from_args(args)
            man = run_reconstruct(cfg, args.out)
            print(f"{man['iterations']} IAS iterations, relative error {man['residual']:.3e}, "
                  f"{man['final_nonzeros']} nonzeros, support match {man['support_match']}")
        elif args.command == "benchmark":
            cells = expand_matrix(read_config_file(args.matrix))
            rows = run_benchmark(cells, args.out, args.workers)
            for r in rows:
                print(", ".join(f"{k}={r[k]}" for k in ("variant", "r2", "solver", "iterations", "residual", "status")))
        elif args.command == "plots":
            for name in emit_plots(args.run_dir):
                print(Path(args.run_dir) / name)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
