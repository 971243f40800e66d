"""Command-line entry point.

    lsdeconv {psf|simulate|deconvolve|compare|tune} --config run.json
             [--threads N] [--out DIR] [-v]

Every numeric setting lives in the JSON config; unknown keys are rejected
before any computation. Outputs go to ``--out`` or to a fresh timestamped
directory ``runs/<command>-<time>``, together with the resolved config.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 solver error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import forward
from .metrics import evaluate
from .optics import (
    FitOptions,
    OpticalConfig,
    PsfFitResult,
    PsfPair,
    ZernikeCoeffs,
    bead_residual,
    detection_psf,
    fit_psf,
    lightsheet_profile,
)
from .phantom import NoiseSpec, make_phantom, simulate
from .solver import (
    MethodVariant,
    SolverError,
    SolverParams,
    build_operator,
    build_problem,
    pdhg_run,
)
from .tuning import NoiseBounds, alpha_grid, discrepancy_search
from .volume import Volume, VolumeFormatError, load_volume, save_mip_png, save_volume

__all__ = ["main", "RunConfig", "ConfigError", "load_config", "TABLE_COLUMNS",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_IO", "EXIT_SOLVER"]

log = logging.getLogger("lsdeconv")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SOLVER = 0, 2, 3, 4

TABLE_COLUMNS = ("variant", "alpha", "l2", "ssim", "psnr", "iters", "gap",
                 "converged", "runtime_s", "selected")

COMMANDS = ("psf", "simulate", "deconvolve", "compare", "tune")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _build(cls, obj, section: str):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from exc


@dataclass(frozen=True)
class PhantomConfig:
    kind: str = "steps"
    seed: int = 0
    n_levels: int = 4
    grid: tuple[int, int, int] = (5, 5, 5)
    bead_radius: float = 1.0
    n_seeds: int = 12

    def __post_init__(self):
        if self.kind not in ("beads", "steps", "cells"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))

    def make(self, dims) -> Volume:
        if self.kind == "beads":
            return make_phantom("beads", dims, grid=self.grid, bead_radius=self.bead_radius)
        if self.kind == "steps":
            return make_phantom("steps", dims, n_levels=self.n_levels)
        return make_phantom("cells", dims, seed=self.seed, n_seeds=self.n_seeds)


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 0.03
    sigma: float = 1e-4
    rho: float = 0.9
    max_iters: int = 10000
    gap_tol: float = 1e-6
    gap_every: int = 10
    seed: int = 0
    isotropic: bool = False

    def params(self, alpha: Optional[float] = None) -> SolverParams:
        d = dataclasses.asdict(self)
        if alpha is not None:
            d["alpha"] = float(alpha)
        return SolverParams(**d)

    def __post_init__(self):
        self.params()


@dataclass(frozen=True)
class TuneConfig:
    alpha_min: float = 1e-3
    alpha_max: float = 1.0
    per_decade: int = 8
    mode: str = "per-fidelity"
    tau_disc: float = 1.01
    full_sweep: bool = False

    def __post_init__(self):
        if not 0 < self.alpha_min < self.alpha_max:
            raise ValueError("need 0 < alpha_min < alpha_max")
        if self.mode not in ("per-fidelity", "combined"):
            raise ValueError(f"unknown discrepancy mode {self.mode!r}")
        if not self.tau_disc > 1:
            raise ValueError("tau_disc must exceed 1")

    def grid(self) -> np.ndarray:
        return alpha_grid(self.alpha_min, self.alpha_max, self.per_decade)


@dataclass(frozen=True)
class BeadConfig:
    path: str = ""
    radius_um: float = 0.5
    max_evals: int = 400
    restarts: int = 1

    def __post_init__(self):
        if not self.path:
            raise ValueError("bead.path is required")
        if not self.radius_um > 0:
            raise ValueError("bead.radius_um must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration shared by all commands."""

    optics: OpticalConfig = field(default_factory=OpticalConfig)
    zernike: object = "zero"
    sigma_blur: float = 0.0
    psf_h: Optional[str] = None
    psf_l: Optional[str] = None
    boundary: str = "zero"
    bead: Optional[BeadConfig] = None
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    input: Optional[str] = None
    truth: Optional[str] = None
    truth_scale: float = 1.0
    variant: str = "LS-IC"
    variants: tuple[str, ...] = ("LS-IC", "PSF-L2")
    alphas: Optional[tuple[float, ...]] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)

    def coeffs(self) -> ZernikeCoeffs:
        if self.zernike == "zero":
            return ZernikeCoeffs.zero()
        if self.zernike == "table":
            return ZernikeCoeffs.table()
        return ZernikeCoeffs(tuple(self.zernike))

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["optics"] = self.optics.to_json()
        return d


_SECTIONS = {
    "optics": OpticalConfig,
    "bead": BeadConfig,
    "phantom": PhantomConfig,
    "noise": NoiseSpec,
    "solver": SolverConfig,
    "tune": TuneConfig,
}


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {}
    for key, value in obj.items():
        if key in _SECTIONS:
            if key == "bead" and value is None:
                kw[key] = None
                continue
            kw[key] = _build(_SECTIONS[key], value, key)
        else:
            kw[key] = value
    try:
        cfg = RunConfig(**kw)
        for tag in (cfg.variant, *cfg.variants):
            MethodVariant.parse(tag)
        cfg.coeffs()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.boundary not in ("zero", "circular"):
        raise ConfigError(f"unknown boundary {cfg.boundary!r}")
    if (cfg.psf_h is None) != (cfg.psf_l is None):
        raise ConfigError("psf_h and psf_l must be given together")
    if cfg.alphas is not None:
        if not cfg.alphas or any(not float(a) > 0 for a in cfg.alphas):
            raise ConfigError("alphas must be a non-empty list of positive numbers")
        cfg = dataclasses.replace(cfg, alphas=tuple(float(a) for a in cfg.alphas))
    if not cfg.sigma_blur >= 0:
        raise ConfigError("sigma_blur must be non-negative")
    return dataclasses.replace(cfg, variants=tuple(cfg.variants))


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj)


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _save_with_mips(out: Path, name: str, data, pitch) -> None:
    v = data if isinstance(data, Volume) else Volume(np.asarray(data), pitch)
    save_volume(v, out / name)
    for ax in ("x", "y", "z"):
        save_mip_png(v, out / f"{name}_mip_{ax}.png", ax)


def _psfs(cfg: RunConfig) -> PsfPair:
    if cfg.psf_h is not None:
        h, l = load_volume(cfg.psf_h), load_volume(cfg.psf_l)
        if h.dims != l.dims:
            raise ConfigError(f"PSF files have different dims: {h.dims} vs {l.dims}")
        return PsfPair(h, l)
    h = detection_psf(cfg.optics, cfg.coeffs(), cfg.sigma_blur)
    return PsfPair(h, lightsheet_profile(cfg.optics))


def _data(cfg: RunConfig, psfs: PsfPair):
    """Measured data, ground truth in data units (or None), and the pitch."""
    if cfg.input is not None:
        f = load_volume(cfg.input)
        truth = None
        if cfg.truth is not None:
            truth = cfg.truth_scale * load_volume(cfg.truth).data.astype(np.float64)
        return f.data.astype(np.float64), truth, f.pitch
    u0 = cfg.phantom.make(psfs.h.dims)
    op = build_operator("LS-IC", psfs, boundary=cfg.boundary)
    sim = simulate(Volume(u0.data, psfs.h.pitch), op, cfg.noise)
    return sim.f.data, sim.truth, psfs.h.pitch


# ---------------------------------------------------------------------------
# commands


def cmd_psf(cfg: RunConfig, out: Path) -> dict:
    psfs = _psfs(cfg)
    _save_with_mips(out, "h", psfs.h, psfs.h.pitch)
    _save_with_mips(out, "l", psfs.l, psfs.l.pitch)
    summary = {"h_sum": float(psfs.h.data.sum()), "dims": list(psfs.h.dims)}
    if cfg.bead is not None:
        bead = load_volume(cfg.bead.path)
        init = PsfFitResult(ZernikeCoeffs.zero(), 1.0)
        init_resid = bead_residual(bead, cfg.bead.radius_um, cfg.optics,
                                   init.coeffs.as_array(), init.sigma)
        res = fit_psf(bead, cfg.bead.radius_um, cfg.optics, init,
                      FitOptions(max_evals=cfg.bead.max_evals, restarts=cfg.bead.restarts))
        fit = res.to_json()
        fit["init_residual"] = float(init_resid)
        _write_json(out / "psf_fit.json", fit)
        summary["fit_residual"] = res.residual
        summary["init_residual"] = float(init_resid)
    return summary


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    psfs = _psfs(cfg)
    u0 = cfg.phantom.make(psfs.h.dims)
    op = build_operator("LS-IC", psfs, boundary=cfg.boundary)
    sim = simulate(Volume(u0.data, psfs.h.pitch), op, cfg.noise)
    _save_with_mips(out, "u0", sim.u0, sim.u0.pitch)
    _save_with_mips(out, "f_clean", sim.f_clean, sim.u0.pitch)
    _save_with_mips(out, "f", sim.f, sim.u0.pitch)
    meta = {"scale": sim.scale, "seed": sim.seed, "c_norm": op.c_norm,
            "peak": cfg.noise.peak, "sigma_g": cfg.noise.sigma_g}
    _write_json(out / "simulation.json", meta)
    return meta


def _problem(cfg: RunConfig, variant, psfs, f, alpha):
    op = build_operator(variant, psfs, boundary=cfg.boundary)
    return build_problem(variant, psfs, f, alpha, cfg.noise.sigma_g, op=op,
                         isotropic=cfg.solver.isotropic)


def _write_recon(out: Path, res, pitch, prefix: str = "") -> None:
    _save_with_mips(out, f"{prefix}u", res.u, pitch)
    if res.v is not None:
        _save_with_mips(out, f"{prefix}v", res.v, pitch)
    _write_json(out / f"{prefix}gap_history.json",
                [{"iter": i, "normalized_gap": g} for i, g in res.gap_history])
    with open(out / f"{prefix}run_log.jsonl", "w") as fh:
        for entry in res.log:
            fh.write(json.dumps(entry) + "\n")


def _result_json(res) -> dict:
    return {"iterations": res.iterations, "gap": res.gap, "converged": res.converged,
            "fidelity": res.fidelity, "tau": res.tau, "sigma": res.sigma}


def cmd_deconvolve(cfg: RunConfig, out: Path) -> dict:
    if cfg.input is None:
        raise ConfigError("deconvolve needs an 'input' volume")
    psfs = _psfs(cfg)
    f = load_volume(cfg.input)
    variant = MethodVariant.parse(cfg.variant)
    problem = _problem(cfg, variant, psfs, f.data.astype(np.float64), cfg.solver.alpha)
    res = pdhg_run(problem, cfg.solver.params())
    _write_recon(out, res, f.pitch)
    summary = {"variant": variant.value, "alpha": cfg.solver.alpha, **_result_json(res)}
    _write_json(out / "result.json", summary)
    return summary


def _row(variant, alpha, res, truth, runtime, selected) -> dict:
    m = evaluate(res.u, truth) if truth is not None else None
    return {
        "variant": variant,
        "alpha": alpha,
        "l2": m.l2_normalized if m else float("nan"),
        "ssim": m.ssim if m else float("nan"),
        "psnr": m.psnr if m else float("nan"),
        "iters": res.iterations,
        "gap": res.gap,
        "converged": res.converged,
        "runtime_s": runtime,
        "selected": selected,
    }


def _write_table(out: Path, rows: list[dict]) -> None:
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in TABLE_COLUMNS})
    _write_json(out / "results.json", {"columns": list(TABLE_COLUMNS), "rows": rows})


def cmd_compare(cfg: RunConfig, out: Path) -> dict:
    psfs = _psfs(cfg)
    f, truth, _ = _data(cfg, psfs)
    if truth is None:
        raise ConfigError("compare needs ground truth ('truth' file or a phantom)")
    rows = []
    for tag in cfg.variants:
        variant = MethodVariant.parse(tag)
        if cfg.alphas is not None:
            problem = _problem(cfg, variant, psfs, f, cfg.alphas[0])
            for a in cfg.alphas:
                t0 = time.perf_counter()
                res = pdhg_run(problem.with_alpha(a), cfg.solver.params(a))
                rows.append(_row(variant.value, a, res, truth, time.perf_counter() - t0, False))
            continue
        problem = _problem(cfg, variant, psfs, f, cfg.tune.alpha_max)
        bounds = NoiseBounds.for_data(f, cfg.noise.sigma_g, variant, cfg.tune.mode,
                                      cfg.tune.tau_disc)
        t0 = time.perf_counter()
        found = discrepancy_search(problem, cfg.solver.params(cfg.tune.alpha_max), bounds,
                                   cfg.tune.grid(), full_sweep=True)
        runtime = (time.perf_counter() - t0) / max(1, len(found.points))
        for p in found.points:
            rows.append(_row(variant.value, p.alpha, p.result, truth, runtime,
                             found.satisfied and p.alpha == found.alpha))
    _write_table(out, rows)
    return {"rows": len(rows)}


def cmd_tune(cfg: RunConfig, out: Path) -> dict:
    psfs = _psfs(cfg)
    f, truth, pitch = _data(cfg, psfs)
    variant = MethodVariant.parse(cfg.variant)
    problem = _problem(cfg, variant, psfs, f, cfg.tune.alpha_max)
    bounds = NoiseBounds.for_data(f, cfg.noise.sigma_g, variant, cfg.tune.mode,
                                  cfg.tune.tau_disc)
    found = discrepancy_search(problem, cfg.solver.params(cfg.tune.alpha_max), bounds,
                               cfg.tune.grid(), full_sweep=cfg.tune.full_sweep)
    report = found.report()
    report["bounds"] = dataclasses.asdict(bounds)
    if truth is not None:
        for entry, p in zip(report["sweep"], found.points):
            entry["metrics"] = evaluate(p.result.u, truth).to_json()
    _write_json(out / "sweep.json", report)
    _write_recon(out, found.result, pitch)
    return {"alpha": found.alpha, "satisfied": found.satisfied}


_DISPATCH = {
    "psf": cmd_psf,
    "simulate": cmd_simulate,
    "deconvolve": cmd_deconvolve,
    "compare": cmd_compare,
    "tune": cmd_tune,
}


def _run_dir(command: str, out: Optional[str]) -> Path:
    if out is not None:
        p = Path(out)
        p.mkdir(parents=True, exist_ok=True)
        return p
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path("runs") / f"{command}-{stamp}"
    p, n = base, 1
    while p.exists():
        p = base.with_name(f"{base.name}-{n}")
        n += 1
    p.mkdir(parents=True)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lsdeconv",
                                 description="Light-sheet deconvolution pipeline.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    forward.set_workers(args.threads)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"lsdeconv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"lsdeconv: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        out = _run_dir(args.command, args.out)
        _write_json(out / "config.json", cfg.to_json())
        summary = _DISPATCH[args.command](cfg, out)
    except ConfigError as exc:
        print(f"lsdeconv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, VolumeFormatError) as exc:
        print(f"lsdeconv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverError as exc:
        print(f"lsdeconv: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"lsdeconv: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"command": args.command, "out": str(out), **summary}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
