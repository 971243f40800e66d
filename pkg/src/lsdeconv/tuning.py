"""Discrepancy-principle choice of the TV weight and noise-level bounds.

Fidelity values are measured in the units of the objective: the Gaussian
part is ``|f - v|^2 / (2 sigma_g^2)`` (expected value ``N/2`` for pure read
noise) and the Poisson part is ``D_KL(v, A u)`` (expected value ``N/2`` by the
large-count expansion of the Poisson deviance).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np

from .fidelity import kl_div
from .solver import (
    EPS_U,
    MethodVariant,
    Problem,
    ReconResult,
    SolverParams,
    pdhg_run,
)
from .volume import as_array

__all__ = [
    "NoiseBounds",
    "SweepPoint",
    "DiscrepancyResult",
    "poisson_kl_bound",
    "poisson_deviance",
    "monte_carlo_deviance",
    "eval_fidelity_at",
    "alpha_grid",
    "sweep_alphas",
    "discrepancy_search",
]

log = logging.getLogger(__name__)


def poisson_kl_bound(data) -> float:
    """``gamma = N / 2``: each voxel's expected KL is about one half."""
    return 0.5 * int(np.asarray(as_array(data)).size)


def poisson_deviance(y, beta) -> np.ndarray:
    """``F(y) = 2 (y log(y/beta) + beta - y)`` with ``0 log 0 = 0``."""
    y = np.asarray(y, dtype=np.float64)
    out = 2.0 * (beta - y)
    pos = y > 0
    out[pos] += 2.0 * y[pos] * np.log(y[pos] / beta)
    return out


def monte_carlo_deviance(beta: float, draws: int = 100_000, seed: int = 0):
    """Sample mean and standard error of ``F(Y)`` for ``Y ~ Pois(beta)``."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    F = poisson_deviance(rng.poisson(beta, size=draws), beta)
    return float(F.mean()), float(F.std(ddof=1) / np.sqrt(draws))


@dataclass(frozen=True)
class NoiseBounds:
    """Noise levels behind the discrepancy test.

    ``gauss_bound`` and ``gamma`` bound the Gaussian and KL fidelities in
    objective units; ``delta`` is their sum for the combined test.
    """

    sigma_g: float
    gamma: float
    gauss_bound: float
    mode: Literal["combined", "per-fidelity"] = "per-fidelity"
    tau_disc: float = 1.01

    def __post_init__(self):
        if min(self.sigma_g, self.gamma, self.gauss_bound) < 0:
            raise ValueError("noise bounds must be non-negative")
        if not self.tau_disc > 1:
            raise ValueError("tau_disc must exceed 1")
        if self.mode not in ("combined", "per-fidelity"):
            raise ValueError(f"unknown discrepancy mode {self.mode!r}")

    @property
    def delta(self) -> float:
        return self.gauss_bound + self.gamma

    @classmethod
    def for_data(cls, f, sigma_g: float, variant="LS-IC", mode="per-fidelity",
                 tau_disc: float = 1.01) -> "NoiseBounds":
        """Bounds for measured data ``f``.

        IC variants split the noise: ``N/2`` for the Gaussian part and
        ``gamma = N/2`` for the Poisson part. L2-only variants put all of it
        in the Gaussian term, whose expected value is then
        ``(sum max(f, 0) + N sigma_g^2) / (2 sigma_g^2)`` since Poisson noise
        adds its mean to the variance.
        """
        f = np.asarray(as_array(f), dtype=np.float64)
        n = f.size
        if MethodVariant.parse(variant).infimal:
            return cls(sigma_g, poisson_kl_bound(f), 0.5 * n, mode, tau_disc)
        s2 = max(sigma_g * sigma_g, 1e-300)
        gauss = (float(np.maximum(f, 0).sum()) + n * sigma_g * sigma_g) / (2 * s2)
        return cls(sigma_g, 0.0, gauss, mode, tau_disc)

    def accepts(self, fid: dict) -> bool:
        t = self.tau_disc
        if self.mode == "combined":
            return fid["combined"] <= t * self.delta
        return fid["gauss"] <= t * self.gauss_bound and fid["kl"] <= t * self.gamma


def eval_fidelity_at(u, v, f, variant, op, sigma_g: float) -> dict:
    """Gaussian and KL fidelity of a reconstruction, in objective units.

    IC variants: ``|f - v|^2/(2 sigma_g^2)`` and ``D_KL(v, A u)``. L2-only
    variants: ``|f - A u|^2/(2 sigma_g^2)`` and zero.
    """
    variant = MethodVariant.parse(variant)
    f = np.asarray(as_array(f), dtype=np.float64)
    Au = op.apply(np.asarray(as_array(u), dtype=np.float64))
    s2 = 2 * sigma_g * sigma_g
    if variant.infimal:
        v = np.asarray(as_array(v), dtype=np.float64)
        gauss = float(np.sum((f - v) ** 2)) / s2
        kl = kl_div(v, np.maximum(Au, EPS_U))
    else:
        gauss = float(np.sum((f - Au) ** 2)) / s2
        kl = 0.0
    return {"gauss": gauss, "kl": kl, "combined": gauss + kl}


def alpha_grid(lo: float, hi: float, per_decade: int = 8) -> np.ndarray:
    """Log-spaced ascending grid from ``lo`` to ``hi`` inclusive."""
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    n = max(2, int(round(per_decade * np.log10(hi / lo))) + 1)
    return np.logspace(np.log10(lo), np.log10(hi), n)


@dataclass
class SweepPoint:
    alpha: float
    result: ReconResult
    fidelity: dict
    accepted: Optional[bool] = None

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "fidelity": self.fidelity,
            "accepted": self.accepted,
            "iters": self.result.iterations,
            "gap": self.result.gap,
        }


def sweep_alphas(problem: Problem, params: SolverParams, alphas: Sequence[float],
                 warm_start: bool = True,
                 stop: Optional[Callable[[SweepPoint], bool]] = None) -> list[SweepPoint]:
    """Solve at every ``alpha``, largest first, warm-starting each solve from
    the previous one. ``stop`` may end the sweep early."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size < 1 or np.any(alphas <= 0):
        raise ValueError("alphas must be a non-empty list of positive values")
    points: list[SweepPoint] = []
    state = None
    for a in sorted(alphas, reverse=True):
        p = SolverParams(**{**params.__dict__, "alpha": float(a)})
        res = pdhg_run(problem.with_alpha(a), p, init=state)
        if warm_start:
            state = res.state
        fid = eval_fidelity_at(res.u, res.v, problem.f, problem.variant, problem.op,
                               problem.sigma_g)
        pt = SweepPoint(float(a), res, fid)
        points.append(pt)
        log.info("alpha=%.4g gauss=%.6g kl=%.6g iters=%d gap=%.3g", a, fid["gauss"],
                 fid["kl"], res.iterations, res.gap)
        if stop is not None and stop(pt):
            break
    return points


@dataclass
class DiscrepancyResult:
    alpha: float
    result: ReconResult
    satisfied: bool
    points: list[SweepPoint] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "selected_alpha": self.alpha,
            "satisfied": self.satisfied,
            "sweep": [p.to_json() for p in self.points],
        }


def discrepancy_search(problem: Problem, params: SolverParams, bounds: NoiseBounds,
                       alphas: Sequence[float], full_sweep: bool = False,
                       warm_start: bool = True) -> DiscrepancyResult:
    """Largest ``alpha`` on the grid whose reconstruction passes the bound.

    The grid is swept from large to small ``alpha``, so the first accepted
    point is the answer; ``full_sweep`` keeps going to record the whole path.
    If no point passes, the smallest ``alpha`` is returned with
    ``satisfied=False``.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.size < 2 or np.any(np.diff(alphas) <= 0):
        raise ValueError("alpha grid must be ascending with at least two points")

    def judge(pt: SweepPoint) -> bool:
        pt.accepted = bounds.accepts(pt.fidelity)
        return pt.accepted and not full_sweep

    points = sweep_alphas(problem, params, alphas, warm_start=warm_start, stop=judge)
    chosen = next((p for p in points if p.accepted), None)
    if chosen is None:
        log.warning("no alpha on the grid satisfies the discrepancy bound")
        last = points[-1]
        return DiscrepancyResult(last.alpha, last.result, False, points)
    return DiscrepancyResult(chosen.alpha, chosen.result, True, points)
