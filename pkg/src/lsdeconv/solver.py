"""Condat-type primal-dual hybrid gradient for TV-regularised deconvolution.

The objective is written as ``G(w) + sum_i H_i(L_i w)``. For the infimal
convolution variants ``w = (u, v)`` and

    G   = indicator of the box [l1, l2] on (u, v)
    H_1 = |. - f|^2 / (2 sigma_g^2)         L_1 w = v
    H_2 = D_KL(v, A u)                       L_2 w = (A u, v)
    H_3 = alpha |.|_1                        L_3 w = grad u

with ``A`` the light-sheet operator ``L`` or the plain convolution ``H``.
The L2-only variants keep ``w = u`` and use ``H_1`` on ``A u`` plus TV.

Each iteration needs one forward and one adjoint application of ``A``: the
images ``A w_k`` and ``A* y_k`` are updated by linearity from the fresh
``A w~`` and ``A* y~`` that the gap also uses.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import median_filter

from .fidelity import (
    conj_box,
    conj_kl_joint,
    div3,
    grad3,
    kl_div,
    prox_conj_l1,
    prox_kl_conj,
    prox_l2_conj,
)
from .forward import ConvolutionOperator, LightsheetOperator, estimate_op_norm
from .volume import as_array

__all__ = [
    "MethodVariant",
    "SolverParams",
    "Problem",
    "SolverState",
    "ReconResult",
    "SolverError",
    "StackedOperator",
    "KLBlockOperator",
    "build_problem",
    "build_operator",
    "default_box",
    "grad_norm_sq",
    "operator_norm",
    "initial_state",
    "primal_dual_gap",
    "gap_terms",
    "pdhg_run",
]

log = logging.getLogger(__name__)

# Lower clamp on the blurred estimate inside KL evaluations.
EPS_U = 1e-12
# Recompute the linearity-maintained images from scratch this often.
RESYNC_EVERY = 100


class SolverError(RuntimeError):
    """Non-finite iterate or violated step-size condition."""


class MethodVariant(str, enum.Enum):
    LS_IC = "LS-IC"
    LS_L2 = "LS-L2"
    PSF_IC = "PSF-IC"
    PSF_L2 = "PSF-L2"

    @property
    def lightsheet(self) -> bool:
        return self.value.startswith("LS")

    @property
    def infimal(self) -> bool:
        return self.value.endswith("IC")

    @property
    def n_terms(self) -> int:
        return 3 if self.infimal else 2

    @classmethod
    def parse(cls, tag) -> "MethodVariant":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag))
        except ValueError:
            raise ValueError(f"unknown method variant {tag!r}") from None


@dataclass(frozen=True)
class SolverParams:
    """Step sizes and stopping rule. ``tau`` is derived when left as None."""

    alpha: float
    sigma: float = 1e-4
    rho: float = 0.9
    tau: Optional[float] = None
    max_iters: int = 10000
    gap_tol: float = 1e-6
    gap_every: int = 10
    seed: int = 0
    isotropic: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.rho < 2:
            raise ValueError("rho must lie in (0, 2)")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_iters < 1 or self.gap_every < 1:
            raise ValueError("max_iters and gap_every must be positive")


class StackedOperator:
    """``u -> (A u, grad u)``; its squared norm bounds the primal step."""

    def __init__(self, op):
        self.op = op
        self.shape = op.shape

    def apply(self, u):
        return np.concatenate([self.op.apply(u)[None], grad3(u)])

    def adjoint(self, p):
        return self.op.adjoint(p[0]) - div3(p[1:])


class KLBlockOperator:
    """``(u, v) -> (A u, v)`` acting on arrays of shape ``(2,) + dims``."""

    def __init__(self, op):
        self.op = op
        self.shape = (2,) + tuple(op.shape)

    def apply(self, w):
        w = np.asarray(w, dtype=np.float64)
        return np.stack([self.op.apply(w[0]), w[1]])

    def adjoint(self, y):
        y = np.asarray(y, dtype=np.float64)
        return np.stack([self.op.adjoint(y[0]), y[1]])


@dataclass
class Problem:
    """Everything the iteration needs besides step sizes."""

    variant: MethodVariant
    op: object
    f: np.ndarray
    sigma_g: float
    alpha: float
    box: tuple[float, float]
    op_norm: float
    kl_box: tuple[float, float]
    isotropic: bool = False

    @property
    def shape(self):
        return self.f.shape

    @property
    def size(self) -> int:
        return int(self.f.size)

    @property
    def gap_scale(self) -> float:
        m = float(self.f.max())
        return self.size * (m if m > 0 else 1.0)

    def with_alpha(self, alpha: float) -> "Problem":
        return replace(self, alpha=float(alpha))


def grad_norm_sq(shape) -> float:
    """Exact ``|grad|^2`` for forward differences with a replicate boundary.

    The 1D Neumann difference Laplacian on ``n`` points has eigenvalues
    ``4 sin^2(pi k / (2n))``, and the 3D operator is their Kronecker sum.
    """
    return float(sum(4 * np.sin(np.pi * (n - 1) / (2 * n)) ** 2 for n in shape))


def operator_norm(op) -> float:
    """Norm of ``A``: 1 for a self-normalised light-sheet operator (up to the
    power-iteration tolerance of its constant), otherwise an estimate."""
    if isinstance(op, LightsheetOperator) and getattr(op, "self_normalised", False):
        return 1.0
    return estimate_op_norm(op, tol=1e-9).value


def build_operator(variant, psfs, boundary: str = "zero", c_norm: Optional[float] = None):
    """Light-sheet operator for LS variants, unit-mass convolution for PSF ones."""
    variant = MethodVariant.parse(variant)
    h = np.asarray(as_array(psfs.h), dtype=np.float64)
    l = np.asarray(as_array(psfs.l), dtype=np.float64)
    if h.shape != l.shape:
        raise ValueError(f"inconsistent PSF dims: h {h.shape}, l {l.shape}")
    if variant.lightsheet:
        return LightsheetOperator(l, h, c_norm=c_norm, boundary=boundary)
    return ConvolutionOperator(h / h.sum(), boundary=boundary)


def default_box(op, f, factor: float = 4.0) -> tuple[float, float]:
    """Box ``[0, B]`` wide enough for any plausible reconstruction.

    ``B = factor * max f * max(1, 1 / max(A 1))`` covers both ``v ~ f`` and
    ``u ~ f / (local response of A)``.
    """
    fmax = max(float(np.max(f)), 1.0)
    resp = float(op.apply(np.ones(op.shape)).max())
    return 0.0, factor * fmax * max(1.0, 1.0 / resp)


def build_problem(variant, psfs, data, alpha: float, sigma_g: float = 10.0,
                  box: Optional[tuple[float, float]] = None, op=None,
                  boundary: str = "zero", isotropic: bool = False) -> Problem:
    """Wire operator, fidelity and box for one of the four methods.

    ``op`` may be passed to reuse an operator across several problems;
    otherwise it is built from ``psfs``.
    """
    variant = MethodVariant.parse(variant)
    f = np.asarray(as_array(data), dtype=np.float64)
    if op is None:
        op = build_operator(variant, psfs, boundary=boundary)
    if tuple(op.shape) != f.shape:
        raise ValueError(f"operator dims {op.shape} do not match data {f.shape}")
    if not sigma_g > 0:
        raise ValueError("sigma_g must be positive")
    if box is None:
        box = default_box(op, f)
    l1, l2 = float(box[0]), float(box[1])
    if not 0 <= l1 < l2:
        raise ValueError(f"box must satisfy 0 <= l1 < l2, got {box}")
    norm_u = operator_norm(op) ** 2 + grad_norm_sq(f.shape)
    norm = max(norm_u, 2.0) if variant.infimal else norm_u
    resp = float(op.apply(np.ones(op.shape)).max())
    # A u ranges over [0, max(A 1) l2] on the box; the KL conjugate is
    # restricted to a box containing every reachable (A u, v).
    kl_box = (max(l1, EPS_U), max(1.0, resp) * l2)
    return Problem(variant, op, f, float(sigma_g), float(alpha), (l1, l2),
                   float(norm), kl_box, isotropic)


@dataclass
class SolverState:
    """Primal ``u`` (and ``v``), duals ``y1``, ``y2 = (y2a, y2b)``, ``y3``."""

    u: np.ndarray
    v: Optional[np.ndarray]
    y1: np.ndarray
    y2: Optional[tuple[np.ndarray, np.ndarray]]
    y3: np.ndarray
    iteration: int = 0

    def copy(self) -> "SolverState":
        y2 = None if self.y2 is None else (self.y2[0].copy(), self.y2[1].copy())
        v = None if self.v is None else self.v.copy()
        return SolverState(self.u.copy(), v, self.y1.copy(), y2, self.y3.copy(),
                           self.iteration)


@dataclass
class ReconResult:
    u: np.ndarray
    v: Optional[np.ndarray]
    iterations: int
    gap: float
    converged: bool
    gap_history: list[tuple[int, float]]
    fidelity: dict
    state: SolverState
    log: list[dict] = field(default_factory=list)
    tau: float = 0.0
    sigma: float = 0.0


def initial_state(problem: Problem) -> SolverState:
    """Median-filtered data for ``u``, clamped data for ``v``, zero duals."""
    l1, l2 = problem.box
    f = problem.f
    u = np.clip(median_filter(f, size=3, mode="nearest"), l1, l2)
    shape = f.shape
    y3 = np.zeros((3,) + shape)
    if problem.variant.infimal:
        return SolverState(u, np.clip(f, l1, l2), np.zeros(shape),
                           (np.zeros(shape), np.zeros(shape)), y3)
    return SolverState(u, None, np.zeros(shape), None, y3)


def gap_terms(problem: Problem, u, v, y1, y2, y3, Au, Asy) -> dict:
    """All terms of the primal-dual gap at a feasible primal point.

    ``Au = A u``; ``Asy`` is ``A* y2a`` (IC variants) or ``A* y1`` (L2).
    The TV-conjugate indicator is checked with a ``1e-9 alpha`` tolerance.
    """
    l1, l2 = problem.box
    f, s2, alpha = problem.f, problem.sigma_g ** 2, problem.alpha
    lim = alpha * (1 + 1e-9)
    if problem.isotropic:
        h3_star = 0.0 if np.sqrt((y3 * y3).sum(axis=0)).max() <= lim else np.inf
    else:
        h3_star = 0.0 if np.abs(y3).max() <= lim else np.inf
    h1_star = float(np.vdot(y1, f)) + 0.5 * s2 * float(np.vdot(y1, y1))
    tv = alpha * _tv(u, problem.isotropic)
    if problem.variant.infimal:
        h1 = float(np.sum((v - f) ** 2)) / (2 * s2)
        h2 = kl_div(v, np.maximum(Au, EPS_U))
        zu = -(Asy - div3(y3))
        zv = -(y1 + y2[1])
        g_star = conj_box((zu, zv), l1, l2)
        h2_star = conj_kl_joint(y2[0], y2[1], problem.kl_box)
    else:
        h1 = float(np.sum((Au - f) ** 2)) / (2 * s2)
        h2 = h2_star = 0.0
        g_star = conj_box(-(Asy - div3(y3)), l1, l2)
    primal = h1 + h2 + tv
    dual = g_star + h1_star + h2_star + h3_star
    return {
        "H1": h1, "H2": h2, "H3": tv,
        "G*": g_star, "H1*": h1_star, "H2*": h2_star, "H3*": h3_star,
        "primal": primal, "dual": dual, "gap": primal + dual,
    }


def _tv(u, isotropic):
    g = grad3(u)
    if isotropic:
        return float(np.sqrt((g * g).sum(axis=0)).sum())
    return float(np.abs(g).sum())


def primal_dual_gap(state: SolverState, problem: Problem) -> float:
    """Normalised gap ``D / (N max f)`` recomputed from scratch at ``state``."""
    Au = problem.op.apply(state.u)
    ya = state.y2[0] if problem.variant.infimal else state.y1
    Asy = problem.op.adjoint(ya)
    t = gap_terms(problem, state.u, state.v, state.y1, state.y2, state.y3, Au, Asy)
    return t["gap"] / problem.gap_scale


def _check_finite(**arrays):
    for name, a in arrays.items():
        if a is not None and not np.all(np.isfinite(a)):
            raise SolverError(f"non-finite values in {name}")


def pdhg_run(problem: Problem, params: SolverParams,
             init: Optional[SolverState] = None, callback=None) -> ReconResult:
    """Run the relaxed primal-dual iteration until the normalised gap is
    below ``params.gap_tol`` or ``params.max_iters`` is reached.

    The gap is evaluated every ``params.gap_every`` iterations (and at the
    last one) at the feasible pre-relaxation point ``(w~, y~)``, which is
    also what is returned.
    """
    if params.alpha != problem.alpha:
        problem = problem.with_alpha(params.alpha)
    if params.isotropic != problem.isotropic:
        problem = replace(problem, isotropic=params.isotropic)
    sigma, rho, alpha = params.sigma, params.rho, params.alpha
    tau = params.tau if params.tau is not None else 1.0 / (sigma * problem.op_norm)
    if sigma * tau * problem.op_norm > 1 + 1e-6:
        raise SolverError(
            f"step sizes violate sigma*tau*|sum L*L| <= 1 ({sigma * tau * problem.op_norm:.6g})")
    op, f = problem.op, problem.f
    l1, l2 = problem.box
    sg = problem.sigma_g
    ic = problem.variant.infimal
    iso = problem.isotropic

    st = (init.copy() if init is not None else initial_state(problem))
    u, v, y1, y3 = st.u, st.v, st.y1, st.y3
    ya, yb = (st.y2 if ic else (y1, None))
    Au = op.apply(u)
    Asy = op.adjoint(ya)

    history: list[tuple[int, float]] = []
    runlog: list[dict] = []
    t0 = time.perf_counter()
    gap = np.inf
    converged = False
    it = 0
    for it in range(1, params.max_iters + 1):
        # 1. primal prox (box projection)
        div_y3 = div3(y3)
        ut = np.clip(u - tau * (Asy - div_y3), l1, l2)
        if ic:
            vt = np.clip(v - tau * (y1 + yb), l1, l2)
        Aut = op.apply(ut)
        # 3. dual proxes at the extrapolated point 2 w~ - w
        Abar = 2.0 * Aut - Au
        y3t = prox_conj_l1(y3 + sigma * grad3(2.0 * ut - u), alpha, iso)
        if ic:
            vbar = 2.0 * vt - v
            y1t = prox_l2_conj(y1 + sigma * vbar, f, sg, sigma)
            yat, ybt = prox_kl_conj(ya + sigma * Abar, yb + sigma * vbar, sigma)
        else:
            y1t = prox_l2_conj(y1 + sigma * Abar, f, sg, sigma)
            yat = y1t
        Asyt = op.adjoint(yat)

        evaluate = it % params.gap_every == 0 or it == params.max_iters
        if evaluate:
            terms = gap_terms(problem, ut, vt if ic else None, y1t,
                              (yat, ybt) if ic else None, y3t, Aut, Asyt)
            gap = terms["gap"] / problem.gap_scale
            if not np.isfinite(terms["primal"]):
                _check_finite(u=ut, v=vt if ic else None, Au=Aut)
            _check_finite(y1=y1t, y2a=yat if ic else None, y2b=ybt if ic else None)
            history.append((it, float(gap)))
            entry = {
                "iter": it,
                "normalized_gap": float(gap),
                "fidelity_values": {"H1": terms["H1"], "H2": terms["H2"], "H3": terms["H3"]},
                "wall_ms": 1e3 * (time.perf_counter() - t0),
            }
            runlog.append(entry)
            if callback is not None:
                callback(entry)
            if gap <= params.gap_tol:
                converged = True
                break

        # 2 and 4. relaxation
        u = rho * ut + (1 - rho) * u
        y3 = rho * y3t + (1 - rho) * y3
        y1 = rho * y1t + (1 - rho) * y1
        if ic:
            v = rho * vt + (1 - rho) * v
            ya = rho * yat + (1 - rho) * ya
            yb = rho * ybt + (1 - rho) * yb
        else:
            ya = y1
        if it % RESYNC_EVERY == 0:
            Au = op.apply(u)
            Asy = op.adjoint(ya)
        else:
            Au = rho * Aut + (1 - rho) * Au
            Asy = rho * Asyt + (1 - rho) * Asy

    final = SolverState(ut, vt if ic else None, y1t, (yat, ybt) if ic else None,
                        y3t, (init.iteration if init is not None else 0) + it)
    if ic:
        fid = {"gauss": float(np.sum((vt - f) ** 2)) / (2 * sg * sg),
               "kl": kl_div(vt, np.maximum(Aut, EPS_U))}
    else:
        fid = {"gauss": float(np.sum((Aut - f) ** 2)) / (2 * sg * sg), "kl": 0.0}
    fid["combined"] = fid["gauss"] + fid["kl"]
    return ReconResult(ut, vt if ic else None, it, float(gap), converged, history,
                       fid, final, runlog, float(tau), float(sigma))
