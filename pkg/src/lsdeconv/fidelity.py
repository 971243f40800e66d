"""Variational building blocks: KL divergence, its joint prox and conjugate,
the L2 prox, forward-difference gradients, TV dual clamps and the box.

The KL divergence is the unnormalised Csiszar form

    D_KL(v, u) = sum_j  u_j - v_j + v_j log(v_j / u_j)

whose first argument is the (auxiliary) denoised image and whose second is
the blurred estimate. Every function here is elementwise or a plain stencil,
so all work is vectorised over the volume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .volume import Volume, as_array

__all__ = [
    "FidelitySpec",
    "DualVars",
    "ProxInfo",
    "kl_div",
    "kl_div_map",
    "newton_g",
    "prox_kl_joint",
    "prox_kl_conj",
    "kl_stationarity_residual",
    "conj_kl_joint",
    "conj_kl_joint_map",
    "kl_psi",
    "prox_l2",
    "prox_l2_conj",
    "grad3",
    "div3",
    "tv_norm",
    "prox_conj_l1",
    "project_box",
    "conj_box",
]

log = logging.getLogger(__name__)

# Newton start offset, residual tolerance and iteration budgets.
EPS0 = 1e-6
NEWTON_TOL = 1e-12
NEWTON_STEPS = 50
BISECTION_STEPS = 200


@dataclass(frozen=True)
class FidelitySpec:
    """Data term of the problem: which fidelity, noise level, data and box."""

    kind: Literal["L2Only", "InfimalConvolution"]
    sigma_g: float
    f: np.ndarray
    box: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("L2Only", "InfimalConvolution"):
            raise ValueError(f"unknown fidelity kind {self.kind!r}")
        if not self.sigma_g > 0:
            raise ValueError("sigma_g must be positive")
        lo, hi = (float(b) for b in self.box)
        if not 0 <= lo < hi:
            raise ValueError(f"box must satisfy 0 <= l1 < l2, got {self.box}")
        object.__setattr__(self, "box", (lo, hi))
        object.__setattr__(self, "f", np.asarray(as_array(self.f), dtype=np.float64))


@dataclass
class DualVars:
    """Dual iterates: ``y1`` for the Gaussian term, ``y2`` for the KL pair
    ``(Lu-slot, v-slot)`` and ``y3`` for the three TV components."""

    y1: np.ndarray
    y2: Optional[tuple[np.ndarray, np.ndarray]]
    y3: np.ndarray

    @classmethod
    def zeros(cls, shape, with_kl: bool = True) -> "DualVars":
        y2 = (np.zeros(shape), np.zeros(shape)) if with_kl else None
        return cls(np.zeros(shape), y2, np.zeros((3,) + tuple(shape)))


@dataclass(frozen=True)
class ProxInfo:
    newton_steps: int
    bisection_steps: int
    max_residual: float
    boundary_voxels: int


def _arr(x) -> np.ndarray:
    return np.asarray(as_array(x), dtype=np.float64)


def kl_div_map(v, u) -> np.ndarray:
    """Per-voxel KL summands, with ``0 log 0 = 0`` and ``+inf`` where
    ``v > 0`` meets ``u = 0``."""
    v = _arr(v)
    u = _arr(u)
    if v.shape != u.shape:
        raise ValueError(f"dimension mismatch: {v.shape} vs {u.shape}")
    if (v < 0).any() or (u < 0).any():
        raise ValueError("kl_div requires non-negative inputs")
    out = u - v
    pos = v > 0
    with np.errstate(divide="ignore"):
        out[pos] += v[pos] * (np.log(v[pos]) - np.log(u[pos]))
    return out


def kl_div(v, u) -> float:
    """Csiszar divergence ``sum u - v + v log(v/u)``."""
    return float(kl_div_map(v, u).sum())


def newton_g(v, u_star, v_star, gamma):
    """Scalar stationarity function whose root gives the prox ``v``.

    Returns ``(g, g')``. ``g`` is strictly increasing on ``v > 0``.
    """
    x = (v - v_star) / gamma
    with np.errstate(over="ignore", invalid="ignore"):
        ex = np.exp(x)
        g = -gamma * np.expm1(-x) + v * ex - u_star
        dg = np.exp(-x) + (1.0 + v / gamma) * ex
    return g, dg


def prox_kl_joint(u_star, v_star, gamma: float, return_info: bool = False):
    """Joint prox of ``gamma * D_KL(v, u)`` at ``(u*, v*)``.

    Minimises ``u - v + v log(v/u) + ((u-u*)^2 + (v-v*)^2) / (2 gamma)``
    per voxel. The optimal ``v`` is the root of :func:`newton_g`, found by
    Newton steps kept inside a sign-change bracket (bisection whenever a
    step leaves it); then ``u = v exp((v - v*)/gamma)``.

    When ``g(0+) >= 0`` the objective has no interior stationary point and
    the minimiser is the corner ``(0, 0)``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    us = _arr(u_star)
    vs = _arr(v_star)
    if us.shape != vs.shape:
        raise ValueError(f"dimension mismatch: {us.shape} vs {vs.shape}")
    shape = us.shape
    us = us.ravel()
    vs = vs.ravel()

    # g(0+) = -gamma expm1(v*/gamma) - u*.
    with np.errstate(over="ignore"):
        g0 = -gamma * np.expm1(vs / gamma) - us
    corner = g0 >= 0
    idx = np.flatnonzero(~corner)
    u_out = np.zeros_like(us)
    v_out = np.zeros_like(vs)

    a, b = us[idx], vs[idx]
    lo = np.zeros_like(a)
    # For v >= max(v*, 0) we have g(v) >= v - u*, so this end is positive.
    hi = np.maximum(np.maximum(a, b), 0.0) + 1.0
    v = np.clip(np.maximum(b, gamma * EPS0), lo, hi)
    v = np.where(v >= hi, 0.5 * (lo + hi), v)
    tol = NEWTON_TOL * np.maximum(1.0, np.abs(a))
    active = np.arange(a.size)
    n_newton = n_bisect = 0
    for _ in range(NEWTON_STEPS + BISECTION_STEPS):
        if active.size == 0:
            break
        va = v[active]
        g, dg = newton_g(va, a[active], b[active], gamma)
        done = np.abs(g) <= tol[active]
        la, ha = lo[active], hi[active]
        la = np.where(g < 0, va, la)
        ha = np.where(g > 0, va, ha)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = va - g / dg
        inside = np.isfinite(step) & (step > la) & (step < ha)
        if n_newton >= NEWTON_STEPS:
            inside[:] = False
        new = np.where(inside, step, 0.5 * (la + ha))
        n_newton += int(inside.any())
        n_bisect += int((~inside).any())
        # Stop once the bracket has collapsed to adjacent floats.
        collapsed = ha - la <= 4 * np.spacing(np.maximum(ha, 1e-300))
        lo[active], hi[active] = la, ha
        v[active] = np.where(done, va, new)
        active = active[~(done | collapsed)]

    with np.errstate(over="ignore"):
        u = v * np.exp((v - b) / gamma)
    u_out[idx] = u
    v_out[idx] = v
    u_out = u_out.reshape(shape)
    v_out = v_out.reshape(shape)
    if not return_info:
        return u_out, v_out
    if idx.size:
        g, _ = newton_g(v, a, b, gamma)
        resid = float(np.max(np.abs(g) / np.maximum(1.0, np.abs(a))))
    else:
        resid = 0.0
    info = ProxInfo(n_newton, n_bisect, resid, int(corner.sum()))
    if active.size:
        log.warning("prox_kl_joint: %d voxels stopped before tolerance", active.size)
    return u_out, v_out, info


def kl_stationarity_residual(u, v, u_star, v_star, gamma: float) -> np.ndarray:
    """Largest absolute residual of the two first-order conditions.

    ``1 - v/u + (u - u*)/gamma = 0`` and ``log(v/u) + (v - v*)/gamma = 0``.
    """
    u, v, us, vs = (_arr(x) for x in (u, v, u_star, v_star))
    r1 = 1.0 - v / u + (u - us) / gamma
    r2 = np.log(v) - np.log(u) + (v - vs) / gamma
    return np.maximum(np.abs(r1), np.abs(r2))


def prox_kl_conj(y_u, y_v, sigma: float):
    """``prox_{sigma D*}`` of the KL pair by the Moreau identity."""
    y_u = _arr(y_u)
    y_v = _arr(y_v)
    pu, pv = prox_kl_joint(y_u / sigma, y_v / sigma, 1.0 / sigma)
    return y_u - sigma * pu, y_v - sigma * pv


def kl_psi(v, u, v_star, u_star):
    """Conjugate objective ``u u* + v v* - (u - v + v log(v/u))``."""
    return u * u_star + v * v_star - u + v - v * (np.log(v) - np.log(u))


def conj_kl_joint_map(u_star, v_star, box: Sequence[float]) -> np.ndarray:
    """Per-voxel supremum of :func:`kl_psi` over ``[l1, l2]^2``.

    ``Psi`` is concave and positively homogeneous, so an interior stationary
    point can only occur on a whole ray (when ``exp(v*) = 1 - u*``) and the
    supremum is then also attained on the boundary. It is therefore enough to
    check the four edges, each with the other coordinate at its clipped
    one-dimensional optimum:

    * ``u`` at a bound: ``v = clip(u exp(v*))``;
    * ``v`` at a bound: ``u = clip(v / (1 - u*))`` if ``u* < 1``, else ``l2``.
    """
    l1, l2 = (float(b) for b in box)
    if not 0 < l1 < l2:
        raise ValueError(f"conjugate box needs 0 < l1 < l2, got {box}")
    us = _arr(u_star)
    vs = _arr(v_star)
    best = np.full(us.shape, -np.inf)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for ub in (l1, l2):
            vv = np.clip(ub * np.exp(np.minimum(vs, 700.0)), l1, l2)
            best = np.maximum(best, kl_psi(vv, ub, vs, us))
        for vb in (l1, l2):
            uu = np.where(us < 1.0, vb / (1.0 - us), l2)
            uu = np.clip(np.where(np.isfinite(uu) & (uu > 0), uu, l2), l1, l2)
            best = np.maximum(best, kl_psi(vb, uu, vs, us))
    return best


def conj_kl_joint(u_star, v_star, box: Sequence[float]) -> float:
    """Box-restricted convex conjugate of the KL divergence, summed."""
    return float(conj_kl_joint_map(u_star, v_star, box).sum())


def prox_l2(v_star, f, sigma_g: float, tau: float) -> np.ndarray:
    """Minimiser of ``|x - v*|^2/(2 tau) + |x - f|^2/(2 sigma_g^2)``."""
    if not (sigma_g > 0 and tau > 0):
        raise ValueError("sigma_g and tau must be positive")
    s2 = sigma_g * sigma_g
    return (s2 * _arr(v_star) + tau * _arr(f)) / (s2 + tau)


def prox_l2_conj(y, f, sigma_g: float, sigma: float) -> np.ndarray:
    """``prox_{sigma H*}`` for ``H = |. - f|^2/(2 sigma_g^2)`` via Moreau."""
    y = _arr(y)
    return y - sigma * prox_l2(y / sigma, f, sigma_g, 1.0 / sigma)


def grad3(u) -> np.ndarray:
    """Forward differences along x, y, z with a replicate boundary.

    Returns an array of shape ``(3,) + u.shape``; the last plane of each
    component is zero.
    """
    u = _arr(u)
    if u.ndim != 3:
        raise ValueError(f"grad3 expects a 3D volume, got shape {u.shape}")
    p = np.zeros((3,) + u.shape)
    p[0, :-1] = u[1:] - u[:-1]
    p[1, :, :-1] = u[:, 1:] - u[:, :-1]
    p[2, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return p


def div3(p) -> np.ndarray:
    """Discrete divergence, the negative adjoint of :func:`grad3`."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 4 or p.shape[0] != 3:
        raise ValueError(f"div3 expects shape (3, Nx, Ny, Nz), got {p.shape}")
    d = np.zeros(p.shape[1:])
    for ax in range(3):
        q = np.moveaxis(p[ax], ax, 0)
        dq = np.moveaxis(d, ax, 0)
        dq[:-1] += q[:-1]
        dq[1:] -= q[:-1]
    return d


def tv_norm(u, isotropic: bool = False) -> float:
    g = grad3(u)
    if isotropic:
        return float(np.sqrt((g * g).sum(axis=0)).sum())
    return float(np.abs(g).sum())


def prox_conj_l1(y, alpha: float, isotropic: bool = False) -> np.ndarray:
    """Projection onto the dual ball of ``alpha |.|_1``.

    Anisotropic: clamp every component to ``[-alpha, alpha]``. Isotropic:
    rescale each voxel's 3-vector to length at most ``alpha``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    y = np.asarray(y, dtype=np.float64)
    if not isotropic:
        return np.clip(y, -alpha, alpha)
    mag = np.sqrt((y * y).sum(axis=0))
    return y / np.maximum(1.0, mag / alpha)


def project_box(w, l1: float, l2: float):
    """Clamp every block of ``w`` (a volume or a tuple of volumes)."""
    if not l1 < l2:
        raise ValueError(f"box must satisfy l1 < l2, got ({l1}, {l2})")
    if isinstance(w, (tuple, list)):
        return tuple(np.clip(_arr(x), l1, l2) for x in w)
    return np.clip(_arr(w), l1, l2)


def conj_box(y, l1: float, l2: float) -> float:
    """Support function of the box: ``sum max(l1 y, l2 y)``."""
    if not l1 < l2:
        raise ValueError(f"box must satisfy l1 < l2, got ({l1}, {l2})")
    blocks = y if isinstance(y, (tuple, list)) else (y,)
    return float(sum(np.maximum(l1 * _arr(b), l2 * _arr(b)).sum() for b in blocks))
