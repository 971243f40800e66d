"""Brute-force reference implementations used to check the fast paths.

Nothing here imports the production modules other than :mod:`volume`; every
routine evaluates its defining sum or searches its defining grid directly.
Speed is irrelevant, so inputs are size-guarded.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .volume import as_array

__all__ = [
    "naive_apply_L",
    "naive_adjoint_L",
    "naive_conv3",
    "naive_corr3",
    "grid_prox_kl",
    "grid_conj_kl",
    "dense_materialize",
    "naive_ssim3",
    "project_kl_conj_set",
    "soft_threshold",
    "kl_scalar",
    "main",
]

MAX_NAIVE = 16 * 16 * 8


def _guard(shape, limit=MAX_NAIVE):
    if int(np.prod(shape)) > limit:
        raise ValueError(f"oracle size guard: {shape} exceeds {limit} voxels")


def naive_apply_L(l, h, u, c_norm: float = 1.0) -> np.ndarray:
    """Direct summation of the discrete light-sheet model.

    ``f[i,j,k] = 1/C sum_{i',j',w} l[i',j',w] u[i',j',k-w+cz] h[i-i'+cx, j-j'+cy, w]``
    with out-of-range indices reading as zero.
    """
    l = np.asarray(as_array(l), float)
    h = np.asarray(as_array(h), float)
    u = np.asarray(as_array(u), float)
    _guard(u.shape)
    nx, ny, nz = u.shape
    cx, cy, cz = nx // 2, ny // 2, nz // 2
    f = np.zeros(u.shape)
    ip = np.arange(nx)[:, None, None]
    jp = np.arange(ny)[None, :, None]
    w = np.arange(nz)[None, None, :]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                m = k - w + cz
                a = i - ip + cx
                b = j - jp + cy
                ok = (m >= 0) & (m < nz) & (a >= 0) & (a < nx) & (b >= 0) & (b < ny)
                ok = np.broadcast_to(ok, (nx, ny, nz))
                ii, jj, ww = np.nonzero(ok)
                f[i, j, k] = np.sum(
                    l[ii, jj, ww] * u[ii, jj, k - ww + cz] * h[i - ii + cx, j - jj + cy, ww]
                )
    return f / c_norm


def naive_adjoint_L(l, h, f, c_norm: float = 1.0) -> np.ndarray:
    """Transpose of :func:`naive_apply_L`, also by direct summation."""
    l = np.asarray(as_array(l), float)
    h = np.asarray(as_array(h), float)
    f = np.asarray(as_array(f), float)
    _guard(f.shape)
    nx, ny, nz = f.shape
    cx, cy, cz = nx // 2, ny // 2, nz // 2
    g = np.zeros(f.shape)
    for a in range(nx):
        for b in range(ny):
            for c in range(nz):
                acc = 0.0
                for k in range(nz):
                    w = k - c + cz
                    if not 0 <= w < nz:
                        continue
                    for i in range(max(0, a - cx), min(nx, a - cx + nx)):
                        hrow = h[i - a + cx]
                        jlo, jhi = max(0, b - cy), min(ny, b - cy + ny)
                        acc += l[a, b, w] * np.dot(hrow[jlo - b + cy:jhi - b + cy, w],
                                                   f[i, jlo:jhi, k])
                g[a, b, c] = acc
    return g / c_norm


def naive_conv3(kernel, x) -> np.ndarray:
    """Zero-padded 3D convolution with a centred kernel by direct summation."""
    k = np.asarray(as_array(kernel), float)
    x = np.asarray(as_array(x), float)
    _guard(x.shape, 16 ** 3)
    n = x.shape
    c = tuple(s // 2 for s in k.shape)
    out = np.zeros(n)
    for i in range(n[0]):
        for j in range(n[1]):
            for l in range(n[2]):
                acc = 0.0
                for a in range(n[0]):
                    p = i - a + c[0]
                    if not 0 <= p < k.shape[0]:
                        continue
                    for b in range(n[1]):
                        q = j - b + c[1]
                        if not 0 <= q < k.shape[1]:
                            continue
                        for d in range(n[2]):
                            r = l - d + c[2]
                            if 0 <= r < k.shape[2]:
                                acc += x[a, b, d] * k[p, q, r]
                out[i, j, l] = acc
    return out


def naive_corr3(kernel, x) -> np.ndarray:
    """Transpose of :func:`naive_conv3` (correlation), by direct summation."""
    k = np.asarray(as_array(kernel), float)
    x = np.asarray(as_array(x), float)
    _guard(x.shape, 16 ** 3)
    n = x.shape
    c = tuple(s // 2 for s in k.shape)
    out = np.zeros(n)
    for a in range(n[0]):
        for b in range(n[1]):
            for d in range(n[2]):
                acc = 0.0
                for i in range(n[0]):
                    p = i - a + c[0]
                    if not 0 <= p < k.shape[0]:
                        continue
                    for j in range(n[1]):
                        q = j - b + c[1]
                        if not 0 <= q < k.shape[1]:
                            continue
                        for l in range(n[2]):
                            r = l - d + c[2]
                            if 0 <= r < k.shape[2]:
                                acc += x[i, j, l] * k[p, q, r]
                out[a, b, d] = acc
    return out


def kl_scalar(v, u):
    """Elementwise ``u - v + v log(v/u)`` with ``0 log 0 = 0``."""
    v = np.asarray(v, float)
    u = np.asarray(u, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(v > 0, v * np.log(v / u), 0.0)
    return u - v + t


def _prox_objective(u, v, us, vs, gamma):
    return kl_scalar(v, u) + ((u - us) ** 2 + (v - vs) ** 2) / (2 * gamma)


def grid_prox_kl(u_star: float, v_star: float, gamma: float,
                 lo: float = 1e-4, hi: float = 4.0, step: float = 1e-4,
                 coarse: float = 1e-2, window: int = 8) -> tuple[float, float]:
    """Minimise the joint-KL prox objective over the grid ``lo + step * n``.

    The objective is jointly convex, so the search proceeds coarse to fine:
    an exhaustive pass at ``coarse`` spacing, then exhaustive passes on
    ``window``-cell neighbourhoods at successively finer spacing, the last
    one aligned to the target grid.
    """
    def axis(a, b, s):
        n0 = max(0, math.ceil((a - lo) / step - 1e-9))
        n1 = min(int(math.floor((hi - lo) / step + 1e-9)), math.floor((b - lo) / step + 1e-9))
        stride = max(1, int(round(s / step)))
        return lo + step * np.arange(n0, n1 + 1, stride)

    s = max(coarse, step)
    ua, va = axis(lo, hi, s), axis(lo, hi, s)
    while True:
        U, V = np.meshgrid(ua, va, indexing="ij")
        obj = _prox_objective(U, V, u_star, v_star, gamma)
        i, j = np.unravel_index(np.argmin(obj), obj.shape)
        ub, vb = float(U[i, j]), float(V[i, j])
        if s <= step * (1 + 1e-9):
            return ub, vb
        span = window * s
        s = max(s / 10, step)
        ua = axis(ub - span, ub + span, s)
        va = axis(vb - span, vb + span, s)


def _psi(v, u, us, vs):
    return u * us + v * vs - u + v - v * np.log(v / u)


def grid_conj_kl(u_star: float, v_star: float, lo: float, hi: float,
                 step: float = 1e-3, coarse: float = 1e-2, window: int = 8) -> float:
    """Supremum of ``Psi(v, u)`` over the grid on ``[lo, hi]^2``, coarse to fine.

    ``Psi`` is concave, so refining around the coarse maximiser is safe.
    The box corners are always included.
    """
    def axis(a, b, s):
        a, b = max(a, lo), min(b, hi)
        pts = np.arange(a, b + s * 0.5, s)
        return np.unique(np.clip(np.r_[pts, a, b], lo, hi))

    s = coarse
    ua = va = axis(lo, hi, s)
    best = -np.inf
    while True:
        U, V = np.meshgrid(ua, va, indexing="ij")
        vals = _psi(V, U, u_star, v_star)
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        best = max(best, float(vals[i, j]))
        if s <= step * (1 + 1e-9):
            return best
        ub, vb = float(U[i, j]), float(V[i, j])
        span = window * s
        s = max(s / 10, step)
        ua = axis(ub - span, ub + span, s)
        va = axis(vb - span, vb + span, s)


def project_kl_conj_set(a: float, b: float, tol: float = 1e-15) -> tuple[float, float]:
    """Euclidean projection of ``(a, b)`` onto ``{(p, q): p + exp(q) <= 1}``.

    This set is the domain of the conjugate of the (unconstrained) joint KL
    divergence, so the projection is the prox of that conjugate. Points
    outside are moved along the outward normal ``(1, exp(q))`` of the
    boundary; the foot ``q`` is found by bisection on ``[.., b]``.
    """
    if a + math.exp(min(b, 700.0)) <= 1.0:
        return float(a), float(b)
    # Foot (p, q) with p = 1 - e^q and (a - p, b - q) = t (1, e^q), t > 0:
    # phi(q) = (b - q) - e^q (a - 1 + e^q) = 0, decreasing in q.
    def phi(q):
        e = math.exp(q)
        return (b - q) - e * (a - 1.0 + e)

    hi = b
    lo = b - 1.0
    while phi(lo) <= 0:
        lo = b - 2 * (b - lo)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if phi(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, abs(mid)):
            break
    q = 0.5 * (lo + hi)
    return 1.0 - math.exp(q), q


def soft_threshold(x, t):
    x = np.asarray(x, float)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def dense_materialize(apply, shape, limit: int = 4096) -> np.ndarray:
    """Matrix whose columns are ``apply`` on the canonical basis volumes."""
    n = int(np.prod(shape))
    if n > limit:
        raise ValueError(f"oracle size guard: {n} exceeds {limit} voxels")
    cols = []
    e = np.zeros(shape)
    for idx in range(n):
        e.flat[idx] = 1.0
        cols.append(np.asarray(apply(e), float).ravel())
        e.flat[idx] = 0.0
    return np.stack(cols, axis=1)


def _gauss_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return w / w.sum()


def naive_ssim3(x, y, window: int = 7, sigma: float = 1.5,
                dynamic_range: float | None = None) -> float:
    """Mean local SSIM over voxels whose full window lies inside the volume."""
    x = np.asarray(as_array(x), float)
    y = np.asarray(as_array(y), float)
    if dynamic_range is None:
        dynamic_range = float(y.max() - y.min())
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    w = _gauss_window(window, sigma)
    r = window // 2
    vals = []
    for i in range(r, x.shape[0] - r):
        for j in range(r, x.shape[1] - r):
            for k in range(r, x.shape[2] - r):
                px = x[i - r:i + r + 1, j - r:j + r + 1, k - r:k + r + 1]
                py = y[i - r:i + r + 1, j - r:j + r + 1, k - r:k + r + 1]
                mx = np.sum(w * px)
                my = np.sum(w * py)
                vx = np.sum(w * px * px) - mx * mx
                vy = np.sum(w * py * py) - my * my
                cxy = np.sum(w * px * py) - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Fixture regeneration


FIXTURE_DIR = Path(__file__).resolve().parents[2] / "tests" / "fixtures"


def regen_fixtures(out_dir: Path = FIXTURE_DIR) -> dict:
    """Recompute every oracle-derived expected value and write them as JSON."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240101)
    a = rng.standard_normal((4, 4, 4))
    b = rng.standard_normal((4, 4, 4))
    dot_loop = 0.0
    for i in range(4):
        for j in range(4):
            for k in range(4):
                dot_loop += float(a[i, j, k]) * float(b[i, j, k])
    u, v = grid_prox_kl(2.0, 1.0, 0.5)
    srng = np.random.default_rng(7)
    x = srng.random((8, 8, 8))
    y = x + 0.1 * srng.standard_normal((8, 8, 8))
    fixtures = {
        "dot_4x4x4": {"seed": 20240101, "value": dot_loop},
        "kl_v12_u21": float(np.sum(kl_scalar(np.array([1.0, 2.0]), np.array([2.0, 1.0])))),
        "grid_prox_kl_2_1_0.5": {"u": u, "v": v, "step": 1e-4},
        "grid_conj_kl_0.5_0.2": {"value": grid_conj_kl(0.5, 0.2, 0.01, 10.0), "step": 1e-3},
        "prox_l2_v0_f1": (1.0 * 0.0 + 1.0 * 1.0) / (1.0 + 1.0),
        "ssim_8x8x8": {"seed": 7, "noise": 0.1, "value": naive_ssim3(y, x)},
    }
    path = out_dir / "derived.json"
    with open(path, "w") as fh:
        json.dump(fixtures, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return fixtures


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lsdeconv-oracle")
    sub = parser.add_subparsers(dest="cmd", required=True)
    regen = sub.add_parser("regen-fixtures", help="recompute derived test fixtures")
    regen.add_argument("--out", type=Path, default=FIXTURE_DIR)
    args = parser.parse_args(argv)
    if args.cmd == "regen-fixtures":
        fx = regen_fixtures(args.out)
        print(f"wrote {len(fx)} fixtures to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
