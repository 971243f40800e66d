"""Light-sheet forward operator, plain 3D convolution, and operator norms.

The light-sheet operator implements, for every output plane ``k``,

    f[:, :, k] = (1/C) * sum_w  conv2( l[:, :, w] * u[:, :, k - w + cz],  h[:, :, w] )

where ``cz = Nz // 2`` is the focal plane of both the sheet and the detection
PSF, lateral convolutions are centred on ``(Nx // 2, Ny // 2)`` and samples of
``u`` outside the volume read as zero. With a constant sheet this reduces to
a 3D convolution with ``h``.

Per-plane products are transformed with real FFTs and spectra of the PSF
planes are cached on the operator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Protocol

import numpy as np
from scipy import fft as sfft

from .volume import as_array

__all__ = [
    "LinearOperator",
    "LightsheetOperator",
    "ConvolutionOperator",
    "IdentityOperator",
    "ScalingOperator",
    "OpNormEstimate",
    "estimate_op_norm",
    "apply_L",
    "adjoint_L",
    "apply_H",
    "adjoint_H",
    "set_workers",
]

log = logging.getLogger(__name__)

Boundary = Literal["zero", "circular"]

_WORKERS = 1


def set_workers(n: int) -> None:
    """Cap the number of threads used by FFTs."""
    global _WORKERS
    _WORKERS = max(1, int(n))


class LinearOperator(Protocol):
    shape: tuple[int, int, int]

    def apply(self, u: np.ndarray) -> np.ndarray: ...

    def adjoint(self, f: np.ndarray) -> np.ndarray: ...


def _check(x, shape) -> np.ndarray:
    arr = np.asarray(as_array(x), dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"dimension mismatch: expected {tuple(shape)}, got {arr.shape}")
    return arr


def _pad_len(n: int, boundary: Boundary) -> int:
    return n if boundary == "circular" else sfft.next_fast_len(2 * n - 1, real=True)


def _origin_kernel(h: np.ndarray, pad: tuple[int, ...]) -> np.ndarray:
    """Embed a centred kernel in a zero array of size ``pad``, centre at index 0."""
    out = np.zeros(pad + h.shape[len(pad):])
    sl = tuple(slice(0, n) for n in h.shape[:len(pad)])
    out[sl] = h
    shift = tuple(-(n // 2) for n in h.shape[:len(pad)])
    return np.roll(out, shift, axis=tuple(range(len(pad))))


@dataclass(frozen=True)
class IdentityOperator:
    shape: tuple[int, int, int]

    def apply(self, u):
        return _check(u, self.shape).copy()

    def adjoint(self, f):
        return _check(f, self.shape).copy()


@dataclass(frozen=True)
class ScalingOperator:
    shape: tuple[int, int, int]
    factor: float

    def apply(self, u):
        return self.factor * _check(u, self.shape)

    def adjoint(self, f):
        return self.factor * _check(f, self.shape)


class ConvolutionOperator:
    """3D linear convolution with a centred kernel (zero or circular boundary)."""

    def __init__(self, kernel, boundary: Boundary = "zero", check_sum: bool = True):
        k = np.asarray(as_array(kernel), dtype=np.float64)
        if k.ndim != 3:
            raise ValueError("kernel must be 3D")
        if check_sum and not np.isclose(k.sum(), 1.0, rtol=1e-6, atol=0):
            raise ValueError(f"kernel must sum to 1, sums to {k.sum()}")
        if boundary not in ("zero", "circular"):
            raise ValueError(f"unknown boundary policy {boundary!r}")
        self.kernel = k
        self.boundary = boundary
        self.shape = k.shape
        self._pad = tuple(_pad_len(n, boundary) for n in k.shape)
        self._khat = sfft.rfftn(_origin_kernel(k, self._pad), s=self._pad)

    def _conv(self, x: np.ndarray, spectrum: np.ndarray) -> np.ndarray:
        xh = sfft.rfftn(x, s=self._pad, workers=_WORKERS)
        y = sfft.irfftn(xh * spectrum, s=self._pad, workers=_WORKERS)
        nx, ny, nz = self.shape
        return y[:nx, :ny, :nz].copy()

    def apply(self, u) -> np.ndarray:
        return self._conv(_check(u, self.shape), self._khat)

    def adjoint(self, f) -> np.ndarray:
        return self._conv(_check(f, self.shape), np.conj(self._khat))


class LightsheetOperator:
    """Spatially varying light-sheet operator ``L`` and its exact adjoint.

    ``l`` and ``h`` must be non-negative arrays of identical shape; ``h`` is
    renormalised to unit sum. When ``c_norm`` is ``None`` it is set to the
    power-iteration estimate of the unnormalised operator norm, so the
    resulting operator has norm one.

    Sheets that are constant along y (the usual case) take a faster path:
    the y-transform commutes with multiplication by ``l(x, z)``, so only the
    x-transforms are repeated per (sheet plane, sample plane) pair.
    """

    def __init__(self, l, h, c_norm: Optional[float] = None,
                 boundary: Boundary = "zero", chunk: int = 1, seed: int = 0):
        l = np.asarray(as_array(l), dtype=np.float64)
        h = np.asarray(as_array(h), dtype=np.float64)
        if l.shape != h.shape or l.ndim != 3:
            raise ValueError(f"l and h must be 3D with equal shape, got {l.shape}, {h.shape}")
        if l.min() < 0 or h.min() < 0:
            raise ValueError("l and h must be non-negative")
        if h.sum() <= 0:
            raise ValueError("h must have positive mass")
        if boundary not in ("zero", "circular"):
            raise ValueError(f"unknown boundary policy {boundary!r}")
        self.l = l
        self.h = h / h.sum()
        self.shape = l.shape
        self.boundary = boundary
        self.chunk = max(1, int(chunk))
        nx, ny, nz = self.shape
        self._cz = nz // 2
        self._pad = (_pad_len(nx, boundary), _pad_len(ny, boundary))
        self.y_invariant = bool(np.all(l == l[:, :1, :]))
        # Internal layout is (z, x, y).
        self._lz = np.ascontiguousarray(np.transpose(l, (2, 0, 1)))
        self._lx = np.ascontiguousarray(self._lz[:, :, 0])
        hk = _origin_kernel(self.h, self._pad)
        self._hhat = sfft.rfft2(np.transpose(hk, (2, 0, 1)), axes=(1, 2))
        self._hhat_conj = np.conj(self._hhat)
        self.c_norm = 1.0
        self.self_normalised = c_norm is None
        if c_norm is None:
            c_norm = estimate_op_norm(self, seed=seed).value
        if not c_norm > 0:
            raise ValueError("normalisation constant must be positive")
        self.c_norm = float(c_norm)

    @property
    def pad(self) -> tuple[int, int]:
        return self._pad

    def _routes(self, w: int):
        """Slices (sample planes, output planes) linked through sheet plane ``w``.

        Sample plane ``m`` feeds output plane ``k = m + w - cz``.
        """
        nz = self.shape[2]
        if self.boundary == "circular":
            m = np.arange(nz)
            return m, (m + w - self._cz) % nz
        m_lo = max(0, self._cz - w)
        m_hi = min(nz, nz + self._cz - w)
        k_lo = m_lo + w - self._cz
        return slice(m_lo, m_hi), slice(k_lo, k_lo + m_hi - m_lo)

    def _chunks(self):
        nz = self.shape[2]
        for w0 in range(0, nz, self.chunk):
            yield np.arange(w0, min(nz, w0 + self.chunk))

    def apply(self, u) -> np.ndarray:
        u = _check(u, self.shape)
        nx, ny, nz = self.shape
        px, py = self._pad
        uz = np.transpose(u, (2, 0, 1))
        out_hat = np.zeros((nz, px, py // 2 + 1), dtype=np.complex128)
        if self.y_invariant:
            uy = sfft.rfft(uz, n=py, axis=2, workers=_WORKERS)  # (nz, nx, q)
        for ws in self._chunks():
            if self.y_invariant:
                prod = self._lx[ws][:, None, :, None] * uy[None]
                spec = sfft.fft(prod, n=px, axis=2, overwrite_x=True, workers=_WORKERS)
            else:
                prod = self._lz[ws][:, None] * uz[None]
                spec = sfft.rfft2(prod, s=self._pad, axes=(2, 3), workers=_WORKERS)
            spec *= self._hhat[ws][:, None]
            for i, w in enumerate(ws):
                m, k = self._routes(w)
                out_hat[k] += spec[i, m]
        f = sfft.irfft2(out_hat, s=self._pad, axes=(1, 2), workers=_WORKERS)
        f = np.transpose(f[:, :nx, :ny], (1, 2, 0))
        return np.ascontiguousarray(f) / self.c_norm

    def adjoint(self, f) -> np.ndarray:
        f = _check(f, self.shape)
        nx, ny, nz = self.shape
        px, py = self._pad
        fz = np.transpose(f, (2, 0, 1))
        fhat = sfft.rfft2(fz, s=self._pad, axes=(1, 2), workers=_WORKERS)  # (nz, px, q)
        if self.y_invariant:
            acc = np.zeros((nz, nx, py // 2 + 1), dtype=np.complex128)
        else:
            acc = np.zeros((nz, nx, ny))
        for ws in self._chunks():
            spec = fhat[None] * self._hhat_conj[ws][:, None]  # (W, nz, px, q)
            if self.y_invariant:
                corr = sfft.ifft(spec, axis=2, overwrite_x=True, workers=_WORKERS)[:, :, :nx]
                corr *= self._lx[ws][:, None, :, None]
            else:
                corr = sfft.irfft2(spec, s=self._pad, axes=(2, 3),
                                   workers=_WORKERS)[:, :, :nx, :ny]
                corr *= self._lz[ws][:, None]
            for i, w in enumerate(ws):
                # Data plane k came from sample plane m through sheet plane w.
                m, k = self._routes(w)
                acc[m] += corr[i, k]
        if self.y_invariant:
            acc = sfft.irfft(acc, n=py, axis=2, workers=_WORKERS)[:, :, :ny]
        out = np.transpose(acc, (1, 2, 0))
        return np.ascontiguousarray(out) / self.c_norm

    __call__ = apply


def apply_L(op: LightsheetOperator, u) -> np.ndarray:
    return op.apply(u)


def adjoint_L(op: LightsheetOperator, f) -> np.ndarray:
    return op.adjoint(f)


def apply_H(op: ConvolutionOperator, v) -> np.ndarray:
    return op.apply(v)


def adjoint_H(op: ConvolutionOperator, f) -> np.ndarray:
    return op.adjoint(f)


@dataclass(frozen=True)
class OpNormEstimate:
    value: float
    iterations: int
    converged: bool

    def __float__(self) -> float:
        return self.value


def estimate_op_norm(linop, trials: int = 500, tol: float = 1e-7,
                     seed: int = 0) -> OpNormEstimate:
    """Largest singular value of ``linop`` by power iteration on ``A* A``.

    Stops when successive estimates differ by less than ``tol`` relative;
    otherwise returns the last estimate with ``converged=False``.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(linop.shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for it in range(1, trials + 1):
        y = linop.adjoint(linop.apply(x))
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return OpNormEstimate(0.0, it, True)
        x = y / lam
        new = np.sqrt(lam)
        if abs(new - est) <= tol * new:
            return OpNormEstimate(float(new), it, True)
        est = new
    log.warning("operator norm estimate did not converge after %d iterations", trials)
    return OpNormEstimate(float(est), trials, False)
