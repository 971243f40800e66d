"""Detection PSF and light-sheet profile synthesis, and bead-based PSF fitting.

Both PSFs come from the same scalar defocus model: the squared modulus of the
2D inverse Fourier transform of a pupil multiplied by the propagation phase
``exp(2 i pi d sqrt((n/lambda)^2 - kx^2 - ky^2))``. Frequencies are sampled on
fftfreq grids ``k = index / (N * pitch)``.

Zernike arguments are normalised so the pupil rim sits at ``rho = 1``, i.e.
``rho = |k| * lambda / NA``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage, optimize, signal

from .volume import Volume, as_array

__all__ = [
    "OpticalConfig",
    "ZernikeCoeffs",
    "PsfFitResult",
    "PsfPair",
    "TABLE_COEFFS",
    "zernike_eval",
    "pupil",
    "pupil_grid",
    "defocus_psf",
    "detection_psf",
    "lightsheet_profile",
    "sphere_indicator",
    "bead_model",
    "bead_residual",
    "fit_psf",
]

log = logging.getLogger(__name__)

# Aberration coefficients (waves) fitted to bead data for the reference
# microscope, ordered Z1..Z15.
TABLE_COEFFS = (
    -0.7763, -0.0460, -2.3608, -1.3001, 0.2024,
    -0.3999, 0.0348, -1.2112, -0.1521, -0.0466,
    -0.0930, 0.0427, -0.0117, -0.0581, -0.0633,
)


@dataclass(frozen=True)
class OpticalConfig:
    """Microscope parameters; lengths in micrometres."""

    n: float = 1.35
    na_h: float = 1.0
    na_l: float = 0.25
    lambda_h: float = 0.525
    lambda_l: float = 0.488
    px_x: float = 0.325
    px_y: float = 0.325
    step_z: float = 1.0
    dims: tuple[int, int, int] = (32, 32, 16)
    # Lateral offset (in x pixels) of the sheet focus from the grid centre.
    sheet_focus_offset_px: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        for na in (self.na_h, self.na_l):
            if not 0 < na <= self.n:
                raise ValueError(f"numerical aperture {na} must lie in (0, n={self.n}]")
        if min(self.lambda_h, self.lambda_l) <= 0:
            raise ValueError("wavelengths must be positive")
        if min(self.px_x, self.px_y, self.step_z) <= 0:
            raise ValueError("pitches must be positive")

    @property
    def pitch(self) -> tuple[float, float, float]:
        return (self.px_x, self.px_y, self.step_z)

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "OpticalConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown optics keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class ZernikeCoeffs:
    c: tuple[float, ...] = (0.0,) * 15

    def __post_init__(self):
        c = tuple(float(x) for x in self.c)
        if len(c) != 15:
            raise ValueError(f"expected 15 Zernike coefficients, got {len(c)}")
        if any(not -3.0 <= x <= 3.0 for x in c):
            raise ValueError("Zernike coefficients must lie in [-3, 3]")
        object.__setattr__(self, "c", c)

    @classmethod
    def zero(cls) -> "ZernikeCoeffs":
        return cls()

    @classmethod
    def table(cls) -> "ZernikeCoeffs":
        return cls(TABLE_COEFFS)

    def as_array(self) -> np.ndarray:
        return np.array(self.c)


@dataclass(frozen=True)
class PsfFitResult:
    coeffs: ZernikeCoeffs
    sigma: float
    scale: float = 1.0
    shift: float = 0.0
    residual: float = float("nan")
    converged: bool = True
    n_evals: int = 0

    def to_json(self) -> dict:
        return {
            "coeffs": list(self.coeffs.c),
            "sigma": self.sigma,
            "scale": self.scale,
            "shift": self.shift,
            "residual": self.residual,
            "converged": self.converged,
            "n_evals": self.n_evals,
        }


@dataclass(frozen=True)
class PsfPair:
    """Detection PSF ``h`` and light-sheet profile ``l`` on a common grid."""

    h: Volume
    l: Volume

    def __post_init__(self):
        if self.h.dims != self.l.dims:
            raise ValueError(f"PSF dims differ: h {self.h.dims} vs l {self.l.dims}")


def zernike_eval(j: int, rho, theta):
    """Zernike polynomial ``Z_j`` (1 <= j <= 15) in polar coordinates."""
    if not 1 <= j <= 15:
        raise ValueError(f"Zernike index must be in 1..15, got {j}")
    r = np.asarray(rho, dtype=np.float64)
    t = np.asarray(theta, dtype=np.float64)
    r2 = r * r
    if j == 1:
        out = r * np.cos(t)
    elif j == 2:
        out = r * np.sin(t)
    elif j == 3:
        out = 2 * r2 - 1
    elif j == 4:
        out = r2 * np.cos(2 * t)
    elif j == 5:
        out = r2 * np.sin(2 * t)
    elif j == 6:
        out = (3 * r2 - 2) * r * np.cos(t)
    elif j == 7:
        out = (3 * r2 - 2) * r * np.sin(t)
    elif j == 8:
        out = 6 * r2 * r2 - 6 * r2 + 1
    elif j == 9:
        out = r2 * r * np.cos(3 * t)
    elif j == 10:
        out = r2 * r * np.sin(3 * t)
    elif j == 11:
        out = (4 * r2 - 3) * r2 * np.cos(2 * t)
    elif j == 12:
        out = (4 * r2 - 3) * r2 * np.sin(2 * t)
    elif j == 13:
        out = (10 * r2 * r2 - 12 * r2 + 3) * r * np.cos(t)
    elif j == 14:
        out = (10 * r2 * r2 - 12 * r2 + 3) * r * np.sin(t)
    else:
        out = 20 * r2**3 - 30 * r2 * r2 + 12 * r2 - 1
    return out if out.ndim else float(out)


def _coeff_array(coeffs) -> np.ndarray:
    if coeffs is None:
        return np.zeros(15)
    if isinstance(coeffs, ZernikeCoeffs):
        return coeffs.as_array()
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (15,):
        raise ValueError(f"expected 15 Zernike coefficients, got shape {c.shape}")
    return c


def pupil(kx, ky, phase_coeffs=None, na: float = 1.0, lam: float = 0.525):
    """Pupil value at spatial frequencies ``(kx, ky)`` (1/um).

    Zero outside the disc of radius ``na / lam``; inside, unit modulus with
    phase ``2 pi sum_j c_j Z_j``.
    """
    kx = np.asarray(kx, dtype=np.float64)
    ky = np.asarray(ky, dtype=np.float64)
    cutoff = na / lam
    k = np.hypot(kx, ky)
    inside = k <= cutoff
    c = _coeff_array(phase_coeffs)
    phase = np.zeros(np.broadcast(kx, ky).shape)
    if np.any(c != 0):
        rho = np.where(inside, k / cutoff, 0.0)
        theta = np.arctan2(ky, kx)
        for j in range(1, 16):
            if c[j - 1] != 0:
                phase = phase + c[j - 1] * zernike_eval(j, rho, theta)
    out = np.where(inside, np.exp(2j * np.pi * phase), 0.0 + 0.0j)
    return out if out.ndim else complex(out)


def _freqs(n: int, d: float, drop_nyquist: bool) -> np.ndarray:
    k = sfft.fftfreq(n, d=d)
    if drop_nyquist and n % 2 == 0:
        # The -N/2 bin has no +N/2 partner; mark it so symmetry is exact.
        k = k.copy()
        k[n // 2] = np.inf
    return k


def pupil_grid(nx: int, ny: int, dx: float, dy: float, coeffs=None,
               na: float = 1.0, lam: float = 0.525, drop_nyquist: bool = True):
    """Pupil sampled on the unshifted fftfreq grid.

    Returns ``(P, KX, KY)``. With ``drop_nyquist`` the unpaired Nyquist row
    and column of even-sized grids are zeroed, which keeps a real symmetric
    pupil exactly symmetric under ``k -> -k``.
    """
    kx = _freqs(nx, dx, drop_nyquist)
    ky = _freqs(ny, dy, drop_nyquist)
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    finite = np.isfinite(KX) & np.isfinite(KY)
    KXf = np.where(finite, KX, 0.0)
    KYf = np.where(finite, KY, 0.0)
    P = pupil(KXf, KYf, coeffs, na, lam)
    P = np.where(finite, P, 0.0)
    return P, KXf, KYf


def _propagator(KX, KY, n: float, lam: float) -> np.ndarray:
    """``sqrt((n/lam)^2 - k^2)`` with evanescent components marked by NaN."""
    arg = (n / lam) ** 2 - KX**2 - KY**2
    return np.where(arg >= 0, np.sqrt(np.maximum(arg, 0.0)), np.nan)


def _defocus_fields(P, KX, KY, n, lam, distances) -> np.ndarray:
    """Complex fields (centred) for each propagation distance; shape (..., D)."""
    kz = _propagator(KX, KY, n, lam)
    evanescent = np.isnan(kz)
    kz = np.where(evanescent, 0.0, kz)
    Pm = np.where(evanescent, 0.0, P)
    d = np.asarray(distances, dtype=np.float64)
    spec = Pm[None] * np.exp(2j * np.pi * d[:, None, None] * kz[None])
    field = sfft.ifft2(spec, axes=(1, 2))
    field = sfft.fftshift(field, axes=(1, 2))
    return np.moveaxis(field, 0, -1)


def defocus_psf(pupil_grid_values, kx_grid, ky_grid, lam: float, n: float,
                z_planes: Sequence[float]) -> np.ndarray:
    """Intensity ``|IFFT2(P * defocus(z))|^2`` for every ``z`` in ``z_planes``.

    Output shape is ``(Nx, Ny, len(z_planes))`` with the lateral origin moved
    to index ``(Nx // 2, Ny // 2)``. Evanescent frequencies contribute zero.
    """
    field = _defocus_fields(pupil_grid_values, kx_grid, ky_grid, n, lam, z_planes)
    return (field.real**2 + field.imag**2)


def z_coordinates(nz: int, step: float) -> np.ndarray:
    """Axial positions of planes, with plane ``nz // 2`` at ``z = 0``."""
    return (np.arange(nz) - nz // 2) * step


def detection_psf(cfg: OpticalConfig, coeffs=None, sigma_blur: float = 0.0,
                  normalize: bool = True) -> Volume:
    """Aberrated detection PSF, blurred by an isotropic Gaussian.

    ``sigma_blur`` is in voxel (index) units and is applied to the intensity
    PSF; the result is normalised to unit sum.
    """
    if sigma_blur < 0:
        raise ValueError("sigma_blur must be >= 0")
    nx, ny, nz = cfg.dims
    P, KX, KY = pupil_grid(nx, ny, cfg.px_x, cfg.px_y, coeffs, cfg.na_h, cfg.lambda_h)
    h = defocus_psf(P, KX, KY, cfg.lambda_h, cfg.n, z_coordinates(nz, cfg.step_z))
    if sigma_blur > 0:
        h = ndimage.gaussian_filter(h, sigma_blur, mode="constant", truncate=4.0)
    h = np.maximum(h, 0.0)
    if normalize:
        h = h / h.sum()
    return Volume(h, cfg.pitch)


def lightsheet_profile(cfg: OpticalConfig) -> Volume:
    """y-averaged light-sheet beam intensity, constant along y.

    The beam propagates along x with its focus at the grid centre (shifted by
    ``cfg.sheet_focus_offset_px``); its transverse plane is ``(z, y)`` and the
    pupil has zero phase. The profile is scaled to unit maximum.
    """
    nx, ny, nz = cfg.dims
    # Transverse grid: first axis is z, second is y.
    P, KZ, KY = pupil_grid(nz, ny, cfg.step_z, cfg.px_y, None, cfg.na_l, cfg.lambda_l)
    x = (np.arange(nx) - nx // 2 - cfg.sheet_focus_offset_px) * cfg.px_x
    field = _defocus_fields(P, KZ, KY, cfg.n, cfg.lambda_l, x)  # (nz, ny, nx)
    intensity = field.real**2 + field.imag**2
    sheet = intensity.mean(axis=1)  # (nz, nx)
    sheet = sheet.T  # (nx, nz)
    peak = sheet.max()
    if peak > 0:
        sheet = sheet / peak
    l = np.broadcast_to(sheet[:, None, :], (nx, ny, nz))
    return Volume(np.ascontiguousarray(l), cfg.pitch)


def sphere_indicator(dims, pitch, radius_um: float) -> np.ndarray:
    """Indicator of a ball of ``radius_um`` centred on voxel ``dims // 2``."""
    if radius_um <= 0:
        raise ValueError("bead radius must be positive")
    axes = [(np.arange(n) - n // 2) * p for n, p in zip(dims, pitch)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return (X**2 + Y**2 + Z**2 <= radius_um**2).astype(np.float64)


def bead_model(cfg: OpticalConfig, coeffs, sigma: float, ball: np.ndarray) -> np.ndarray:
    """Blurred PSF convolved with the bead indicator, scaled to unit max."""
    h = detection_psf(cfg, coeffs, sigma).data
    img = signal.fftconvolve(h, ball, mode="same")
    img = np.maximum(img, 0.0)
    peak = img.max()
    return img / peak if peak > 0 else img


def _scale_shift(model: np.ndarray, data: np.ndarray) -> tuple[float, float, float]:
    """Least-squares ``scale * model + shift`` fit to data; returns residual too."""
    m = model.ravel()
    d = data.ravel()
    A = np.stack([m, np.ones_like(m)], axis=1)
    (scale, shift), *_ = np.linalg.lstsq(A, d, rcond=None)
    r = scale * m + shift - d
    return float(scale), float(shift), float(r @ r)


def bead_residual(bead, bead_radius: float, cfg: OpticalConfig, coeffs,
                  sigma: float) -> float:
    """Fit residual of a bead image at given coefficients and blur."""
    data = np.asarray(as_array(bead), dtype=np.float64)
    data = data / data.max()
    ball = sphere_indicator(cfg.dims, cfg.pitch, bead_radius)
    return _scale_shift(bead_model(cfg, coeffs, sigma, ball), data)[2]


@dataclass
class FitOptions:
    max_evals: int = 4000
    restarts: int = 2
    xatol: float = 1e-6
    fatol: float = 1e-14
    sigma_max: float = 10.0


def fit_psf(bead, bead_radius: float, cfg: OpticalConfig,
            init: Optional[PsfFitResult] = None,
            options: Optional[FitOptions] = None) -> PsfFitResult:
    """Fit Zernike coefficients and blur width to a bead image.

    Both the bead data and the model ``h_zb(c, sigma) * ball`` are scaled to
    unit maximum, then compared after a closed-form intensity scale/shift.
    The search is Nelder-Mead over ``(c_1..c_15, sigma)`` inside the box
    ``[-3, 3]^15 x (0, sigma_max]``, restarted from the best point. The
    returned residual never exceeds the residual at ``init``.
    """
    opts = options or FitOptions()
    data = np.asarray(as_array(bead), dtype=np.float64)
    if data.shape != cfg.dims:
        raise ValueError(f"bead dims {data.shape} do not match config dims {cfg.dims}")
    if not np.all(np.isfinite(data)):
        raise ValueError("bead data contains non-finite values")
    peak = data.max()
    if peak <= 0:
        raise ValueError("bead data has no positive signal")
    data = data / peak
    if init is None:
        init = PsfFitResult(ZernikeCoeffs.zero(), 1.0)
    ball = sphere_indicator(cfg.dims, cfg.pitch, bead_radius)

    lo = np.r_[-3.0 * np.ones(15), 1e-6]
    hi = np.r_[3.0 * np.ones(15), opts.sigma_max]
    n_evals = 0

    def objective(theta):
        nonlocal n_evals
        n_evals += 1
        theta = np.clip(theta, lo, hi)
        model = bead_model(cfg, theta[:15], theta[15], ball)
        return _scale_shift(model, data)[2]

    x0 = np.r_[init.coeffs.as_array(), max(init.sigma, 1e-6)]
    x0 = np.clip(x0, lo, hi)
    f0 = objective(x0)
    best_x, best_f = x0, f0
    budget = opts.max_evals
    for _ in range(opts.restarts + 1):
        if budget <= 0 or best_f == 0.0:
            break
        res = optimize.minimize(
            objective, best_x, method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={"maxfev": budget, "xatol": opts.xatol, "fatol": opts.fatol,
                     "adaptive": True},
        )
        budget -= int(res.nfev)
        if res.fun < best_f:
            improved = best_f - res.fun
            best_x, best_f = np.clip(res.x, lo, hi), float(res.fun)
            if improved <= opts.fatol:
                break
        else:
            break

    converged = best_f < f0 or f0 == 0.0
    if not converged:
        log.warning("PSF fit did not improve on the initial residual %.3g", f0)
    model = bead_model(cfg, best_x[:15], best_x[15], ball)
    scale, shift, resid = _scale_shift(model, data)
    return PsfFitResult(
        ZernikeCoeffs(tuple(best_x[:15])), float(best_x[15]),
        scale, shift, resid, converged, n_evals,
    )


def save_config(cfg: OpticalConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2)
