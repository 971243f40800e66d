"""Ground-truth phantoms and mixed Poisson-Gaussian corruption.

All phantoms take values in [0, 1]. Noise draws come from a Philox
generator keyed on the seed, so a given (volume, seed) pair always yields
the same sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import Volume, as_array

__all__ = [
    "NoiseSpec",
    "Simulation",
    "make_beads",
    "make_steps",
    "make_cells",
    "make_phantom",
    "peak_scale",
    "corrupt",
    "simulate",
    "noise_rng",
]


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian read noise ``sigma_g`` (counts), peak of the clean image and seed."""

    sigma_g: float = 10.0
    peak: float = 2000.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_g >= 0:
            raise ValueError("sigma_g must be non-negative")
        if not self.peak > 0:
            raise ValueError("peak must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def noise_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def _dims(dims) -> tuple[int, int, int]:
    d = tuple(int(n) for n in dims)
    if len(d) != 3 or min(d) < 1:
        raise ValueError(f"dims must be 3 positive integers, got {dims}")
    return d


def _grid_centres(n: int, g: int, r: float) -> np.ndarray:
    s = n // g
    if g > 1 and s <= 2 * r:
        raise ValueError(f"{g} beads of radius {r} do not fit along an axis of {n}")
    o = (n - 1 - (g - 1) * s) / 2.0
    if o < r:
        raise ValueError(f"{g} beads of radius {r} leave no margin along an axis of {n}")
    return o + s * np.arange(g)


def make_beads(dims, grid: Sequence[int] = (5, 5, 5), bead_radius: float = 1.0,
               pitch=(1.0, 1.0, 1.0)) -> Volume:
    """Regular grid of solid spheres (value 1), radius in voxels.

    Centres are placed symmetrically about the volume centre; a voxel is
    inside a bead when its squared index distance is at most ``r^2``.
    """
    dims = _dims(dims)
    if len(grid) != 3 or min(grid) < 1:
        raise ValueError(f"grid must be 3 positive integers, got {grid}")
    r = float(bead_radius)
    if not r >= 0:
        raise ValueError("bead radius must be non-negative")
    centres = [_grid_centres(n, int(g), r) for n, g in zip(dims, grid)]
    out = np.zeros(dims)
    # Distances separate per axis: min over bead centres along each axis.
    d2 = []
    for n, c in zip(dims, centres):
        d = (np.arange(n)[:, None] - c[None, :]) ** 2
        d2.append(d.min(axis=1))
    dist = d2[0][:, None, None] + d2[1][None, :, None] + d2[2][None, None, :]
    out[dist <= r * r + 1e-9] = 1.0
    return Volume(out, pitch)


def make_steps(dims, n_levels: int = 4, axis: int = 0, pitch=(1.0, 1.0, 1.0)) -> Volume:
    """Slabs along ``axis`` with intensities ``1/n, 2/n, ..., 1``."""
    dims = _dims(dims)
    if n_levels < 2:
        raise ValueError("n_levels must be at least 2")
    if n_levels > dims[axis]:
        raise ValueError("more levels than planes along the step axis")
    n = dims[axis]
    level = (np.arange(n) * n_levels) // n
    profile = (level + 1) / n_levels
    shape = [1, 1, 1]
    shape[axis] = n
    out = np.broadcast_to(profile.reshape(shape), dims).copy()
    return Volume(out, pitch)


def make_cells(dims, n_seeds: int = 12, seed: int = 0, thickness: float = 1.0,
               interior: float = 0.2, pitch=(1.0, 1.0, 1.0)) -> Volume:
    """Voronoi tissue: bright membranes (1) around dim cell interiors.

    A voxel is membrane when the gap between its nearest and second-nearest
    seed distances is below ``thickness``; the outer faces of the volume are
    membrane too.
    """
    dims = _dims(dims)
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    rng = noise_rng(seed)
    seeds = rng.uniform(0, 1, size=(n_seeds, 3)) * (np.array(dims) - 1)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims],
                                indexing="ij"), axis=-1)
    out = np.full(dims, float(interior))
    if n_seeds > 1:
        d = np.sqrt(((grid[..., None, :] - seeds) ** 2).sum(axis=-1))
        d.sort(axis=-1)
        out[d[..., 1] - d[..., 0] < thickness] = 1.0
    for ax in range(3):
        idx = [slice(None)] * 3
        idx[ax] = 0
        out[tuple(idx)] = 1.0
        idx[ax] = -1
        out[tuple(idx)] = 1.0
    return Volume(out, pitch)


def make_phantom(kind: str, dims, seed: int = 0, **kw) -> Volume:
    if kind == "beads":
        return make_beads(dims, **kw)
    if kind == "steps":
        return make_steps(dims, **kw)
    if kind == "cells":
        return make_cells(dims, seed=seed, **kw)
    raise ValueError(f"unknown phantom kind {kind!r}")


def peak_scale(f_clean, peak: float) -> float:
    m = float(np.max(as_array(f_clean)))
    if not m > 0:
        raise ValueError("clean image has no positive sample to scale")
    return peak / m


def corrupt(f_clean, spec: NoiseSpec) -> Volume:
    """Rescale to ``spec.peak`` and add Poisson then Gaussian noise.

    The output is not clamped, so the Gaussian tail can go negative. An
    all-zero clean image is left unscaled and receives read noise only.
    """
    arr = np.asarray(as_array(f_clean), dtype=np.float64)
    if (arr < 0).any():
        raise ValueError("clean image must be non-negative")
    mean = arr * peak_scale(arr, spec.peak) if arr.max() > 0 else arr
    rng = noise_rng(spec.seed)
    out = rng.poisson(mean).astype(np.float64)
    if spec.sigma_g > 0:
        out += rng.normal(0.0, spec.sigma_g, size=arr.shape)
    pitch = f_clean.pitch if isinstance(f_clean, Volume) else (1.0, 1.0, 1.0)
    return Volume(out, pitch)


@dataclass(frozen=True)
class Simulation:
    """Ground truth ``u0`` in [0, 1], ``f_clean = A u0`` and the noisy ``f``.

    ``scale`` maps phantom units to counts; ``truth`` is ``scale * u0``.
    """

    u0: Volume
    f_clean: Volume
    f: Volume
    scale: float
    seed: int

    @property
    def truth(self) -> np.ndarray:
        return self.scale * self.u0.data


def simulate(u0: Volume, op, noise: NoiseSpec) -> Simulation:
    """Blur ``u0`` with ``op`` and corrupt the result."""
    f_clean = np.maximum(op.apply(u0.data), 0.0)
    scale = peak_scale(f_clean, noise.peak)
    f = corrupt(f_clean, noise)
    return Simulation(u0, Volume(f_clean, u0.pitch), f, scale, int(noise.seed))
