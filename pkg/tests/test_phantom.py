import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lsdeconv.fidelity import tv_norm
from lsdeconv.phantom import NoiseSpec, corrupt, make_beads, make_cells, make_phantom, make_steps, simulate
from lsdeconv.forward import IdentityOperator
from lsdeconv.volume import Volume


def test_single_bead_is_cross():
    b = make_beads((7, 7, 7), grid=(1, 1, 1), bead_radius=1.0).data
    assert b.sum() == 7
    expect = np.zeros((7, 7, 7))
    expect[3, 3, 3] = 1
    for ax in range(3):
        for d in (-1, 1):
            idx = [3, 3, 3]
            idx[ax] += d
            expect[tuple(idx)] = 1
    np.testing.assert_array_equal(b, expect)


def test_bead_grid_mass_and_symmetry():
    b = make_beads((32, 32, 16), grid=(5, 5, 3), bead_radius=1.0).data
    assert set(np.unique(b)) <= {0.0, 1.0}
    assert b.sum() > 0
    np.testing.assert_array_equal(b, b[::-1])
    np.testing.assert_array_equal(b, b[:, ::-1])
    np.testing.assert_array_equal(b, b[:, :, ::-1])


def test_beads_that_do_not_fit():
    with pytest.raises(ValueError):
        make_beads((8, 8, 8), grid=(5, 5, 5), bead_radius=1.0)


def test_steps_levels_and_tv():
    s = make_steps((8, 3, 2), n_levels=2).data
    assert np.all(s[:4] == 0.5) and np.all(s[4:] == 1.0)
    s4 = make_steps((16, 4, 4), n_levels=4).data
    # three jumps of 1/4 across a 4x4 cross-section
    assert tv_norm(s4) == pytest.approx(3 * 0.25 * 16)
    assert sorted(np.unique(s4)) == [0.25, 0.5, 0.75, 1.0]


def test_cells():
    one = make_cells((10, 9, 8), n_seeds=1, interior=0.2).data
    interior = one[1:-1, 1:-1, 1:-1]
    assert np.all(interior == 0.2)
    assert np.all(one[0] == 1) and np.all(one[:, :, -1] == 1)
    a = make_cells((12, 12, 8), n_seeds=6, seed=3).data
    b = make_cells((12, 12, 8), n_seeds=6, seed=3).data
    np.testing.assert_array_equal(a, b)
    assert (a[1:-1, 1:-1, 1:-1] == 1).any()
    c = make_cells((12, 12, 8), n_seeds=6, seed=4).data
    assert not np.array_equal(a, c)


def test_make_phantom_dispatch():
    assert make_phantom("steps", (4, 4, 4), n_levels=2).dims == (4, 4, 4)
    with pytest.raises(ValueError):
        make_phantom("tissue", (4, 4, 4))


def test_high_count_limit():
    clean = make_steps((8, 8, 8), n_levels=4).data
    f = corrupt(clean, NoiseSpec(sigma_g=0.0, peak=1e9, seed=1)).data
    np.testing.assert_allclose(f / 1e9, clean / clean.max(), rtol=1e-3)


def test_pure_gaussian_noise():
    f = corrupt(np.zeros((100, 100, 100)), NoiseSpec(sigma_g=10.0, peak=2000, seed=2)).data
    assert abs(f.mean()) < 0.05
    assert f.std() == pytest.approx(10.0, rel=0.02)


def test_variance_additivity():
    clean = make_beads((9, 9, 9), grid=(1, 1, 1), bead_radius=2.0).data
    draws = np.array([corrupt(clean, NoiseSpec(10.0, 2000.0, s)).data[4, 4, 4]
                      for s in range(1000)])
    assert draws.mean() == pytest.approx(2000, rel=0.01)
    assert draws.var(ddof=1) == pytest.approx(2000 + 100, rel=0.15)


@given(st.integers(0, 2**32))
def test_seed_determinism(seed):
    clean = make_steps((6, 5, 4), n_levels=2).data
    a = corrupt(clean, NoiseSpec(seed=seed)).data
    b = corrupt(clean, NoiseSpec(seed=seed)).data
    assert a.tobytes() == b.tobytes()


def test_simulate_scaling():
    u0 = make_beads((16, 16, 8), grid=(2, 2, 1), bead_radius=1.5)
    sim = simulate(u0, IdentityOperator(u0.dims), NoiseSpec(sigma_g=10.0, peak=2000, seed=0))
    assert sim.f_clean.data.max() == 1.0
    assert sim.scale == 2000.0
    np.testing.assert_array_equal(sim.truth, 2000 * u0.data)
    # brightest voxel near peak, within Poisson and Gaussian spread
    assert abs(sim.f.data.max() - 2000) < 6 * np.sqrt(2100)
    assert isinstance(sim.f, Volume)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(sigma_g=-1)
    with pytest.raises(ValueError):
        NoiseSpec(peak=0)
    with pytest.raises(ValueError):
        corrupt(-np.ones((2, 2, 2)), NoiseSpec())
