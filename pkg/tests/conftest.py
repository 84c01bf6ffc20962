"""Shared fixtures: expensive synthetic artifacts built once per session."""

import numpy as np
import pytest

from bpmlab import channel as ch
from bpmlab import lattice as lat_mod


@pytest.fixture(scope="session")
def gauss_kernel():
    return ch.gaussian_kernel(30.0, 35.0, 1.0, 2.0)


@pytest.fixture(scope="session")
def exp_kernel():
    return ch.exponential_kernel(30.0, 35.0, 1.0, 2.0)


@pytest.fixture(scope="session")
def preset_lattice_32():
    """32x32 jitter-free lattice at the demonstration geometry."""
    params = lat_mod.LatticeParams(
        extent_dt=18.5 * 32, extent_ct=22.0 * 32, sigma_pos_dt=0.0, sigma_pos_ct=0.0,
        defect_rate=0.0, rng_seed=3,
    )
    return lat_mod.generate_lattice(params)


@pytest.fixture(scope="session")
def jittered_lattice_32():
    params = lat_mod.LatticeParams(
        extent_dt=18.5 * 32, extent_ct=22.0 * 32, defect_rate=0.0, rng_seed=3,
    )
    return lat_mod.generate_lattice(params)


@pytest.fixture(scope="session")
def distorted_scan(exp_kernel):
    """30 um jittered scan with a 50 nm cumulative down-track stretch.

    Returns (lattice_nominal, stretch_fn, image, lattice_actual); the ground
    truth for location recovery is the stretched nominal grid (the phase
    fields see the smooth lattice, not per-island jitter).
    """
    n_cols = 1620
    params = lat_mod.LatticeParams(
        extent_dt=18.5 * n_cols, extent_ct=22.0 * 12, defect_rate=0.0, rng_seed=11,
    )
    lattice0 = lat_mod.generate_lattice(params)
    scan = params.extent_dt

    def stretch(x, y=None):
        return 50.0 * (x / scan) ** 2

    lattice = lat_mod.distort_lattice(lattice0, dx=stretch)
    renderer = ch.Renderer(lattice, exp_kernel)
    image = renderer.render(
        ch.ac_demag_pattern(lattice, 1.0, seed=3),
        ch.NoiseParams(None, 22.0, rng_seed=8),
    )
    return lattice0, stretch, image, lattice


def nearest_distances(found: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Distance from each truth point to its nearest recovered point."""
    from scipy.spatial import cKDTree

    d, _ = cKDTree(found).query(truth)
    return d
