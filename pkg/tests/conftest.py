"""Shared fixtures: small planted worlds and helpers used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from vmfmil.background import fit_background
from vmfmil.dataio import SyntheticWorldSpec, generate_synthetic


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit(d, rng):
    return unit(rng.standard_normal(d))


@pytest.fixture(scope="session")
def small_world():
    """Compact planted world for fast structural tests."""
    spec = SyntheticWorldSpec(
        d=8,
        num_classes=4,
        kappa_class=50.0,
        kappa_background=5.0,
        proposals_per_image=8,
        seed=7,
        num_base_classes=2,
    )
    index, sets, truth = generate_synthetic(spec, 12)
    proposals = {p.image_id: p for p in sets}
    return spec, index, proposals, truth


@pytest.fixture(scope="session")
def small_world_bg(small_world):
    _, index, proposals, _ = small_world
    return fit_background(index, proposals)
