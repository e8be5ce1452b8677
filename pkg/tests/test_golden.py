"""Seeded-backend outputs against values frozen by scripts/make_fixtures.py."""

import sys

import numpy as np
import pytest

from conftest import FIXTURES
from semcs.imaging import load_image
from semcs.segmentation import upsample_nearest

sys.path.insert(0, str(FIXTURES.parents[1] / "scripts"))
from make_fixtures import golden_values  # noqa: E402

golden = np.load(FIXTURES / "golden.npz")


@pytest.fixture(scope="module")
def fresh():
    return golden_values(FIXTURES)


@pytest.mark.parametrize("key", sorted(golden.files))
def test_matches_golden(fresh, key):
    expected, got = golden[key], fresh[key]
    assert got.shape == expected.shape
    if expected.dtype == np.uint8:
        np.testing.assert_array_equal(got, expected)
    else:
        np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-5)


def test_fixture_mask_agrees_with_ground_truth():
    truth = load_image(FIXTURES / "fixture_mask.png")[..., 0] > 0.5
    grid = golden["mask_grid"].astype(bool)
    pred = upsample_nearest(grid, truth.shape).astype(bool)
    assert (pred == truth).mean() > 0.9
