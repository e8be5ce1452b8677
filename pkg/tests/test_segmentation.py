import json

import numpy as np
import pytest
import scipy.sparse
from hypothesis import assume, example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semcs.errors import DegenerateSegmentationError, InputError
from semcs.segmentation import (
    ZERO_BAND,
    AffinityMatrix,
    AffinitySpectrum,
    ColorDescriptorField,
    PatchFeatureGrid,
    build_color_affinity,
    build_feature_affinity,
    color_descriptors,
    combine_affinity,
    extract_patch_features,
    extract_salient_mask,
    graph_laplacian,
    laplacian_eigendecomposition,
    load_mask,
    prepare_for_backbone,
    save_mask,
    segment_image,
    upsample_nearest,
)

from oracles import component_count, feature_affinity_loop, full_spectrum, knn_kernel_loop


def random_graph(rng, n, density=1.0):
    w = rng.random((n, n)) * (rng.random((n, n)) < density)
    w = np.triu(w, 1)
    return w + w.T


# ---------------------------------------------------------------- features

@pytest.mark.parametrize("size, rows, n", [(224, 14, 196), (448, 28, 784)])
def test_patch_grid_arithmetic(backends, size, rows, n):
    img = np.full((size, size, 3), 0.5, np.float32)
    grid = extract_patch_features(img, backends.feature_extractor)
    assert grid.grid_shape == (rows, rows)
    assert grid.features.shape[0] == n == grid.n
    assert grid.source_resolution == (size, size)


def test_patch_features_deterministic_and_normalised(backends, scene):
    a = extract_patch_features(scene[0], backends.feature_extractor)
    b = extract_patch_features(scene[0], backends.feature_extractor)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_allclose(np.linalg.norm(a.features, axis=1), 1.0, atol=1e-12)


def test_misaligned_input_modes(backends):
    img = np.full((230, 250, 3), 0.3, np.float32)
    with pytest.raises(InputError):
        prepare_for_backbone(img, 16, "strict")
    assert tuple(prepare_for_backbone(img, 16, "resize").shape[-2:]) == (224, 240)
    assert tuple(prepare_for_backbone(img, 16, "pad").shape[-2:]) == (240, 256)
    grid = extract_patch_features(img, backends.feature_extractor, mode="pad")
    assert grid.grid_shape == (15, 16)
    assert grid.original_resolution == (230, 250)


def test_patch_grid_rejects_bad_shapes():
    with pytest.raises(InputError):
        PatchFeatureGrid(np.zeros((5, 3)), (2, 3), 16, (32, 48))
    with pytest.raises(InputError):
        PatchFeatureGrid(np.full((6, 3), np.nan), (2, 3), 16, (32, 48))


# ---------------------------------------------------------------- feature affinity

def test_feature_affinity_identity():
    np.testing.assert_array_equal(build_feature_affinity(np.eye(3)).weights, np.eye(3))


def test_feature_affinity_negative_cross_term_thresholded():
    w = build_feature_affinity(np.array([[1.0, 0.0], [-1.0, 0.0]])).weights
    np.testing.assert_array_equal(w, [[1.0, 0.0], [0.0, 1.0]])


def test_feature_affinity_matches_loop(rng):
    f = rng.normal(size=(5, 8))
    np.testing.assert_allclose(build_feature_affinity(f).weights, feature_affinity_loop(f),
                               atol=1e-10, rtol=0)


@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 6)),
              elements=st.floats(-10, 10)))
def test_feature_affinity_symmetric_nonnegative(f):
    w = build_feature_affinity(f).weights
    assert np.all(w >= 0)
    np.testing.assert_array_equal(w, w.T)


def test_feature_affinity_rejects_nan():
    with pytest.raises(InputError):
        build_feature_affinity(np.array([[np.nan, 1.0]]))


# ---------------------------------------------------------------- colour affinity

def two_tone(size=4):
    img = np.zeros((size, size, 3), np.float32)
    img[:, : size // 2] = [0.9, 0.1, 0.1]
    img[:, size // 2:] = [0.1, 0.2, 0.8]
    return img


def test_color_descriptors_ranges(scene):
    desc = color_descriptors(scene[0], (14, 14)).descriptors
    assert desc.shape == (196, 5)
    assert desc.min() >= 0 and desc.max() <= 1
    assert desc[0, 3:].tolist() == [0, 0] and desc[-1, 3:].tolist() == [1, 1]


def test_color_affinity_matches_bruteforce_two_tone():
    img = two_tone()
    desc = color_descriptors(img, (4, 4)).descriptors
    w = build_color_affinity(img, (4, 4), k=3)
    assert scipy.sparse.issparse(w.weights)
    np.testing.assert_allclose(w.dense(), knn_kernel_loop(desc, 3), atol=1e-12, rtol=0)


def test_color_affinity_identical_descriptors_give_one():
    desc = np.array([[0.1, 0.2, 0.3, 0.0, 0.0], [0.1, 0.2, 0.3, 0.0, 0.0], [0.9, 0.9, 0.9, 1.0, 1.0]])
    w = build_color_affinity(None, (1, 3), k=1, descriptors=ColorDescriptorField(desc)).dense()
    assert w[0, 1] == w[1, 0] == 1.0


def test_color_affinity_far_descriptors_clamped_to_zero():
    desc = np.array([[0, 0, 0, 0, 0], [1, 1, 1, 1, 1.0]])
    w = build_color_affinity(None, (1, 2), k=1, descriptors=ColorDescriptorField(desc)).dense()
    np.testing.assert_array_equal(w, np.zeros((2, 2)))


def test_color_affinity_row_sparsity_and_range(scene):
    k = 5
    desc = color_descriptors(scene[0], (14, 14))
    w = build_color_affinity(scene[0], (14, 14), k=k, descriptors=desc)
    d = w.dense()
    assert d.min() >= 0 and d.max() <= 1
    np.testing.assert_array_equal(d, d.T)
    # every row keeps its own k picks; symmetrisation can only add
    assert (d > 0).sum(axis=1).min() <= (d > 0).sum(axis=1).max()
    assert np.count_nonzero(d) <= 2 * k * 196


@pytest.mark.parametrize("k", [0, 16])
def test_color_affinity_k_out_of_range(k):
    with pytest.raises(InputError):
        build_color_affinity(two_tone(), (4, 4), k=k)


# ---------------------------------------------------------------- combine

def test_combine_zero_lambda_and_zero_matrix(rng):
    wf = AffinityMatrix(random_graph(rng, 6), "feature")
    wk = AffinityMatrix(random_graph(rng, 6), "color")
    np.testing.assert_array_equal(combine_affinity(wf, wk, 0.0).weights, wf.weights)
    zero = AffinityMatrix(np.zeros((6, 6)), "color")
    np.testing.assert_array_equal(combine_affinity(wf, zero, 3.7).weights, wf.weights)


def test_combine_matches_elementwise(rng):
    wf, wk = random_graph(rng, 6), random_graph(rng, 6)
    out = combine_affinity(AffinityMatrix(wf, "feature"), AffinityMatrix(wk, "color"), 0.5).weights
    expected = np.array([[wf[i, j] + 0.5 * wk[i, j] for j in range(6)] for i in range(6)])
    np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(out, out.T)


@given(st.floats(0, 100), st.floats(0, 100), st.integers(0, 2**32 - 1))
def test_combine_linear_in_lambda(a, b, seed):
    rng = np.random.default_rng(seed)
    wf = AffinityMatrix(random_graph(rng, 5), "feature")
    wk = AffinityMatrix(random_graph(rng, 5), "color")
    lhs = combine_affinity(wf, wk, a + b).weights
    rhs = combine_affinity(wf, wk, a).weights + b * wk.weights
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * max(1.0, a + b) * 10, rtol=1e-12)


def test_combine_shape_mismatch():
    with pytest.raises(InputError):
        combine_affinity(AffinityMatrix(np.zeros((2, 2)), "feature"),
                         AffinityMatrix(np.zeros((3, 3)), "color"), 1.0)


# ---------------------------------------------------------------- laplacian

def test_complete_graph_null_space():
    w = np.ones((4, 4)) - np.eye(4)
    spec = laplacian_eigendecomposition(w, "unnormalized")
    assert abs(spec.eigenvalues[0]) < 1e-12
    np.testing.assert_allclose(spec.eigenvectors[:, 0], 0.5, atol=1e-12)


def test_two_components_double_zero():
    w = np.zeros((4, 4))
    w[0, 1] = w[1, 0] = 1.0
    w[2, 3] = w[3, 2] = 2.0
    for kind in ("unnormalized", "symmetric"):
        vals = laplacian_eigendecomposition(w, kind).eigenvalues
        assert abs(vals[0]) < 1e-8 and abs(vals[1]) < 1e-8 and vals[2] > 1e-3


@pytest.mark.parametrize("kind", ["unnormalized", "symmetric"])
def test_eigenpairs_match_dense_oracle(rng, kind):
    w = random_graph(rng, 8)
    spec = laplacian_eigendecomposition(w, kind)
    vals, vecs = full_spectrum(w, kind)
    np.testing.assert_allclose(spec.eigenvalues, vals, atol=1e-8)
    for j in range(8):
        a, b = spec.eigenvectors[:, j], vecs[:, j]
        assert min(np.abs(a - b).max(), np.abs(a + b).max()) < 1e-8


@pytest.mark.parametrize("kind", ["unnormalized", "symmetric"])
def test_laplacian_rows_sum_to_zero(rng, kind):
    w = random_graph(rng, 10, density=0.5)
    lap = graph_laplacian(w, "unnormalized")
    np.testing.assert_allclose(lap.sum(axis=1), 0, atol=1e-9)
    # the normalised variant annihilates D^1/2 1 instead
    lap_s = graph_laplacian(w, "symmetric")
    np.testing.assert_allclose(lap_s @ np.sqrt(w.sum(1)), 0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 32), st.floats(0.02, 0.4), st.integers(0, 2**32 - 1),
       st.sampled_from(["unnormalized", "symmetric"]))
def test_zero_multiplicity_equals_components(n, density, seed, kind):
    rng = np.random.default_rng(seed)
    w = random_graph(rng, n, density)
    w[w > 0] += 0.1  # keep edges well away from zero
    vals = laplacian_eigendecomposition(w, kind).eigenvalues
    assert vals[0] >= -1e-8
    assert int((vals < 1e-8).sum()) == component_count(w)


def test_eigenvectors_unit_norm_and_sign_convention(rng):
    spec = laplacian_eigendecomposition(random_graph(rng, 12), count=4)
    assert len(spec) == 4
    np.testing.assert_allclose(np.linalg.norm(spec.eigenvectors, axis=0), 1, atol=1e-8)
    for j in range(4):
        col = spec.eigenvectors[:, j]
        assert col[np.flatnonzero(np.abs(col) > 1e-10)[0]] > 0
    assert np.all(np.diff(spec.eigenvalues) >= 0)


def test_non_symmetric_rejected():
    w = np.array([[0, 1.0], [0.5, 0]])
    with pytest.raises(InputError):
        laplacian_eigendecomposition(w)


def test_negative_weights_rejected():
    with pytest.raises(InputError):
        laplacian_eigendecomposition(np.array([[0, -1.0], [-1.0, 0]]))


# ---------------------------------------------------------------- mask

def spectrum_from_fiedler(y):
    n = len(y)
    vecs = np.column_stack([np.full(n, 1 / np.sqrt(n)), y / np.linalg.norm(y)])
    return AffinitySpectrum(np.array([0.0, 0.5]), vecs, "symmetric")


def test_sign_split_on_small_grid():
    mask = extract_salient_mask(spectrum_from_fiedler(np.array([1.0, 1.0, -1.0, -1.0])),
                                (2, 2), (2, 2))
    np.testing.assert_array_equal(mask.pixels, [[1, 1], [0, 0]])
    assert not mask.flipped


def test_border_heavier_side_is_background():
    # 4x4 grid: positive on the interior 2x2 block, negative on the ring
    y = -np.ones((4, 4))
    y[1:3, 1:3] = 1
    mask = extract_salient_mask(spectrum_from_fiedler(y.ravel()), (4, 4), (4, 4))
    np.testing.assert_array_equal(mask.pixels, (y > 0).astype(np.uint8))
    mask_neg = extract_salient_mask(spectrum_from_fiedler(-y.ravel()), (4, 4), (4, 4))
    np.testing.assert_array_equal(mask_neg.pixels, mask.pixels)
    assert mask_neg.flipped and not mask.flipped


@given(arrays(np.float64, 16, elements=st.floats(-1, 1)), st.floats(1e-3, 1e3))
@example(np.array([-5e-324] + [0.5] * 15), 0.5)  # subnormal entry underflows to -0 when scaled
def test_mask_invariant_to_sign_and_scale(y, scale):
    if np.ptp(y) < 1e-9:
        return
    # rescaling rounds, so entries right at the zero band's edge may cross it
    rel = np.abs(y) / np.abs(y).max()
    assume(not np.any((rel > ZERO_BAND / 10) & (rel < ZERO_BAND * 10)))
    base = extract_salient_mask(spectrum_from_fiedler(y), (4, 4), (8, 8))
    for variant in (-y, scale * y, -scale * y):
        other = extract_salient_mask(spectrum_from_fiedler(variant), (4, 4), (8, 8))
        np.testing.assert_array_equal(other.pixels, base.pixels)
    assert set(np.unique(base.pixels)) <= {0, 1}
    np.testing.assert_array_equal(base.pixels + (1 - base.pixels), np.ones((8, 8)))


def test_upsampled_blocks_are_constant(rng):
    bits = (rng.random((14, 14)) > 0.5).astype(np.uint8)
    up = upsample_nearest(bits, (224, 224))
    for r in range(14):
        for c in range(14):
            block = up[16 * r: 16 * r + 16, 16 * c: 16 * c + 16]
            assert np.all(block == bits[r, c])


def test_constant_fiedler_vector_is_degenerate():
    spec = AffinitySpectrum(np.zeros(2), np.full((4, 2), 0.5), "symmetric")
    with pytest.raises(DegenerateSegmentationError):
        extract_salient_mask(spec, (2, 2), (2, 2))


def test_one_sided_fiedler_vector_sets_flag():
    mask = extract_salient_mask(spectrum_from_fiedler(np.array([0.1, 0.2, 0.3, 0.4])),
                                (2, 2), (4, 4))
    assert mask.degenerate
    assert mask.pixels.all()


def test_segment_finds_disc(backends, scene):
    img, disc = scene
    mask, spectrum, grid = segment_image(img, backends.feature_extractor, return_spectrum=True)
    assert mask.shape == img.shape[:2]
    assert not mask.degenerate
    agreement = (mask.pixels.astype(bool) == disc).mean()
    assert agreement > 0.9


def test_mask_export_roundtrip(tmp_path, backends, scene):
    mask = segment_image(scene[0], backends.feature_extractor)
    png, sidecar = save_mask(mask, tmp_path / "mask.png")
    meta = json.loads(sidecar.read_text())
    assert {"eigen_index", "threshold", "flipped", "grid_shape"} <= meta.keys()
    assert meta["grid_shape"] == [14, 14]
    from PIL import Image

    raw = np.asarray(Image.open(png))
    assert raw.dtype == np.uint8 and set(np.unique(raw)) <= {0, 255}
    back = load_mask(png)
    np.testing.assert_array_equal(back.pixels, mask.pixels)
    assert back.flipped == mask.flipped
