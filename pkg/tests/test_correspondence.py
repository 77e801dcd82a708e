import numpy as np
import pytest

from sliceprop.correspondence import (
    AffinityMatrix,
    FeatureMap,
    WindowSpec,
    affinity_backward,
    apply_affinity,
    apply_affinity_backward_values,
    compute_affinity,
    dump_affinity,
    fuse_keys_queries,
    load_affinity,
    oeg_affinity,
    window_validity,
)
from sliceprop.encoder import EncoderConfig, encode, init_encoder
from sliceprop.errors import ShapeError
from sliceprop.geig import FeatureSpec


def brute_force_affinity(key, query, r):
    """Direct per-pixel exp/sum-exp loop in window row-major slot order."""
    h, w, _ = key.shape
    side = 2 * r + 1
    out = np.zeros((h, w, side * side))
    for y in range(h):
        for x in range(w):
            logits = {}
            for i, dy in enumerate(range(-r, r + 1)):
                for j, dx in enumerate(range(-r, r + 1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        logits[i * side + j] = float(query[y, x] @ key[yy, xx])
            mx = max(logits.values())
            total = sum(np.exp(v - mx) for v in logits.values())
            for slot, v in logits.items():
                out[y, x, slot] = np.exp(v - mx) / total
    return out


def brute_force_apply(weights, values, r):
    h, w = values.shape[:2]
    side = 2 * r + 1
    out = np.zeros_like(values, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            for i, dy in enumerate(range(-r, r + 1)):
                for j, dx in enumerate(range(-r, r + 1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[y, x] += weights[y, x, i * side + j] * values[yy, xx]
    return out


def test_identical_features_interior_uniform():
    feat = FeatureMap(np.ones((6, 6, 4)))
    aff = compute_affinity(feat, feat, WindowSpec(1))
    assert np.allclose(aff.weights[2:4, 2:4], 1.0 / 9.0)


def test_identical_features_corner_clipped():
    feat = FeatureMap(np.ones((6, 6, 4)))
    aff = compute_affinity(feat, feat, WindowSpec(1))
    corner = aff.weights[0, 0]
    assert np.isclose(corner.sum(), 1.0)
    assert (corner > 0).sum() == 4
    assert np.allclose(corner[corner > 0], 0.25)


def test_matches_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        r = int(rng.integers(0, min(h, w) // 2 + 1))
        if 2 * r + 1 > min(h, w):
            r = 0
        key = rng.normal(size=(h, w, 2))
        query = rng.normal(size=(h, w, 2))
        aff = compute_affinity(FeatureMap(key), FeatureMap(query), WindowSpec(r))
        want = brute_force_affinity(key, query, r)
        assert np.abs(aff.weights - want).max() < 1e-10


def test_row_stochastic_and_window_locality():
    rng = np.random.default_rng(1)
    key = rng.normal(size=(8, 8, 3))
    query = rng.normal(size=(8, 8, 3))
    aff = compute_affinity(FeatureMap(key), FeatureMap(query), WindowSpec(2))
    assert np.abs(aff.row_sums() - 1.0).max() < 1e-5
    assert aff.weights.min() >= 0.0
    valid = window_validity(8, 8, 2)
    assert np.all(aff.weights[~valid] == 0.0)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(2)
    key = rng.normal(size=(5, 5, 2))
    query = rng.normal(size=(5, 5, 2))
    aff1 = compute_affinity(FeatureMap(key), FeatureMap(query), WindowSpec(1))
    # adding a constant feature channel shifts every dot product of a row by
    # a per-row constant and must leave the softmax unchanged
    key2 = np.concatenate([key, np.ones((5, 5, 1))], axis=-1)
    query2 = np.concatenate([query, 3.0 * np.ones((5, 5, 1))], axis=-1)
    aff2 = compute_affinity(FeatureMap(key2), FeatureMap(query2), WindowSpec(1))
    assert np.abs(aff1.weights - aff2.weights).max() < 1e-12


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        compute_affinity(
            FeatureMap(np.zeros((4, 4, 2))), FeatureMap(np.zeros((4, 5, 2))), WindowSpec(1)
        )


def test_window_too_large_raises():
    feat = FeatureMap(np.zeros((4, 4, 2)))
    with pytest.raises(ShapeError):
        compute_affinity(feat, feat, WindowSpec(2))


# ---------------------------------------------------------------------------
# apply_affinity


def _identity_affinity(h, w, r):
    side = 2 * r + 1
    weights = np.zeros((h, w, side * side))
    weights[:, :, (side * side) // 2] = 1.0
    return AffinityMatrix(weights, r)


def test_apply_identity():
    rng = np.random.default_rng(3)
    values = rng.normal(size=(6, 6, 2))
    aff = _identity_affinity(6, 6, 1)
    assert np.allclose(apply_affinity(aff, values), values)


def test_apply_uniform_is_box_mean():
    feat = FeatureMap(np.ones((7, 7, 2)))
    aff = compute_affinity(feat, feat, WindowSpec(1))
    rng = np.random.default_rng(4)
    values = rng.normal(size=(7, 7))
    out = apply_affinity(aff, values)
    want = brute_force_apply(aff.weights, values, 1)
    assert np.abs(out - want).max() < 1e-10
    # interior pixels: plain 3x3 box mean
    for y in range(1, 6):
        for x in range(1, 6):
            assert np.isclose(out[y, x], values[y - 1 : y + 2, x - 1 : x + 2].mean())


def test_apply_matches_brute_force_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        r = int(rng.integers(0, 3))
        if 2 * r + 1 > min(h, w):
            r = 0
        key = rng.normal(size=(h, w, 2))
        query = rng.normal(size=(h, w, 2))
        aff = compute_affinity(FeatureMap(key), FeatureMap(query), WindowSpec(r))
        values = rng.normal(size=(h, w))
        got = apply_affinity(aff, values)
        want = brute_force_apply(aff.weights, values, r)
        assert np.abs(got - want).max() < 1e-10


def test_apply_convexity_bounds():
    rng = np.random.default_rng(6)
    key = rng.normal(size=(8, 8, 3))
    query = rng.normal(size=(8, 8, 3))
    aff = compute_affinity(FeatureMap(key), FeatureMap(query), WindowSpec(2))
    values = rng.random((8, 8, 2))
    out = apply_affinity(aff, values)
    assert out.min() >= values.min() - 1e-12
    assert out.max() <= values.max() + 1e-12


# ---------------------------------------------------------------------------
# backward passes


def test_affinity_backward_matches_fd():
    rng = np.random.default_rng(7)
    key = rng.normal(size=(5, 6, 3))
    query = rng.normal(size=(5, 6, 3))
    win = WindowSpec(1)
    aff = compute_affinity(FeatureMap(key), FeatureMap(query), win)
    d_weights = rng.normal(size=aff.weights.shape)
    dk, dq = affinity_backward(FeatureMap(key), FeatureMap(query), aff, d_weights)

    def scalar():
        a = compute_affinity(FeatureMap(key), FeatureMap(query), win)
        return float((a.weights * d_weights).sum())

    h = 1e-6
    worst = 0.0
    for arr, grad in ((key, dk), (query, dq)):
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            plus = scalar()
            arr[idx] = orig - h
            minus = scalar()
            arr[idx] = orig
            num = (plus - minus) / (2 * h)
            worst = max(
                worst, abs(num - grad[idx]) / max(1e-8, abs(num) + abs(grad[idx]))
            )
            it.iternext()
    assert worst < 1e-6


def test_apply_backward_values_is_transpose():
    rng = np.random.default_rng(8)
    key = rng.normal(size=(5, 5, 2))
    query = rng.normal(size=(5, 5, 2))
    aff = compute_affinity(FeatureMap(key), FeatureMap(query), WindowSpec(1))
    values = rng.normal(size=(5, 5))
    d_out = rng.normal(size=(5, 5))
    # <A v, g> == <v, A^T g>
    lhs = float((apply_affinity(aff, values) * d_out).sum())
    rhs = float((values * apply_affinity_backward_values(aff, d_out)).sum())
    assert abs(lhs - rhs) < 1e-10


# ---------------------------------------------------------------------------
# fusion and the dual path


def test_fuse_concatenates_channels():
    a = FeatureMap(np.ones((4, 4, 16)))
    b = FeatureMap(np.zeros((4, 4, 16)))
    fused = fuse_keys_queries(a, b)
    assert fused.data.shape == (4, 4, 32)
    assert np.all(fused.data[..., :16] == 1.0)
    assert np.all(fused.data[..., 16:] == 0.0)


def test_fuse_zero_pl_features_reduce_to_slice_dot_products():
    rng = np.random.default_rng(9)
    k = rng.normal(size=(5, 5, 3))
    q = rng.normal(size=(5, 5, 3))
    zeros = np.zeros((5, 5, 3))
    aff_single = compute_affinity(FeatureMap(k), FeatureMap(q), WindowSpec(1))
    aff_fused = compute_affinity(
        fuse_keys_queries(FeatureMap(k), FeatureMap(zeros)),
        fuse_keys_queries(FeatureMap(q), FeatureMap(zeros)),
        WindowSpec(1),
    )
    assert np.abs(aff_single.weights - aff_fused.weights).max() < 1e-12


def test_fuse_swap_invariance_of_dot_products():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(4, 4, 2))
    b = rng.normal(size=(4, 4, 2))
    ka = fuse_keys_queries(FeatureMap(a), FeatureMap(b))
    kb = fuse_keys_queries(FeatureMap(b), FeatureMap(a))
    aff1 = compute_affinity(ka, ka, WindowSpec(1))
    aff2 = compute_affinity(kb, kb, WindowSpec(1))
    assert np.abs(aff1.weights - aff2.weights).max() < 1e-12


def test_fuse_spatial_mismatch():
    with pytest.raises(ShapeError):
        fuse_keys_queries(FeatureMap(np.zeros((4, 4, 2))), FeatureMap(np.zeros((5, 4, 2))))


def test_oeg_affinity_constant_pl_matches_constant_block():
    # PL path fed with the transform of an all-zero mask contributes the same
    # constant feature block on both sides; compare against an explicit
    # single-path run with that block concatenated
    rng = np.random.default_rng(11)
    fs = FeatureSpec(kind="edge_profile")
    params = init_encoder(EncoderConfig(in_channels=fs.channels, hidden_channels=(4,), feature_dim=3, seed=5))
    s_j = rng.normal(size=(8, 8))
    s_j1 = rng.normal(size=(8, 8))
    zero_pl = np.zeros((8, 8))
    g_j, g_j1, g_pl = fs.apply(s_j), fs.apply(s_j1), fs.apply(zero_pl)
    win = WindowSpec(2)
    aff_dual = oeg_affinity(params, g_j, g_j1, g_pl, g_pl, win)
    pl_feat = encode(params, g_pl)
    key = fuse_keys_queries(encode(params, g_j), pl_feat)
    query = fuse_keys_queries(encode(params, g_j1), pl_feat)
    want = compute_affinity(key, query, win)
    assert np.abs(aff_dual.weights - want.weights).max() < 1e-12


def test_oeg_affinity_identical_slices_argmax_center():
    # textured slice, identical pair: self-match must win at interior pixels
    rng = np.random.default_rng(12)
    slice_ = rng.normal(size=(8, 8))
    fs = FeatureSpec(kind="edge_profile")
    params = init_encoder(EncoderConfig(in_channels=fs.channels, seed=1))
    g = fs.apply(slice_)
    pl = fs.apply((rng.random((8, 8)) > 0.5).astype(float))
    win = WindowSpec(1)
    aff = oeg_affinity(params, g, g, pl, pl, win)
    # brute-force check: on identical inputs the diagonal dot product is the
    # row maximum wherever per-pixel features are pairwise distinct
    key = fuse_keys_queries(encode(params, g), encode(params, pl)).data
    center = (3 * 3) // 2
    for y in range(1, 7):
        for x in range(1, 7):
            dots = [
                key[y, x] @ key[y + dy, x + dx]
                for dy in (-1, 0, 1)
                for dx in (-1, 0, 1)
            ]
            if np.argmax(dots) == center:
                assert np.argmax(aff.weights[y, x]) == center


def test_shared_params_identity():
    # there is one EncoderParams object; both paths see the same tensors
    fs = FeatureSpec(kind="edge_profile")
    params = init_encoder(EncoderConfig(in_channels=fs.channels, seed=2))
    assert params is params  # single object by construction
    # mutating "the PL path" is mutating the only parameter set
    before = params.weights[0].copy()
    params.weights[0] += 1.0
    assert not np.array_equal(before, params.weights[0])


# ---------------------------------------------------------------------------
# debug dump


def test_affinity_dump_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    key = rng.normal(size=(5, 6, 2))
    query = rng.normal(size=(5, 6, 2))
    aff = compute_affinity(FeatureMap(key), FeatureMap(query), WindowSpec(1))
    path = tmp_path / "aff.bin"
    dump_affinity(aff, path)
    back = load_affinity(path)
    assert back.radius == 1
    assert back.spatial_shape == (5, 6)
    assert np.abs(back.weights - aff.weights).max() < 1e-7  # f32 payload
    valid = window_validity(5, 6, 1)
    assert np.all(back.weights[~valid] == 0.0)
