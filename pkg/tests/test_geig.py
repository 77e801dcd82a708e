import numpy as np
import pytest

from sliceprop.geig import (
    DIRECTION_STEPS,
    FeatureSpec,
    GeigConfig,
    edge_profile,
    first_derivative,
    geig_transform,
    minmax_normalize,
    second_derivative,
)


def reflect_index(i, n):
    # numpy 'reflect': mirror about the edge pixel without repeating it
    period = 2 * n - 2
    i = i % period
    return period - i if i >= n else i


def loop_second_derivative(slice_, direction, scale):
    """Brute-force per-pixel oracle with explicit reflect indexing."""
    dy, dx = DIRECTION_STEPS[direction]
    h = (scale - 1) // 2
    rows, cols = slice_.shape
    out = np.zeros_like(slice_, dtype=np.float64)
    for y in range(rows):
        for x in range(cols):
            yp, xp = reflect_index(y + h * dy, rows), reflect_index(x + h * dx, cols)
            ym, xm = reflect_index(y - h * dy, rows), reflect_index(x - h * dx, cols)
            out[y, x] = slice_[yp, xp] - 2.0 * slice_[y, x] + slice_[ym, xm]
    return out


def test_second_derivative_of_quadratic_is_two():
    x = np.tile(np.arange(12, dtype=np.float64) ** 2, (8, 1))
    out = second_derivative(x, "horizontal", 3)
    assert np.allclose(out[:, 1:-1], 2.0)


def test_second_derivative_constant_slice_zero():
    for direction in DIRECTION_STEPS:
        for scale in (3, 5):
            out = second_derivative(np.full((9, 9), 3.7), direction, scale)
            assert np.all(out == 0.0)


def test_second_derivative_linear_ramp_zero_interior():
    x = np.tile(np.arange(16, dtype=np.float64), (8, 1))
    out = second_derivative(x, "horizontal", 5)
    assert np.allclose(out[:, 2:-2], 0.0)


def test_second_derivative_scale_too_large():
    with pytest.raises(ValueError, match="too large"):
        second_derivative(np.zeros((8, 8)), "horizontal", 17)


def test_second_derivative_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for direction in DIRECTION_STEPS:
        for scale in (3, 5, 7):
            slice_ = rng.normal(size=(8, 8))
            got = second_derivative(slice_, direction, scale)
            want = loop_second_derivative(slice_, direction, scale)
            assert np.abs(got - want).max() < 1e-12


def test_first_derivative_of_ramp():
    x = np.tile(np.arange(16, dtype=np.float64), (8, 1))
    out = first_derivative(x, "horizontal", 3)
    # I(p+1) - I(p-1) = 2 at interior pixels
    assert np.allclose(out[:, 1:-1], 2.0)


def test_geig_constant_slice_uniform_channels():
    ges = geig_transform(np.zeros((8, 8)), GeigConfig())
    assert ges.data.shape == (8, 8, 9)
    assert np.allclose(ges.derivative_channels, 1.0 / 8.0)


def test_geig_single_direction_single_scale_channel_is_one():
    cfg = GeigConfig(directions=("horizontal",), scales=(3,))
    ges = geig_transform(np.random.default_rng(1).normal(size=(8, 8)), cfg)
    assert ges.derivative_channels.shape == (8, 8, 1)
    assert np.allclose(ges.derivative_channels, 1.0)


def test_geig_softmax_matches_scalar_oracle():
    # derivative values (2, 0, ..., 0) -> channel0 = e^2/(e^2+7), rest 1/(e^2+7)
    vals = np.array([2.0, 0, 0, 0, 0, 0, 0, 0])
    expected0 = np.exp(2.0) / (np.exp(2.0) + 7.0)
    expected_rest = 1.0 / (np.exp(2.0) + 7.0)
    e = np.exp(vals - vals.max())
    soft = e / e.sum()
    assert abs(soft[0] - expected0) < 1e-15
    assert np.allclose(soft[1:], expected_rest)


def test_geig_channel_sums_and_positivity():
    rng = np.random.default_rng(2)
    for _ in range(10):
        ges = geig_transform(rng.normal(size=(10, 12)), GeigConfig())
        sums = ges.derivative_channels.sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-6
        assert ges.derivative_channels.min() > 0.0


def test_geig_additive_intensity_invariance_exact():
    # integer-valued slices keep the shifted arithmetic lossless, so the
    # mathematically exact invariance is also bit-exact here
    rng = np.random.default_rng(3)
    slice_ = rng.integers(0, 100, size=(9, 9)).astype(np.float64)
    base = geig_transform(slice_, GeigConfig())
    for c in (1.0, 17.0, 256.0):
        shifted = geig_transform(slice_ + c, GeigConfig())
        assert np.array_equal(
            shifted.derivative_channels, base.derivative_channels
        )


def test_geig_mirror_consistency():
    # mirroring the slice left-right mirrors the outputs; the horizontal
    # channel is preserved because the second difference is symmetric in +-h
    rng = np.random.default_rng(4)
    slice_ = rng.normal(size=(8, 8))
    cfg = GeigConfig(directions=("horizontal", "vertical"), scales=(3,))
    a = geig_transform(slice_, cfg)
    b = geig_transform(slice_[:, ::-1], cfg)
    assert np.allclose(a.data, b.data[:, ::-1], atol=1e-12)


def test_edge_profile_channel_count_matches_geig_single_scale():
    slice_ = np.random.default_rng(5).normal(size=(8, 8))
    cfg = GeigConfig(scales=(3,))
    ges = geig_transform(slice_, cfg)
    ep = edge_profile(slice_, window=3)
    assert ep.data.shape == ges.data.shape


def test_edge_profile_constant_slice_uniform():
    ep = edge_profile(np.full((8, 8), 2.0), window=3)
    assert np.allclose(ep.derivative_channels, 0.25)
    assert np.all(ep.data[..., 0] == 0.0)  # constant slice normalizes to zero


def test_minmax_normalize():
    x = np.array([[1.0, 3.0], [2.0, 5.0]])
    out = minmax_normalize(x)
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all(minmax_normalize(np.full((4, 4), 9.0)) == 0.0)


def test_feature_spec_channels():
    assert FeatureSpec(kind="geig").channels == 9
    assert FeatureSpec(kind="edge_profile").channels == 5
    fs = FeatureSpec(kind="geig", geig=GeigConfig(include_intensity=False))
    assert fs.channels == 8


def test_feature_spec_apply_shapes():
    slice_ = np.random.default_rng(6).normal(size=(8, 10))
    for kind in ("geig", "edge_profile"):
        fs = FeatureSpec(kind=kind)
        out = fs.apply(slice_)
        assert out.data.shape == (8, 10, fs.channels)


def test_geig_config_validation():
    with pytest.raises(ValueError):
        GeigConfig(scales=(4,))
    with pytest.raises(ValueError):
        GeigConfig(scales=())
    with pytest.raises(ValueError):
        GeigConfig(directions=("sideways",))
