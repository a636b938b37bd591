import math

import numpy as np
import pytest

from idr.noise import (
    KERNEL_NAMES,
    BinomialSpec,
    CorrelatedSpec,
    GaussianSpec,
    ImpulseSpec,
    PoissonGaussianSpec,
    RngStream,
    apply_binomial,
    apply_correlated,
    apply_gaussian,
    apply_impulse,
    apply_poisson_gaussian,
    correlated_field,
    default_calibration,
    format_kernel,
    format_spec,
    named_kernel,
    parse_calibration,
    parse_kernel,
    parse_spec,
    sample_level,
)

MEGA = (1000, 1000, 1)


def lag1_autocorr(field: np.ndarray) -> float:
    f = field[..., 0]
    f = f - f.mean()
    return float((f[:, :-1] * f[:, 1:]).mean() / (f * f).mean())


# -- levels ---------------------------------------------------------------------

def test_degenerate_range():
    assert sample_level(GaussianSpec((25, 25)), RngStream(0)) == 25.0


def test_uniform_level_mean():
    rng = RngStream(3)
    draws = [GaussianSpec((0, 50)).sample_level(rng) for _ in range(100_000)]
    assert abs(np.mean(draws) - 25.0) < 0.5


def test_iso_draws_in_bounds():
    spec = PoissonGaussianSpec(iso_range=(800, 3200))
    rng = RngStream(4)
    draws = [spec.sample_level(rng) for _ in range(5000)]
    assert min(draws) >= 800 and max(draws) <= 3200


def test_range_validation():
    with pytest.raises(ValueError):
        GaussianSpec((20, 5))
    with pytest.raises(ValueError):
        BinomialSpec((0.0, 0.99))
    with pytest.raises(ValueError):
        GaussianSpec((-1, 5))


def test_test_levels_span_range():
    assert GaussianSpec((5, 20)).test_levels(4) == [5.0, 10.0, 15.0, 20.0]


# -- streams --------------------------------------------------------------------

def test_stream_replay_and_separation():
    a = RngStream(9, 2).normal(100)
    b = RngStream(9, 2).normal(100)
    c = RngStream(9, 3).normal(100)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)
    assert RngStream(1).child("noise").normal(5).tobytes() == RngStream(1).child("noise").normal(5).tobytes()
    assert not np.array_equal(RngStream(1).child(0).normal(5), RngStream(1).child(1).normal(5))


def test_counter_advances():
    r = RngStream(0)
    start = r.counter
    r.normal(10)
    assert r.counter > start


# -- gaussian -------------------------------------------------------------------

def test_gaussian_zero_sigma_identity(rng):
    img = rng.random((8, 8, 3), dtype=np.float32)
    out = apply_gaussian(img, 0.0, RngStream(0))
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_gaussian_variance_and_mean():
    sigma = 25 / 255
    img = np.full(MEGA, 0.5)
    res = apply_gaussian(img, sigma, RngStream(11)) - img
    assert abs(res.var() / sigma**2 - 1) < 0.01
    assert abs(res.mean()) < 3 * sigma / math.sqrt(res.size)


def test_gaussian_deterministic_and_pure(rng):
    img = rng.random((16, 16, 1), dtype=np.float32)
    keep = img.copy()
    a = apply_gaussian(img, 0.1, RngStream(5, 1))
    b = apply_gaussian(img, 0.1, RngStream(5, 1))
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(img, keep)
    assert a.dtype == np.float32


def test_gaussian_not_clipped():
    out = apply_gaussian(np.zeros((100, 100, 1)), 0.5, RngStream(0))
    assert out.min() < 0 and out.max() > 1


# -- poisson-gaussian -----------------------------------------------------------

@pytest.mark.parametrize("iso", [800, 1600, 3200])
@pytest.mark.parametrize("y", [0.0, 0.25, 0.75])
def test_poisson_gaussian_variance(iso, y):
    spec = PoissonGaussianSpec()
    k, sr = spec.gain(iso)
    img = np.full(MEGA, y)
    res = apply_poisson_gaussian(img, iso, spec, RngStream(int(iso + 10 * y)))
    expect = k * y + sr**2
    assert abs(res.var() / expect - 1) < 0.05
    # shot noise is mean-preserving
    assert abs(res.mean() - y) < 4 * math.sqrt(expect / res.size)


def test_poisson_gaussian_small_gain_limit():
    spec = PoissonGaussianSpec(k0=1e-6, sigma0=0.02)
    img = np.full(MEGA, 0.25)
    res = apply_poisson_gaussian(img, 100, spec, RngStream(7)) - img
    var = res.var()
    assert abs(var / (0.02**2) - 1) < 0.05
    # Gaussian moments: skewness near 0, kurtosis near 3
    z = (res - res.mean()) / math.sqrt(var)
    assert abs((z**3).mean()) < 0.02
    assert abs((z**4).mean() - 3) < 0.05


def test_calibration_defaults():
    k0, s0 = default_calibration()
    assert k0 == pytest.approx(0.0004) and s0 == pytest.approx(0.0006)
    spec = PoissonGaussianSpec()
    assert spec.gain(1600) == pytest.approx((0.0064, 0.0096))


def test_calibration_parse_fit():
    k0, s0 = parse_calibration("# iso k sigma\n200 0.002 0.004\n400 0.004 0.008\n")
    assert k0 == pytest.approx(0.001) and s0 == pytest.approx(0.002)
    with pytest.raises(ValueError):
        parse_calibration("100 0.1\n")
    with pytest.raises(ValueError):
        parse_calibration("")


# -- binomial / impulse ---------------------------------------------------------

def test_binomial_extremes(rng):
    img = rng.random((32, 32, 3), dtype=np.float32) + 0.1
    np.testing.assert_array_equal(apply_binomial(img, 0.0, RngStream(0)), img)
    assert not apply_binomial(img, 1.0, RngStream(0)).any()


def test_binomial_mask_shared_across_channels(rng):
    img = rng.random((64, 64, 3), dtype=np.float32) + 0.1
    out = apply_binomial(img, 0.5, RngStream(1))
    zero = out == 0
    assert (zero.all(axis=2) == zero.any(axis=2)).all()


def test_binomial_fraction():
    img = np.ones(MEGA)
    frac = float((apply_binomial(img, 0.5, RngStream(2)) == 0).mean())
    assert abs(frac - 0.5) < 0.004


def test_impulse_extremes():
    img = np.full(MEGA, 0.3)
    np.testing.assert_array_equal(apply_impulse(img, 0.0, RngStream(0)), img)
    out = apply_impulse(img, 1.0, RngStream(3))
    assert set(np.unique(out)) <= {0.0, 1.0}
    ones = float(out.mean())
    assert abs(ones - 0.5) < 3 * math.sqrt(0.25 / out.size)


def test_impulse_fraction():
    img = np.full(MEGA, 0.3)
    frac = float((apply_impulse(img, 0.5, RngStream(4)) != img).mean())
    assert abs(frac - 0.5) < 0.002


def test_non_zero_mean_flags():
    assert not BinomialSpec().zero_mean and not ImpulseSpec().zero_mean
    assert GaussianSpec().zero_mean and CorrelatedSpec().zero_mean


# -- correlated -----------------------------------------------------------------

def test_correlated_delta_matches_gaussian():
    sigma = 10 / 255
    img = np.zeros(MEGA)
    a = apply_correlated(img, sigma, named_kernel("delta"), RngStream(5))
    b = apply_gaussian(img, sigma, RngStream(6))
    assert abs(a.var() / b.var() - 1) < 0.01
    assert abs(lag1_autocorr(a)) < 0.01


def test_correlated_zero_kernel_identity(rng):
    img = rng.random((20, 20, 1))
    np.testing.assert_array_equal(apply_correlated(img, 0.1, np.zeros((3, 3)), RngStream(0)), img)


def test_correlated_lag1_pair_kernel():
    field = correlated_field(MEGA, 1.0, np.array([[1.0, 1.0]]), RngStream(8))
    assert abs(lag1_autocorr(field) / 0.5 - 1) < 0.05


def test_correlated_zero_mean():
    field = correlated_field(MEGA, 0.1, named_kernel("gauss3"), RngStream(9))
    se = field.std() * 3 / math.sqrt(field.size)  # conservative for a 3x3 correlation window
    assert abs(field.mean()) < 3 * se


@pytest.mark.parametrize("name", KERNEL_NAMES)
def test_registry_kernels_unit_energy(name):
    g = named_kernel(name)
    assert (g**2).sum() == pytest.approx(1.0, abs=1e-9)


def test_kernel_file_round_trip():
    g = named_kernel("ring5")
    np.testing.assert_array_equal(parse_kernel(format_kernel(g)), g)
    with pytest.raises(ValueError, match="2x2"):
        parse_kernel("2 2\n1 2 3\n")
    with pytest.raises(ValueError):
        parse_kernel("0 0\n")
    with pytest.raises(KeyError):
        named_kernel("g1")


# -- spec files -----------------------------------------------------------------

def test_spec_round_trips():
    specs = [
        GaussianSpec((5, 20)),
        PoissonGaussianSpec(0.001, 0.002, (800, 3200)),
        BinomialSpec((0.1, 0.9)),
        ImpulseSpec((0.5, 0.5)),
        CorrelatedSpec((2, 5), named_kernel("hline5"), "hline5"),
    ]
    for spec in specs:
        assert parse_spec(format_spec(spec)) == spec


def test_spec_parse_errors(tmp_path):
    with pytest.raises(ValueError, match="variant"):
        parse_spec("sigma_range = 1 2\n")
    with pytest.raises(ValueError, match="unknown keys"):
        parse_spec("variant = gaussian\nsigma = 5\n")
    with pytest.raises(ValueError, match="unknown noise variant"):
        parse_spec("variant = speckle\n")
    with pytest.raises(ValueError):
        parse_spec("variant gaussian\n")


def test_spec_user_kernel_and_calibration(tmp_path):
    (tmp_path / "k.txt").write_text("1 2\n1 1\n")
    (tmp_path / "cal.txt").write_text("100 0.001 0.003\n")
    spec = parse_spec("variant = correlated\nsigma = 4\nkernel = k.txt\n", tmp_path)
    np.testing.assert_array_equal(spec.kernel, [[1.0, 1.0]])
    pg = parse_spec("variant: poisson_gaussian\ncalibration: cal.txt\n", tmp_path)
    assert (pg.k0, pg.sigma0) == pytest.approx((0.001, 0.003))
