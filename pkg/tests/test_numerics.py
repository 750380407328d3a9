import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbrew.numerics import (
    NEAREST,
    ConfigurationError,
    DynamicFixedPointFormat,
    FixedPointFormat,
    MinifloatFormat,
    PowerOfTwoFormat,
    RoundingMode,
    decode_pow2,
    make_rng,
    quantize,
    quantize_dynamic_fixed,
    quantize_fixed,
    quantize_minifloat,
    quantize_pow2,
    quantize_tensor,
    round_nearest_even,
    round_stochastic,
    sample_pow2,
)


# ---------------------------------------------------------------- oracles
# Each oracle lists every representable value with an integer "code" whose
# parity decides ties, then picks the nearest by brute force.

def fixed_grid(fmt):
    codes = np.arange(-2 ** (fmt.bit_width - 1), 2 ** (fmt.bit_width - 1))
    return codes * 2.0 ** -fmt.fractional_length, codes


def dynamic_grid(fmt):
    m = np.arange(2 ** (fmt.bit_width - 1))
    codes = np.concatenate([-m[::-1], m[1:]])
    return codes * 2.0 ** -fmt.fractional_length, codes


def minifloat_grid(fmt):
    vals, codes = [0.0], [0]
    for e in range(1, 2 ** fmt.exponent_bits):
        for m in range(2 ** fmt.mantissa_bits):
            v = 2.0 ** (e - fmt.bias) * (1 + m / 2 ** fmt.mantissa_bits)
            vals += [v, -v]
            codes += [m, m]
    return np.array(vals), np.array(codes)


def oracle_nearest(x, grid, codes):
    d = np.abs(grid[None, :] - x[:, None])
    best = d.min(axis=1, keepdims=True)
    tie = d == best
    out = np.empty_like(x)
    for i in range(len(x)):
        cand = np.flatnonzero(tie[i])
        if len(cand) > 1:
            even = [c for c in cand if codes[c] % 2 == 0]
            cand = even or cand
        out[i] = grid[cand[0]]
    return out


def minifloat_oracle(x, fmt):
    """Nearest normal value; a tie picks the even multiple of the finer neighbour's step."""
    grid = np.unique(minifloat_grid(fmt)[0])
    out = np.empty_like(x)
    for i, v in enumerate(x):
        d = np.abs(grid - v)
        cand = grid[d == d.min()]
        if len(cand) == 2 and cand.min() * cand.max() > 0:
            a = cand[np.argmin(np.abs(cand))]
            ulp = 2.0 ** (math.floor(math.log2(abs(a))) - fmt.mantissa_bits)
            cand = [c for c in cand if (c / ulp) % 2 == 0]
        out[i] = cand[0]
    return np.where(np.abs(x) < fmt.min_normal, 0.0, out)


def probe_points(grid, rng, n_random=200):
    g = np.unique(grid)
    mids = (g[1:] + g[:-1]) / 2
    span = max(abs(g[0]), abs(g[-1]))
    beyond = np.array([g[0] - 1, g[-1] + 1, 3 * span, -3 * span, g[-1] + (g[-1] - g[-2]) / 2])
    rand = rng.uniform(-1.5 * span, 1.5 * span, n_random)
    return np.concatenate([g, mids, mids + 1e-9 * span, mids - 1e-9 * span, beyond, rand])


def fixed_formats(max_bits=10):
    for b in range(2, max_bits + 1):
        for il in range(1, b + 1):
            yield FixedPointFormat(il, b - il)


def dynamic_formats(max_bits=10):
    for b in range(2, max_bits + 1):
        for fl in range(-3, b + 4):
            yield DynamicFixedPointFormat(b, fl)


def minifloat_formats(max_bits=10):
    for e in range(1, max_bits):
        for m in range(0, max_bits - e):
            yield MinifloatFormat(e, m)


# ------------------------------------------------------ documented values

@pytest.mark.parametrize("x, expected", [(8.5, 7.9375), (0.3, 0.3125), (0.15625, 0.125)])
def test_fixed_q44_values(x, expected):
    assert quantize_fixed(x, FixedPointFormat(4, 4)) == expected


@pytest.mark.parametrize("x, fl, expected", [(-0.5, 7, -0.5), (1.0, 7, 0.9921875),
                                             (0.013, 7, 0.015625)])
def test_dynamic_fixed_values(x, fl, expected):
    assert quantize_dynamic_fixed(x, DynamicFixedPointFormat(8, fl)) == expected


@pytest.mark.parametrize("x, expected", [(1.0, 1.0), (1000.0, 480.0), (0.001, 0.0)])
def test_minifloat_values(x, expected):
    assert quantize_minifloat(x, MinifloatFormat(4, 3)) == expected


@pytest.mark.parametrize("w, expected", [(-0.25, (-1, -2)), (0.7, (1, -1)), (0.002, (1, -8)),
                                         (0.0, (1, -8))])
def test_pow2_values(w, expected):
    assert quantize_pow2(w, PowerOfTwoFormat()) == expected


@pytest.mark.parametrize("x, eps, expected", [(0.5, 0.5, 0.5), (0.75, 0.5, 1.0), (0.3, 0.25, 0.25)])
def test_round_nearest_even_values(x, eps, expected):
    assert round_nearest_even(x, eps) == expected


def test_format_properties():
    q = FixedPointFormat(4, 4)
    assert (q.bit_width, q.max_value, q.min_value, q.step) == (8, 7.9375, -8.0, 0.0625)
    d = DynamicFixedPointFormat(8, 7)
    assert d.max_value == 127 / 128 and d.integer_length == 1
    f = MinifloatFormat(4, 3)
    assert (f.bit_width, f.bias, f.min_normal, f.max_value) == (8, 7, 2.0 ** -6, 480.0)
    assert PowerOfTwoFormat().bit_width == 4


@pytest.mark.parametrize("make", [
    lambda: FixedPointFormat(0, 4), lambda: FixedPointFormat(1, 0), lambda: FixedPointFormat(4, -1),
    lambda: DynamicFixedPointFormat(1, 0), lambda: MinifloatFormat(0, 3),
    lambda: MinifloatFormat(2, -1), lambda: PowerOfTwoFormat(2, -8, -1),
    lambda: PowerOfTwoFormat(4, -1, -8), lambda: RoundingMode("up"),
])
def test_invalid_formats_rejected(make):
    with pytest.raises(ConfigurationError):
        make()


def test_negative_fl_allowed_when_requested():
    fmt = FixedPointFormat(6, -2, allow_negative_fl=True)
    assert quantize_fixed(5.0, fmt) == 4.0


def test_nonpositive_epsilon_rejected():
    with pytest.raises(ConfigurationError):
        round_nearest_even(1.0, 0.0)
    with pytest.raises(ConfigurationError):
        round_stochastic(1.0, -1.0, make_rng(0))


# ------------------------------------------------------ oracle equivalence

def test_fixed_matches_enumeration_oracle():
    rng = np.random.default_rng(0)
    for fmt in fixed_formats():
        grid, codes = fixed_grid(fmt)
        x = probe_points(grid, rng)
        np.testing.assert_array_equal(quantize_fixed(x, fmt), oracle_nearest(x, grid, codes),
                                      err_msg=str(fmt))


def test_dynamic_fixed_matches_enumeration_oracle():
    rng = np.random.default_rng(1)
    for fmt in dynamic_formats():
        grid, codes = dynamic_grid(fmt)
        x = probe_points(grid, rng)
        np.testing.assert_array_equal(quantize_dynamic_fixed(x, fmt), oracle_nearest(x, grid, codes),
                                      err_msg=str(fmt))


def test_minifloat_matches_enumeration_oracle():
    rng = np.random.default_rng(2)
    for fmt in minifloat_formats():
        grid, _ = minifloat_grid(fmt)
        x = probe_points(grid, rng)
        np.testing.assert_array_equal(quantize_minifloat(x, fmt), minifloat_oracle(x, fmt),
                                      err_msg=str(fmt))


def test_pow2_matches_log_scale_brute_force():
    fmt = PowerOfTwoFormat()
    exps = np.arange(fmt.exponent_min, fmt.exponent_max + 1)
    w = np.random.default_rng(3).uniform(-1, 1, 5000)
    sign, e = quantize_pow2(w, fmt)
    # nearest in log2 space among the allowed exponents
    dist = np.abs(np.log2(np.abs(w))[:, None] - exps[None, :])
    np.testing.assert_array_equal(e, exps[np.argmin(dist, axis=1)])
    np.testing.assert_array_equal(sign, np.where(w < 0, -1, 1))


def test_quantize_tensor_matches_scalar_quantizer():
    fmt = FixedPointFormat(4, 4)
    t = np.random.default_rng(4).normal(0, 3, (7, 5)).astype(np.float32)
    q = quantize_tensor(t, fmt)
    assert q.shape == t.shape and q.dtype == np.float32
    expected = [[quantize_fixed(float(v), fmt) for v in row] for row in t]
    np.testing.assert_array_equal(q, np.array(expected, np.float32))


# --------------------------------------------------------------- properties

def grid_min(fmt):
    # two's complement reaches one step further on the negative side
    return fmt.min_value if isinstance(fmt, FixedPointFormat) else -fmt.max_value


ALL_FORMATS = (list(fixed_formats(8)) + list(dynamic_formats(8)) + list(minifloat_formats(8))
               + [PowerOfTwoFormat()])
finite = st.floats(-1e4, 1e4, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(ALL_FORMATS), finite)
def test_idempotent(fmt, x):
    q = quantize(x, fmt)
    assert quantize(q, fmt) == q


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(ALL_FORMATS), finite)
def test_saturation(fmt, x):
    q = quantize(x, fmt)
    lo = grid_min(fmt)
    assert lo <= q <= fmt.max_value
    if x >= fmt.max_value:
        assert q == fmt.max_value
    if x <= lo:
        assert q == lo


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(list(fixed_formats(8))), finite, finite)
def test_fixed_monotone(fmt, x, y):
    lo, hi = min(x, y), max(x, y)
    assert quantize_fixed(lo, fmt) <= quantize_fixed(hi, fmt)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(list(dynamic_formats(8)) + list(minifloat_formats(8))), finite)
def test_sign_symmetry(fmt, x):
    assert quantize(-x, fmt) == -quantize(x, fmt)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(ALL_FORMATS))
def test_zeros_stay_zero(fmt):
    if isinstance(fmt, PowerOfTwoFormat):
        return  # no zero encoding
    np.testing.assert_array_equal(quantize_tensor(np.zeros((3, 4)), fmt), 0.0)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(list(fixed_formats(8)) + list(dynamic_formats(8)) + list(minifloat_formats(8))),
       finite, st.integers(0, 2 ** 32))
def test_stochastic_lands_on_neighbours(fmt, x, seed):
    q = quantize(x, fmt, RoundingMode.stochastic(seed))
    assert quantize(q, fmt) == q
    assert grid_min(fmt) <= q <= fmt.max_value


# ------------------------------------------------------- stochastic rounding

N = 100_000


def test_stochastic_unbiased():
    eps, g = 0.125, 0.75
    x = g + 0.25 * eps
    r = round_stochastic(np.full(N, x), eps, make_rng(7))
    assert set(np.unique(r)) <= {g, g + eps}
    assert abs(np.mean(r == g + eps) - 0.25) <= 0.01
    assert abs(r.mean() - x) <= 3 * (eps / 2) / math.sqrt(N)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("x", [-1.3, 0.01, 2.71828, 5.5])
def test_stochastic_mean_matches_input(seed, x):
    eps = 0.25
    r = round_stochastic(np.full(N, x), eps, make_rng(seed))
    assert abs(r.mean() - x) <= 3 * (eps / 2) / math.sqrt(N)


def test_stochastic_on_grid_is_exact():
    x = np.arange(-8, 8) * 0.25
    np.testing.assert_array_equal(round_stochastic(x, 0.25, make_rng(1)), x)


def test_stochastic_quantizers_unbiased_inside_range():
    x = 0.3
    for fmt in (FixedPointFormat(4, 4), DynamicFixedPointFormat(8, 4), MinifloatFormat(4, 3)):
        q = quantize(np.full(N, x), fmt, RoundingMode.stochastic(3), make_rng(3))
        step = 2.0 ** -4 if not isinstance(fmt, MinifloatFormat) else 2.0 ** -5
        assert abs(q.mean() - x) <= 3 * (step / 2) / math.sqrt(N), fmt


def test_sample_pow2_unbiased_and_on_grid():
    fmt = PowerOfTwoFormat()
    w = -0.3
    sign, e = sample_pow2(np.full(N, w), fmt, make_rng(5))
    values = decode_pow2(sign, e)
    assert set(np.unique(values)) == {-0.25, -0.5}
    assert abs(values.mean() - w) <= 3 * 0.125 / math.sqrt(N)


def test_stochastic_deterministic_per_seed():
    x = np.random.default_rng(0).normal(size=1000)
    a = quantize(x, FixedPointFormat(3, 5), RoundingMode.stochastic(11))
    b = quantize(x, FixedPointFormat(3, 5), RoundingMode.stochastic(11))
    c = quantize(x, FixedPointFormat(3, 5), RoundingMode.stochastic(12))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_streams_independent_and_reproducible():
    a, b = make_rng(42, 0).random(5), make_rng(42, 1).random(5)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, make_rng(42, 0).random(5))


def test_nearest_is_default_and_scalar_types():
    assert NEAREST.kind == "nearest" and not NEAREST.is_stochastic
    assert isinstance(quantize_fixed(0.3, FixedPointFormat(4, 4)), float)
    assert quantize(1.234, None) == 1.234


def test_exhaustive_small_fixed_ties():
    # every half-way point of Q2.2 goes to the even code
    fmt = FixedPointFormat(2, 2)
    for k in range(-8, 7):
        mid = (k + 0.5) * 0.25
        expected = (k if k % 2 == 0 else k + 1) * 0.25
        assert quantize_fixed(mid, fmt) == min(expected, fmt.max_value)
