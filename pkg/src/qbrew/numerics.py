"""Limited-precision number formats emulated on top of ordinary floats.

Every quantizer maps real values onto the value grid of a format and returns
real values again; nothing is bit-packed.  All functions accept scalars or
numpy arrays and return the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class ConfigurationError(ValueError):
    """Raised for number formats or rounding modes that cannot exist."""


@dataclass(frozen=True)
class FixedPointFormat:
    """Two's-complement fixed point Q[IL.FL]; IL counts the sign bit."""

    integer_length: int
    fractional_length: int
    allow_negative_fl: bool = False

    def __post_init__(self):
        if self.bit_width < 2:
            raise ConfigurationError(f"fixed point needs >= 2 bits, got {self.bit_width}")
        if not self.allow_negative_fl and (self.fractional_length < 0 or self.integer_length < 1):
            raise ConfigurationError(
                f"Q{self.integer_length}.{self.fractional_length} needs IL >= 1 and FL >= 0 "
                "(use dynamic fixed point for wider ranges)"
            )

    @property
    def bit_width(self) -> int:
        return self.integer_length + self.fractional_length

    @property
    def step(self) -> float:
        return 2.0 ** -self.fractional_length

    @property
    def max_value(self) -> float:
        return 2.0 ** (self.integer_length - 1) - self.step

    @property
    def min_value(self) -> float:
        return -(2.0 ** (self.integer_length - 1))

    def __str__(self):
        return f"Q{self.integer_length}.{self.fractional_length}"


@dataclass(frozen=True)
class DynamicFixedPointFormat:
    """Sign-magnitude fixed point whose fractional length is set per group."""

    bit_width: int
    fractional_length: int

    def __post_init__(self):
        if self.bit_width < 2:
            raise ConfigurationError(f"dynamic fixed point needs >= 2 bits, got {self.bit_width}")

    @property
    def step(self) -> float:
        return 2.0 ** -self.fractional_length

    @property
    def max_value(self) -> float:
        return (2 ** (self.bit_width - 1) - 1) * self.step

    @property
    def integer_length(self) -> int:
        return self.bit_width - self.fractional_length

    def __str__(self):
        return f"DFP{self.bit_width}(fl={self.fractional_length})"


@dataclass(frozen=True)
class MinifloatFormat:
    """Small float: 1 sign bit, no INF/NaN, no denormals."""

    exponent_bits: int
    mantissa_bits: int

    def __post_init__(self):
        if self.exponent_bits < 1 or self.mantissa_bits < 0:
            raise ConfigurationError(
                f"minifloat needs >= 1 exponent bit and >= 0 mantissa bits, "
                f"got e={self.exponent_bits} m={self.mantissa_bits}"
            )

    @property
    def bit_width(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def min_exponent(self) -> int:
        # stored exponent 0 is reserved for the value zero
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        # the all-ones exponent is an ordinary binade
        return 2 ** self.exponent_bits - 1 - self.bias

    @property
    def min_normal(self) -> float:
        return 2.0 ** self.min_exponent

    @property
    def max_value(self) -> float:
        return 2.0 ** self.max_exponent * (2.0 - 2.0 ** -self.mantissa_bits)

    def __str__(self):
        return f"FP{self.bit_width}(e={self.exponent_bits},m={self.mantissa_bits})"


@dataclass(frozen=True)
class PowerOfTwoFormat:
    """Weights restricted to +-2**e; multiplication becomes a shift."""

    exponent_bits: int = 4
    exponent_min: int = -8
    exponent_max: int = -1
    signed: bool = True

    def __post_init__(self):
        if self.exponent_min > self.exponent_max:
            raise ConfigurationError("exponent_min must not exceed exponent_max")
        if self.exponent_max - self.exponent_min + 1 > 2 ** self.exponent_bits:
            raise ConfigurationError(
                f"{self.exponent_max - self.exponent_min + 1} exponents do not fit "
                f"in {self.exponent_bits} bits"
            )

    @property
    def bit_width(self) -> int:
        return self.exponent_bits

    @property
    def max_value(self) -> float:
        return 2.0 ** self.exponent_max

    def __str__(self):
        return f"POW2[{self.exponent_min},{self.exponent_max}]"


NumberFormat = Union[FixedPointFormat, DynamicFixedPointFormat, MinifloatFormat, PowerOfTwoFormat]


@dataclass(frozen=True)
class RoundingMode:
    kind: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("nearest", "stochastic"):
            raise ConfigurationError(f"unknown rounding mode {self.kind!r}")

    @classmethod
    def nearest(cls) -> "RoundingMode":
        return cls("nearest")

    @classmethod
    def stochastic(cls, seed: int) -> "RoundingMode":
        return cls("stochastic", int(seed))

    @property
    def is_stochastic(self) -> bool:
        return self.kind == "stochastic"


NEAREST = RoundingMode.nearest()


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator for ``stream`` derived from ``seed``.

    Distinct streams are statistically independent, so tensors quantized in
    parallel each get their own reproducible stream.
    """
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream) & (2**64 - 1)])
    return np.random.Generator(np.random.Philox(ss))


def _rng_for(mode: RoundingMode, rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else make_rng(mode.seed)


def _like(x, result):
    if np.ndim(x) == 0:
        return float(result)
    return result


def round_nearest_even(x, epsilon: float):
    """Nearest multiple of ``epsilon``; exact ties go to the even multiple."""
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    a = np.asarray(x, dtype=np.float64)
    return _like(x, np.rint(a / epsilon) * epsilon)


def _stochastic_multiple(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lower = np.floor(a)
    frac = a - lower
    return lower + (rng.random(a.shape) < frac)


def round_stochastic(x, epsilon: float, rng: np.random.Generator):
    """Round down or up to a multiple of ``epsilon``, unbiased in expectation."""
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    a = np.asarray(x, dtype=np.float64)
    return _like(x, _stochastic_multiple(a / epsilon, rng) * epsilon)


def quantize_fixed(x, fmt: FixedPointFormat, mode: RoundingMode = NEAREST,
                   rng: Optional[np.random.Generator] = None):
    a = np.asarray(x, dtype=np.float64) / fmt.step
    if mode.is_stochastic:
        m = _stochastic_multiple(a, _rng_for(mode, rng))
    else:
        m = np.rint(a)
    q = np.clip(m * fmt.step, fmt.min_value, fmt.max_value)
    return _like(x, q)


def quantize_dynamic_fixed(x, fmt: DynamicFixedPointFormat, mode: RoundingMode = NEAREST,
                           rng: Optional[np.random.Generator] = None):
    a = np.asarray(x, dtype=np.float64)
    if mode.is_stochastic:
        q = _stochastic_multiple(a / fmt.step, _rng_for(mode, rng)) * fmt.step
        q = np.clip(q, -fmt.max_value, fmt.max_value)
    else:
        mag = np.minimum(np.rint(np.abs(a) / fmt.step) * fmt.step, fmt.max_value)
        q = np.copysign(mag, a)
    return _like(x, q + 0.0)


def quantize_minifloat(x, fmt: MinifloatFormat, mode: RoundingMode = NEAREST,
                       rng: Optional[np.random.Generator] = None):
    a = np.asarray(x, dtype=np.float64)
    mag = np.abs(a)
    _, e = np.frexp(mag)
    binade = np.clip(e - 1, fmt.min_exponent, fmt.max_exponent)
    step = np.ldexp(1.0, binade - fmt.mantissa_bits)
    if mode.is_stochastic:
        q = _stochastic_multiple(mag / step, _rng_for(mode, rng)) * step
    else:
        q = np.rint(mag / step) * step
    q = np.minimum(q, fmt.max_value)
    q = np.where(mag < fmt.min_normal, 0.0, q)
    return _like(x, np.copysign(q, a) + 0.0)


def quantize_pow2(w, fmt: PowerOfTwoFormat = PowerOfTwoFormat()):
    """Encode weights as (sign, exponent) with exponent = round(log2|w|), clamped.

    Zero has no encoding and maps to the smallest magnitude, +2**exponent_min.
    """
    a = np.asarray(w, dtype=np.float64)
    mag = np.abs(a)
    with np.errstate(divide="ignore"):
        e = np.rint(np.log2(np.where(mag > 0, mag, 1.0)))
    e = np.where(mag > 0, e, fmt.exponent_min)
    e = np.clip(e, fmt.exponent_min, fmt.exponent_max).astype(np.int64)
    sign = np.where(a < 0, -1, 1).astype(np.int64) if fmt.signed else np.ones_like(e)
    if np.ndim(w) == 0:
        return int(sign), int(e)
    return sign, e


def sample_pow2(w, fmt: PowerOfTwoFormat, rng: np.random.Generator):
    """Stochastic (sign, exponent): pick between the two enclosing powers of two
    with probabilities proportional to linear distance."""
    a = np.asarray(w, dtype=np.float64)
    mag = np.abs(a)
    _, e = np.frexp(np.where(mag > 0, mag, 1.0))
    lower = (e - 1).astype(np.int64)
    p_up = np.where(mag > 0, mag / np.ldexp(1.0, lower) - 1.0, 0.0)
    exp = lower + (rng.random(a.shape) < p_up)
    exp = np.where(mag > 0, exp, fmt.exponent_min)
    exp = np.clip(exp, fmt.exponent_min, fmt.exponent_max).astype(np.int64)
    sign = np.where(a < 0, -1, 1).astype(np.int64) if fmt.signed else np.ones_like(exp)
    return sign, exp


def decode_pow2(sign, exponent):
    return sign * np.ldexp(1.0, exponent)


def grid_max(fmt: NumberFormat) -> float:
    return fmt.max_value


def quantize(x, fmt: Optional[NumberFormat], mode: RoundingMode = NEAREST,
             rng: Optional[np.random.Generator] = None):
    """Dispatch on the format type; ``fmt=None`` means full precision."""
    if fmt is None:
        return x
    if isinstance(fmt, FixedPointFormat):
        return quantize_fixed(x, fmt, mode, rng)
    if isinstance(fmt, DynamicFixedPointFormat):
        return quantize_dynamic_fixed(x, fmt, mode, rng)
    if isinstance(fmt, MinifloatFormat):
        return quantize_minifloat(x, fmt, mode, rng)
    if isinstance(fmt, PowerOfTwoFormat):
        if mode.is_stochastic:
            sign, e = sample_pow2(x, fmt, _rng_for(mode, rng))
        else:
            sign, e = quantize_pow2(np.asarray(x, dtype=np.float64), fmt)
        return _like(x, decode_pow2(sign, e))
    raise ConfigurationError(f"not a number format: {fmt!r}")


def quantize_tensor(t: np.ndarray, fmt: Optional[NumberFormat], mode: RoundingMode = NEAREST,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Elementwise quantization keeping shape and dtype (float32 unless given otherwise)."""
    t = np.asarray(t)
    dtype = t.dtype if np.issubdtype(t.dtype, np.floating) else np.float32
    if fmt is None:
        return t.astype(dtype, copy=True)
    return np.asarray(quantize(t, fmt, mode, rng), dtype=np.float64).astype(dtype)
