"""Dynamic-range statistics and the rules that turn them into format parameters."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .network import (
    Convolution,
    NetworkSpec,
    ParameterSet,
    accumulator_width,
    forward_full,
    macs_per_output,
)

FULL_PRECISION_BITS = 32


@dataclass
class RangeStats:
    """Range of one value group: a layer's parameters or its outputs."""

    layer: str
    group: str
    max_abs: float = 0.0
    pow2_histogram: Dict[int, int] = field(default_factory=dict)
    sample_count: int = 0
    zero_count: int = 0

    @property
    def group_id(self) -> Tuple[str, str]:
        return self.layer, self.group

    def merge(self, other: "RangeStats") -> "RangeStats":
        if other.group_id != self.group_id:
            raise ValueError(f"cannot merge {self.group_id} with {other.group_id}")
        hist = Counter(self.pow2_histogram)
        hist.update(other.pow2_histogram)
        return RangeStats(self.layer, self.group, max(self.max_abs, other.max_abs),
                          dict(sorted(hist.items())), self.sample_count + other.sample_count,
                          self.zero_count + other.zero_count)


def range_stats(values: np.ndarray, layer: str, group: str) -> RangeStats:
    """Max magnitude plus a histogram of floor(log2|v|) over the non-zero values."""
    v = np.abs(np.asarray(values, dtype=np.float64).ravel())
    nz = v[v > 0]
    _, e = np.frexp(nz)
    bins, counts = np.unique(e - 1, return_counts=True)
    return RangeStats(layer, group, float(v.max()) if v.size else 0.0,
                      {int(b): int(c) for b, c in zip(bins, counts)}, int(v.size),
                      int(v.size - nz.size))


def collect_stats(net: NetworkSpec, params: ParameterSet,
                  sample_batches: Iterable[np.ndarray]) -> List[RangeStats]:
    """One RangeStats per (conv/fc layer, {params, outputs}); outputs from full-precision passes."""
    batches = list(sample_batches)
    if not batches:
        raise ValueError("collect_stats needs at least one sample batch")
    plain = net.without_quant()
    stats: Dict[Tuple[str, str], RangeStats] = {}
    index = {layer.name: i for i, layer in enumerate(net.layers)}
    for layer in net.quantizable_layers():
        p = params[layer.name]
        stats[(layer.name, "params")] = range_stats(
            np.concatenate([p.weights.ravel(), p.bias.ravel()]), layer.name, "params")
    for batch in batches:
        acts, _ = forward_full(plain, params, batch)
        for layer in net.quantizable_layers():
            s = range_stats(acts[index[layer.name]], layer.name, "outputs")
            key = (layer.name, "outputs")
            stats[key] = stats[key].merge(s) if key in stats else s
    order = [(layer.name, g) for layer in net.quantizable_layers() for g in ("params", "outputs")]
    return [stats[k] for k in order]


def input_stats(sample_batches: Iterable[np.ndarray]) -> RangeStats:
    """Range of the network input itself (fed to the first quantized layer)."""
    out = None
    for batch in sample_batches:
        s = range_stats(batch, "data", "inputs")
        out = s if out is None else out.merge(s)
    if out is None:
        raise ValueError("input_stats needs at least one sample batch")
    return out


def _max_abs(stats: Union[RangeStats, float]) -> float:
    return stats.max_abs if isinstance(stats, RangeStats) else float(stats)


IL_RULES = ("plus_one", "no_saturation")


def choose_integer_length(stats: Union[RangeStats, float], is_output: bool = False,
                          rule: str = "plus_one") -> int:
    """Integer bits (sign included) for a group; layer outputs get one bit less.

    ``plus_one``: ceil(log2(max + 1)), never below 1.
    ``no_saturation``: the smallest IL with 2^(IL-1) > max, i.e. floor(log2 max) + 2.
    It may be zero or negative for groups bounded well below 1, which gives
    fractional lengths beyond the bit-width.  An all-zero group gets 1.
    """
    if rule not in IL_RULES:
        raise ValueError(f"unknown integer-length rule {rule!r}")
    m = _max_abs(stats)
    if m < 0:
        raise ValueError("max_abs must be non-negative")
    if rule == "no_saturation":
        if m == 0:
            return 1
        _, e = math.frexp(m)
        return e + 1 - int(is_output)
    il = math.ceil(math.log2(m + 1))
    if is_output:
        il -= 1
    return max(il, 1)


def choose_exponent_bits(stats: Union[RangeStats, float]) -> int:
    """Exponent bits for a minifloat covering the group maximum; at least 2."""
    m = _max_abs(stats)
    if m <= 0 or math.log2(m) - 1 <= 0:
        return 2
    return max(2, math.ceil(math.log2(math.log2(m) - 1) + 1))


@dataclass
class LayerComplexity:
    name: str
    kind: str
    macs: int
    param_count: int
    acc_bits: int
    output_count: int


def complexity_report(net: NetworkSpec, input_bits: Optional[int] = None,
                      param_bits: Optional[int] = None) -> List[LayerComplexity]:
    """Per conv/fc layer MACs, parameter count and adder-tree width for one input sample.

    Bit-widths default to each layer's configured formats, else 32.
    """
    out = []
    shapes = net.output_shapes
    for i, layer in enumerate(net.layers):
        if not layer.quantizable:
            continue
        in_shape = net.input_shape_of(i)
        out_count = int(np.prod(shapes[i]))
        if isinstance(layer.kind, Convolution):
            m_out, r, c = shapes[i]
            n_in, k = in_shape[0], layer.kind.kernel
            macs = r * c * m_out * n_in * k * k
            params = m_out * n_in * k * k + m_out
            kind = "conv"
        else:
            n_in, m_out = int(np.prod(in_shape)), layer.kind.out_features
            macs = n_in * m_out
            params = n_in * m_out + m_out
            kind = "fc"
        q = layer.quant
        m = input_bits or (q.input_format.bit_width if q and q.input_format else FULL_PRECISION_BITS)
        n = param_bits or (q.param_format.bit_width if q and q.param_format else FULL_PRECISION_BITS)
        out.append(LayerComplexity(layer.name, kind, macs, params,
                                   accumulator_width(m, n, macs_per_output(net, layer.name)),
                                   out_count))
    return out


def stats_to_block(stats: List[RangeStats]):
    block = []
    for s in stats:
        block.append(("group", [
            ("layer", s.layer), ("kind", s.group), ("max_abs", s.max_abs),
            ("samples", s.sample_count), ("zeros", s.zero_count),
            ("histogram", [(f"2^{e}", c) for e, c in sorted(s.pow2_histogram.items())]),
        ]))
    return block
