"""Automatic quantization: range analysis, per-part bit-width search, joint check, report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple


from . import io as qio
from .analysis import (
    RangeStats,
    choose_exponent_bits,
    choose_integer_length,
    IL_RULES,
    collect_stats,
    complexity_report,
    input_stats,
    stats_to_block,
)
from .network import Convolution, NetworkSpec, ParameterSet, QuantizationConfig
from .numerics import (
    DynamicFixedPointFormat,
    FixedPointFormat,
    MinifloatFormat,
    NumberFormat,
    PowerOfTwoFormat,
)
from .trainer import score

log = logging.getLogger(__name__)

SCHEMES = ("fixed", "dynamic_fixed", "minifloat", "pow2")
PARTS = ("conv", "fc", "outputs")
# joint-check escalation order: most sensitive part first
ESCALATION_ORDER = ("outputs", "fc", "conv")

Bits = Dict[str, Optional[int]]
Evaluator = Callable[[str, int], float]


class FlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantizationRequest:
    scheme: str
    error_margin: float = 1.0
    search_grid: Tuple[int, ...] = (16, 8, 4, 2)
    eval_subset_size: int = 1000
    stats_images: int = 100
    exhaustive: bool = False
    il_rule: str = "no_saturation"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.il_rule not in IL_RULES:
            raise ValueError(f"unknown integer-length rule {self.il_rule!r}")
        if self.error_margin < 0:
            raise ValueError("error_margin must be >= 0")
        grid = tuple(int(b) for b in self.search_grid)
        if not grid or any(a <= b for a, b in zip(grid, grid[1:])):
            raise ValueError(f"search_grid must be strictly decreasing, got {grid}")
        if min(grid) < 2:
            raise ValueError("bit-widths below 2 are not representable")
        object.__setattr__(self, "search_grid", grid)


@dataclass
class PartChoice:
    bits: int
    within_margin: bool
    trials: Dict[int, float] = field(default_factory=dict)


@dataclass
class QuantizationReport:
    scheme: str
    bit_widths: Dict[str, Optional[int]]
    configs: Dict[str, QuantizationConfig]
    baseline_accuracy: float
    quantized_accuracy: float
    error_margin: float
    finetuned_accuracy: Optional[float] = None
    integer_length: Optional[int] = None
    exponent_bits: Optional[int] = None
    layers: List[dict] = field(default_factory=list)
    search_log: List[Tuple[str, int, float]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    stats: List[RangeStats] = field(default_factory=list)
    seed: Optional[int] = None

    @property
    def total_param_bits(self) -> int:
        return sum(entry["param_count"] * entry["param_bits"] for entry in self.layers)

    def to_block(self) -> qio.Block:
        block: qio.Block = [("scheme", self.scheme)]
        if self.seed is not None:
            block.append(("seed", self.seed))
        block.append(("error_margin_pp", self.error_margin))
        block.append(("bit_widths", [(p, b if b is not None else "float32")
                                     for p, b in self.bit_widths.items()]))
        if self.integer_length is not None:
            block.append(("integer_length", self.integer_length))
        if self.exponent_bits is not None:
            block.append(("exponent_bits", self.exponent_bits))
        block += [("baseline_accuracy", round(self.baseline_accuracy, 6)),
                  ("quantized_accuracy", round(self.quantized_accuracy, 6))]
        if self.finetuned_accuracy is not None:
            block.append(("finetuned_accuracy", round(self.finetuned_accuracy, 6)))
        for name, cfg in self.configs.items():
            block.append(("layer", [("name", name)] + qio.quant_to_block(cfg)))
        for entry in self.layers:
            block.append(("memory", list(entry.items())))
        block.append(("total_param_bits", self.total_param_bits))
        for part, bits, acc in self.search_log:
            block.append(("trial", [("part", part), ("bits", bits), ("accuracy", round(acc, 6))]))
        for w in self.warnings:
            block.append(("warning", w))
        if self.stats:
            block.append(("range_stats", stats_to_block(self.stats)))
        return block

    def to_text(self) -> str:
        return qio.dump_text(self.to_block()) + "\n"


def search_part(part: str, request: QuantizationRequest, evaluator: Evaluator,
                baseline: float) -> PartChoice:
    """Smallest grid bit-width whose accuracy stays within the margin of ``baseline``.

    Binary search over the ascending grid, which presumes accuracy does not
    drop as bits are added; ``request.exhaustive`` evaluates every entry
    instead.  Falls back to the widest entry when nothing qualifies.
    """
    grid = sorted(request.search_grid)
    target = baseline - request.error_margin / 100.0
    trials: Dict[int, float] = {}

    def acc(bits: int) -> float:
        if bits not in trials:
            trials[bits] = evaluator(part, bits)
        return trials[bits]

    if request.exhaustive:
        passing = [b for b in grid if acc(b) >= target]
        if passing:
            return PartChoice(passing[0], True, trials)
        return PartChoice(grid[-1], False, trials)

    if acc(grid[-1]) < target:
        return PartChoice(grid[-1], False, trials)
    lo, hi = 0, len(grid) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if acc(grid[mid]) >= target:
            hi = mid
        else:
            lo = mid + 1
    return PartChoice(grid[lo], True, trials)


def _part_of(net: NetworkSpec, layer_name: str) -> str:
    return "conv" if isinstance(net.layer(layer_name).kind, Convolution) else "fc"


def _group(stats: Sequence[RangeStats], layer: str, group: str) -> RangeStats:
    for s in stats:
        if s.layer == layer and s.group == group:
            return s
    raise KeyError((layer, group))


def _minifloat(bits: int, exp_bits: int) -> MinifloatFormat:
    e = min(exp_bits, bits - 1)
    return MinifloatFormat(e, bits - 1 - e)


MAX_EXPONENT_BITS = 8


def network_max(stats: Sequence[RangeStats], data_stats: RangeStats) -> float:
    return max([s.max_abs for s in stats] + [data_stats.max_abs])


def split_candidates(scheme: str, bits: Bits, stats: Sequence[RangeStats],
                     data_stats: RangeStats) -> List[Optional[int]]:
    """Ways to split the widest bit-width shared by the network.

    Static fixed point: every integer length.  Minifloat: exponent bits from
    the no-saturation minimum up to 8 (or all but one bit).  Others: none.
    """
    widest = max((b for b in bits.values() if b), default=None)
    if widest is None:
        return [None]
    if scheme == "fixed":
        return list(range(1, widest + 1))
    if scheme == "minifloat":
        hi = min(widest - 1, MAX_EXPONENT_BITS)
        lo = min(choose_exponent_bits(network_max(stats, data_stats)), hi)
        return list(range(lo, hi + 1))
    return [None]


def build_configs(net: NetworkSpec, scheme: str, bits: Bits, stats: Sequence[RangeStats],
                  data_stats: RangeStats, split: Optional[int] = None,
                  il_rule: str = "no_saturation") -> Dict[str, QuantizationConfig]:
    """Per-layer configs for a scheme and per-part bit-widths (``None`` = full precision).

    ``split`` is the shared integer length for static fixed point and the
    exponent bit count for minifloat; by default the smallest safe choice.
    Layer inputs follow the outputs part: the first layer's input format
    comes from the data range, later inputs reuse the previous quantized
    layer's output format.
    """
    out_bits = bits.get("outputs")
    if scheme == "minifloat":
        exp_bits = split if split is not None else choose_exponent_bits(network_max(stats, data_stats))
    configs = {}
    prev_out: Optional[NumberFormat] = None
    for idx, layer in enumerate(net.quantizable_layers()):
        name = layer.name
        pbits = bits.get(_part_of(net, name))
        if scheme == "pow2":
            configs[name] = QuantizationConfig(param_format=PowerOfTwoFormat() if pbits else None)
            continue
        if scheme == "fixed":
            il = split if split is not None else 1

            def make(b, _stats, _is_out):
                return FixedPointFormat(min(il, b), b - min(il, b))
        elif scheme == "dynamic_fixed":
            def make(b, s, is_out):
                return DynamicFixedPointFormat(b, b - choose_integer_length(s, is_out, il_rule))
        else:
            def make(b, _stats, _is_out):
                return _minifloat(b, exp_bits)

        param_fmt = make(pbits, _group(stats, name, "params"), False) if pbits else None
        out_fmt = make(out_bits, _group(stats, name, "outputs"), True) if out_bits else None
        if out_bits:
            in_fmt = make(out_bits, data_stats, False) if idx == 0 else prev_out
        else:
            in_fmt = None
        configs[name] = QuantizationConfig(in_fmt, param_fmt, out_fmt)
        prev_out = out_fmt
    return configs


class _Context:
    """Shared evaluation state of one flow run."""

    def __init__(self, net, params, dataset, request, stats, data_stats):
        self.net = net.without_quant()
        self.params = params
        self.subset = dataset.subset(n_test=request.eval_subset_size)
        self.request = request
        self.stats = stats
        self.data_stats = data_stats
        self.log: List[Tuple[str, int, float]] = []

    def configs(self, bits: Bits, split: Optional[int] = None):
        return build_configs(self.net, self.request.scheme, bits, self.stats, self.data_stats,
                             split, self.request.il_rule)

    def accuracy(self, bits: Bits, split: Optional[int] = None) -> float:
        net = self.net.with_quant(self.configs(bits, split))
        return score(net, self.params, self.subset, quantized=True)

    def best_partition(self, bits: Bits) -> Tuple[float, Optional[int]]:
        """Best accuracy over the candidate splits; ties keep the first."""
        best = (-1.0, None)
        for split in split_candidates(self.request.scheme, bits, self.stats, self.data_stats):
            acc = self.accuracy(bits, split)
            if acc > best[0]:
                best = (acc, split)
        return best

    def part_evaluator(self, part: str, b: int) -> float:
        acc, _ = self.best_partition({p: (b if p == part else None) for p in PARTS})
        self.log.append((part, b, acc))
        log.info("part %s at %d bits: %.4f", part, b, acc)
        return acc


def _memory(net: NetworkSpec) -> List[dict]:
    rows = []
    for entry in complexity_report(net):
        q = net.layer(entry.name).quant
        pbits = q.param_format.bit_width if q and q.param_format else 32
        obits = q.output_format.bit_width if q and q.output_format else 32
        rows.append({"layer": entry.name, "macs": entry.macs, "param_count": entry.param_count,
                     "param_bits": pbits, "output_count": entry.output_count,
                     "output_bits": obits, "acc_bits": entry.acc_bits})
    return rows


def run_flow(net: NetworkSpec, params: ParameterSet, dataset, request: QuantizationRequest,
             seed: Optional[int] = None) -> Tuple[QuantizationReport, NetworkSpec]:
    """Analyze ranges, search bit-widths per part, verify jointly, score on the full test set.

    Returns the report and the network annotated with the frozen formats.
    """
    if len(dataset.test_labels) == 0 or len(dataset.train_labels) == 0:
        raise FlowError("dataset is empty")
    sample = dataset.train_images[:request.stats_images]
    batches = [sample[i:i + 100] for i in range(0, len(sample), 100)]
    stats = collect_stats(net, params, batches)
    data_stats = input_stats(batches)
    ctx = _Context(net, params, dataset, request, stats, data_stats)
    try:
        base_subset = score(ctx.net, params, ctx.subset, quantized=False)
        baseline = score(ctx.net, params, dataset, quantized=False)
    except Exception as exc:
        raise FlowError(f"baseline evaluation failed: {exc}") from exc
    target = base_subset - request.error_margin / 100.0
    warnings = []
    grid = sorted(request.search_grid)

    if request.scheme == "pow2":
        bits: Bits = {"conv": PowerOfTwoFormat().bit_width, "fc": PowerOfTwoFormat().bit_width,
                      "outputs": None}
        joint, split = ctx.accuracy(bits), None
        if joint < target:
            warnings.append(f"power-of-two weights exceed the margin ({joint:.4f} < {target:.4f})")
    else:
        bits = {}
        for part in PARTS:
            choice = search_part(part, request, ctx.part_evaluator, base_subset)
            if not choice.within_margin:
                warnings.append(f"{part}: no bit-width within margin, using {choice.bits}")
            bits[part] = choice.bits
        joint, split = ctx.best_partition(bits)
        ctx.log.append(("joint", max(bits.values()), joint))
        while joint < target:
            bumped = False
            for part in ESCALATION_ORDER:
                pos = grid.index(bits[part])
                if pos + 1 < len(grid):
                    bits[part] = grid[pos + 1]
                    bumped = True
                    joint, split = ctx.best_partition(bits)
                    ctx.log.append(("joint", bits[part], joint))
                    log.info("escalated %s to %d bits: %.4f", part, bits[part], joint)
                    if joint >= target:
                        break
            if not bumped:
                warnings.append("joint accuracy misses the margin even at the widest grid entry")
                break

    configs = ctx.configs(bits, split)
    frozen = ctx.net.with_quant(configs)
    quantized = score(frozen, params, dataset, quantized=True)
    report = QuantizationReport(
        scheme=request.scheme, bit_widths=dict(bits), configs=configs,
        baseline_accuracy=baseline, quantized_accuracy=quantized,
        error_margin=request.error_margin,
        integer_length=split if request.scheme == "fixed" else None,
        exponent_bits=split if request.scheme == "minifloat" else None, layers=_memory(frozen),
        search_log=list(ctx.log), warnings=warnings, stats=stats, seed=seed,
    )
    return report, frozen


def uniform_configs(net: NetworkSpec, params: ParameterSet, dataset, scheme: str, bits: int,
                    eval_subset_size: int = 1000, stats_images: int = 100,
                    il_rule: str = "no_saturation"
                    ) -> Tuple[Dict[str, QuantizationConfig], Optional[int]]:
    """Configs with every part at ``bits``; fixed point and minifloat pick their best split."""
    request = QuantizationRequest(scheme, search_grid=(bits,), eval_subset_size=eval_subset_size,
                                  stats_images=stats_images, il_rule=il_rule)
    sample = dataset.train_images[:stats_images]
    batches = [sample[i:i + 100] for i in range(0, len(sample), 100)]
    ctx = _Context(net, params, dataset, request, collect_stats(net, params, batches),
                   input_stats(batches))
    all_bits = {p: bits for p in PARTS}
    _, split = ctx.best_partition(all_bits)
    return ctx.configs(all_bits, split), split


def scheme_sweep(net: NetworkSpec, params: ParameterSet, dataset, schemes: Sequence[str],
                 bit_widths: Sequence[int], eval_subset_size: int = 1000
                 ) -> Dict[str, Dict[int, float]]:
    """Test accuracy without fine-tuning for each scheme at each uniform bit-width."""
    out: Dict[str, Dict[int, float]] = {}
    for scheme in schemes:
        out[scheme] = {}
        for b in bit_widths:
            configs, _ = uniform_configs(net, params, dataset, scheme, b, eval_subset_size)
            acc = score(net.without_quant().with_quant(configs), params, dataset, quantized=True)
            out[scheme][b] = acc
            log.info("sweep %s %d-bit: %.4f", scheme, b, acc)
    return out
