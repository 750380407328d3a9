"""Command-line front end: train, analyze, quantize, finetune, score, report."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import analysis, flow, io, network, trainer
from .numerics import RoundingMode

log = logging.getLogger("qbrew")

BUILTIN_NETS = {"lenet": network.lenet, "cifar10_full": network.cifar10_full}


class UsageError(Exception):
    pass


def _grid(text: str):
    try:
        return tuple(int(b) for b in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated integers, got {text!r}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _net(spec: str) -> network.NetworkSpec:
    if spec in BUILTIN_NETS:
        return BUILTIN_NETS[spec]()
    return io.load_network(spec)


def _solver(path: Optional[str], seed: Optional[int]) -> trainer.SolverConfig:
    solver = io.load_solver(path) if path else trainer.SolverConfig()
    return replace(solver, seed=seed) if seed is not None else solver


def _rounding(kind: str, seed: int) -> RoundingMode:
    return RoundingMode.stochastic(seed) if kind == "stochastic" else RoundingMode.nearest()


def _with_rounding(net: network.NetworkSpec, mode: RoundingMode) -> network.NetworkSpec:
    return net.with_quant({layer.name: replace(layer.quant, rounding=mode)
                           for layer in net.quantizable_layers() if layer.quant is not None})


def _log_formats(net: network.NetworkSpec) -> None:
    for layer in net.quantizable_layers():
        q = layer.quant
        if q is None:
            log.info("%s: float32", layer.name)
        else:
            log.info("%s: in=%s params=%s out=%s rounding=%s", layer.name, q.input_format,
                     q.param_format, q.output_format, q.rounding.kind)


def _is_quantized(net: network.NetworkSpec) -> bool:
    return any(layer.quant is not None for layer in net.quantizable_layers())


def cmd_train(args) -> int:
    net = _net(args.net)
    solver = _solver(args.solver, args.seed)
    data = io.load_dataset(args.data)
    log.info("train net=%s seed=%d solver=%s", args.net, solver.seed, solver)
    params = trainer.train_baseline(net, data, solver)
    acc = trainer.score(net, params, data, quantized=False, limit=args.limit)
    log.info("baseline accuracy %.4f", acc)
    io.save_model(args.out, net.without_quant(), params)
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_analyze(args) -> int:
    net, params = io.load_model(args.model)
    data = io.load_dataset(args.data)
    sample = data.train_images[:args.stats_images]
    batches = [sample[i:i + 100] for i in range(0, len(sample), 100)]
    stats = analysis.collect_stats(net, params, batches)
    block = [("input", analysis.stats_to_block([analysis.input_stats(batches)]))]
    block.append(("layers", analysis.stats_to_block(stats)))
    for s in stats:
        kind = "outputs" if s.group == "outputs" else "params"
        log.info("%s %s max %.6g IL %d exponent bits %d", s.layer, kind, s.max_abs,
                 analysis.choose_integer_length(s, s.group == "outputs", args.il_rule),
                 analysis.choose_exponent_bits(s))
    _emit(io.dump_text(block) + "\n", args.out)
    return 0


def cmd_quantize(args) -> int:
    net, params = io.load_model(args.model)
    data = io.load_dataset(args.data)
    request = flow.QuantizationRequest(
        args.scheme, error_margin=args.margin, search_grid=args.grid,
        eval_subset_size=args.subset, stats_images=args.stats_images,
        exhaustive=args.exhaustive, il_rule=args.il_rule)
    log.info("quantize scheme=%s margin=%g grid=%s seed=%d", args.scheme, args.margin,
             args.grid, args.seed)
    report, frozen = flow.run_flow(net, params, data, request, seed=args.seed)
    if args.rounding != "nearest":
        frozen = _with_rounding(frozen, _rounding(args.rounding, args.seed))
        report.configs = {layer.name: layer.quant for layer in frozen.quantizable_layers()}
        report.quantized_accuracy = trainer.score(frozen, params, data, quantized=True)
    _log_formats(frozen)
    for w in report.warnings:
        log.warning("%s", w)
    log.info("baseline %.4f quantized %.4f", report.baseline_accuracy, report.quantized_accuracy)
    model_out = args.model_out or str(Path(args.out).with_suffix(".qbm"))
    io.save_model(model_out, frozen, params)
    Path(args.out).write_text(report.to_text())
    print(f"baseline {report.baseline_accuracy:.4f} quantized {report.quantized_accuracy:.4f}")
    return 0


def cmd_finetune(args) -> int:
    net, params = io.load_model(args.model)
    if not _is_quantized(net):
        raise UsageError("finetune needs a model annotated by quantize")
    data = io.load_dataset(args.data)
    solver = trainer.finetune_solver(_solver(args.solver, args.seed), args.iterations)
    if args.lr is not None:
        solver = replace(solver, learning_rate=args.lr)
    log.info("finetune seed=%d lr=%g iterations=%d", solver.seed, solver.learning_rate,
             solver.max_iterations)
    _log_formats(net)
    before = trainer.score(net, params, data, quantized=True, limit=args.limit)
    deployed = trainer.finetune(net, params, data, solver)
    after = trainer.score(net, deployed, data, quantized=True, limit=args.limit)
    log.info("quantized accuracy before %.4f after %.4f", before, after)
    io.save_model(args.out, net, deployed)
    print(f"before {before:.4f} after {after:.4f}")
    return 0


def cmd_score(args) -> int:
    net, params = io.load_model(args.model)
    if args.quantized and not _is_quantized(net):
        raise UsageError("--quantized needs a model annotated by quantize")
    if args.rounding is not None:
        net = _with_rounding(net, _rounding(args.rounding, args.seed))
    data = io.load_dataset(args.data)
    _log_formats(net)
    acc = trainer.score(net, params, data, quantized=args.quantized, limit=args.limit)
    log.info("accuracy %.4f (quantized=%s seed=%d)", acc, args.quantized, args.seed)
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_report(args) -> int:
    net, _ = io.load_model(args.model)
    rows = analysis.complexity_report(net)
    block = [("layer", [("name", r.name), ("kind", r.kind), ("macs", r.macs),
                        ("param_count", r.param_count), ("acc_bits", r.acc_bits),
                        ("output_count", r.output_count)]) for r in rows]
    block.append(("total_macs", sum(r.macs for r in rows)))
    block.append(("total_params", sum(r.param_count for r in rows)))
    block.append(("network", io.network_to_block(net)))
    _emit(io.dump_text(block) + "\n", args.out)
    return 0


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbrew", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True, data=True):
        if model:
            p.add_argument("--model", required=True, help="model file")
        if data:
            p.add_argument("--data", required=True, help="MNIST or CIFAR-10 directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a full-precision baseline")
    common(p, model=False)
    p.add_argument("--net", default="lenet", help="builtin name (lenet, cifar10_full) or network file")
    p.add_argument("--solver", help="solver file")
    p.add_argument("--limit", type=_positive, help="score on the first N test images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="dynamic range statistics")
    common(p)
    p.add_argument("--stats-images", type=_positive, default=100)
    p.add_argument("--il-rule", choices=analysis.IL_RULES, default="no_saturation")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("quantize", help="search formats and write a report plus annotated model")
    common(p)
    p.add_argument("--scheme", required=True, choices=flow.SCHEMES)
    p.add_argument("--margin", type=float, default=1.0, help="allowed accuracy drop, percentage points")
    p.add_argument("--grid", type=_grid, default=(16, 8, 4, 2))
    p.add_argument("--subset", type=_positive, default=1000, help="test images used during the search")
    p.add_argument("--stats-images", type=_positive, default=100)
    p.add_argument("--rounding", choices=("nearest", "stochastic"), default="nearest")
    p.add_argument("--il-rule", choices=analysis.IL_RULES, default="no_saturation")
    p.add_argument("--exhaustive", action="store_true", help="evaluate every grid entry")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--model-out", help="annotated model (default: report path with .qbm)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("finetune", help="fine-tune a quantized model with shadow weights")
    common(p)
    p.add_argument("--solver", help="baseline solver file; fine-tuning uses a tenth of its final rate")
    p.add_argument("--iterations", type=_positive)
    p.add_argument("--lr", type=float)
    p.add_argument("--limit", type=_positive)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("score", help="top-1 accuracy on the test split")
    common(p)
    p.add_argument("--quantized", action="store_true", help="run the reduced-precision data path")
    p.add_argument("--rounding", choices=("nearest", "stochastic"))
    p.add_argument("--limit", type=_positive)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="per-layer MACs, parameter counts and accumulator widths")
    common(p, data=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qbrew {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"qbrew {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
