"""Datasets, text descriptions (network, solver, reports) and binary model files.

The text format is a small prototxt-like language::

    input_shape: 1 28 28
    layer {
      name: conv1
      type: convolution
      out_channels: 20
    }

Each line holds ``key: value``, ``key {`` or ``}``; ``#`` starts a comment.
Parsed documents are lists of ``(key, value)`` pairs so repeated keys keep
their order.
"""

from __future__ import annotations

import dataclasses
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .network import (
    Convolution,
    FullyConnected,
    LayerParams,
    LayerSpec,
    MaxPool,
    NetworkSpec,
    ParameterSet,
    QuantizationConfig,
    ReLU,
    SoftmaxLoss,
)
from .numerics import (
    DynamicFixedPointFormat,
    FixedPointFormat,
    MinifloatFormat,
    NumberFormat,
    PowerOfTwoFormat,
    RoundingMode,
)
from .trainer import SolverConfig

MAGIC = b"QBREW001"
VERSION = 1
IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32

Block = List[Tuple[str, Any]]


class FormatError(ValueError):
    """Malformed or truncated input file."""


class VersionError(FormatError):
    pass


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    name: str = ""
    channel_means: Optional[np.ndarray] = None

    def subset(self, n_train: Optional[int] = None, n_test: Optional[int] = None) -> "Dataset":
        return dataclasses.replace(
            self,
            train_images=self.train_images[:n_train], train_labels=self.train_labels[:n_train],
            test_images=self.test_images[:n_test], test_labels=self.test_labels[:n_test],
        )


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem} not found in {directory}")


def read_idx_images(path: Union[str, Path]) -> np.ndarray:
    """IDX image file -> uint8 array (count, rows, cols)."""
    raw = _read_bytes(Path(path))
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad image magic {magic}, expected {IDX_IMAGES_MAGIC}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: header declares {count} images ({expected} bytes), file has {len(raw)}")
    return np.frombuffer(raw, np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: Union[str, Path]) -> np.ndarray:
    raw = _read_bytes(Path(path))
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad label magic {magic}, expected {IDX_LABELS_MAGIC}")
    if len(raw) != 8 + count:
        raise FormatError(f"{path}: header declares {count} labels, file has {len(raw) - 8}")
    return np.frombuffer(raw, np.uint8, offset=8).astype(np.int64)


def load_mnist(directory: Union[str, Path]) -> Dataset:
    """MNIST from the four IDX files; pixels scaled to [0, 1], shape (N, 1, 28, 28)."""
    d = Path(directory)
    parts = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = read_idx_images(_find(d, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx_labels(_find(d, f"{prefix}-labels-idx1-ubyte"))
        if len(images) != len(labels):
            raise FormatError(f"{split}: {len(images)} images but {len(labels)} labels")
        parts[split] = ((images.astype(np.float32) / 255.0)[:, None], labels)
    return Dataset(*parts["train"], *parts["test"], name="mnist")


def _read_cifar_file(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} outside [0, 9]")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory: Union[str, Path], subtract_mean: bool = True) -> Dataset:
    """CIFAR-10 binary batches; pixels in [0, 1], optionally minus the train per-channel mean."""
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train = [_read_cifar_file(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    test_x, test_y = _read_cifar_file(d / "test_batch.bin")
    train_x = np.concatenate([x for x, _ in train]).astype(np.float32) / 255.0
    train_y = np.concatenate([y for _, y in train])
    test_x = test_x.astype(np.float32) / 255.0
    means = train_x.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    if subtract_mean:
        train_x -= means[None, :, None, None]
        test_x -= means[None, :, None, None]
    return Dataset(train_x, train_y, test_x, test_y, name="cifar10", channel_means=means)


def load_dataset(directory: Union[str, Path]) -> Dataset:
    d = Path(directory)
    if any(d.glob("train-images-idx3-ubyte*")):
        return load_mnist(d)
    return load_cifar10(d)


# ------------------------------------------------------------ text format


def _parse_scalar(text: str) -> Any:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def parse_text(text: str) -> Block:
    stack: List[Block] = [[]]
    for lineno, line in enumerate(text.splitlines(), 1):
        line = _strip_comment(line).strip()
        if not line:
            continue
        if line == "}":
            if len(stack) == 1:
                raise FormatError(f"line {lineno}: unmatched '}}'")
            stack.pop()
        elif line.endswith("{"):
            key = line[:-1].strip()
            child: Block = []
            stack[-1].append((key, child))
            stack.append(child)
        elif ":" in line:
            key, value = line.split(":", 1)
            stack[-1].append((key.strip(), _parse_scalar(value)))
        else:
            raise FormatError(f"line {lineno}: cannot parse {line!r}")
    if len(stack) != 1:
        raise FormatError("unterminated block")
    return stack[0]


def _fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        if '"' in v or "\n" in v:
            raise FormatError(f"cannot store {v!r}: quotes and newlines are not allowed")
        if not v or any(c in v for c in " #:{}") or _parse_scalar(v) != v:
            return f'"{v}"'
    return str(v)


def dump_text(block: Block, indent: int = 0) -> str:
    pad = "  " * indent
    lines = []
    for key, value in block:
        if isinstance(value, list):
            lines.append(f"{pad}{key} {{")
            body = dump_text(value, indent + 1)
            if body:
                lines.append(body)
            lines.append(f"{pad}}}")
        else:
            lines.append(f"{pad}{key}: {_fmt_value(value)}")
    return "\n".join(lines)


def get(block: Block, key: str, default: Any = KeyError) -> Any:
    for k, v in block:
        if k == key:
            return v
    if default is KeyError:
        raise FormatError(f"missing key {key!r}")
    return default


def get_all(block: Block, key: str) -> List[Any]:
    return [v for k, v in block if k == key]


def format_to_block(fmt: NumberFormat) -> Block:
    if isinstance(fmt, FixedPointFormat):
        block: Block = [("type", "fixed"), ("integer_length", fmt.integer_length),
                        ("fractional_length", fmt.fractional_length)]
        if fmt.allow_negative_fl:
            block.append(("allow_negative_fl", True))
        return block
    if isinstance(fmt, DynamicFixedPointFormat):
        return [("type", "dynamic_fixed"), ("bit_width", fmt.bit_width),
                ("fractional_length", fmt.fractional_length)]
    if isinstance(fmt, MinifloatFormat):
        return [("type", "minifloat"), ("exponent_bits", fmt.exponent_bits),
                ("mantissa_bits", fmt.mantissa_bits)]
    if isinstance(fmt, PowerOfTwoFormat):
        return [("type", "pow2"), ("exponent_bits", fmt.exponent_bits),
                ("exponent_min", fmt.exponent_min), ("exponent_max", fmt.exponent_max),
                ("signed", fmt.signed)]
    raise TypeError(f"not a number format: {fmt!r}")


def format_from_block(block: Block) -> NumberFormat:
    kind = get(block, "type")
    if kind == "fixed":
        return FixedPointFormat(get(block, "integer_length"), get(block, "fractional_length"),
                                get(block, "allow_negative_fl", False))
    if kind == "dynamic_fixed":
        return DynamicFixedPointFormat(get(block, "bit_width"), get(block, "fractional_length"))
    if kind == "minifloat":
        return MinifloatFormat(get(block, "exponent_bits"), get(block, "mantissa_bits"))
    if kind == "pow2":
        return PowerOfTwoFormat(get(block, "exponent_bits", 4), get(block, "exponent_min", -8),
                                get(block, "exponent_max", -1), get(block, "signed", True))
    raise FormatError(f"unknown number format type {kind!r}")


def quant_to_block(cfg: QuantizationConfig) -> Block:
    block: Block = [("rounding", cfg.rounding.kind)]
    if cfg.rounding.is_stochastic:
        block.append(("seed", cfg.rounding.seed))
    for slot in ("input_format", "param_format", "output_format"):
        fmt = getattr(cfg, slot)
        if fmt is not None:
            block.append((slot, format_to_block(fmt)))
    return block


def quant_from_block(block: Block) -> QuantizationConfig:
    rounding = RoundingMode(get(block, "rounding", "nearest"), get(block, "seed", 0))
    slots = {}
    for slot in ("input_format", "param_format", "output_format"):
        sub = get(block, slot, None)
        slots[slot] = format_from_block(sub) if sub is not None else None
    return QuantizationConfig(rounding=rounding, **slots)


_KIND_NAMES = {Convolution: "convolution", FullyConnected: "fully_connected", ReLU: "relu",
               MaxPool: "max_pool", SoftmaxLoss: "softmax_loss"}
_KINDS = {v: k for k, v in _KIND_NAMES.items()}


def network_to_block(net: NetworkSpec) -> Block:
    block: Block = [("input_shape", " ".join(str(s) for s in net.input_shape))]
    for layer in net.layers:
        entry: Block = [("name", layer.name), ("type", _KIND_NAMES[type(layer.kind)])]
        entry.extend((f.name, getattr(layer.kind, f.name)) for f in dataclasses.fields(layer.kind))
        if layer.quant is not None:
            entry.append(("quant", quant_to_block(layer.quant)))
        block.append(("layer", entry))
    return block


def network_from_block(block: Block) -> NetworkSpec:
    shape = tuple(int(s) for s in str(get(block, "input_shape")).split())
    layers = []
    for entry in get_all(block, "layer"):
        kind_cls = _KINDS.get(get(entry, "type"))
        if kind_cls is None:
            raise FormatError(f"unknown layer type {get(entry, 'type')!r}")
        kwargs = {f.name: get(entry, f.name, f.default) for f in dataclasses.fields(kind_cls)}
        missing = [k for k, v in kwargs.items() if v is dataclasses.MISSING]
        if missing:
            raise FormatError(f"layer {get(entry, 'name')!r} lacks {missing}")
        quant = get(entry, "quant", None)
        layers.append(LayerSpec(str(get(entry, "name")), kind_cls(**kwargs),
                                quant_from_block(quant) if quant is not None else None))
    return NetworkSpec(layers, shape)


def network_to_text(net: NetworkSpec) -> str:
    return dump_text(network_to_block(net)) + "\n"


def network_from_text(text: str) -> NetworkSpec:
    return network_from_block(parse_text(text))


def load_network(path: Union[str, Path]) -> NetworkSpec:
    return network_from_text(Path(path).read_text())


def solver_from_text(text: str) -> SolverConfig:
    fields = {f.name: f for f in dataclasses.fields(SolverConfig)}
    kwargs = {}
    for key, value in parse_text(text):
        if key not in fields:
            raise FormatError(f"unknown solver key {key!r}")
        kwargs[key] = {"int": int, "float": float, "str": str}[fields[key].type](value)
    return SolverConfig(**kwargs)


def solver_to_text(solver: SolverConfig) -> str:
    return dump_text([(f.name, getattr(solver, f.name)) for f in dataclasses.fields(solver)]) + "\n"


def load_solver(path: Union[str, Path]) -> SolverConfig:
    return solver_from_text(Path(path).read_text())


# ------------------------------------------------------------ model files


def _tensors(params: ParameterSet) -> List[Tuple[str, np.ndarray]]:
    out = []
    for name, p in params.items():
        out.append((f"{name}.weights", p.weights))
        out.append((f"{name}.bias", p.bias))
    return out


def model_to_bytes(net: NetworkSpec, params: ParameterSet) -> bytes:
    text = network_to_text(net).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    tensors = _tensors(params)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise FormatError(f"corrupt model file: need {n} bytes at offset {self.pos}, "
                              f"only {len(self.raw) - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(raw: bytes) -> Tuple[NetworkSpec, ParameterSet]:
    r = _Reader(raw)
    if r.take(8) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported model file version {version} (expected {VERSION})")
    (text_len,) = r.unpack("<I")
    try:
        net = network_from_text(r.take(text_len).decode())
    except FormatError:
        raise
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt network description: {exc}") from None
    (count,) = r.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        dtype, ndim = r.unpack("<BB")
        if dtype != 0:
            raise FormatError(f"{name}: unsupported dtype code {dtype}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{name}: payload of {nbytes} bytes does not match shape {shape}")
        arrays[name] = np.frombuffer(r.take(nbytes), "<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"corrupt model file: {len(raw) - r.pos} trailing bytes")
    params = {}
    for name, (wshape, bshape) in net.param_shapes().items():
        try:
            w, b = arrays.pop(f"{name}.weights"), arrays.pop(f"{name}.bias")
        except KeyError:
            raise FormatError(f"model file lacks parameters for layer {name!r}") from None
        if w.shape != wshape or b.shape != bshape:
            raise FormatError(f"{name}: stored shapes {w.shape}, {b.shape} != {wshape}, {bshape}")
        params[name] = LayerParams(w, b)
    if arrays:
        raise FormatError(f"tensors without a matching layer: {sorted(arrays)}")
    return net, params


def save_model(path: Union[str, Path], net: NetworkSpec, params: ParameterSet) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(net, params))
    os.replace(tmp, path)


def load_model(path: Union[str, Path]) -> Tuple[NetworkSpec, ParameterSet]:
    return model_from_bytes(Path(path).read_bytes())
