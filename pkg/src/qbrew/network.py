"""Sequential layer graphs and the simulated reduced-precision data path."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .numerics import NEAREST, NumberFormat, RoundingMode, make_rng, quantize_tensor


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Convolution:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class FullyConnected:
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class SoftmaxLoss:
    pass


LayerKind = Union[Convolution, FullyConnected, ReLU, MaxPool, SoftmaxLoss]


@dataclass(frozen=True)
class QuantizationConfig:
    """Formats for one layer's inputs, parameters and outputs; ``None`` keeps full precision."""

    input_format: Optional[NumberFormat] = None
    param_format: Optional[NumberFormat] = None
    output_format: Optional[NumberFormat] = None
    rounding: RoundingMode = NEAREST


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    quant: Optional[QuantizationConfig] = None

    def __post_init__(self):
        if self.quant is not None and not self.quantizable:
            raise NetworkError(f"layer {self.name!r}: only conv and fc layers take a quantization config")

    @property
    def quantizable(self) -> bool:
        return isinstance(self.kind, (Convolution, FullyConnected))


@dataclass(frozen=True)
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray


ParameterSet = Dict[str, LayerParams]


@dataclass
class NetworkSpec:
    layers: List[LayerSpec]
    input_shape: Tuple[int, ...]
    _shapes: List[Tuple[int, ...]] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise NetworkError(f"duplicate layer names in {names}")
        self._shapes = self._propagate()

    def _propagate(self) -> List[Tuple[int, ...]]:
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            kind = layer.kind
            try:
                if isinstance(kind, Convolution):
                    if len(shape) != 3:
                        raise NetworkError(f"{layer.name}: convolution needs a CHW input, got {shape}")
                    _, h, w = shape
                    shape = (
                        kind.out_channels,
                        T.conv_output_size(h, kind.kernel, kind.stride, kind.pad),
                        T.conv_output_size(w, kind.kernel, kind.stride, kind.pad),
                    )
                elif isinstance(kind, MaxPool):
                    if len(shape) != 3:
                        raise NetworkError(f"{layer.name}: pooling needs a CHW input, got {shape}")
                    c, h, w = shape
                    shape = (c, T.pool_output_size(h, kind.kernel, kind.stride),
                             T.pool_output_size(w, kind.kernel, kind.stride))
                elif isinstance(kind, FullyConnected):
                    shape = (kind.out_features,)
            except T.ShapeError as exc:
                raise NetworkError(f"{layer.name}: {exc}") from None
            shapes.append(shape)
        return shapes

    @property
    def output_shapes(self) -> List[Tuple[int, ...]]:
        return list(self._shapes)

    def input_shape_of(self, index: int) -> Tuple[int, ...]:
        return self.input_shape if index == 0 else self._shapes[index - 1]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def quantizable_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.quantizable]

    def param_shapes(self) -> Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        out = {}
        for i, layer in enumerate(self.layers):
            in_shape = self.input_shape_of(i)
            if isinstance(layer.kind, Convolution):
                k = layer.kind
                out[layer.name] = ((k.out_channels, in_shape[0], k.kernel, k.kernel), (k.out_channels,))
            elif isinstance(layer.kind, FullyConnected):
                out[layer.name] = ((layer.kind.out_features, int(np.prod(in_shape))),
                                   (layer.kind.out_features,))
        return out

    def with_quant(self, configs: Dict[str, Optional[QuantizationConfig]]) -> "NetworkSpec":
        """Copy with the given per-layer configs replacing the current ones."""
        unknown = set(configs) - {layer.name for layer in self.layers}
        if unknown:
            raise NetworkError(f"no such layers: {sorted(unknown)}")
        layers = [replace(layer, quant=configs[layer.name]) if layer.name in configs else layer
                  for layer in self.layers]
        return NetworkSpec(layers, self.input_shape)

    def without_quant(self) -> "NetworkSpec":
        return self.with_quant({layer.name: None for layer in self.quantizable_layers()})


def lenet() -> NetworkSpec:
    """LeNet for 28x28 digits: two conv and two fc layers (500 hidden units)."""
    return NetworkSpec([
        LayerSpec("conv1", Convolution(20, 5)),
        LayerSpec("pool1", MaxPool(2, 2)),
        LayerSpec("conv2", Convolution(50, 5)),
        LayerSpec("pool2", MaxPool(2, 2)),
        LayerSpec("ip1", FullyConnected(500)),
        LayerSpec("relu1", ReLU()),
        LayerSpec("ip2", FullyConnected(10)),
        LayerSpec("loss", SoftmaxLoss()),
    ], (1, 28, 28))


def cifar10_full() -> NetworkSpec:
    """Three 5x5 conv stages and one fc layer for 32x32 RGB; normalization layers omitted."""
    return NetworkSpec([
        LayerSpec("conv1", Convolution(32, 5, 1, 2)),
        LayerSpec("pool1", MaxPool(3, 2)),
        LayerSpec("relu1", ReLU()),
        LayerSpec("conv2", Convolution(32, 5, 1, 2)),
        LayerSpec("relu2", ReLU()),
        LayerSpec("pool2", MaxPool(3, 2)),
        LayerSpec("conv3", Convolution(64, 5, 1, 2)),
        LayerSpec("relu3", ReLU()),
        LayerSpec("pool3", MaxPool(3, 2)),
        LayerSpec("ip1", FullyConnected(10)),
        LayerSpec("loss", SoftmaxLoss()),
    ], (3, 32, 32))


def apply_layer(layer: LayerSpec, x: np.ndarray, p: Optional[LayerParams]) -> np.ndarray:
    kind = layer.kind
    if isinstance(kind, Convolution):
        return T.conv2d(x, p.weights, p.bias, kind.stride, kind.pad)
    if isinstance(kind, FullyConnected):
        return T.fully_connected(x, p.weights, p.bias)
    if isinstance(kind, ReLU):
        return T.relu(x)
    if isinstance(kind, MaxPool):
        return T.max_pool(x, kind.kernel, kind.stride)
    if isinstance(kind, SoftmaxLoss):
        return x
    raise NetworkError(f"unknown layer kind {kind!r}")


def _check_batch(net: NetworkSpec, batch: np.ndarray) -> None:
    if tuple(batch.shape[1:]) != net.input_shape:
        raise NetworkError(f"batch shape {batch.shape[1:]} does not match input {net.input_shape}")


def forward_full(net: NetworkSpec, params: ParameterSet,
                 batch: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """Full-precision forward pass; returns every layer's output and the logits."""
    _check_batch(net, batch)
    acts = []
    x = batch
    for layer in net.layers:
        x = apply_layer(layer, x, params.get(layer.name))
        acts.append(x)
    return acts, x


def _layer_rng(cfg: QuantizationConfig, index: int, slot: int,
               rng: Optional[np.random.Generator]) -> Optional[np.random.Generator]:
    if not cfg.rounding.is_stochastic:
        return None
    return rng if rng is not None else make_rng(cfg.rounding.seed, 3 * index + slot)


def quantize_layer_params(cfg: Optional[QuantizationConfig], p: LayerParams, index: int = 0,
                          rng: Optional[np.random.Generator] = None,
                          mode: Optional[RoundingMode] = None) -> LayerParams:
    """Weights and bias on the parameter grid; ``mode`` overrides the config's rounding."""
    if cfg is None or cfg.param_format is None:
        return p
    if mode is None:
        mode = cfg.rounding
        rng = _layer_rng(cfg, index, 1, rng)
    return LayerParams(quantize_tensor(p.weights, cfg.param_format, mode, rng),
                       quantize_tensor(p.bias, cfg.param_format, mode, rng))


def quantize_params(net: NetworkSpec, params: ParameterSet,
                    mode: Optional[RoundingMode] = None,
                    rng: Optional[np.random.Generator] = None) -> ParameterSet:
    out = dict(params)
    for i, layer in enumerate(net.layers):
        if layer.quant is not None and layer.name in params:
            out[layer.name] = quantize_layer_params(layer.quant, params[layer.name], i, rng, mode)
    return out


def forward_quantized(net: NetworkSpec, params: ParameterSet, batch: np.ndarray,
                      rng: Optional[np.random.Generator] = None,
                      require_config: bool = False) -> Tuple[List[np.ndarray], np.ndarray]:
    """Simulated hardware data path.

    For conv/fc layers carrying a config: quantize inputs and parameters, run
    the MACs with float accumulation, add the quantized bias, quantize the
    sum.  Layers without a config, and ReLU/pooling, run in full precision.
    """
    _check_batch(net, batch)
    acts = []
    x = batch
    for i, layer in enumerate(net.layers):
        cfg = layer.quant
        if layer.quantizable and cfg is None and require_config:
            raise NetworkError(f"layer {layer.name!r} has no quantization config")
        if cfg is None:
            x = apply_layer(layer, x, params.get(layer.name))
        else:
            x = quantize_tensor(x, cfg.input_format, cfg.rounding, _layer_rng(cfg, i, 0, rng))
            p = quantize_layer_params(cfg, params[layer.name], i, rng)
            x = apply_layer(layer, x, p)
            x = quantize_tensor(x, cfg.output_format, cfg.rounding, _layer_rng(cfg, i, 2, rng))
        acts.append(x)
    return acts, x


def accumulator_width(m: int, n: int, x: int) -> int:
    """Width of the last adder-tree level: m-bit by n-bit products, x per output."""
    if x < 1:
        raise ValueError("need at least one multiplication per output")
    return m + n + (x - 1).bit_length()


def macs_per_output(net: NetworkSpec, name: str) -> int:
    for i, layer in enumerate(net.layers):
        if layer.name == name:
            in_shape = net.input_shape_of(i)
            if isinstance(layer.kind, Convolution):
                return in_shape[0] * layer.kind.kernel ** 2
            if isinstance(layer.kind, FullyConnected):
                return int(np.prod(in_shape))
            raise NetworkError(f"{name} has no MACs")
    raise KeyError(name)

