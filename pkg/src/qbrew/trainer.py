"""Baseline training and fine-tuning with full-precision shadow weights."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .network import (
    Convolution,
    FullyConnected,
    LayerParams,
    MaxPool,
    NetworkSpec,
    ParameterSet,
    ReLU,
    SoftmaxLoss,
    forward_full,
    forward_quantized,
    quantize_layer_params,
    quantize_params,
)
from .numerics import NEAREST, ConfigurationError, RoundingMode, make_rng

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rule: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_iterations: int = 2000
    seed: int = 0
    lr_schedule: str = "constant"
    gamma: float = 0.1
    step_size: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    log_every: int = 100

    def __post_init__(self):
        if self.rule not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown solver rule {self.rule!r}")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_iterations < 0:
            raise ConfigurationError("need learning_rate >= 0, batch_size >= 1, max_iterations >= 0")
        if self.lr_schedule == "step" and self.step_size < 1:
            raise ConfigurationError("step schedule needs step_size >= 1")

    def lr_at(self, iteration: int) -> float:
        if self.lr_schedule == "step":
            return self.learning_rate * self.gamma ** (iteration // self.step_size)
        return self.learning_rate

    @property
    def final_lr(self) -> float:
        return self.lr_at(max(self.max_iterations - 1, 0))


def finetune_solver(baseline: SolverConfig, max_iterations: Optional[int] = None) -> SolverConfig:
    """Adam at a tenth of the last baseline learning rate."""
    return replace(baseline, rule="adam", learning_rate=baseline.final_lr / 10,
                   lr_schedule="constant",
                   max_iterations=baseline.max_iterations if max_iterations is None else max_iterations)


def init_params(net: NetworkSpec, seed: int = 0, dtype=np.float32) -> ParameterSet:
    """Uniform(-a, a) with a = sqrt(3 / fan_in) for weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (wshape, bshape) in net.param_shapes().items():
        fan_in = int(np.prod(wshape[1:]))
        a = math.sqrt(3.0 / fan_in)
        params[name] = LayerParams(rng.uniform(-a, a, wshape).astype(dtype), np.zeros(bshape, dtype))
    return params


def copy_params(params: ParameterSet) -> ParameterSet:
    return {k: LayerParams(p.weights.copy(), p.bias.copy()) for k, p in params.items()}


def backward(net: NetworkSpec, params: ParameterSet, batch: np.ndarray, labels,
             acts=None) -> Tuple[float, Dict[str, LayerParams]]:
    """Loss and exact gradients for every parameter (plus ``"input"`` for the batch)."""
    if not net.layers or not isinstance(net.layers[-1].kind, SoftmaxLoss):
        raise ValueError("network must end with a SoftmaxLoss layer")
    if acts is None:
        acts, _ = forward_full(net, params, batch)
    loss, d = T.softmax_cross_entropy(acts[-1], labels)
    grads: Dict[str, LayerParams] = {}
    inputs = [batch] + acts[:-1]
    for i in range(len(net.layers) - 2, -1, -1):
        layer, x = net.layers[i], inputs[i]
        kind = layer.kind
        if isinstance(kind, Convolution):
            d, dw, db = T.conv2d_backward(d, x, params[layer.name].weights, kind.stride, kind.pad)
            grads[layer.name] = LayerParams(dw, db)
        elif isinstance(kind, FullyConnected):
            d, dw, db = T.fully_connected_backward(d, x, params[layer.name].weights)
            grads[layer.name] = LayerParams(dw, db)
        elif isinstance(kind, ReLU):
            d = T.relu_backward(d, x)
        elif isinstance(kind, MaxPool):
            d = T.max_pool_backward(d, x, kind.kernel, kind.stride)
    grads["input"] = LayerParams(d, np.zeros(0, d.dtype))
    return loss, grads


class SGD:
    def __init__(self, solver: SolverConfig):
        self.solver = solver

    def step(self, params: ParameterSet, grads: Dict[str, LayerParams], lr: float) -> None:
        for name, p in params.items():
            g = grads[name]
            np.subtract(p.weights, lr * g.weights, out=p.weights, casting="unsafe")
            np.subtract(p.bias, lr * g.bias, out=p.bias, casting="unsafe")


class Adam:
    def __init__(self, solver: SolverConfig):
        self.solver = solver
        self.t = 0
        self.m: Dict[Tuple[str, str], np.ndarray] = {}
        self.v: Dict[Tuple[str, str], np.ndarray] = {}

    def step(self, params: ParameterSet, grads: Dict[str, LayerParams], lr: float) -> None:
        s = self.solver
        self.t += 1
        c1 = 1 - s.beta1 ** self.t
        c2 = 1 - s.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            for field, value, grad in (("w", p.weights, g.weights), ("b", p.bias, g.bias)):
                key = (name, field)
                m = self.m.setdefault(key, np.zeros_like(value))
                v = self.v.setdefault(key, np.zeros_like(value))
                m *= s.beta1
                m += (1 - s.beta1) * grad
                v *= s.beta2
                v += (1 - s.beta2) * grad * grad
                value -= (lr * (m / c1) / (np.sqrt(v / c2) + s.epsilon)).astype(value.dtype)


def make_optimizer(solver: SolverConfig):
    return Adam(solver) if solver.rule == "adam" else SGD(solver)


def _batches(n: int, solver: SolverConfig):
    """Endless epoch-shuffled index batches, reproducible from the seed."""
    rng = np.random.default_rng(solver.seed)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - solver.batch_size + 1, solver.batch_size):
            yield order[start:start + solver.batch_size]
        if n < solver.batch_size:
            yield order


def _apply_weight_decay(grads, params, wd):
    if wd:
        for name, p in params.items():
            grads[name] = LayerParams(grads[name].weights + wd * p.weights, grads[name].bias)


def _check_loss(loss: float, it: int, lr: float) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at iteration {it} (lr={lr:g})")


def train_baseline(net: NetworkSpec, dataset, solver: SolverConfig,
                   params: Optional[ParameterSet] = None,
                   callback: Optional[Callable[[int, float], None]] = None) -> ParameterSet:
    """Mini-batch training in full precision; deterministic for a given seed."""
    net = net.without_quant()
    params = copy_params(params) if params is not None else init_params(net, solver.seed)
    opt = make_optimizer(solver)
    images, labels = dataset.train_images, dataset.train_labels
    batches = _batches(len(images), solver)
    for it in range(solver.max_iterations):
        idx = next(batches)
        lr = solver.lr_at(it)
        loss, grads = backward(net, params, images[idx], labels[idx])
        _check_loss(loss, it, lr)
        _apply_weight_decay(grads, params, solver.weight_decay)
        opt.step(params, grads, lr)
        if solver.log_every and (it + 1) % solver.log_every == 0:
            log.info("iter %d loss %.4f lr %g", it + 1, loss, lr)
        if callback is not None:
            callback(it, loss)
    return params


def finetune(net: NetworkSpec, params: ParameterSet, dataset, solver: SolverConfig,
             callback: Optional[Callable[[int, ParameterSet, ParameterSet], None]] = None,
             return_shadow: bool = False):
    """Fine-tune in the discrete parameter space of ``net``'s frozen formats.

    Each batch samples discrete weights from the shadow weights with
    stochastic rounding, runs forward/backward with those weights and
    full-precision layer outputs, and applies the update to the shadows.
    Returns the shadows rounded to nearest for deployment.
    """
    cfgs = {layer.name: layer.quant for layer in net.quantizable_layers()}
    if not any(c is not None and c.param_format is not None for c in cfgs.values()):
        raise ConfigurationError("finetune needs parameter formats on at least one layer")
    plain = net.without_quant()
    shadow = copy_params(params)
    opt = make_optimizer(solver)
    images, labels = dataset.train_images, dataset.train_labels
    batches = _batches(len(images), solver)
    sampling = RoundingMode.stochastic(solver.seed)
    index = {layer.name: i for i, layer in enumerate(net.layers)}
    for it in range(solver.max_iterations):
        idx = next(batches)
        lr = solver.lr_at(it)
        rng = make_rng(solver.seed, it)
        discrete = {name: quantize_layer_params(cfgs.get(name), p, index[name], rng, sampling)
                    for name, p in shadow.items()}
        loss, grads = backward(plain, discrete, images[idx], labels[idx])
        _check_loss(loss, it, lr)
        _apply_weight_decay(grads, shadow, solver.weight_decay)
        opt.step(shadow, grads, lr)
        if solver.log_every and (it + 1) % solver.log_every == 0:
            log.info("finetune iter %d loss %.4f lr %g", it + 1, loss, lr)
        if callback is not None:
            callback(it, shadow, quantize_params(net, shadow, NEAREST))
    deployed = quantize_params(net, shadow, NEAREST)
    return (deployed, shadow) if return_shadow else deployed


def predict(net: NetworkSpec, params: ParameterSet, images: np.ndarray, quantized: bool,
            batch_size: int = 500) -> np.ndarray:
    preds = []
    rng = None
    if quantized:
        # parameters are fixed during inference; deploy them with nearest rounding once
        params = quantize_params(net, params, NEAREST)
        layers = net.quantizable_layers()
        net = net.with_quant({layer.name: _without_params(layer.quant) for layer in layers})
        seeds = [l.quant.rounding.seed for l in layers if l.quant and l.quant.rounding.is_stochastic]
        if seeds:
            rng = make_rng(seeds[0], 0)
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        _, logits = forward_quantized(net, params, batch, rng) if quantized else forward_full(net, params, batch)
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def _without_params(cfg):
    return None if cfg is None else replace(cfg, param_format=None)


def score(net: NetworkSpec, params: ParameterSet, dataset, quantized: bool,
          limit: Optional[int] = None, split: str = "test") -> float:
    """Top-1 accuracy on a split; ``quantized`` runs the reduced-precision data path."""
    images = getattr(dataset, f"{split}_images")
    labels = getattr(dataset, f"{split}_labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(net, params, images, quantized) == labels))
