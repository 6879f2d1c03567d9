"""Layers built from JSON-able descriptors, plus the optimizers used for training.

A layer list such as::

    [{"type": "conv", "in": 1, "out": 8, "kernel": 3, "stride": 1, "padding": 1},
     {"type": "relu"}, {"type": "maxpool"}, {"type": "flatten"},
     {"type": "dense", "in": 512, "out": 4}]

fully determines a :class:`Sequential`; the parameters live in layer order
(weight, then bias) so a flat list of arrays can be matched back to it.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConsistencyError, ContractError, DimensionError
from .tensor import Tensor

LAYER_TYPES = ("conv", "deconv", "dense", "relu", "tanh", "maxpool", "flatten", "gap")


def param_shapes(layer: dict) -> list[tuple[int, ...]]:
    kind = layer["type"]
    if kind == "conv":
        k = layer["kernel"]
        return [(layer["out"], layer["in"], k, k), (layer["out"],)]
    if kind == "deconv":
        k = layer["kernel"]
        return [(layer["in"], layer["out"], k, k), (layer["out"],)]
    if kind == "dense":
        return [(layer["in"], layer["out"]), (layer["out"],)]
    if kind not in LAYER_TYPES:
        raise ContractError(f"unknown layer type {kind!r}")
    return []


def _init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)  # He-uniform
    return rng.uniform(-bound, bound, size=shape)


def init_params(layers: Sequence[dict], rng: np.random.Generator) -> list[Tensor]:
    params = []
    for layer in layers:
        shapes = param_shapes(layer)
        if not shapes:
            continue
        wshape, bshape = shapes
        if layer["type"] == "conv":
            fan_in = layer["in"] * layer["kernel"] ** 2
        elif layer["type"] == "deconv":
            fan_in = layer["in"] * layer["kernel"] ** 2 // max(layer.get("stride", 1) ** 2, 1)
        else:
            fan_in = layer["in"]
        params.append(Tensor(_init(wshape, max(fan_in, 1), rng), requires_grad=True))
        params.append(Tensor(np.zeros(bshape), requires_grad=True))
    return params


class Sequential:
    """A chain of descriptor layers with its own parameter list."""

    def __init__(self, layers: Sequence[dict], params: Sequence[Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.layers = [dict(layer) for layer in layers]
        if params is None:
            params = init_params(self.layers, rng if rng is not None else np.random.default_rng(0))
        expected = [s for layer in self.layers for s in param_shapes(layer)]
        if len(expected) != len(params) or any(tuple(p.shape) != s for p, s in zip(params, expected)):
            raise ConsistencyError(
                f"parameter shapes {[p.shape for p in params]} do not match descriptor {expected}"
            )
        self.params = list(params)

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor, taps: list | None = None) -> Tensor:
        """Run the chain; if ``taps`` is a list, append each block output.

        A block ends at every ``maxpool`` and at a ``relu`` that is not
        directly followed by a pool.
        """
        it = iter(self.params)
        for i, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "conv":
                w, b = next(it), next(it)
                x = T.conv2d(x, w, b, stride=layer.get("stride", 1), padding=layer.get("padding", 0))
            elif kind == "deconv":
                w, b = next(it), next(it)
                x = T.conv_transpose2d(x, w, b, stride=layer.get("stride", 1), padding=layer.get("padding", 0))
            elif kind == "dense":
                w, b = next(it), next(it)
                if x.ndim != 2:
                    x = T.flatten(x)
                x = T.matmul(x, w) + b
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "tanh":
                x = T.tanh(x)
            elif kind == "maxpool":
                x = T.maxpool2d(x, layer.get("size", 2))
            elif kind == "flatten":
                x = T.flatten(x)
            elif kind == "gap":
                x = T.mean(x, axis=(2, 3))
            else:
                raise ContractError(f"unknown layer type {kind!r}")
            if taps is not None and x.ndim == 4 and _ends_block(self.layers, i):
                taps.append(x)
        return x

    def freeze(self) -> None:
        for p in self.params:
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.params:
            p.requires_grad = True


def _ends_block(layers: Sequence[dict], i: int) -> bool:
    kind = layers[i]["type"]
    nxt = layers[i + 1]["type"] if i + 1 < len(layers) else None
    if kind == "maxpool":
        return True
    return kind == "relu" and nxt != "maxpool"


def output_shape(layers: Sequence[dict], in_shape: Sequence[int]) -> tuple[int, ...]:
    """Shape of one example after the chain, without building parameters."""
    shape = tuple(in_shape)
    for layer in layers:
        kind = layer["type"]
        if kind == "conv":
            c, h, w = shape
            k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("padding", 0)
            if c != layer["in"]:
                raise DimensionError(f"conv expects {layer['in']} channels, got {c}")
            shape = (layer["out"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif kind == "deconv":
            c, h, w = shape
            k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("padding", 0)
            shape = (layer["out"], (h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p)
        elif kind == "maxpool":
            c, h, w = shape
            size = layer.get("size", 2)
            shape = (c, h // size, w // size)
        elif kind in ("flatten",):
            shape = (int(np.prod(shape)),)
        elif kind == "gap":
            shape = (shape[0],)
        elif kind == "dense":
            if int(np.prod(shape)) != layer["in"]:
                raise DimensionError(f"dense expects {layer['in']} inputs, got {shape}")
            shape = (layer["out"],)
        if any(d <= 0 for d in shape):
            raise DimensionError(f"layer {layer} produces empty shape {shape}")
    return shape


def count_params(params: Iterable[Tensor]) -> int:
    return int(sum(p.size for p in params))


def snap_float32(params: Iterable[Tensor]) -> None:
    """Round parameters to float32-representable values in place."""
    for p in params:
        p.data = p.data.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Cosine annealing from ``base_lr`` toward 0 over ``epochs`` (epoch is 0-based)."""
    if epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
