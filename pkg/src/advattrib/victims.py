"""The toy victim zoo: five small classifiers with distinct architectures.

cnn_small and cnn_wide differ only in channel width, a deliberately
confusable pair. A sixth descriptor, ``reference``, is trained the same way
but never attacked; its conv blocks serve as the frozen feature extractor of
the attribution model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, nn
from . import tensor as T
from .data import DatasetSplit
from .errors import ConsistencyError, FormatError, TrainingError
from .tensor import Tensor

ZOO_NAMES = ("cnn_small", "cnn_deep", "cnn_wide", "mlp_small", "mlp_deep")
REFERENCE_NAME = "reference"


@dataclass
class ArchitectureDescriptor:
    name: str
    layers: list[dict]
    input_shape: tuple[int, int, int]
    num_classes: int

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "layers": self.layers,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ArchitectureDescriptor":
        return cls(d["name"], [dict(x) for x in d["layers"]], tuple(d["input_shape"]), d["num_classes"])

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [s for layer in self.layers for s in nn.param_shapes(layer)]

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes()))


def _conv_block(cin: int, cout: int, pool: bool = True) -> list[dict]:
    block = [{"type": "conv", "in": cin, "out": cout, "kernel": 3, "stride": 1, "padding": 1}, {"type": "relu"}]
    if pool:
        block.append({"type": "maxpool", "size": 2})
    return block


def _cnn(name: str, widths: list[int], side: int, channels: int, num_classes: int) -> ArchitectureDescriptor:
    layers: list[dict] = []
    cin, s = channels, side
    for w in widths:
        layers += _conv_block(cin, w)
        cin, s = w, s // 2
    layers += [{"type": "flatten"}, {"type": "dense", "in": cin * s * s, "out": num_classes}]
    return ArchitectureDescriptor(name, layers, (channels, side, side), num_classes)


def _mlp(name: str, hidden: list[int], side: int, channels: int, num_classes: int) -> ArchitectureDescriptor:
    layers: list[dict] = [{"type": "flatten"}]
    fan = channels * side * side
    for h in hidden:
        layers += [{"type": "dense", "in": fan, "out": h}, {"type": "relu"}]
        fan = h
    layers.append({"type": "dense", "in": fan, "out": num_classes})
    return ArchitectureDescriptor(name, layers, (channels, side, side), num_classes)


def builtin_zoo(side: int = 16, num_classes: int = 4, channels: int = 1) -> list[ArchitectureDescriptor]:
    return [
        _cnn("cnn_small", [8, 16], side, channels, num_classes),
        _cnn("cnn_deep", [8, 16, 16], side, channels, num_classes),
        _cnn("cnn_wide", [16, 32], side, channels, num_classes),
        _mlp("mlp_small", [64], side, channels, num_classes),
        _mlp("mlp_deep", [128, 64], side, channels, num_classes),
    ]


def reference_descriptor(side: int = 16, num_classes: int = 4, channels: int = 1) -> ArchitectureDescriptor:
    return _cnn(REFERENCE_NAME, [12, 16], side, channels, num_classes)


def descriptor_by_name(name: str, side: int, num_classes: int, channels: int = 1) -> ArchitectureDescriptor:
    if name == REFERENCE_NAME:
        return reference_descriptor(side, num_classes, channels)
    for d in builtin_zoo(side, num_classes, channels):
        if d.name == name:
            return d
    raise KeyError(f"unknown victim architecture {name!r}")


@dataclass
class VictimModel:
    descriptor: ArchitectureDescriptor
    parameters: list[Tensor]
    trained_accuracy: float = float("nan")
    net: nn.Sequential = field(init=False, repr=False)

    def __post_init__(self):
        self.net = nn.Sequential(self.descriptor.layers, self.parameters)

    @property
    def name(self) -> str:
        return self.descriptor.name

    def logits(self, x) -> Tensor:
        return self.net(x if isinstance(x, Tensor) else Tensor(x))

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        with T.no_grad():
            out = [self.logits(images[i : i + batch_size]).data.argmax(axis=1)
                   for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(images) == labels))

    def block_outputs(self, images: np.ndarray) -> list[np.ndarray]:
        """Activations after each conv block (input excluded)."""
        taps: list[Tensor] = []
        with T.no_grad():
            self.net.forward(Tensor(images), taps=taps)
        return [t.data for t in taps]

    def freeze(self) -> None:
        self.net.freeze()


def train_victim(desc: ArchitectureDescriptor, data: DatasetSplit, epochs: int, lr: float = 0.05,
                 seed: int = 0, batch_size: int = 32, momentum: float = 0.9) -> VictimModel:
    """Minibatch SGD+momentum with per-epoch cosine annealing; deterministic in ``seed``."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = np.random.default_rng(seed)
    params = nn.init_params(desc.layers, rng)
    net = nn.Sequential(desc.layers, params)
    opt = nn.SGD(params, lr, momentum)
    n = len(data.train_x)
    for epoch in range(epochs):
        opt.lr = nn.cosine_lr(lr, epoch, epochs)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = T.softmax_cross_entropy(net(Tensor(data.train_x[idx])), data.train_y[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"{desc.name}: loss diverged at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    nn.snap_float32(params)
    model = VictimModel(desc, params)
    model.freeze()
    eval_x, eval_y = (data.test_x, data.test_y) if len(data.test_x) else (data.train_x, data.train_y)
    model.trained_accuracy = model.accuracy(eval_x, eval_y)
    return model


def save_checkpoint(model: VictimModel) -> bytes:
    meta = {
        "kind": "victim",
        "descriptor": model.descriptor.to_json(),
        "trained_accuracy": model.trained_accuracy,
        "n_params": len(model.parameters),
    }
    return checkpoint.pack(meta, [p.data for p in model.parameters])


def load_checkpoint(blob: bytes) -> VictimModel:
    meta, arrays = checkpoint.unpack(blob)
    if meta.get("kind") != "victim":
        raise FormatError(f"checkpoint kind {meta.get('kind')!r} is not a victim model")
    desc = ArchitectureDescriptor.from_json(meta["descriptor"])
    shapes = desc.param_shapes()
    if len(shapes) != len(arrays) or any(int(np.prod(s)) != a.size for s, a in zip(shapes, arrays)):
        raise ConsistencyError(f"checkpoint parameters do not match descriptor {desc.name!r}")
    params = [Tensor(a.reshape(s)) for a, s in zip(arrays, shapes)]
    return VictimModel(desc, params, float(meta["trained_accuracy"]))
