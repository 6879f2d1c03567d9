"""The multi-task attribution network, its loss, training loops and baselines.

Layout of :class:`AttributionModel` for a (C, S, S) input and trunk width c::

    adversarial x' ─┬─ trunk block 1 ──┬── block 2 (+ block 3) ─┬─ branch A ─┐
                    │   (c, S/2, S/2)   └ GAP → low (c)         └─ branch V  │
                    └─ frozen reference conv blocks → x'fm → G(R(x'fm)) = p  │
    v      = [flatten(branch A), low, flatten(p)]   → attack logits z
    hyper  = affine([v, z])
    victim = affine([flatten(branch V), flatten(p)])

The auto-encoder is trained first (:func:`train_ae`) so that G(R(x'fm))
approximates the feature-level perturbation x'fm - xfm; it is then frozen
unless ``joint_ae`` is set.  Only the adversarial image is needed at
inference.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint, nn
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, FormatError, TrainingError
from .forge import RecordArrays, ScenarioGrid, stack
from .tensor import Tensor
from .victims import ArchitectureDescriptor, VictimModel

LOG_HEADER = ["epoch", "split", "attack_acc", "victim_acc", "hyper_rmse", "loss", "sigma1", "sigma2", "sigma3"]
TASKS = ("attack", "victim", "hyper")


def _conv(cin: int, cout: int, k: int = 3, padding: int = 1) -> dict:
    return {"type": "conv", "in": cin, "out": cout, "kernel": k, "stride": 1, "padding": padding}


def _block(cin: int, cout: int, pool: bool = True) -> list[dict]:
    return [_conv(cin, cout), {"type": "relu"}] + ([{"type": "maxpool", "size": 2}] if pool else [])


def _dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def _dense_params(fan_in: int, fan_out: int, rng: np.random.Generator) -> list[Tensor]:
    return nn.init_params([{"type": "dense", "in": fan_in, "out": fan_out}], rng)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Perturbation extraction
# ---------------------------------------------------------------------------


def reference_feature_layers(reference: ArchitectureDescriptor, blocks: int | None = None) -> list[dict]:
    """The conv part of a reference classifier, cut after ``blocks`` pooling
    stages (all of them by default)."""
    layers, pools = [], 0
    for layer in reference.layers:
        if layer["type"] in ("flatten", "dense", "gap"):
            break
        layers.append(dict(layer))
        pools += layer["type"] == "maxpool"
        if blocks is not None and pools == blocks:
            break
    return layers


class PerturbationExtractor:
    """Frozen feature extractor F plus auto-encoder G(R(.)) on its feature maps."""

    def __init__(self, feature_layers: Sequence[dict], feature_params: Sequence[Tensor],
                 input_shape: Sequence[int], bottleneck: int = 8, rng: np.random.Generator | None = None,
                 ae_params: Sequence[Tensor] | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.features = nn.Sequential(feature_layers, feature_params)
        self.features.freeze()
        self.input_shape = tuple(input_shape)
        self.bottleneck = bottleneck
        self.fm_shape = nn.output_shape(feature_layers, self.input_shape)
        channels, side = self.fm_shape[0], self.fm_shape[1]
        if self.fm_shape[1] != self.fm_shape[2] or side < 2:
            raise DimensionError(f"feature maps must be square and at least 2x2, got {self.fm_shape}")
        inner = side // 2
        self.encoder_layers = _block(channels, bottleneck)
        # transposed conv with stride 2 sized to land exactly on the feature-map side
        self.decoder_layers = [{"type": "deconv", "in": bottleneck, "out": channels,
                                "kernel": side - 2 * (inner - 1), "stride": 2, "padding": 0}]
        if ae_params is None:
            ae_params = nn.init_params(self.encoder_layers, rng) + nn.init_params(self.decoder_layers, rng)
        n_enc = len(nn.init_params(self.encoder_layers, np.random.default_rng(0)))
        self.encoder = nn.Sequential(self.encoder_layers, ae_params[:n_enc])
        self.decoder = nn.Sequential(self.decoder_layers, ae_params[n_enc:])
        if nn.output_shape(self.encoder_layers + self.decoder_layers, self.fm_shape) != self.fm_shape:
            raise DimensionError("auto-encoder does not reproduce the feature-map shape")
        self.history: list[float] = []

    @classmethod
    def from_reference(cls, reference: VictimModel, bottleneck: int = 8, seed: int = 0,
                       blocks: int | None = None) -> "PerturbationExtractor":
        layers = reference_feature_layers(reference.descriptor, blocks)
        n = sum(len(nn.param_shapes(layer)) for layer in layers)
        params = [Tensor(p.data.copy()) for p in reference.parameters[:n]]
        return cls(layers, params, reference.descriptor.input_shape, bottleneck, np.random.default_rng(seed))

    @property
    def feature_width(self) -> int:
        return int(np.prod(self.fm_shape))

    def ae_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def feature_map(self, x) -> Tensor:
        """x -> F(x); the extractor never receives gradients."""
        x = _as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"expected images of shape {self.input_shape}, got {x.shape[1:]}")
        with T.no_grad():
            return Tensor(self.features(x).data)

    def reconstruct(self, fm: Tensor) -> Tensor:
        return self.decoder(self.encoder(fm))

    def __call__(self, x) -> Tensor:
        """Flattened estimated perturbation feature for adversarial images."""
        return T.flatten(self.reconstruct(self.feature_map(x)))

    def freeze_ae(self) -> None:
        self.encoder.freeze()
        self.decoder.freeze()

    def unfreeze_ae(self) -> None:
        self.encoder.unfreeze()
        self.decoder.unfreeze()


def ae_loss(pe: PerturbationExtractor, adv_image, clean_image) -> Tensor:
    """mean((x'fm - G(R(x'fm)) - xfm)^2)."""
    adv, clean = _as_tensor(adv_image), _as_tensor(clean_image)
    if adv.shape != clean.shape:
        raise DimensionError(f"adversarial {adv.shape} and clean {clean.shape} shapes differ")
    adv_fm = pe.feature_map(adv)
    clean_fm = pe.feature_map(clean)
    return T.mse(pe.reconstruct(adv_fm), adv_fm.data - clean_fm.data)


def train_ae(pe: PerturbationExtractor, train_records, epochs: int, lr: float = 1e-3, seed: int = 0,
             batch_size: int = 32) -> PerturbationExtractor:
    """Fit the auto-encoder to feature-level perturbations; appends epoch losses to ``pe.history``."""
    data = train_records if isinstance(train_records, RecordArrays) else stack(train_records)
    rng = np.random.default_rng(seed)
    adv_fm = pe.feature_map(data.adversarial).data
    target = adv_fm - pe.feature_map(data.clean).data
    pe.unfreeze_ae()
    opt = nn.Adam(pe.ae_parameters(), lr)
    n = len(data)
    for epoch in range(epochs):
        opt.lr = nn.cosine_lr(lr, epoch, epochs)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = T.mse(pe.reconstruct(Tensor(adv_fm[idx])), target[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"auto-encoder loss diverged at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
        pe.history.append(total / n)
    nn.snap_float32(pe.ae_parameters())
    pe.freeze_ae()
    return pe


# ---------------------------------------------------------------------------
# Multi-task model
# ---------------------------------------------------------------------------


@dataclass
class MTAAConfig:
    num_attacks: int
    num_victims: int
    input_shape: tuple[int, int, int]
    width: int = 24
    trunk_depth: str = "large"
    task_specific: bool = True
    perturbation_extractor: bool = True
    loss: str = "uncertainty"
    joint_ae: bool = False
    bottleneck: int = 8

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.trunk_depth not in ("small", "large"):
            raise ConfigError(f"trunk_depth must be 'small' or 'large', got {self.trunk_depth!r}")
        if self.loss not in ("uncertainty", "simple_sum"):
            raise ConfigError(f"loss must be 'uncertainty' or 'simple_sum', got {self.loss!r}")
        if self.joint_ae and not self.perturbation_extractor:
            raise ConfigError("joint_ae needs the perturbation extractor")
        if self.num_attacks < 2 or self.num_victims < 2 or self.width < 1:
            raise ConfigError("need at least two attack and two victim classes and a positive width")

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


ABLATION_FLAGS = {"uncertainty_loss", "simple_sum", "task_specific_layers", "perturbation_extractor",
                  "trunk_depth", "joint_ae", "width"}


def ablation_config(flags: dict, num_attacks: int, num_victims: int,
                    input_shape: Sequence[int]) -> MTAAConfig:
    """Translate ablation switches into a config; missing switches keep the full model."""
    unknown = set(flags) - ABLATION_FLAGS
    if unknown:
        raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
    uncertainty = flags.get("uncertainty_loss", True)
    simple = flags.get("simple_sum", not uncertainty)
    if uncertainty == simple:
        raise ConfigError("uncertainty_loss and simple_sum are mutually exclusive, and one must hold")
    return MTAAConfig(
        num_attacks, num_victims, tuple(input_shape),
        width=flags.get("width", 24),
        trunk_depth=flags.get("trunk_depth", "large"),
        task_specific=flags.get("task_specific_layers", True),
        perturbation_extractor=flags.get("perturbation_extractor", True),
        loss="uncertainty" if uncertainty else "simple_sum",
        joint_ae=flags.get("joint_ae", False),
    )


def trunk_layers(channels: int, width: int, depth: str) -> tuple[list[dict], list[dict]]:
    """(first conv stage, remaining layers) of the shared trunk.

    The split sits before the first pooling so the low-level tap keeps
    pixel-scale detail.
    """
    rest = [{"type": "maxpool", "size": 2}] + _block(width, 2 * width)
    if depth == "large":
        rest += _block(2 * width, 2 * width, pool=False)
    return _block(channels, width, pool=False), rest


def branch_layers(width: int) -> list[dict]:
    return _block(2 * width, 2 * width) + [{"type": "flatten"}]


class _Backbone:
    """Shared trunk, with the low-level tap, feeding one or more branches."""

    def __init__(self, input_shape, width: int, depth: str, n_branches: int, rng, params=None):
        low_layers, rest_layers = trunk_layers(input_shape[0], width, depth)
        blayers = branch_layers(width)
        groups = [low_layers, rest_layers] + [blayers] * n_branches
        counts = [2 * sum(1 for layer in g if nn.param_shapes(layer)) for g in groups]
        if params is None:
            params = [p for g in groups for p in nn.init_params(g, rng)]
        chunks, pos = [], 0
        for c in counts:
            chunks.append(list(params[pos : pos + c]))
            pos += c
        self.low = nn.Sequential(low_layers, chunks[0])
        self.rest = nn.Sequential(rest_layers, chunks[1])
        self.branches = [nn.Sequential(blayers, ch) for ch in chunks[2:]]
        self.low_width = width
        self.branch_width = nn.output_shape(low_layers + rest_layers + blayers, input_shape)[0]
        self.n_params = pos

    def parameters(self) -> list[Tensor]:
        out = self.low.parameters() + self.rest.parameters()
        for b in self.branches:
            out += b.parameters()
        return out

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        h1 = self.low(x)
        shared = self.rest(h1)
        return T.mean(h1, axis=(2, 3)), [b(shared) for b in self.branches]


@dataclass
class Outputs:
    attack: Tensor
    victim: Tensor
    hyper: Tensor  # (N,)


class AttributionModel:
    def __init__(self, config: MTAAConfig, pe: PerturbationExtractor | None, seed: int = 0,
                 params: Sequence[Tensor] | None = None):
        if config.perturbation_extractor and pe is None:
            raise ConfigError("config asks for a perturbation extractor but none was given")
        if pe is not None and tuple(pe.input_shape) != tuple(config.input_shape):
            raise DimensionError(f"extractor expects {pe.input_shape}, model {config.input_shape}")
        self.config = config
        self.pe = pe if config.perturbation_extractor else None
        rng = np.random.default_rng(seed)
        n_branches = 2 if config.task_specific else 1
        own = list(params) if params is not None else None
        self.backbone = _Backbone(config.input_shape, config.width, config.trunk_depth, n_branches, rng,
                                  own[: -7] if own is not None else None)
        pw = self.pe.feature_width if self.pe is not None else 0
        self.v_width = self.backbone.branch_width + self.backbone.low_width + pw
        self.victim_in = self.backbone.branch_width + pw
        if own is None:
            heads = (_dense_params(self.v_width, config.num_attacks, rng)
                     + _dense_params(self.victim_in, config.num_victims, rng)
                     + _dense_params(self.v_width + config.num_attacks, 1, rng))
            log_sigma = Tensor(np.zeros(3), requires_grad=True)
        else:
            heads, log_sigma = own[-7:-1], own[-1]
        self.w_attack, self.b_attack, self.w_victim, self.b_victim, self.w_hyper, self.b_hyper = heads
        self.log_sigma = log_sigma
        # raw hyper = shift + scale * head output; set from training labels
        self.hyper_shift, self.hyper_scale = 0.0, 1.0
        shapes = [(self.v_width, config.num_attacks), (self.victim_in, config.num_victims),
                  (self.v_width + config.num_attacks, 1)]
        for w, s in zip(heads[::2], shapes):
            if tuple(w.shape) != s:
                raise DimensionError(f"head weight {w.shape} does not match expected {s}")

    # -- parameters --------------------------------------------------------
    def head_parameters(self) -> list[Tensor]:
        return [self.w_attack, self.b_attack, self.w_victim, self.b_victim, self.w_hyper, self.b_hyper]

    def own_parameters(self) -> list[Tensor]:
        """Backbone, heads and log_sigma: everything except the extractor."""
        return self.backbone.parameters() + self.head_parameters() + [self.log_sigma]

    def trainable_parameters(self) -> list[Tensor]:
        extra = self.pe.ae_parameters() if (self.pe is not None and self.config.joint_ae) else []
        return extra + self.own_parameters()

    def parameters(self) -> list[Tensor]:
        """All parameters, frozen extractor included."""
        if self.pe is None:
            return self.own_parameters()
        return self.pe.features.parameters() + self.pe.ae_parameters() + self.own_parameters()

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data / 2.0)

    # -- forward -----------------------------------------------------------
    def perturbation_features(self, x) -> Tensor | None:
        if self.pe is None:
            return None
        return self.pe(x)

    def forward(self, x, pert: Tensor | None = None) -> Outputs:
        """Heads for adversarial images ``x``; ``pert`` may carry precomputed extractor output."""
        x = _as_tensor(x)
        if tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise DimensionError(f"expected images of shape {self.config.input_shape}, got {x.shape[1:]}")
        low, branches = self.backbone(x)
        a_feat = branches[0]
        v_feat = branches[1] if len(branches) > 1 else branches[0]
        if self.pe is not None:
            if pert is None:
                pert = self.pe(x)
            v = T.concat([a_feat, low, pert], axis=1)
            vic_in = T.concat([v_feat, pert], axis=1)
        else:
            v = T.concat([a_feat, low], axis=1)
            vic_in = v_feat
        z = _dense_forward(v, self.w_attack, self.b_attack)
        victim = _dense_forward(vic_in, self.w_victim, self.b_victim)
        # z enters the regressor as the classifier's result: the raw-scale
        # regression loss would otherwise swamp the attack logits
        hyper = _dense_forward(T.concat([v, z.detach()], axis=1), self.w_hyper, self.b_hyper)
        hyper = T.scale(T.reshape(hyper, (len(x.data),)), self.hyper_scale) + self.hyper_shift
        return Outputs(z, victim, hyper)

    __call__ = forward


def uncertainty_loss(log_sigma: Tensor, l_hyper: Tensor, l_attack: Tensor, l_victim: Tensor) -> Tensor:
    """1/(2 s1^2) L1 + 1/s2^2 L2 + 1/s3^2 L3 + log s1 + log s2 + log s3, with log s_i^2 learnable."""
    losses = T.concat([T.reshape(l_hyper, (1,)), T.reshape(l_attack, (1,)), T.reshape(l_victim, (1,))], axis=0)
    weights = T.exp(T.scale(log_sigma, -1.0))
    weighted = T.tsum(T.mul(T.mul(weights, losses), Tensor(np.array([0.5, 1.0, 1.0]))))
    return weighted + T.scale(T.tsum(log_sigma), 0.5)


@dataclass
class LossParts:
    total: Tensor
    hyper: float
    attack: float
    victim: float


def task_losses(model: AttributionModel, batch: RecordArrays, pert: Tensor | None = None):
    out = model.forward(batch.adversarial, pert)
    # regression error in standardized label units; predictions stay raw
    l1 = T.scale(T.mse(out.hyper, batch.hyper), 1.0 / model.hyper_scale ** 2)
    l2 = T.softmax_cross_entropy(out.attack, batch.attack)
    l3 = T.softmax_cross_entropy(out.victim, batch.victim)
    return l1, l2, l3


def combined_loss(model: AttributionModel, batch, pert: Tensor | None = None) -> Tensor:
    """The weighted three-task objective (plain sum in the ``simple_sum`` ablation)."""
    batch = batch if isinstance(batch, RecordArrays) else stack(batch)
    l1, l2, l3 = task_losses(model, batch, pert)
    if model.config.loss == "simple_sum":
        return l1 + l2 + l3
    return uncertainty_loss(model.log_sigma, l1, l2, l3)


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------


@dataclass
class Predictions:
    attack: np.ndarray
    victim: np.ndarray
    hyper: np.ndarray
    attack_logits: np.ndarray = field(repr=False, default=None)
    victim_logits: np.ndarray = field(repr=False, default=None)


def predict(model: AttributionModel, images: np.ndarray, batch_size: int = 256,
            pert: np.ndarray | None = None) -> Predictions:
    za, zv, hy = [], [], []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            p = Tensor(pert[i : i + batch_size]) if pert is not None else None
            out = model.forward(images[i : i + batch_size], p)
            za.append(out.attack.data)
            zv.append(out.victim.data)
            hy.append(out.hyper.data)
    za, zv = np.concatenate(za), np.concatenate(zv)
    return Predictions(za.argmax(axis=1), zv.argmax(axis=1), np.concatenate(hy), za, zv)


def _pert_cache(model: AttributionModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray | None:
    if model.pe is None:
        return None
    with T.no_grad():
        return np.concatenate([model.pe(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)])


def _metrics_row(epoch: int, split: str, model: AttributionModel, data: RecordArrays, pert) -> dict:
    pred = predict(model, data.adversarial, pert=pert)
    with T.no_grad():
        loss = combined_loss(model, data, Tensor(pert) if pert is not None else None).data
    s = model.sigma
    return {
        "epoch": epoch, "split": split,
        "attack_acc": float(np.mean(pred.attack == data.attack)),
        "victim_acc": float(np.mean(pred.victim == data.victim)),
        "hyper_rmse": float(np.sqrt(np.mean((pred.hyper - data.hyper) ** 2))),
        "loss": float(loss), "sigma1": float(s[0]), "sigma2": float(s[1]), "sigma3": float(s[2]),
    }


def train_mtaa(model: AttributionModel, train_records, epochs: int, lr: float = 1e-3,
               weight_decay: float = 1e-3, seed: int = 0, batch_size: int = 32, test_records=None,
               standardize_hyper: bool = True, sigma_lr: float | None = None) -> tuple[AttributionModel, list[dict]]:
    """Adam + per-epoch cosine annealing over all trainable parameters and log_sigma.

    Returns the model and one metrics row per epoch and split (see
    :data:`LOG_HEADER`).  With a staged extractor its output is computed
    once and reused, since nothing upstream of it is trained.
    """
    train = train_records if isinstance(train_records, RecordArrays) else stack(train_records)
    test = None
    if test_records is not None and len(test_records):
        test = test_records if isinstance(test_records, RecordArrays) else stack(test_records)
    joint = model.pe is not None and model.config.joint_ae
    if standardize_hyper:
        set_hyper_stats(model, train.hyper)
    if joint:
        model.pe.unfreeze_ae()
    elif model.pe is not None:
        model.pe.freeze_ae()
    cache = None if joint else _pert_cache(model, train.adversarial)
    test_cache = None if test is None else _pert_cache(model, test.adversarial)
    params = model.trainable_parameters()
    weights = [p for p in params if p is not model.log_sigma]
    opt = nn.Adam(weights, lr, weight_decay=weight_decay)
    # log_sigma gets its own (undecayed) Adam so its step size can be set apart
    sigma_base = lr if sigma_lr is None else sigma_lr
    sigma_opt = nn.Adam([model.log_sigma], sigma_base)
    rng = np.random.default_rng(seed)
    rows: list[dict] = []
    n = len(train)
    for epoch in range(epochs):
        opt.lr = nn.cosine_lr(lr, epoch, epochs)
        sigma_opt.lr = nn.cosine_lr(sigma_base, epoch, epochs)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = train.subset(idx)
            pert = Tensor(cache[idx]) if cache is not None else None
            loss = combined_loss(model, batch, pert)
            if joint:
                loss = loss + ae_loss(model.pe, batch.adversarial, batch.clean)
            if not np.isfinite(loss.data):
                raise TrainingError(f"attribution loss diverged at epoch {epoch}")
            opt.zero_grad()
            sigma_opt.zero_grad()
            T.backward(loss)
            opt.step()
            sigma_opt.step()
        if joint:
            model.pe.freeze_ae()
            cache_now = _pert_cache(model, train.adversarial)
            model.pe.unfreeze_ae()
        else:
            cache_now = cache
        rows.append(_metrics_row(epoch, "train", model, train, cache_now))
        if test is not None:
            tc = _pert_cache(model, test.adversarial) if joint else test_cache
            rows.append(_metrics_row(epoch, "test", model, test, tc))
    # checkpoints store float32, so the in-memory model matches a reload
    nn.snap_float32(model.parameters())
    if model.pe is not None:
        model.pe.freeze_ae()
    return model, rows


def set_hyper_stats(model, labels: np.ndarray) -> None:
    """Center and scale the regression output on the training labels."""
    std = float(np.std(labels))
    model.hyper_shift = float(np.float32(np.mean(labels)))
    model.hyper_scale = float(np.float32(std)) if std > 0 else 1.0


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass
class BaselineConfig:
    kind: str  # "single_task" or "single_label"
    task: str  # attack / victim / hyper, or "combined"
    outputs: int
    input_shape: tuple[int, int, int]
    width: int = 24
    trunk_depth: str = "large"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.kind not in ("single_task", "single_label"):
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "single_task" and self.task not in TASKS:
            raise ConfigError(f"single-task baseline task must be one of {TASKS}, got {self.task!r}")
        if self.trunk_depth not in ("small", "large"):
            raise ConfigError(f"trunk_depth must be 'small' or 'large', got {self.trunk_depth!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


class BaselineModel:
    """Trunk + one branch + one affine head: a classifier or (task hyper) a regressor."""

    def __init__(self, config: BaselineConfig, seed: int = 0, params: Sequence[Tensor] | None = None):
        self.config = config
        rng = np.random.default_rng(seed)
        own = list(params) if params is not None else None
        self.backbone = _Backbone(config.input_shape, config.width, config.trunk_depth, 1, rng,
                                  own[:-2] if own is not None else None)
        if own is None:
            self.w, self.b = _dense_params(self.backbone.branch_width, config.outputs, rng)
        else:
            self.w, self.b = own[-2:]
        self.hyper_shift, self.hyper_scale = 0.0, 1.0
        if tuple(self.w.shape) != (self.backbone.branch_width, config.outputs):
            raise DimensionError(f"head weight {self.w.shape} does not match the backbone")

    @property
    def is_regressor(self) -> bool:
        return self.config.task == "hyper"

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + [self.w, self.b]

    trainable_parameters = parameters

    def forward(self, x) -> Tensor:
        x = _as_tensor(x)
        if tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise DimensionError(f"expected images of shape {self.config.input_shape}, got {x.shape[1:]}")
        _, (feat,) = self.backbone(x)
        out = _dense_forward(feat, self.w, self.b)
        if self.is_regressor:
            return T.scale(T.reshape(out, (len(x.data),)), self.hyper_scale) + self.hyper_shift
        return out

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        with T.no_grad():
            outs = [self.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        return np.concatenate(outs)


def build_single_task(task: str, num_classes: int, input_shape, width: int = 24, trunk_depth: str = "large",
                      seed: int = 0) -> BaselineModel:
    """One of the single-task trio; ``num_classes`` is ignored for the hyper regressor."""
    outputs = 1 if task == "hyper" else num_classes
    return BaselineModel(BaselineConfig("single_task", task, outputs, tuple(input_shape), width, trunk_depth), seed)


def single_label_classes(grid: ScenarioGrid) -> int:
    """|attacks| * |victims| * |hypers|, plus one clean class when enabled."""
    n_h = _max_hypers(grid)
    return len(grid.attacks) * len(grid.victims) * n_h + (1 if grid.include_clean else 0)


def _max_hypers(grid: ScenarioGrid) -> int:
    return max(len(grid.hyper_values(a)) for a in grid.attacks)


def build_single_label(grid: ScenarioGrid, input_shape, width: int = 24, trunk_depth: str = "large",
                       seed: int = 0) -> BaselineModel:
    cfg = BaselineConfig("single_label", "combined", single_label_classes(grid), tuple(input_shape), width,
                         trunk_depth)
    return BaselineModel(cfg, seed)


def encode_single_label(grid: ScenarioGrid, attack: np.ndarray, victim: np.ndarray,
                        hyper: np.ndarray) -> np.ndarray:
    """Combined class a*|V|*|H| + v*|H| + h; clean records map to the last class."""
    n_v, n_h = len(grid.victims), _max_hypers(grid)
    attack, victim = np.asarray(attack), np.asarray(victim)
    out = np.empty(len(attack), dtype=np.int64)
    for i, (a, v, y) in enumerate(zip(attack, victim, hyper)):
        if grid.include_clean and a == grid.clean_attack_id:
            out[i] = len(grid.attacks) * n_v * n_h
            continue
        labels = np.array(grid.hyper_labels(grid.attacks[a]))
        h = int(np.argmin(np.abs(labels - y)))
        out[i] = a * n_v * n_h + v * n_h + h
    return out


def decode_single_label(grid: ScenarioGrid, classes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`encode_single_label`: (attack ids, victim ids, hyper labels)."""
    n_v, n_h = len(grid.victims), _max_hypers(grid)
    classes = np.asarray(classes)
    attack = np.empty(len(classes), dtype=np.int64)
    victim = np.empty(len(classes), dtype=np.int64)
    hyper = np.empty(len(classes))
    for i, c in enumerate(classes):
        if grid.include_clean and c == len(grid.attacks) * n_v * n_h:
            attack[i], victim[i], hyper[i] = grid.clean_attack_id, grid.clean_victim_id, 0.0
            continue
        a, rem = divmod(int(c), n_v * n_h)
        v, h = divmod(rem, n_h)
        labels = grid.hyper_labels(grid.attacks[a])
        attack[i], victim[i], hyper[i] = a, v, labels[min(h, len(labels) - 1)]
    return attack, victim, hyper


def baseline_targets(model: BaselineModel, data: RecordArrays, grid: ScenarioGrid | None = None) -> np.ndarray:
    task = model.config.task
    if task == "combined":
        if grid is None:
            raise ContractError("single-label targets need the scenario grid")
        return encode_single_label(grid, data.attack, data.victim, data.hyper)
    return {"attack": data.attack, "victim": data.victim, "hyper": data.hyper}[task]


def baseline_loss(model: BaselineModel, x, target) -> Tensor:
    out = model.forward(x)
    if model.is_regressor:
        return T.scale(T.mse(out, target), 1.0 / model.hyper_scale ** 2)
    return T.softmax_cross_entropy(out, target)


def train_baseline(model: BaselineModel, train_records, epochs: int, lr: float = 1e-3, weight_decay: float = 1e-3,
                   seed: int = 0, batch_size: int = 32, grid: ScenarioGrid | None = None) -> tuple[BaselineModel, list[float]]:
    """Same optimizer and schedule as :func:`train_mtaa`; returns per-epoch mean training loss."""
    train = train_records if isinstance(train_records, RecordArrays) else stack(train_records)
    target = baseline_targets(model, train, grid)
    if model.is_regressor:
        set_hyper_stats(model, target)
    params = model.parameters()
    opt = nn.Adam(params, lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    n = len(train)
    for epoch in range(epochs):
        opt.lr = nn.cosine_lr(lr, epoch, epochs)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = baseline_loss(model, train.adversarial[idx], target[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"baseline loss diverged at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
        history.append(total / n)
    nn.snap_float32(params)
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_model(model) -> bytes:
    """Serialize an attribution or baseline model into the AAPM container."""
    if isinstance(model, AttributionModel):
        meta = {
            "kind": "mtaa",
            "config": model.config.to_json(),
            "heads": {"attack": model.config.num_attacks, "victim": model.config.num_victims, "hyper": 1},
            "log_sigma": [float(np.float32(s)) for s in model.log_sigma.data],
            "hyper_stats": [model.hyper_shift, model.hyper_scale],
            "n_params": len(model.parameters()),
        }
        if model.pe is not None:
            meta["extractor"] = {"layers": model.pe.features.layers, "bottleneck": model.config.bottleneck,
                                 "n_feature_params": len(model.pe.features.params)}
        return checkpoint.pack(meta, [p.data for p in model.parameters()])
    if isinstance(model, BaselineModel):
        meta = {"kind": "baseline", "config": model.config.to_json(), "n_params": len(model.parameters()),
                "hyper_stats": [model.hyper_shift, model.hyper_scale]}
        return checkpoint.pack(meta, [p.data for p in model.parameters()])
    raise ContractError(f"cannot serialize {type(model).__name__}")


def _reshape_into(arrays, shapes) -> list[Tensor]:
    if len(arrays) != len(shapes) or any(a.size != int(np.prod(s)) for a, s in zip(arrays, shapes)):
        raise FormatError("checkpoint parameters do not match the stored architecture")
    return [Tensor(a.reshape(s)) for a, s in zip(arrays, shapes)]


def load_model(blob: bytes):
    meta, arrays = checkpoint.unpack(blob)
    kind = meta.get("kind")
    if kind == "baseline":
        cfg = BaselineConfig(**meta["config"])
        template = BaselineModel(cfg)
        params = _reshape_into(arrays, [p.shape for p in template.parameters()])
        model = BaselineModel(cfg, params=params)
        model.hyper_shift, model.hyper_scale = meta.get("hyper_stats", [0.0, 1.0])
        return model
    if kind != "mtaa":
        raise FormatError(f"checkpoint kind {kind!r} is not an attribution model")
    cfg = MTAAConfig(**meta["config"])
    pe = None
    rest = arrays
    if cfg.perturbation_extractor:
        ext = meta["extractor"]
        nf = ext["n_feature_params"]
        fshapes = [s for layer in ext["layers"] for s in nn.param_shapes(layer)]
        feats = _reshape_into(arrays[:nf], fshapes)
        probe = PerturbationExtractor(ext["layers"], feats, cfg.input_shape, ext["bottleneck"])
        na = len(probe.ae_parameters())
        ae = _reshape_into(arrays[nf : nf + na], [p.shape for p in probe.ae_parameters()])
        pe = PerturbationExtractor(ext["layers"], feats, cfg.input_shape, ext["bottleneck"], ae_params=ae)
        pe.freeze_ae()
        rest = arrays[nf + na :]
    template = AttributionModel(cfg, pe)
    own = _reshape_into(rest, [p.shape for p in template.own_parameters()])
    for p in own:
        p.requires_grad = True
    model = AttributionModel(cfg, pe, params=own)
    model.hyper_shift, model.hyper_scale = meta.get("hyper_stats", [0.0, 1.0])
    return model


def save_extractor(pe: PerturbationExtractor) -> bytes:
    """Serialize a perturbation extractor (frozen features plus auto-encoder)."""
    meta = {"kind": "extractor", "layers": pe.features.layers, "input_shape": list(pe.input_shape),
            "bottleneck": pe.bottleneck, "n_feature_params": len(pe.features.params), "history": pe.history}
    return checkpoint.pack(meta, [p.data for p in pe.features.parameters() + pe.ae_parameters()])


def load_extractor(blob: bytes) -> PerturbationExtractor:
    meta, arrays = checkpoint.unpack(blob)
    if meta.get("kind") != "extractor":
        raise FormatError(f"checkpoint kind {meta.get('kind')!r} is not a perturbation extractor")
    nf = meta["n_feature_params"]
    fshapes = [s for layer in meta["layers"] for s in nn.param_shapes(layer)]
    feats = _reshape_into(arrays[:nf], fshapes)
    probe = PerturbationExtractor(meta["layers"], feats, meta["input_shape"], meta["bottleneck"])
    ae = _reshape_into(arrays[nf:], [p.shape for p in probe.ae_parameters()])
    pe = PerturbationExtractor(meta["layers"], feats, meta["input_shape"], meta["bottleneck"], ae_params=ae)
    pe.freeze_ae()
    pe.history = list(meta.get("history", []))
    return pe


def count_parameters(model) -> int:
    """Element count of every parameter the model carries (frozen extractor included)."""
    if isinstance(model, (list, tuple)):
        return sum(count_parameters(m) for m in model)
    return nn.count_params(model.parameters())
