"""White-box evasion attacks: FGSM, PGD (both L-inf) and untargeted C&W-L2.

All three work on batches ``(N, C, H, W)`` sharing one :class:`AttackSpec`;
the single-image entry points wrap a batch of one.  Victims are only read:
gradients are taken with respect to the input tensor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .data import LabeledImage
from .errors import SpecError
from .tensor import Tensor

CW_BOX_DELTA = 1e-6


class Algorithm(str, enum.Enum):
    FGSM = "FGSM"
    PGD = "PGD"
    CW = "CW"


@dataclass(frozen=True)
class AttackSpec:
    algorithm: Algorithm
    epsilon: float = 0.0
    alpha: float = 10 / 255
    steps: int = 0
    kappa: float = 0.0
    c: float = 50.0
    cw_lr: float = 0.01
    random_start: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        except ValueError:
            raise SpecError(f"unknown attack algorithm {self.algorithm!r}") from None
        algo = self.algorithm
        if algo in (Algorithm.FGSM, Algorithm.PGD) and not 0.0 <= self.epsilon <= 1.0:
            raise SpecError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if algo is Algorithm.PGD and (self.alpha <= 0 or self.steps < 1):
            raise SpecError("PGD needs alpha > 0 and steps >= 1")
        if algo is Algorithm.CW and (self.kappa < 0 or self.c <= 0 or self.steps < 1 or self.cw_lr <= 0):
            raise SpecError("C&W needs kappa >= 0, c > 0, cw_lr > 0 and steps >= 1")

    @property
    def hyper_label(self) -> float:
        """Regression target: epsilon on the 0-255 pixel scale, or kappa."""
        if self.algorithm is Algorithm.CW:
            return float(self.kappa)
        return round(self.epsilon * 255.0, 6)


def fgsm_spec(epsilon: float) -> AttackSpec:
    return AttackSpec(Algorithm.FGSM, epsilon=epsilon)


def pgd_spec(epsilon: float, alpha: float = 10 / 255, steps: int = 40, random_start: bool = False) -> AttackSpec:
    return AttackSpec(Algorithm.PGD, epsilon=epsilon, alpha=alpha, steps=steps, random_start=random_start)


def cw_spec(kappa: float, c: float = 50.0, steps: int = 100, cw_lr: float = 0.01) -> AttackSpec:
    return AttackSpec(Algorithm.CW, kappa=kappa, c=c, steps=steps, cw_lr=cw_lr)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    perturbation_linf: float
    perturbation_l2: float


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def input_gradient(victim, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(sum of per-example cross-entropy)/dx for a frozen victim."""
    xt = Tensor(x, requires_grad=True)
    loss = T.softmax_cross_entropy(victim.logits(xt), labels) * float(len(x))
    T.backward(loss)
    return xt.grad


def fgsm_update(x: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def project_linf(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the epsilon L-inf ball around x, intersected with [0, 1]."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _predict(victim, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return victim.logits(Tensor(x)).data


def _results(x: np.ndarray, adv: np.ndarray, success: np.ndarray) -> list[AttackResult]:
    diff = (adv - x).reshape(len(x), -1)
    linf = np.abs(diff).max(axis=1)
    l2 = np.sqrt((diff * diff).sum(axis=1))
    return [AttackResult(a, bool(s), float(i), float(e)) for a, s, i, e in zip(adv, success, linf, l2)]


def _as_batch(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, LabeledImage):
        return np.asarray(x.pixels, dtype=np.float64)[None], np.array([x.label])
    pixels, label = x
    return np.asarray(pixels, dtype=np.float64)[None], np.array([label])


# ---------------------------------------------------------------------------
# Attacks (batched)
# ---------------------------------------------------------------------------


def fgsm_batch(images: np.ndarray, labels: np.ndarray, victim, spec: AttackSpec) -> list[AttackResult]:
    if spec.algorithm is not Algorithm.FGSM:
        raise SpecError(f"fgsm called with a {spec.algorithm.value} spec")
    x = np.asarray(images, dtype=np.float64)
    adv = fgsm_update(x, input_gradient(victim, x, labels), spec.epsilon)
    return _results(x, adv, _predict(victim, adv).argmax(axis=1) != labels)


def pgd_batch(images: np.ndarray, labels: np.ndarray, victim, spec: AttackSpec, seed: int = 0,
              trace: Callable[[int, np.ndarray], None] | None = None) -> list[AttackResult]:
    """``trace(t, x_t)`` is called for every iterate, including x_0."""
    if spec.algorithm is not Algorithm.PGD:
        raise SpecError(f"pgd called with a {spec.algorithm.value} spec")
    x = np.asarray(images, dtype=np.float64)
    adv = x.copy()
    if spec.random_start:
        rng = np.random.default_rng(seed)
        adv = project_linf(x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape), x, spec.epsilon)
    if trace is not None:
        trace(0, adv)
    for t in range(1, spec.steps + 1):
        g = input_gradient(victim, adv, labels)
        adv = project_linf(adv + spec.alpha * np.sign(g), x, spec.epsilon)
        if trace is not None:
            trace(t, adv)
    return _results(x, adv, _predict(victim, adv).argmax(axis=1) != labels)


def cw_margin(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """max_{i != u} Z_i - Z_u per row."""
    rows = np.arange(len(labels))
    masked = logits.copy()
    masked[rows, labels] = -np.inf
    return masked.max(axis=1) - logits[rows, labels]


def cw_batch(images: np.ndarray, labels: np.ndarray, victim, spec: AttackSpec,
             trace: Callable[[int, np.ndarray], None] | None = None) -> list[AttackResult]:
    """Untargeted C&W-L2 by plain gradient descent in tanh space.

    Minimises ||rho||^2 + c * max(Z_u - max_{i!=u} Z_i + kappa, 0) with
    x + rho = (tanh(w) + 1) / 2.  Returns, per example, the successful
    iterate (margin >= kappa) with the smallest L2 norm, else the last one.
    """
    if spec.algorithm is not Algorithm.CW:
        raise SpecError(f"cw called with a {spec.algorithm.value} spec")
    x = np.asarray(images, dtype=np.float64)
    n = len(x)
    rows = np.arange(n)
    onehot_true = np.zeros((n, 0))
    w = np.arctanh(2.0 * np.clip(x, CW_BOX_DELTA, 1.0 - CW_BOX_DELTA) - 1.0)
    best = np.full(n, np.inf)
    best_adv = np.zeros_like(x)
    found = np.zeros(n, dtype=bool)
    last = x
    for it in range(spec.steps + 1):
        wt = Tensor(w, requires_grad=True)
        xa = T.scale(T.tanh(wt) + 1.0, 0.5)
        rho = xa - Tensor(x)
        z = victim.logits(xa)
        if onehot_true.shape[1] != z.shape[1]:
            onehot_true = np.zeros(z.shape)
            onehot_true[rows, labels] = 1.0
        masked = np.where(onehot_true > 0, -np.inf, z.data)
        onehot_other = np.zeros(z.shape)
        onehot_other[rows, masked.argmax(axis=1)] = 1.0
        real = T.tsum(T.mul(z, Tensor(onehot_true)), axis=1)
        other = T.tsum(T.mul(z, Tensor(onehot_other)), axis=1)
        l2sq = T.tsum(T.square(T.flatten(rho)), axis=1)
        hinge = T.relu(real - other + spec.kappa)
        last = xa.data
        if trace is not None:
            trace(it, last)
        margin = other.data - real.data
        ok = margin >= spec.kappa
        better = ok & (l2sq.data < best)
        best[better] = l2sq.data[better]
        best_adv[better] = last[better]
        found |= ok
        if it == spec.steps:
            break
        loss = T.tsum(l2sq + T.scale(hinge, spec.c))
        T.backward(loss)
        w = w - spec.cw_lr * wt.grad
    adv = np.where(found[:, None, None, None], best_adv, last)
    return _results(x, adv, found)


def attack_batch(images: np.ndarray, labels: np.ndarray, victim, spec: AttackSpec, seed: int = 0) -> list[AttackResult]:
    """Dispatch on ``spec.algorithm``."""
    labels = np.asarray(labels)
    if spec.algorithm is Algorithm.FGSM:
        return fgsm_batch(images, labels, victim, spec)
    if spec.algorithm is Algorithm.PGD:
        return pgd_batch(images, labels, victim, spec, seed=seed)
    if spec.algorithm is Algorithm.CW:
        return cw_batch(images, labels, victim, spec)
    raise SpecError(f"unknown attack algorithm {spec.algorithm!r}")


# single-example entry points


def fgsm(x: LabeledImage, victim, spec: AttackSpec) -> AttackResult:
    images, labels = _as_batch(x)
    return fgsm_batch(images, labels, victim, spec)[0]


def pgd(x: LabeledImage, victim, spec: AttackSpec, seed: int = 0, trace=None) -> AttackResult:
    images, labels = _as_batch(x)
    return pgd_batch(images, labels, victim, spec, seed=seed, trace=trace)[0]


def cw(x: LabeledImage, victim, spec: AttackSpec, trace=None) -> AttackResult:
    images, labels = _as_batch(x)
    return cw_batch(images, labels, victim, spec, trace=trace)[0]


def attack(x: LabeledImage, victim, spec: AttackSpec, seed: int = 0) -> AttackResult:
    if not isinstance(spec, AttackSpec):
        raise SpecError(f"expected an AttackSpec, got {type(spec).__name__}")
    images, labels = _as_batch(x)
    return attack_batch(images, labels, victim, spec, seed=seed)[0]


def with_steps(spec: AttackSpec, steps: int) -> AttackSpec:
    return replace(spec, steps=steps)
