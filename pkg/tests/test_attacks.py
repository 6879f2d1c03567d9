import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advattrib import attacks as A
from advattrib import victims as V
from advattrib.data import LabeledImage
from advattrib.errors import SpecError
from advattrib.tensor import Tensor

EPSILONS = [k * 10 / 255 for k in range(1, 21)]


class LinearVictim:
    """Two-class linear model: logits (0, d.x + beta); class 1 wins when d.x + beta > 0."""

    def __init__(self, d, beta):
        self.w = np.stack([np.zeros_like(d), d], axis=1)
        self.b = np.array([0.0, beta])

    def logits(self, x):
        from advattrib import tensor as T
        x = x if isinstance(x, Tensor) else Tensor(x)
        return T.matmul(T.flatten(x), Tensor(self.w)) + Tensor(self.b)


def test_spec_validation():
    with pytest.raises(SpecError):
        A.AttackSpec("DeepFool")
    with pytest.raises(SpecError):
        A.AttackSpec(A.Algorithm.FGSM, epsilon=1.5)
    with pytest.raises(SpecError):
        A.AttackSpec(A.Algorithm.PGD, epsilon=0.1, steps=0)
    with pytest.raises(SpecError):
        A.AttackSpec(A.Algorithm.CW, kappa=-1, steps=10)
    with pytest.raises(SpecError):
        A.fgsm(LabeledImage(np.zeros((1, 8, 8)), 0), None, A.pgd_spec(0.1))


def test_hyper_labels():
    assert A.fgsm_spec(30 / 255).hyper_label == 30.0
    assert A.pgd_spec(200 / 255).hyper_label == 200.0
    assert A.cw_spec(35.0).hyper_label == 35.0


def test_fgsm_on_linear_victim_moves_every_pixel_by_epsilon():
    d = np.array([1.0, -2.0, 0.5, 3.0])
    victim = LinearVictim(d, 0.0)
    x = np.full((1, 1, 2, 2), 0.5)
    res = A.fgsm(LabeledImage(x[0], 0), victim, A.fgsm_spec(0.1))
    # loss of class 0 grows along +d
    assert np.allclose(res.adversarial.ravel(), 0.5 + 0.1 * np.sign(d))
    assert np.isclose(res.perturbation_linf, 0.1)


def test_fgsm_zero_gradient_leaves_pixel_alone():
    victim = LinearVictim(np.array([1.0, 0.0, 0.0, 0.0]), 0.0)
    res = A.fgsm(LabeledImage(np.full((1, 2, 2), 0.5), 0), victim, A.fgsm_spec(0.2))
    assert np.allclose(res.adversarial.ravel(), [0.7, 0.5, 0.5, 0.5])


def test_fgsm_eps_zero_is_identity(small_zoo, small_split):
    x, y = small_split.test_x[:4], small_split.test_y[:4]
    for r, xi in zip(A.fgsm_batch(x, y, small_zoo[0], A.fgsm_spec(0.0)), x):
        assert np.array_equal(r.adversarial, xi)


def test_pgd_one_step_equals_fgsm_when_alpha_is_epsilon(small_zoo, small_split):
    x, y = small_split.test_x[:6], small_split.test_y[:6]
    eps = 30 / 255
    a = A.fgsm_batch(x, y, small_zoo[1], A.fgsm_spec(eps))
    b = A.pgd_batch(x, y, small_zoo[1], A.pgd_spec(eps, alpha=eps, steps=1))
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.adversarial, rb.adversarial)


def test_pgd_trace_stays_in_ball(small_zoo, small_split):
    x, y = small_split.test_x[:3], small_split.test_y[:3]
    eps = 20 / 255
    seen = []

    def trace(t, xt):
        seen.append(t)
        assert np.max(np.abs(xt - x)) <= eps + 1e-9 and xt.min() >= 0 and xt.max() <= 1

    A.pgd_batch(x, y, small_zoo[0], A.pgd_spec(eps, steps=7), trace=trace)
    assert seen == list(range(8))


def test_pgd_random_start_is_seeded(small_zoo, small_split):
    x, y = small_split.test_x[:3], small_split.test_y[:3]
    spec = A.pgd_spec(20 / 255, steps=3, random_start=True)
    a = A.pgd_batch(x, y, small_zoo[0], spec, seed=5)
    b = A.pgd_batch(x, y, small_zoo[0], spec, seed=5)
    assert all(np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, b))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(EPSILONS), st.integers(0, 4), st.sampled_from(["FGSM", "PGD"]))
def test_linf_budget_and_box(small_zoo, small_split, eps, v, algo):
    x, y = small_split.test_x[:5], small_split.test_y[:5]
    spec = A.fgsm_spec(eps) if algo == "FGSM" else A.pgd_spec(eps, steps=5)
    for r, xi in zip(A.attack_batch(x, y, small_zoo[v], spec), x):
        assert np.max(np.abs(r.adversarial - xi)) <= eps + 1e-9
        assert r.adversarial.min() >= 0.0 and r.adversarial.max() <= 1.0


def test_cw_successes_meet_the_margin(small_zoo, small_split):
    x, y = small_split.test_x[:8], small_split.test_y[:8]
    for kappa in (5.0, 20.0):
        spec = A.cw_spec(kappa, steps=60)
        for v in small_zoo[:2]:
            res = A.cw_batch(x, y, v, spec)
            adv = np.stack([r.adversarial for r in res])
            margins = A.cw_margin(v.logits(adv).data, y)
            for r, m in zip(res, margins):
                assert r.adversarial.min() >= 0 and r.adversarial.max() <= 1
                if r.success:
                    assert m >= kappa - 1e-6


def test_cw_best_iterate_is_the_smallest_successful_one(small_zoo, small_split):
    x, y = small_split.test_x[:4], small_split.test_y[:4]
    spec = A.cw_spec(5.0, steps=40)
    v = small_zoo[0]
    iterates = []
    A.cw_batch(x, y, v, spec, trace=lambda t, xt: iterates.append(xt.copy()))
    res = A.cw_batch(x, y, v, spec)
    for i, r in enumerate(res):
        ok = [it[i] for it in iterates if A.cw_margin(v.logits(it[i : i + 1]).data, y[i : i + 1])[0] >= 5.0]
        if r.success:
            best = min(float(np.sum((it - x[i]) ** 2)) for it in ok)
            assert np.isclose(r.perturbation_l2 ** 2, best)
        else:
            assert not ok


def test_cw_linear_oracle():
    """On a 2-class linear victim the optimum is the shortest step past the margin hyperplane."""
    d = np.array([1.0, 2.0])
    beta, kappa = -1.0, 0.5  # x starts correctly classified (d.x + beta = 0.5)
    x = np.array([0.5, 0.5])
    victim = LinearVictim(d, beta)
    # true class 1: margin Z_0 - Z_1 = -(d.x + beta) must reach kappa
    rho_star = -(d @ x + beta + kappa) * d / (d @ d)
    spec = A.cw_spec(kappa, c=50.0, steps=3000, cw_lr=0.002)
    res = A.cw(LabeledImage(x.reshape(1, 1, 2), 1), victim, spec)
    rho = res.adversarial.ravel() - x
    cos = rho @ rho_star / (np.linalg.norm(rho) * np.linalg.norm(rho_star))
    assert res.success
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))) < 5.0
    assert abs(np.linalg.norm(rho) - np.linalg.norm(rho_star)) <= 0.1 * np.linalg.norm(rho_star)


def test_attack_is_deterministic(small_zoo, small_split):
    x = LabeledImage(small_split.test_x[0], int(small_split.test_y[0]))
    for spec in (A.fgsm_spec(0.1), A.pgd_spec(0.1, steps=5), A.cw_spec(5.0, steps=20)):
        a = A.attack(x, small_zoo[2], spec)
        b = A.attack(x, small_zoo[2], spec)
        assert a.adversarial.tobytes() == b.adversarial.tobytes() and a.success == b.success


def test_victim_parameters_untouched(small_zoo, small_split):
    v = small_zoo[0]
    before = [p.data.copy() for p in v.parameters]
    A.attack_batch(small_split.test_x[:3], small_split.test_y[:3], v, A.pgd_spec(0.1, steps=3))
    assert all(np.array_equal(b, p.data) and p.grad is None for b, p in zip(before, v.parameters))
