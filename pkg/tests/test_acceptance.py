"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The desk pipeline (criteria 6-10) runs once through the CLI entry points and
is shared by the tests that read it.  Tolerances are fixed; a criterion that
misses its target fails rather than being relaxed.
"""

import json
import zlib
from pathlib import Path

import numpy as np
import pytest

from advattrib import attacks as A
from advattrib import cli
from advattrib import config as C
from advattrib import forge as F
from advattrib import metrics as E
from advattrib import mtaa as M
from advattrib import tensor as T
from advattrib import victims as V
from advattrib.tensor import Tensor

from conftest import ACCEPTANCE, numeric_grad, rel_err
from test_attacks import EPSILONS, LinearVictim
from test_tensor import OPS

pytestmark = pytest.mark.acceptance

DESK_STAGES = [
    ("gen-data", None),
    ("train-victims", None),
    ("forge", None),
    ("train-ae", None),
    ("train-mtaa", None),
]


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def desk_config(out, **grid) -> C.RunConfig:
    """3 attacks x 5 victims x 20 hyper values, clean class on."""
    cfg = C.RunConfig(seed=0, out=str(out))
    cfg.grid = F.ScenarioGrid(per_cell_train=24, per_cell_test=6, include_clean=True, **grid)
    return cfg.validate()


def run_pipeline(cfg, baselines=(), models=("mtaa",)) -> dict:
    for command, kind in DESK_STAGES:
        cli.run_command(cfg, command, kind)
    for kind in baselines:
        cli.run_command(cfg, "train-baseline", kind)
    cli.run_command(cfg, "eval", model="all" if len(models) > 1 else models[0])
    return {k: json.loads((Path(cfg.out) / "eval" / f"{k}.json").read_text()) for k in models}


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = desk_config(tmp_path_factory.mktemp("desk"))
    results = run_pipeline(cfg, baselines=("single-task", "single-label"),
                           models=("mtaa", "single-task", "single-label"))
    return cfg, results


@pytest.fixture(scope="module")
def small_grid(tmp_path_factory):
    """FGSM and PGD against the first three zoo victims (2 x 3)."""
    cfg = desk_config(tmp_path_factory.mktemp("grid2x3"), attacks=["FGSM", "PGD"], victims=list(V.ZOO_NAMES[:3]))
    results = run_pipeline(cfg, baselines=("single-label",), models=("mtaa", "single-label"))
    return cfg, results


# ---------------------------------------------------------------------------
# 1-5: pure functions and properties
# ---------------------------------------------------------------------------


def trio(a, v, h):
    return [E.TaskMetric(E.Task.ATTACK, a), E.TaskMetric(E.Task.VICTIM, v), E.TaskMetric(E.Task.HYPER, h)]


def test_c1_delta_mtl_oracle():
    d8 = 100 * E.delta_mtl(trio(99.78, 97.84, 6.79), trio(98.68, 94.72, 7.33))
    d12 = 100 * E.delta_mtl(trio(99.81, 96.41, 7.21), trio(97.58, 94.45, 11.23))
    ok = abs(d8 - 3.93) <= 0.01 and abs(d12 - 13.39) <= 0.01
    record(1, ok, f"delta_mtl {d8:+.4f}% (target +3.93), {d12:+.4f}% (target +13.39), tol 0.01")
    assert ok


def test_c2_gradient_integrity(small_reference):
    worst_op = 0.0
    for name, (build, shapes) in sorted(OPS.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()) + 1)
        for _ in range(10):
            arrays = [rng.normal(size=s) for s in shapes]
            if name == "maxpool2d":
                arrays[0] = rng.permutation(arrays[0].size).reshape(shapes[0]) * 0.1
            if name in ("relu", "clamp"):
                arrays[0] = np.where(np.abs(arrays[0]) < 0.05, 0.3, arrays[0])
                if name == "clamp":
                    arrays[0] = np.where(np.abs(np.abs(arrays[0]) - 0.5) < 0.05, 0.2, arrays[0])
            worst_op = max(worst_op, _op_error(build, arrays))

    shape = (1, 8, 8)
    pe = M.PerturbationExtractor.from_reference(small_reference, seed=0)
    rng = np.random.default_rng(11)
    worst_model = 0.0
    for trial in range(10):
        m = M.AttributionModel(M.MTAAConfig(3, 5, shape, width=4), pe, seed=trial)
        m.log_sigma.data = rng.normal(scale=0.3, size=3)
        m.w_hyper.data[-3:] = 0.0  # z reaches the regressor through a stop-gradient
        clean = rng.uniform(size=(3,) + shape)
        adv = np.clip(clean + rng.uniform(-0.1, 0.1, size=clean.shape), 0, 1)
        batch = F.RecordArrays(adv, clean, rng.integers(0, 3, 3), rng.integers(0, 5, 3), rng.choice([10.0, 90.0], 3))
        params = m.own_parameters() + pe.ae_parameters()
        pe.unfreeze_ae()
        for p in params:
            p.grad = None
        T.backward(M.combined_loss(m, batch))
        for p in params:
            d = rng.normal(size=p.shape)
            g, h = float(np.sum(p.grad * d)), 1e-5
            p.data = p.data + h * d
            with T.no_grad():
                fp = M.combined_loss(m, batch).item()
            p.data = p.data - 2 * h * d
            with T.no_grad():
                fm = M.combined_loss(m, batch).item()
            p.data = p.data + h * d
            num = (fp - fm) / (2 * h)
            worst_model = max(worst_model, abs(num - g) / max(abs(num), abs(g), 1e-6))
        pe.freeze_ae()
    ok = worst_op < 1e-4 and worst_model < 1e-3
    record(2, ok, f"{len(OPS)} ops x 10: max rel err {worst_op:.2e} (< 1e-4); "
                  f"full model x 10: {worst_model:.2e} (< 1e-3)")
    assert ok


def _op_error(build, arrays, h=1e-5):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*tensors))
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            with T.no_grad():
                return float(build(*[Tensor(x) for x in arrays]).data)
        worst = max(worst, rel_err(t.grad, numeric_grad(f, a, h)))
    return worst


def test_c3_attack_norm_properties(small_zoo, small_split):
    x, y = small_split.test_x[:8], small_split.test_y[:8]
    n_box = n_ok = 0
    for victim in small_zoo:
        for eps in EPSILONS:
            for spec in (A.fgsm_spec(eps), A.pgd_spec(eps)):
                for r, xi in zip(A.attack_batch(x, y, victim, spec), x):
                    n_box += 1
                    n_ok += (np.max(np.abs(r.adversarial - xi)) <= eps + 1e-9
                             and r.adversarial.min() >= 0.0 and r.adversarial.max() <= 1.0)
    n_cw = n_margin = 0
    for victim in small_zoo:
        # the small victims' logits rarely clear kappa >= 5, so low margins are added
        for kappa in [0.0, 0.5, 1.0, 2.0, 3.0, 4.0] + F.DEFAULT_KAPPAS:
            res = A.cw_batch(x, y, victim, A.cw_spec(kappa))
            adv = np.stack([r.adversarial for r in res])
            margins = A.cw_margin(victim.logits(adv).data, y)
            for r, m in zip(res, margins):
                if r.success:
                    n_cw += 1
                    n_margin += bool(m >= kappa - 1e-6 and r.adversarial.min() >= 0 and r.adversarial.max() <= 1)
    ok = n_ok == n_box and n_margin == n_cw and n_cw > 0
    record(3, ok, f"FGSM/PGD within eps and [0,1]: {n_ok}/{n_box}; "
                  f"successful C&W with margin >= kappa: {n_margin}/{n_cw}")
    assert ok


def test_c4_cw_linear_oracle():
    from advattrib.data import LabeledImage
    d = np.array([1.0, 2.0])
    beta, kappa = -1.0, 0.5
    x = np.array([0.5, 0.5])
    rho_star = -(d @ x + beta + kappa) * d / (d @ d)
    res = A.cw(LabeledImage(x.reshape(1, 1, 2), 1), LinearVictim(d, beta), A.cw_spec(kappa, c=50.0, steps=3000, cw_lr=0.002))
    rho = res.adversarial.ravel() - x
    angle = np.degrees(np.arccos(np.clip(rho @ rho_star / (np.linalg.norm(rho) * np.linalg.norm(rho_star)), -1, 1)))
    mag = abs(np.linalg.norm(rho) - np.linalg.norm(rho_star)) / np.linalg.norm(rho_star)
    ok = bool(res.success) and angle < 5.0 and mag <= 0.10
    record(4, ok, f"direction error {angle:.3f} deg (< 5), magnitude error {100 * mag:.2f}% (<= 10%)")
    assert ok


def test_c5_uncertainty_stationarity():
    worst = 0.0
    for l1 in (0.05, 1.0, 7.3, 250.0):
        s = Tensor(np.zeros(3), requires_grad=True)
        for _ in range(4000):
            s.grad = None
            T.backward(M.uncertainty_loss(s, Tensor(l1), Tensor(0.0), Tensor(0.0)))
            s.data = s.data - 0.05 * np.array([1.0, 0.0, 0.0]) * s.grad
        worst = max(worst, abs(np.exp(s.data[0]) - l1) / l1)
    ok = worst < 0.01
    record(5, ok, f"sigma1^2 vs L1 over L1 in (0.05, 1, 7.3, 250): max rel gap {100 * worst:.4f}% (< 1%)")
    assert ok


# ---------------------------------------------------------------------------
# 6-10: the desk pipeline
# ---------------------------------------------------------------------------


def test_c6_desk_attribution(desk):
    _, res = desk
    adv = res["mtaa"]["adversarial_only"]["metrics"]
    gm = res["mtaa"]["global_mean_hyper_rmse"]
    ok = adv["attack"] >= 0.90 and adv["victim"] >= 0.60 and adv["hyper"] < gm
    record(6, ok, f"attack acc {adv['attack']:.3f} (>= 0.90), victim acc {adv['victim']:.3f} (>= 0.60), "
                  f"hyper RMSE {adv['hyper']:.2f} (< global-mean {gm:.2f})")
    assert ok


def test_c7_mtl_beats_single_task(desk):
    _, res = desk
    delta = res["mtaa"]["adversarial_only"]["delta_mtl"]["value"]
    p_mtaa, p_trio = res["mtaa"]["params"], res["single-task"]["params"]
    st = res["single-task"]["adversarial_only"]["metrics"]
    ok = delta > 0 and p_mtaa < p_trio
    record(7, ok, f"delta_mtl {100 * delta:+.2f}% (> 0; single-task attack {st['attack']:.3f} "
                  f"victim {st['victim']:.3f} RMSE {st['hyper']:.2f}), params {p_mtaa} < {p_trio}")
    assert ok


def test_c8_scenario_scaling(desk, small_grid):
    _, big = desk
    _, small = small_grid
    a_big = big["mtaa"]["adversarial_only"]["metrics"]["attack"]
    a_small = small["mtaa"]["adversarial_only"]["metrics"]["attack"]
    c_big = big["single-label"]["adversarial_only"]["combined_accuracy"]
    c_small = small["single-label"]["adversarial_only"]["combined_accuracy"]
    shift, drop = 100 * abs(a_small - a_big), 100 * (c_small - c_big)
    ok = shift < 5.0 and drop > 10.0
    record(8, ok, f"MTAA attack acc 2x3 {a_small:.3f} -> 3x5 {a_big:.3f} (|change| {shift:.1f} < 5 pts); "
                  f"single-label combined acc {c_small:.3f} -> {c_big:.3f} (drop {drop:.1f} > 10 pts)")
    assert ok


def test_c9_false_alarms(desk):
    _, res = desk
    clean = res["mtaa"]["clean"]
    ok = clean["hyper_rmse_to_zero"] < 10.0 and clean["attack_recall"] >= 0.90
    record(9, ok, f"{clean['count']} clean test records: hyper RMSE-to-zero {clean['hyper_rmse_to_zero']:.2f} (< 10), "
                  f"clean recall {clean['attack_recall']:.3f} (>= 0.90)")
    assert ok


def test_c10_determinism(desk, tmp_path_factory):
    cfg, res = desk
    again = desk_config(tmp_path_factory.mktemp("desk_again"))
    res2 = run_pipeline(again)
    same_files = all((Path(cfg.out) / "forge" / n).read_bytes() == (Path(again.out) / "forge" / n).read_bytes()
                     for n in ("train.aapd", "test.aapd"))
    keys = ("metrics", "clean", "attack_confusion", "victim_confusion", "cell_rmse")
    same_metrics = all(res["mtaa"][k] == res2["mtaa"][k] for k in keys)
    same_metrics &= res["mtaa"]["adversarial_only"]["metrics"] == res2["mtaa"]["adversarial_only"]["metrics"]
    model_bytes = (Path(cfg.out) / "mtaa" / "model.aapm").read_bytes() == (Path(again.out) / "mtaa" / "model.aapm").read_bytes()
    ok = same_files and same_metrics
    record(10, ok, f"dataset files byte-identical: {same_files}; metrics identical: {same_metrics}; "
                   f"checkpoint identical: {model_bytes}")
    assert ok


# ---------------------------------------------------------------------------
# 11: serialization
# ---------------------------------------------------------------------------


def test_c11_serialization_round_trips(desk, tmp_path):
    cfg, _ = desk
    out = Path(cfg.out)
    src = out / "forge" / "test.aapd"
    records = F.read_dataset(src)
    F.write_dataset(records, tmp_path / "copy.aapd")
    dataset_ok = (tmp_path / "copy.aapd").read_bytes() == src.read_bytes() and F.read_dataset(tmp_path / "copy.aapd") == records

    x = F.stack(records[:64]).adversarial
    worst = 0.0

    # a freshly initialised (float64) model stored at 32 bits
    train, _, grid = cli.Run(cfg, "check").forged()
    pe = M.load_extractor((out / "ae" / "extractor.aapm").read_bytes())
    mc = M.ablation_config({"width": 8}, grid.num_attack_classes, grid.num_victim_classes, x.shape[1:])
    models = [M.AttributionModel(mc, pe, seed=3)]
    models.append(M.load_model((out / "mtaa" / "model.aapm").read_bytes()))
    models.append(M.load_model((out / "baseline_single_label" / "model.aapm").read_bytes()))
    for m in models:
        back = M.load_model(M.save_model(m))
        if isinstance(m, M.AttributionModel):
            p, q = M.predict(m, x), M.predict(back, x)
            pairs = [(p.attack_logits, q.attack_logits), (p.victim_logits, q.victim_logits), (p.hyper, q.hyper)]
        else:
            pairs = [(m.predict(x), back.predict(x))]
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in pairs))
    for name in V.ZOO_NAMES:
        v = V.load_checkpoint((out / "victims" / f"{name}.aapm").read_bytes())
        fresh = V.load_checkpoint(V.save_checkpoint(v))
        worst = max(worst, float(np.max(np.abs(v.logits(x).data - fresh.logits(x).data))))
    ok = dataset_ok and worst <= 1e-6
    record(11, ok, f"AAPD rewrite bitwise identical: {dataset_ok}; "
                   f"checkpoint forward max |diff| {worst:.2e} (<= 1e-6)")
    assert ok
