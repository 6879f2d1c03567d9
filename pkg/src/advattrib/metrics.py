"""Evaluation: head accuracies, hyper RMSE, the multi-task score, confusion
tables and the clean-vs-adversarial feature divergence diagnostic."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import mtaa as M
from .errors import ContractError
from .forge import RecordArrays, ScenarioGrid, stack


class Task(str, enum.Enum):
    ATTACK = "attack"
    VICTIM = "victim"
    HYPER = "hyper"


@dataclass(frozen=True)
class TaskMetric:
    task: Task
    value: float
    higher_is_better: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if self.higher_is_better is None:
            object.__setattr__(self, "higher_is_better", self.task is not Task.HYPER)


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.shape[0] if preds.ndim else 0} predictions for "
                            f"{labels.shape[0] if labels.ndim else 0} labels")
    if preds.size == 0:
        raise ContractError("need at least one prediction")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float(np.mean(preds == labels))


def rmse(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    diff = preds.astype(np.float64) - labels.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def delta_mtl(model_metrics: Sequence[TaskMetric], baseline_metrics: Sequence[TaskMetric]) -> float:
    """Mean signed relative improvement over the baseline, one term per task."""
    model = {m.task: m for m in model_metrics}
    base = {m.task: m for m in baseline_metrics}
    if len(model) != len(model_metrics) or len(base) != len(baseline_metrics):
        raise ContractError("each task may appear once per metric list")
    if set(model) != set(base) or not model:
        raise ContractError(f"task sets differ: {sorted(t.value for t in model)} vs {sorted(t.value for t in base)}")
    total = 0.0
    for task, m in model.items():
        b = base[task]
        if m.higher_is_better != b.higher_is_better:
            raise ContractError(f"metric direction for {task.value} disagrees between model and baseline")
        if b.value == 0:
            raise ZeroDivisionError(f"baseline {task.value} metric is zero")
        sign = 1.0 if b.higher_is_better else -1.0
        total += sign * (m.value - b.value) / b.value
    return total / len(model)


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds, labels = _pair(preds, labels)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    metrics: list[TaskMetric]
    attack_confusion: np.ndarray
    victim_confusion: np.ndarray
    cell_rmse: dict[tuple[int, int], float]
    attack_names: list[str]
    victim_names: list[str]
    n_examples: int
    clean: dict | None = None
    delta: dict | None = None
    combined_accuracy: float | None = None  # exact (attack, victim, hyper) matches, single-label mode
    logits: dict = field(default_factory=dict, repr=False)

    def metric(self, task: str) -> float:
        return next(m.value for m in self.metrics if m.task is Task(task))

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "n_examples": self.n_examples,
            "metrics": {m.task.value: m.value for m in self.metrics},
            "attack_names": self.attack_names,
            "victim_names": self.victim_names,
            "attack_confusion": self.attack_confusion.tolist(),
            "victim_confusion": self.victim_confusion.tolist(),
            "cell_rmse": [
                {"attack": self.attack_names[a], "victim": self.victim_names[v], "rmse": r}
                for (a, v), r in sorted(self.cell_rmse.items())
            ],
            "clean": self.clean,
            "delta_mtl": self.delta,
            "combined_accuracy": self.combined_accuracy,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def confusion_csv(self, which: str) -> str:
        cm, names = ((self.attack_confusion, self.attack_names) if which == "attack"
                     else (self.victim_confusion, self.victim_names))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, cm):
            w.writerow([name] + [int(c) for c in row])
        return buf.getvalue()

    def cell_rmse_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "victim", "rmse"])
        for (a, v), r in sorted(self.cell_rmse.items()):
            w.writerow([self.attack_names[a], self.victim_names[v], f"{r:.6f}"])
        return buf.getvalue()


def _predict(model, data: RecordArrays, mode: str, grid: ScenarioGrid | None):
    """(attack ids, victim ids, hyper values, logits dict) for any supported mode."""
    x = data.adversarial
    if mode == "mtaa":
        p = M.predict(model, x)
        return p.attack, p.victim, p.hyper, {"attack": p.attack_logits, "victim": p.victim_logits}
    if mode == "single_task":
        if not isinstance(model, Mapping) or set(model) != set(M.TASKS):
            raise ContractError("single_task mode needs a mapping {attack, victim, hyper} -> model")
        za, zv = model["attack"].predict(x), model["victim"].predict(x)
        return za.argmax(axis=1), zv.argmax(axis=1), model["hyper"].predict(x), {"attack": za, "victim": zv}
    if mode == "single_label":
        if grid is None:
            raise ContractError("single_label mode needs the scenario grid to decode classes")
        z = model.predict(x)
        a, v, h = M.decode_single_label(grid, z.argmax(axis=1))
        return a, v, h, {"combined": z}
    raise ContractError(f"unknown evaluation mode {mode!r}")


def evaluate(model, test_records, mode: str = "mtaa", grid: ScenarioGrid | None = None,
             attack_names: Sequence[str] | None = None, victim_names: Sequence[str] | None = None) -> EvalReport:
    """Score a trained model on attributed records.

    ``mode`` is ``mtaa`` (an AttributionModel), ``single_task`` (a mapping of
    task name to baseline) or ``single_label`` (a combined classifier,
    decoded with ``grid``).  A clean class, when present, is scored as its
    own label with hyper target 0.
    """
    if test_records is None or len(test_records) == 0:
        raise ContractError("cannot evaluate on an empty test set")
    data = test_records if isinstance(test_records, RecordArrays) else stack(test_records)
    if grid is not None:
        attack_names = attack_names or grid.attack_names
        victim_names = victim_names or grid.victim_names
    n_a = len(attack_names) if attack_names else int(max(data.attack.max(), 0)) + 1
    n_v = len(victim_names) if victim_names else int(max(data.victim.max(), 0)) + 1
    attack_names = list(attack_names) if attack_names else [str(i) for i in range(n_a)]
    victim_names = list(victim_names) if victim_names else [str(i) for i in range(n_v)]
    pa, pv, ph, logits = _predict(model, data, mode, grid)
    metrics = [
        TaskMetric(Task.ATTACK, accuracy(pa, data.attack)),
        TaskMetric(Task.VICTIM, accuracy(pv, data.victim)),
        TaskMetric(Task.HYPER, rmse(ph, data.hyper)),
    ]
    cells = {}
    for a in range(n_a):
        for v in range(n_v):
            mask = (data.attack == a) & (data.victim == v)
            if mask.any():
                cells[(a, v)] = rmse(ph[mask], data.hyper[mask])
    clean = None
    clean_id = attack_names.index("clean") if "clean" in attack_names else None
    if clean_id is not None:
        mask = data.attack == clean_id
        if mask.any():
            clean = {
                "count": int(mask.sum()),
                "attack_recall": accuracy(pa[mask], data.attack[mask]),
                "hyper_rmse_to_zero": rmse(ph[mask], np.zeros(int(mask.sum()))),
            }
    combined = None
    if mode == "single_label":
        hit = (pa == data.attack) & (pv == data.victim) & np.isclose(ph, data.hyper, rtol=0, atol=1e-6)
        combined = float(np.mean(hit))
    return EvalReport(mode, metrics, confusion_matrix(pa, data.attack, n_a), confusion_matrix(pv, data.victim, n_v),
                      cells, attack_names, victim_names, len(data), clean, None, combined, logits)


def compare(report: EvalReport, baseline: EvalReport) -> float:
    """Attach and return the multi-task score of ``report`` against ``baseline``."""
    d = delta_mtl(report.metrics, baseline.metrics)
    report.delta = {"baseline": baseline.mode, "value": d}
    return d


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def feature_divergence(reference, clean: np.ndarray, adversarial: np.ndarray) -> list[dict]:
    """Per-layer MSE and MAE between clean and adversarial activations.

    ``reference`` is anything with ``block_outputs(images)`` (a victim
    model).  The first row is the raw input, then one row per conv block.
    """
    clean, adversarial = np.asarray(clean, dtype=np.float64), np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise ContractError(f"unpaired batches: {clean.shape} vs {adversarial.shape}")
    if len(clean) == 0:
        raise ContractError("need at least one image pair")
    layers = [("input", clean, adversarial)]
    for i, (c, a) in enumerate(zip(reference.block_outputs(clean), reference.block_outputs(adversarial)), 1):
        layers.append((f"block{i}", c, a))
    rows = []
    for name, c, a in layers:
        diff = (a - c).reshape(len(c), -1)
        rows.append({
            "layer": name,
            "mse": float(np.mean(np.mean(diff * diff, axis=1))),
            "mae": float(np.mean(np.mean(np.abs(diff), axis=1))),
        })
    return rows


def count_parameters(model) -> int:
    return M.count_parameters(model)
