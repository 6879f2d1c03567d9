"""Forging the supervised attribution corpus and its "AAPD" file format.

Every (attack, victim, hyperparameter) cell of a :class:`ScenarioGrid` gets
``per_cell_train`` records built from the clean train split and
``per_cell_test`` from the clean test split, so train and test never share a
clean image.  With ``include_clean`` an extra "clean" label is appended to
both the attack and the victim vocabularies; clean records carry hyper 0.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import Algorithm, AttackSpec, attack_batch
from .data import DatasetSplit
from .errors import ConfigError, ForgeError, FormatError, TruncatedFileError
from .victims import ZOO_NAMES

MAGIC = b"AAPD"
VERSION = 1
CLEAN = "clean"

DEFAULT_EPSILONS = [k * 10 / 255 for k in range(1, 21)]
DEFAULT_KAPPAS = [float(k) for k in range(5, 101, 5)]


@dataclass
class ScenarioGrid:
    attacks: list[str] = field(default_factory=lambda: ["FGSM", "PGD", "CW"])
    victims: list[str] = field(default_factory=lambda: list(ZOO_NAMES))
    epsilons: list[float] = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    kappas: list[float] = field(default_factory=lambda: list(DEFAULT_KAPPAS))
    per_cell_train: int = 8
    per_cell_test: int = 2
    include_clean: bool = False
    filter_unsuccessful: bool = False
    # attack settings shared by every cell
    pgd_alpha: float = 10 / 255
    pgd_steps: int = 40
    pgd_random_start: bool = False
    cw_c: float = 50.0
    cw_steps: int = 100
    cw_lr: float = 0.01

    def __post_init__(self):
        bad = [a for a in self.attacks if a not in Algorithm.__members__]
        if bad:
            raise ConfigError(f"unknown attacks {bad}; choose from {list(Algorithm.__members__)}")
        if not self.attacks or not self.victims:
            raise ConfigError("grid needs at least one attack and one victim")
        if len(set(self.attacks)) != len(self.attacks) or len(set(self.victims)) != len(self.victims):
            raise ConfigError("attack and victim lists must not repeat")
        if self.per_cell_train < 0 or self.per_cell_test < 0:
            raise ConfigError("per-cell counts must be non-negative")

    # -- vocabularies ----------------------------------------------------
    @property
    def attack_names(self) -> list[str]:
        return list(self.attacks) + ([CLEAN] if self.include_clean else [])

    @property
    def victim_names(self) -> list[str]:
        return list(self.victims) + ([CLEAN] if self.include_clean else [])

    @property
    def num_attack_classes(self) -> int:
        return len(self.attack_names)

    @property
    def num_victim_classes(self) -> int:
        return len(self.victim_names)

    @property
    def clean_attack_id(self) -> int | None:
        return len(self.attacks) if self.include_clean else None

    @property
    def clean_victim_id(self) -> int | None:
        return len(self.victims) if self.include_clean else None

    def hyper_values(self, attack: str) -> list[float]:
        return list(self.kappas) if attack == "CW" else list(self.epsilons)

    def hyper_labels(self, attack: str) -> list[float]:
        return [self.spec(attack, h).hyper_label for h in range(len(self.hyper_values(attack)))]

    def spec(self, attack: str, hyper_index: int) -> AttackSpec:
        value = self.hyper_values(attack)[hyper_index]
        if attack == "FGSM":
            return AttackSpec(Algorithm.FGSM, epsilon=value)
        if attack == "PGD":
            return AttackSpec(Algorithm.PGD, epsilon=value, alpha=self.pgd_alpha, steps=self.pgd_steps,
                              random_start=self.pgd_random_start)
        return AttackSpec(Algorithm.CW, kappa=value, c=self.cw_c, steps=self.cw_steps, cw_lr=self.cw_lr)

    def cells(self) -> list[tuple[int, int, int]]:
        return [
            (a, v, h)
            for a, name in enumerate(self.attacks)
            for v in range(len(self.victims))
            for h in range(len(self.hyper_values(name)))
        ]

    def clean_count(self, per_cell: int, pool: int | None = None) -> int:
        """Clean records per split: as many as one attack class holds on average,
        capped at ``pool`` (the number of clean images available)."""
        if not self.include_clean:
            return 0
        per_attack = np.mean([len(self.hyper_values(a)) for a in self.attacks])
        count = int(round(per_cell * len(self.victims) * per_attack))
        return count if pool is None else min(count, pool)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioGrid":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown grid fields {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class AttributedExample:
    clean: np.ndarray  # float32 (C, H, W)
    adversarial: np.ndarray  # float32 (C, H, W)
    attack_id: int
    victim_id: int
    hyper_label: float
    true_class: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttributedExample):
            return NotImplemented
        return (
            self.clean.dtype == other.clean.dtype
            and np.array_equal(self.clean, other.clean)
            and np.array_equal(self.adversarial, other.adversarial)
            and (self.attack_id, self.victim_id, self.true_class) == (other.attack_id, other.victim_id, other.true_class)
            and np.float32(self.hyper_label) == np.float32(other.hyper_label)
        )


def _pick(rng: np.random.Generator, pool: int, k: int, where: str) -> np.ndarray:
    if k > pool:
        raise ForgeError(f"{where}: need {k} distinct clean images but the split holds {pool}")
    return np.sort(rng.choice(pool, size=k, replace=False))


def _forge_cell(grid: ScenarioGrid, cell: tuple[int, int, int], index: int, victims, data: DatasetSplit,
                seed: int) -> tuple[list[AttributedExample], list[AttributedExample]]:
    a, v, h = cell
    attack = grid.attacks[a]
    spec = grid.spec(attack, h)
    label = np.float32(spec.hyper_label)
    rng = np.random.default_rng([seed, index])
    where = f"cell ({attack}, {grid.victims[v]}, {grid.hyper_values(attack)[h]:.6g})"
    out = []
    for x_all, y_all, k in ((data.train_x, data.train_y, grid.per_cell_train),
                            (data.test_x, data.test_y, grid.per_cell_test)):
        if k == 0:
            out.append([])
            continue
        idx = _pick(rng, len(x_all), k, where)
        x, y = x_all[idx], y_all[idx]
        results = attack_batch(x, y, victims[v], spec, seed=int(rng.integers(2**63)))
        records = [
            AttributedExample(xi.astype(np.float32), r.adversarial.astype(np.float32), a, v, float(label), int(yi))
            for xi, yi, r in zip(x, y, results)
            if r.success or not grid.filter_unsuccessful
        ]
        if not records:
            raise ForgeError(f"{where}: no successful attacks left after filtering")
        out.append(records)
    return out[0], out[1]


def _clean_records(grid: ScenarioGrid, x_all, y_all, k: int, rng) -> list[AttributedExample]:
    if k == 0:
        return []
    idx = _pick(rng, len(x_all), k, "clean class")
    return [
        AttributedExample(x_all[i].astype(np.float32), x_all[i].astype(np.float32), grid.clean_attack_id,
                          grid.clean_victim_id, 0.0, int(y_all[i]))
        for i in idx
    ]


def forge(grid: ScenarioGrid, victims: Sequence, data: DatasetSplit, seed: int = 0,
          threads: int = 1) -> tuple[list[AttributedExample], list[AttributedExample]]:
    """Attack every grid cell; ``victims`` follow ``grid.victims`` order (or map names to models)."""
    if isinstance(victims, dict):
        victims = [victims[name] for name in grid.victims]
    if len(victims) != len(grid.victims):
        raise ForgeError(f"grid names {len(grid.victims)} victims but {len(victims)} were given")
    cells = grid.cells()

    def run(i):
        return _forge_cell(grid, cells[i], i, victims, data, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(cells))))
    else:
        parts = [run(i) for i in range(len(cells))]
    train = [r for tr, _ in parts for r in tr]
    test = [r for _, te in parts for r in te]
    if grid.include_clean:
        rng = np.random.default_rng([seed, len(cells)])
        train += _clean_records(grid, data.train_x, data.train_y, grid.clean_count(grid.per_cell_train, len(data.train_x)), rng)
        test += _clean_records(grid, data.test_x, data.test_y, grid.clean_count(grid.per_cell_test, len(data.test_x)), rng)
    return train, test


# ---------------------------------------------------------------------------
# AAPD files
# ---------------------------------------------------------------------------


def _record_dtype(pixels: int) -> np.dtype:
    return np.dtype([
        ("clean", "<f4", (pixels,)),
        ("adversarial", "<f4", (pixels,)),
        ("attack_id", "u1"),
        ("victim_id", "u1"),
        ("hyper_label", "<f4"),
        ("true_class", "u1"),
    ])


def write_dataset(records: Sequence[AttributedExample], path, manifest: dict | None = None) -> None:
    """Write records (and an optional JSON sidecar) to ``path``."""
    shape = tuple(records[0].clean.shape) if records else (0, 0, 0)
    if len(shape) != 3:
        raise FormatError(f"records must hold (C, H, W) images, got {shape}")
    arr = np.zeros(len(records), dtype=_record_dtype(int(np.prod(shape))))
    for i, r in enumerate(records):
        if r.clean.shape != shape or r.adversarial.shape != shape:
            raise FormatError(f"record {i} has image shape {r.clean.shape}, expected {shape}")
        arr[i] = (r.clean.reshape(-1), r.adversarial.reshape(-1), r.attack_id, r.victim_id,
                  r.hyper_label, r.true_class)
    header = MAGIC + struct.pack("<II", VERSION, len(records)) + struct.pack("<HHH", *shape)
    Path(path).write_bytes(header + arr.tobytes())
    if manifest is not None:
        write_manifest(path, manifest)


def read_dataset(path) -> list[AttributedExample]:
    blob = Path(path).read_bytes()
    if len(blob) < 18:
        raise TruncatedFileError(f"{path}: too short for an AAPD header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, n = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shape = struct.unpack("<HHH", blob[12:18])
    dtype = _record_dtype(int(np.prod(shape)))
    body = blob[18:]
    if len(body) != n * dtype.itemsize:
        raise TruncatedFileError(f"{path}: expected {n * dtype.itemsize} record bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dtype, count=n)
    return [
        AttributedExample(
            np.array(row["clean"], dtype=np.float32).reshape(shape),
            np.array(row["adversarial"], dtype=np.float32).reshape(shape),
            int(row["attack_id"]), int(row["victim_id"]), float(row["hyper_label"]), int(row["true_class"]),
        )
        for row in arr
    ]


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def make_manifest(grid: ScenarioGrid, seed: int) -> dict:
    return {
        "attacks": {str(i): name for i, name in enumerate(grid.attack_names)},
        "victims": {str(i): name for i, name in enumerate(grid.victim_names)},
        "grid": grid.to_json(),
        "seed": seed,
        "single_label_decode": "class = a*|V|*|H| + v*|H| + h",
    }


def write_manifest(path, manifest: dict) -> None:
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(manifest_path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Array views used by training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class RecordArrays:
    adversarial: np.ndarray  # (N, C, H, W) float64
    clean: np.ndarray
    attack: np.ndarray
    victim: np.ndarray
    hyper: np.ndarray

    def __len__(self) -> int:
        return len(self.attack)

    def subset(self, idx) -> "RecordArrays":
        return RecordArrays(self.adversarial[idx], self.clean[idx], self.attack[idx], self.victim[idx], self.hyper[idx])


def stack(records: Sequence[AttributedExample]) -> RecordArrays:
    if not records:
        raise ForgeError("no records to stack")
    return RecordArrays(
        np.stack([r.adversarial for r in records]).astype(np.float64),
        np.stack([r.clean for r in records]).astype(np.float64),
        np.array([r.attack_id for r in records]),
        np.array([r.victim_id for r in records]),
        np.array([r.hyper_label for r in records], dtype=np.float64),
    )
