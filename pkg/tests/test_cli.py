import json

import pytest

from advattrib import cli
from advattrib import config as C
from advattrib import forge as F
from advattrib.errors import ConfigError

SMOKE = {
    "version": 1,
    "seed": 5,
    "threads": 1,
    "data": {"num_classes": 4, "per_class": 40, "test_per_class": 10, "side": 8},
    "victims": {"names": ["cnn_small", "mlp_small"], "epochs": 2},
    "grid": {"attacks": ["FGSM", "CW"], "victims": ["cnn_small", "mlp_small"],
             "epsilons": [0.04, 0.08, 0.12, 0.16], "kappas": [5.0, 10.0, 15.0, 20.0],
             "per_cell_train": 3, "per_cell_test": 1, "include_clean": True, "cw_steps": 5},
    "train": {"epochs": 2, "ae_epochs": 1, "width": 4, "batch_size": 16},
}
STAGES = ["gen-data", "train-victims", "forge", "train-ae", "train-mtaa", "train-baseline single-task",
          "train-baseline single-label", "eval", "diagnose-divergence", "report"]


def write_config(tmp_path, d=SMOKE):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(d))
    return path


def run_all(cfg_path, out):
    for stage in STAGES:
        assert cli.main(stage.split() + ["--config", str(cfg_path), "--out", str(out)]) == 0, stage


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    cfg = write_config(base)
    run_all(cfg, base / "out")
    return base


def test_full_pipeline_emits_summary(smoke_run):
    out = smoke_run / "out"
    summary = (out / "report" / "summary.md").read_text()
    assert "| MTAA |" in summary and "| Single-task trio |" in summary and "Delta_MTL" in summary
    ev = json.loads((out / "eval" / "mtaa.json").read_text())
    assert ev["n_examples"] == 2 * 2 * 4 * 1 + 8
    assert ev["delta_mtl"]["baseline"] == "single_task"
    for stage in ("data", "victims", "forge", "ae", "mtaa", "eval", "report"):
        manifest = json.loads((out / stage / "manifest.json").read_text())
        assert manifest["seed"] == 5 and len(manifest["config_hash"]) == 16
        assert C.load_config(out / stage / "config.json").seed == 5
    grid = F.ScenarioGrid.from_json(F.read_manifest(out / "forge" / "train.aapd")["grid"])
    assert len(grid.cells()) == 16


def test_rerun_is_byte_identical(smoke_run, tmp_path):
    run_all(smoke_run / "run.json", tmp_path / "again")
    for name in ("forge/train.aapd", "forge/test.aapd", "mtaa/model.aapm", "eval/mtaa.json"):
        assert (smoke_run / "out" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_forge_without_victims_names_train_victims(tmp_path, caplog):
    cfg = write_config(tmp_path)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["forge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_MISSING
    assert "train-victims" in caplog.text


def test_missing_data_names_gen_data(tmp_path, caplog):
    assert cli.main(["train-victims", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o")]) == 3
    assert "gen-data" in caplog.text


def test_config_errors_name_line_and_field(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": 1,\n  "data": {"side": 8,}\n}')
    with pytest.raises(ConfigError, match="line 3"):
        C.load_config(bad)
    bad.write_text(json.dumps({"train": {"epoch": 3}}))
    with pytest.raises(ConfigError, match=r"train\.epoch"):
        C.load_config(bad)
    bad.write_text(json.dumps({"grid": {"attacks": ["FGSM", "JSMA"]}}))
    with pytest.raises(ConfigError, match="grid"):
        C.load_config(bad)
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_overrides_apply():
    args = cli.build_parser().parse_args(["forge", "--steps", "7", "--include-clean", "--seed", "9"])
    cfg = cli.resolve_config(args)
    assert cfg.grid.pgd_steps == cfg.grid.cw_steps == 7 and cfg.grid.include_clean and cfg.seed == 9
    args = cli.build_parser().parse_args(["train-mtaa", "--joint-ae", "--epochs", "3"])
    cfg = cli.resolve_config(args)
    assert cfg.ablation["joint_ae"] and cfg.train.epochs == 3


def test_config_round_trip_and_hash():
    cfg = C.from_dict(SMOKE)
    again = C.from_dict(json.loads(cfg.dumps()))
    assert again.hash() == cfg.hash()
    again.out = "elsewhere"
    assert again.hash() == cfg.hash()
    again.seed = 6
    assert again.hash() != cfg.hash()
    assert C.derive_seed(1, "a") == C.derive_seed(1, "a") != C.derive_seed(1, "b")
