"""Command-line pipeline: one subcommand per stage, artifacts under ``--out``.

Layout of an output directory::

    data/        IDX split                     (gen-data)
    victims/     <name>.aapm, reference.aapm    (train-victims)
    forge/       train.aapd, test.aapd          (forge)
    ae/          extractor.aapm, log.csv        (train-ae)
    mtaa/        model.aapm, log.csv            (train-mtaa)
    baseline_single_task/, baseline_single_label/
    eval/        <model>.json, confusion and RMSE CSVs, logits .npz
    diagnostics/ divergence.csv
    report/      summary.md

Every stage directory also holds ``config.json`` (the resolved config) and
``manifest.json`` (command, config hash, seed, wall time, artifacts).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import forge as F
from . import metrics as E
from . import mtaa as M
from . import nn
from . import victims as V
from .errors import AttributionError, ConfigError, MissingArtifactError

log = logging.getLogger("advattrib")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
MODEL_KINDS = ("mtaa", "single-task", "single-label")


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------


class Run:
    """Resolved config plus the output directory it writes into."""

    def __init__(self, cfg: C.RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg.out)
        self.started = time.perf_counter()
        self.artifacts: list[str] = []

    def stage(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing {path}: run `{producer}` first")
        return path

    def write_bytes(self, path: Path, blob: bytes) -> None:
        path.write_bytes(blob)
        self.artifacts.append(str(path.relative_to(self.out)))

    def write_text(self, path: Path, text: str) -> None:
        path.write_text(text, encoding="utf-8")
        self.artifacts.append(str(path.relative_to(self.out)))

    def finish(self, stage: Path) -> dict:
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "wall_time_s": round(time.perf_counter() - self.started, 3),
            "artifacts": self.artifacts,
        }
        (stage / "config.json").write_text(self.cfg.dumps(), encoding="utf-8")
        (stage / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        log.info("%s done in %.1fs -> %s", self.command, manifest["wall_time_s"], stage)
        return manifest

    # -- loaders ----------------------------------------------------------
    def split(self) -> D.DatasetSplit:
        d = self.out / "data"
        if not D.has_idx_split(d):
            raise MissingArtifactError(f"missing IDX split in {d}: run `gen-data` first")
        return D.load_idx_split(d, self.cfg.data.num_classes if self.cfg.data.source == "synthetic" else None)

    def victim(self, name: str) -> V.VictimModel:
        path = self.require(self.out / "victims" / f"{name}.aapm", "train-victims")
        return V.load_checkpoint(path.read_bytes())

    def forged(self):
        """(train records, test records, grid the records were forged with)."""
        d = self.out / "forge"
        train_path = self.require(d / "train.aapd", "forge")
        test_path = self.require(d / "test.aapd", "forge")
        grid = F.ScenarioGrid.from_json(F.read_manifest(train_path)["grid"])
        return F.stack(F.read_dataset(train_path)), F.stack(F.read_dataset(test_path)), grid


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def cmd_gen_data(run: Run) -> dict:
    dc = run.cfg.data
    stage = run.stage("data")
    if dc.source == "idx":
        split = D.load_idx_split(dc.idx_dir, seed=run.cfg.seed)
    else:
        split = D.generate_synthetic(dc.num_classes, dc.per_class, dc.side, C.derive_seed(run.cfg.seed, "data"),
                                     dc.test_per_class, dc.noise)
    D.write_idx_split(stage, split)
    run.artifacts += list(D.IDX_NAMES.values())
    log.info("data: %d train / %d test images of shape %s", len(split.train_y), len(split.test_y), split.image_shape)
    return run.finish(stage)


def cmd_train_victims(run: Run) -> dict:
    split = run.split()
    vc = run.cfg.victims
    stage = run.stage("victims")
    c, side = split.image_shape[0], split.image_shape[1]
    descs = [V.descriptor_by_name(n, side, split.num_classes, c) for n in vc.names]
    descs.append(V.reference_descriptor(side, split.num_classes, c))
    rows = []
    for desc in descs:
        model = V.train_victim(desc, split, vc.epochs, vc.lr, C.derive_seed(run.cfg.seed, "victim", desc.name),
                               vc.batch_size)
        run.write_bytes(stage / f"{desc.name}.aapm", V.save_checkpoint(model))
        rows.append([desc.name, f"{model.trained_accuracy:.6f}", nn.count_params(model.parameters)])
        log.info("victim %s: test accuracy %.3f", desc.name, model.trained_accuracy)
    run.write_text(stage / "accuracy.csv", _csv(["victim", "test_accuracy", "params"], rows))
    return run.finish(stage)


def cmd_forge(run: Run) -> dict:
    split = run.split()
    grid = run.cfg.grid
    victims = [run.victim(name) for name in grid.victims]
    stage = run.stage("forge")
    train, test = F.forge(grid, victims, split, seed=C.derive_seed(run.cfg.seed, "forge"), threads=run.cfg.n_threads)
    manifest = F.make_manifest(grid, run.cfg.seed)
    for name, records in (("train", train), ("test", test)):
        path = stage / f"{name}.aapd"
        F.write_dataset(records, path, manifest)
        run.artifacts += [f"forge/{name}.aapd", f"forge/{name}.aapd.manifest.json"]
    log.info("forge: %d train / %d test records over %d cells", len(train), len(test), len(grid.cells()))
    return run.finish(stage)


def cmd_train_ae(run: Run) -> dict:
    train, _, _ = run.forged()
    ref = run.victim(V.REFERENCE_NAME)
    tc = run.cfg.train
    stage = run.stage("ae")
    pe = M.PerturbationExtractor.from_reference(ref, tc.bottleneck, seed=C.derive_seed(run.cfg.seed, "ae-init"))
    M.train_ae(pe, train, tc.ae_epochs, tc.ae_lr, seed=C.derive_seed(run.cfg.seed, "ae"), batch_size=tc.batch_size)
    run.write_bytes(stage / "extractor.aapm", M.save_extractor(pe))
    run.write_text(stage / "log.csv", _csv(["epoch", "loss"], [[i, f"{v:.8f}"] for i, v in enumerate(pe.history)]))
    return run.finish(stage)


def _mtaa_config(run: Run, grid: F.ScenarioGrid, shape) -> M.MTAAConfig:
    tc = run.cfg.train
    flags = {"width": tc.width, "trunk_depth": tc.trunk_depth, **run.cfg.ablation}
    mc = M.ablation_config(flags, grid.num_attack_classes, grid.num_victim_classes, shape)
    mc.bottleneck = tc.bottleneck
    return mc


def cmd_train_mtaa(run: Run) -> dict:
    train, test, grid = run.forged()
    tc = run.cfg.train
    mc = _mtaa_config(run, grid, train.adversarial.shape[1:])
    pe = None
    if mc.perturbation_extractor:
        path = run.out / "ae" / "extractor.aapm"
        if path.exists():
            pe = M.load_extractor(path.read_bytes())
        elif mc.joint_ae:
            pe = M.PerturbationExtractor.from_reference(run.victim(V.REFERENCE_NAME), tc.bottleneck,
                                                        seed=C.derive_seed(run.cfg.seed, "ae-init"))
        else:
            run.require(path, "train-ae")
    stage = run.stage("mtaa")
    model = M.AttributionModel(mc, pe, seed=C.derive_seed(run.cfg.seed, "mtaa-init"))
    model, rows = M.train_mtaa(model, train, tc.epochs, tc.lr, tc.weight_decay, C.derive_seed(run.cfg.seed, "mtaa"),
                               tc.batch_size, test_records=test, sigma_lr=tc.sigma_lr)
    run.write_bytes(stage / "model.aapm", M.save_model(model))
    run.write_text(stage / "log.csv", M.rows_to_csv(rows))
    last = rows[-1]
    log.info("mtaa: %s accuracy attack %.3f victim %.3f, hyper RMSE %.2f", last["split"], last["attack_acc"],
             last["victim_acc"], last["hyper_rmse"])
    return run.finish(stage)


def cmd_train_baseline(run: Run, kind: str) -> dict:
    train, _, grid = run.forged()
    tc = run.cfg.train
    epochs = tc.baseline_epochs or tc.epochs
    shape = train.adversarial.shape[1:]
    rows = []
    if kind == "single-task":
        stage = run.stage("baseline_single_task")
        counts = {"attack": grid.num_attack_classes, "victim": grid.num_victim_classes, "hyper": 1}
        for task in M.TASKS:
            model = M.build_single_task(task, counts[task], shape, tc.width, tc.trunk_depth,
                                        seed=C.derive_seed(run.cfg.seed, "baseline-init", task))
            model, hist = M.train_baseline(model, train, epochs, tc.lr, tc.weight_decay,
                                           C.derive_seed(run.cfg.seed, "baseline", task), tc.batch_size)
            run.write_bytes(stage / f"{task}.aapm", M.save_model(model))
            rows += [[task, i, f"{v:.8f}"] for i, v in enumerate(hist)]
    elif kind == "single-label":
        stage = run.stage("baseline_single_label")
        model = M.build_single_label(grid, shape, tc.width, tc.trunk_depth,
                                     seed=C.derive_seed(run.cfg.seed, "baseline-init", "combined"))
        model, hist = M.train_baseline(model, train, epochs, tc.lr, tc.weight_decay,
                                       C.derive_seed(run.cfg.seed, "baseline", "combined"), tc.batch_size, grid)
        run.write_bytes(stage / "model.aapm", M.save_model(model))
        rows += [["combined", i, f"{v:.8f}"] for i, v in enumerate(hist)]
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}; choose single-task or single-label")
    run.write_text(stage / "log.csv", _csv(["task", "epoch", "loss"], rows))
    return run.finish(stage)


def _load_for_eval(run: Run, kind: str):
    if kind == "mtaa":
        path = run.out / "mtaa" / "model.aapm"
        return M.load_model(path.read_bytes()) if path.exists() else None
    if kind == "single-task":
        d = run.out / "baseline_single_task"
        paths = {t: d / f"{t}.aapm" for t in M.TASKS}
        if not all(p.exists() for p in paths.values()):
            return None
        return {t: M.load_model(p.read_bytes()) for t, p in paths.items()}
    path = run.out / "baseline_single_label" / "model.aapm"
    return M.load_model(path.read_bytes()) if path.exists() else None


def evaluate_all(run: Run, kinds) -> tuple[dict[str, dict], dict[str, E.EvalReport]]:
    train, test, grid = run.forged()
    producers = {"mtaa": "train-mtaa", "single-task": "train-baseline single-task",
                 "single-label": "train-baseline single-label"}
    models = {k: _load_for_eval(run, k) for k in kinds}
    models = {k: m for k, m in models.items() if m is not None}
    if not models:
        raise MissingArtifactError(f"no trained model found: run `{producers[kinds[0]]}` first")
    adv_mask = test.attack != grid.clean_attack_id if grid.include_clean else np.ones(len(test), bool)
    adv_train = train.attack != grid.clean_attack_id if grid.include_clean else np.ones(len(train), bool)
    mean_label = float(np.mean(train.hyper[adv_train]))
    gm_rmse = E.rmse(np.full(int(adv_mask.sum()), mean_label), test.hyper[adv_mask])
    reports, adv_reports = {}, {}
    for kind, model in models.items():
        mode = kind.replace("-", "_")
        reports[kind] = E.evaluate(model, test, mode, grid)
        adv_reports[kind] = E.evaluate(model, test.subset(adv_mask), mode, grid)
    if "mtaa" in models and "single-task" in models:
        E.compare(reports["mtaa"], reports["single-task"])
        E.compare(adv_reports["mtaa"], adv_reports["single-task"])
    out = {}
    for kind, rep in reports.items():
        d = rep.to_json()
        d["adversarial_only"] = adv_reports[kind].to_json()
        d["global_mean_hyper_rmse"] = gm_rmse
        d["params"] = M.count_parameters(list(models[kind].values()) if kind == "single-task" else models[kind])
        out[kind] = d
    return out, reports


def cmd_eval(run: Run, kinds) -> dict:
    results, reports = evaluate_all(run, list(kinds))
    stage = run.stage("eval")
    for kind, d in results.items():
        rep = reports[kind]
        run.write_text(stage / f"{kind}.json", json.dumps(d, indent=2, sort_keys=True))
        run.write_text(stage / f"{kind}_attack_confusion.csv", rep.confusion_csv("attack"))
        run.write_text(stage / f"{kind}_victim_confusion.csv", rep.confusion_csv("victim"))
        run.write_text(stage / f"{kind}_cell_rmse.csv", rep.cell_rmse_csv())
        buf = io.BytesIO()
        np.savez(buf, **{k: np.asarray(v, dtype=np.float32) for k, v in rep.logits.items()})
        run.write_bytes(stage / f"{kind}_logits.npz", buf.getvalue())
        m = d["metrics"]
        log.info("eval %s: attack %.3f victim %.3f hyper RMSE %.2f", kind, m["attack"], m["victim"], m["hyper"])
    return run.finish(stage)


def cmd_diagnose(run: Run) -> dict:
    _, test, grid = run.forged()
    ref = run.victim(V.REFERENCE_NAME)
    stage = run.stage("diagnostics")
    rows = []
    for a, name in enumerate(grid.attacks):
        mask = test.attack == a
        if mask.any():
            for r in E.feature_divergence(ref, test.clean[mask], test.adversarial[mask]):
                rows.append([name, r["layer"], f"{r['mse']:.8g}", f"{r['mae']:.8g}"])
    run.write_text(stage / "divergence.csv", _csv(["attack", "layer", "mse", "mae"], rows))
    return run.finish(stage)


def render_report(results: dict[str, dict]) -> str:
    names = {"single-task": "Single-task trio", "single-label": "Single-label", "mtaa": "MTAA"}
    lines = ["# Attribution summary", ""]
    for scope, title in (("all", "All test records"), ("adversarial_only", "Adversarial test records")):
        lines += [f"## {title}", "",
                  "| Model | Attack acc (%) | Victim acc (%) | Hyper RMSE | Params | Delta_MTL (%) |",
                  "|---|---|---|---|---|---|"]
        for kind in ("single-task", "single-label", "mtaa"):
            if kind not in results:
                continue
            d = results[kind] if scope == "all" else results[kind]["adversarial_only"]
            m = d["metrics"]
            delta = d.get("delta_mtl")
            dtxt = f"{100 * delta['value']:+.2f}" if delta else "-"
            lines.append(f"| {names[kind]} | {100 * m['attack']:.2f} | {100 * m['victim']:.2f} | "
                         f"{m['hyper']:.2f} | {results[kind]['params']} | {dtxt} |")
        lines.append("")
    any_d = next(iter(results.values()))
    lines.append(f"Predict-the-mean hyper RMSE on adversarial records: {any_d['global_mean_hyper_rmse']:.2f}")
    clean = {k: d["clean"] for k, d in results.items() if d.get("clean")}
    if clean:
        lines += ["", "## Clean inputs", "", "| Model | Count | Clean recall (%) | Hyper RMSE to 0 |", "|---|---|---|---|"]
        for kind, c in clean.items():
            lines.append(f"| {names[kind]} | {c['count']} | {100 * c['attack_recall']:.2f} | {c['hyper_rmse_to_zero']:.2f} |")
    return "\n".join(lines) + "\n"


def cmd_report(run: Run) -> dict:
    d = run.out / "eval"
    results = {k: json.loads((d / f"{k}.json").read_text()) for k in MODEL_KINDS if (d / f"{k}.json").exists()}
    if not results:
        raise MissingArtifactError(f"no evaluation results in {d}: run `eval` first")
    stage = run.stage("report")
    text = render_report(results)
    run.write_text(stage / "summary.md", text)
    print(text)
    return run.finish(stage)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advattrib", description="Forge attributed adversarial data and train attribution models.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON run config (defaults built in)")
        s.add_argument("--seed", type=int, help="override the run seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--threads", type=int, help="worker threads (default: number of cores)")
        s.add_argument("--log-level", default="INFO")
        return s

    add("gen-data", "write the clean IDX split")
    add("train-victims", "train the victim zoo and the reference model").add_argument("--epochs", type=int)
    s = add("forge", "attack every grid cell and write AAPD datasets")
    s.add_argument("--steps", type=int, help="iteration count for PGD and C&W")
    s.add_argument("--filter-unsuccessful", action="store_true")
    s.add_argument("--include-clean", action="store_true")
    add("train-ae", "fit the perturbation auto-encoder").add_argument("--epochs", type=int)
    s = add("train-mtaa", "train the multi-task attribution model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--joint-ae", action="store_true", help="train the auto-encoder jointly")
    s = add("train-baseline", "train the single-task trio or the single-label classifier")
    s.add_argument("kind", choices=["single-task", "single-label"])
    s.add_argument("--epochs", type=int)
    s = add("eval", "evaluate trained models on the forged test split")
    s.add_argument("--model", choices=MODEL_KINDS + ("all",), default="all")
    add("diagnose-divergence", "clean vs adversarial activation gaps in the reference model")
    add("report", "join evaluation results into a Markdown summary")
    return p


def resolve_config(args) -> C.RunConfig:
    cfg = C.load_config(args.config) if args.config else C.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        if args.command == "train-victims":
            cfg.victims.epochs = epochs
        elif args.command == "train-ae":
            cfg.train.ae_epochs = epochs
        elif args.command == "train-baseline":
            cfg.train.baseline_epochs = epochs
        else:
            cfg.train.epochs = epochs
    if getattr(args, "steps", None) is not None:
        cfg.grid.pgd_steps = cfg.grid.cw_steps = args.steps
    if getattr(args, "filter_unsuccessful", False):
        cfg.grid.filter_unsuccessful = True
    if getattr(args, "include_clean", False):
        cfg.grid.include_clean = True
    if getattr(args, "joint_ae", False):
        cfg.ablation = {**cfg.ablation, "joint_ae": True}
    # re-run field checks on the overridden config
    return C.from_dict(cfg.to_json())


def run_command(cfg: C.RunConfig, command: str, kind: str | None = None, model: str = "all") -> dict:
    run = Run(cfg, command if kind is None else f"{command} {kind}")
    if command == "gen-data":
        return cmd_gen_data(run)
    if command == "train-victims":
        return cmd_train_victims(run)
    if command == "forge":
        return cmd_forge(run)
    if command == "train-ae":
        return cmd_train_ae(run)
    if command == "train-mtaa":
        return cmd_train_mtaa(run)
    if command == "train-baseline":
        return cmd_train_baseline(run, kind)
    if command == "eval":
        return cmd_eval(run, MODEL_KINDS if model == "all" else (model,))
    if command == "diagnose-divergence":
        return cmd_diagnose(run)
    if command == "report":
        return cmd_report(run)
    raise ConfigError(f"unknown command {command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        run_command(cfg, args.command, getattr(args, "kind", None), getattr(args, "model", "all"))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except AttributionError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILED
    return EXIT_OK
