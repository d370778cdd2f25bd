"""Command-line front end and run persistence.

Verbs: ``gen``, ``train``, ``eval``, ``confusions``, ``increment``, ``report``.  Every run lives in
``<out_dir>/<config hash>/`` and every file written there carries the hash and the seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .complosses import LossConfig
from .compspace import SplitSpec, default_split, load_manifest, manifest_dict, save_manifest, split_from_manifest
from .evalkit import ConfusionMatrix, EvalReport, load_detections, nms_map
from .incrementer import IncrementPlan, TuningRegime, plan_from_confusions, run_increment
from .scenegen import DatasetSpec, build_dataset, generate_dataset, load_dataset, write_dataset
from .tokenmodel import TokenDetector, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate_model, train

log = logging.getLogger("compzsl")

DEFAULT_CONFIG: dict = {
    "manifest": None,
    "data_dir": "data",
    "out_dir": "runs",
    "seed": 0,
    "datasets": {
        "image_size": 128,
        "max_objects": 4,
        "overlap_cap": 0.1,
        "pretrain": {"shots": 10, "seed": 0},
        "test": {"shots": 60, "seed": 1},
        "increment": {"shots": 10, "seed": 2},
    },
    "model": {"d": 64, "backbone_seed": 0},
    "components": {"smoothing": True, "separation": True, "decorrelation": True},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "increment": {"epochs": 400, "lr": 20.0, "threshold": 0.2, "max_pairs": 2,
                  "regime": "prompt_only", "components": "both"},
    "eval": {"iou_nms": 0.5},
}
DEFAULT_SEEDS = tuple(range(13))


class CliError(Exception):
    """Reported as a structured message with a nonzero exit code."""


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise CliError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:12]


@dataclass
class ExperimentConfig:
    doc: dict

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        doc = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise CliError(f"config file {p} not found")
            doc = _merge(doc, json.loads(p.read_text()))
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise CliError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node: dict = {}
            cur = node
            parts = key.split(".")
            for part in parts[:-1]:
                cur[part] = {}
                cur = cur[part]
            cur[parts[-1]] = value
            doc = _merge(doc, node)
        cfg = cls(doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        m = self.doc["manifest"]
        if m is not None and not Path(m).is_file():
            raise CliError(f"manifest {m} not found")
        self.train_config(self.doc["seed"])
        TuningRegime(self.doc["increment"]["regime"], self.doc["increment"]["components"])

    def set(self, dotted: str, value) -> None:
        node = self.doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        if parts[-1] not in node:
            raise CliError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value

    @property
    def data_dir(self) -> Path:
        return Path(self.doc["data_dir"])

    @property
    def out_dir(self) -> Path:
        return Path(self.doc["out_dir"])

    def split(self) -> SplitSpec:
        m = self.doc["manifest"]
        if m is not None:
            return load_manifest(m)
        stored = self.data_dir / "manifest.json"
        return load_manifest(stored) if stored.is_file() else default_split()

    def dataset_spec(self, role: str, compositions: Sequence[int]) -> DatasetSpec:
        ds = self.doc["datasets"]
        part = ds[role]
        return DatasetSpec(role, int(part["shots"]), sorted(compositions), int(ds["image_size"]), int(part["seed"]),
                           int(ds["max_objects"]), float(ds["overlap_cap"]))

    def train_config(self, seed: int) -> TrainConfig:
        t = dict(self.doc["train"])
        base = LossConfig.from_dict(t.pop("loss", {}))
        comp = self.doc["components"]
        loss = LossConfig.from_toggles(bool(comp["smoothing"]), bool(comp["separation"]), bool(comp["decorrelation"]), base)
        return TrainConfig(seed=int(seed), loss=loss, **t)

    def run_doc(self, seed: int) -> dict:
        """The config snapshot stored with (and hashed into) a training run."""
        doc = copy.deepcopy(self.doc)
        doc["seed"] = int(seed)
        doc.pop("out_dir")
        return doc


# -- helpers -------------------------------------------------------------

def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _stamp(chash: str, seed: int) -> dict:
    return {"config_hash": chash, "seed": seed}


def _prepare_run_dir(out_dir: Path, chash: str, force: bool) -> Path:
    run = out_dir / chash
    if (run / "run.json").exists() and not force:
        raise CliError(f"run {run} already exists (use --force to overwrite)")
    run.mkdir(parents=True, exist_ok=True)
    return run


def _load_data(cfg: ExperimentConfig, role: str):
    path = cfg.data_dir / role
    if not (path / "annotations.json").is_file():
        raise CliError(f"dataset {path} missing; run `compzsl gen` first")
    return load_dataset(path)


def _read_run(run: Path) -> dict:
    rec = run / "run.json"
    if not rec.is_file():
        raise CliError(f"{run} is not a run directory (no run.json)")
    return json.loads(rec.read_text())


def _write_log(path: Path, tlog, chash: str, seed: int) -> None:
    with open(path, "w") as fh:
        for rec in tlog.epochs:
            fh.write(json.dumps({**rec, **_stamp(chash, seed)}, sort_keys=True) + "\n")


# -- verbs ---------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig, roles: Sequence[str] = ("pretrain", "test")) -> dict:
    split = cfg.split()
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(split, cfg.data_dir / "manifest.json")
    out = {}
    for role in roles:
        comps = sorted(split.pretrain) if role == "pretrain" else list(range(len(split.space)))
        ds = generate_dataset(split, cfg.dataset_spec(role, comps), cfg.data_dir / role)
        out[role] = {"path": str(cfg.data_dir / role), "images": len(ds), "instances": ds.n_instances}
    return out


def cmd_train(cfg: ExperimentConfig, seeds: Sequence[int], force: bool = False) -> list[Path]:
    split = cfg.split()
    pretrain = _load_data(cfg, "pretrain")
    test = _load_data(cfg, "test")
    mdoc = manifest_dict(split)
    runs = []
    for seed in seeds:
        doc = cfg.run_doc(seed)
        chash = config_hash(doc)
        run = _prepare_run_dir(cfg.out_dir, chash, force)
        started = time.time()
        model = TokenDetector.create(split.space, d=int(cfg.doc["model"]["d"]), seed=int(seed),
                                     backbone_seed=int(cfg.doc["model"]["backbone_seed"]), manifest=mdoc)
        model, tlog = train(model, pretrain, cfg.train_config(seed))
        report, cm = evaluate_model(model, test, split, iou_nms=float(cfg.doc["eval"]["iou_nms"]))
        _write_json(run / "config.json", {**doc, **_stamp(chash, seed)})
        save_checkpoint(model, run / "checkpoint.bin", meta=_stamp(chash, seed))
        _write_json(run / "report.json", {**_stamp(chash, seed), "components": doc["components"],
                                          "report": report.to_dict()})
        cm.write(run / "confusion.csv", comment=f"config_hash={chash} seed={seed}")
        _write_log(run / "log.jsonl", tlog, chash, seed)
        _write_json(run / "run.json", {
            "kind": "train", **_stamp(chash, seed), "components": doc["components"],
            "manifest": mdoc, "data_dir": str(cfg.data_dir),
            "files": {k: k for k in ("config.json", "checkpoint.bin", "report.json", "confusion.csv", "log.jsonl")},
            "started": started, "finished": time.time(), "wall_time": tlog.wall_time,
        })
        log.info("seed %d: seen %.1f unseen %.1f HM %.1f -> %s", seed, report.mAP["seen"] or 0.0,
                 report.mAP["unseen"] or 0.0, report.hm or 0.0, run)
        runs.append(run)
    return runs


def cmd_eval(checkpoint: str | Path | None, dataset: str | Path, manifest: str | Path | None = None,
             detections: str | Path | None = None, iou_nms: float = 0.5) -> EvalReport:
    ds = load_dataset(dataset)
    if manifest is not None:
        split = load_manifest(manifest)
    elif checkpoint is not None:
        model = load_checkpoint(checkpoint)
        split = split_from_manifest(model.manifest)
    else:
        split = ds.split
    if detections is not None:
        return nms_map(load_detections(detections), ds.ground_truth(), split, iou_nms=iou_nms)
    if checkpoint is None:
        raise CliError("eval needs --checkpoint or --detections")
    model = load_checkpoint(checkpoint, split.space)
    report, _ = evaluate_model(model, ds, split, iou_nms=iou_nms)
    return report


def cmd_confusions(run: str | Path, threshold: float = 0.2, max_pairs: int | None = 2,
                   out: str | Path | None = None) -> Path:
    run = Path(run)
    rec = _read_run(run)
    split = split_from_manifest(rec["manifest"])
    cm = ConfusionMatrix.read(run / "confusion.csv")
    plan = plan_from_confusions(cm, split, threshold, max_pairs)
    plan.source = str(run)
    path = Path(out) if out is not None else run / "plan.json"
    plan.write(path, split.space, extra=_stamp(rec["config_hash"], rec["seed"]))
    return path


def cmd_increment(run: str | Path, plan_path: str | Path | None = None, regime: str | None = None,
                  components: str | None = None, epochs: int | None = None, lr: float | None = None,
                  out_dir: str | Path | None = None, force: bool = False) -> Path:
    run = Path(run)
    rec = _read_run(run)
    if rec["kind"] != "train":
        raise CliError(f"{run} is not a training run")
    cfg = ExperimentConfig(json.loads((run / "config.json").read_text()))
    for k in ("config_hash", "seed"):
        cfg.doc.pop(k, None)
    cfg.doc["seed"] = rec["seed"]
    split = split_from_manifest(rec["manifest"])
    space = split.space
    plan_path = Path(plan_path) if plan_path is not None else run / "plan.json"
    if not plan_path.is_file():
        raise CliError(f"increment plan {plan_path} not found; run `compzsl confusions` first")
    plan = IncrementPlan.read(plan_path, space)
    inc = cfg.doc["increment"]
    plan.regime = TuningRegime(regime or plan.regime.kind, components or plan.regime.components)
    if not plan.increment:
        raise CliError("increment plan is empty; nothing to tune")
    n_epochs = int(inc["epochs"] if epochs is None else epochs)
    step = float(inc["lr"] if lr is None else lr)
    tcfg = cfg.train_config(rec["seed"])
    tcfg = TrainConfig(epochs=n_epochs, batch_size=tcfg.batch_size, lr=step, seed=tcfg.seed, loss=tcfg.loss,
                       bg_ratio=tcfg.bg_ratio, match_iou=tcfg.match_iou, train_classes=tcfg.train_classes)
    doc = {"parent": rec["config_hash"], "seed": rec["seed"], "plan": plan.to_dict(space), "train": tcfg.to_dict(),
           "increment_data": cfg.doc["datasets"]["increment"]}
    chash = config_hash(doc)
    out_root = Path(out_dir) if out_dir is not None else run.parent
    dest = _prepare_run_dir(out_root, chash, force)
    started = time.time()

    model = load_checkpoint(run / "checkpoint.bin", space)
    pretrain = _load_data(cfg, "pretrain")
    test = _load_data(cfg, "test")
    inc_ds = build_dataset(split, cfg.dataset_spec("increment", sorted(plan.increment)))
    inc_dir = cfg.data_dir / f"increment-{config_hash({'comps': sorted(plan.increment), **cfg.doc['datasets']['increment']})}"
    if not (inc_dir / "annotations.json").exists():
        write_dataset(inc_ds, inc_dir)
    result = run_increment(model, pretrain, inc_ds, test, plan, tcfg, split)
    result.model.manifest = manifest_dict(result.split)

    _write_json(dest / "config.json", {**doc, **_stamp(chash, rec["seed"])})
    save_checkpoint(result.model, dest / "checkpoint.bin", meta=_stamp(chash, rec["seed"]))
    _write_json(dest / "report.json", {**_stamp(chash, rec["seed"]), "regime": plan.regime.kind,
                                       "components": plan.regime.components, "before": result.before.to_dict(),
                                       "after": result.after.to_dict(), "deltas": result.deltas})
    result.confusion_after.write(dest / "confusion.csv", comment=f"config_hash={chash} seed={rec['seed']}")
    _write_log(dest / "log.jsonl", result.log, chash, rec["seed"])
    _write_json(dest / "run.json", {
        "kind": "increment", **_stamp(chash, rec["seed"]), "parent": str(run), "regime": plan.regime.kind,
        "components": plan.regime.components, "manifest": manifest_dict(result.split),
        "base_manifest": rec["manifest"], "increment_data": str(inc_dir),
        "files": {k: k for k in ("config.json", "checkpoint.bin", "report.json", "confusion.csv", "log.jsonl")},
        "started": started, "finished": time.time(),
    })
    return dest


def _fmt(values: list[float]) -> tuple[str, str]:
    if not values:
        return "-", "-"
    mean = statistics.fmean(values)
    std = statistics.pstdev(values) if len(values) > 1 else 0.0
    return f"{mean:.1f}", f"{std:.1f}"


def _arrow(v: float) -> str:
    return "^" if v > 0 else ("v" if v < 0 else "=")


def collect_runs(paths: Sequence[str | Path]) -> list[tuple[Path, dict]]:
    runs = []
    for p in paths:
        p = Path(p)
        if (p / "run.json").is_file():
            runs.append((p, _read_run(p)))
        elif p.is_dir():
            runs.extend((q.parent, _read_run(q.parent)) for q in sorted(p.glob("*/run.json")))
        else:
            raise CliError(f"{p} is not a run directory")
    if not runs:
        raise CliError("no runs found")
    base = {json.dumps(r.get("base_manifest", r["manifest"]), sort_keys=True) for _, r in runs}
    if len(base) > 1:
        raise CliError("runs use different manifests; report them separately")
    return runs


def cmd_report(paths: Sequence[str | Path]) -> tuple[str, str]:
    """Aggregate runs into ablation and increment tables; returns (text, csv)."""
    runs = collect_runs(paths)
    rows: list[list[str]] = []
    header = ["table", "setting", "n", "metric", "mean", "std"]
    groups: dict[tuple, list[dict]] = {}
    for path, rec in runs:
        rep = json.loads((path / "report.json").read_text())
        if rec["kind"] == "train":
            c = rec["components"]
            key = ("ablation", "smoothing={:d} separation={:d} decorrelation={:d}".format(
                bool(c["smoothing"]), bool(c["separation"]), bool(c["decorrelation"])))
        else:
            key = ("increment", f"regime={rec['regime']} components={rec['components']}")
        groups.setdefault(key, []).append(rep)
    for (table, setting), reps in sorted(groups.items()):
        if table == "ablation":
            metrics = {
                "seen": [r["report"]["mAP"]["seen"] for r in reps],
                "unseen": [r["report"]["mAP"]["unseen"] for r in reps],
                "hm": [r["report"]["hm"] for r in reps],
            }
        else:
            metrics = {}
            for role in ("pretrain", "increment", "unseen", "hm3"):
                metrics[f"{role}_after"] = [r["deltas"]["after"][role] for r in reps]
                metrics[f"{role}_delta"] = [r["deltas"]["delta"][role] for r in reps]
        for name, vals in metrics.items():
            clean = [float(v) for v in vals if v is not None]
            mean, std = _fmt(clean)
            rows.append([table, setting, str(len(reps)), name, mean, std])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    shown = []
    for r in rows:
        cells = list(r)
        if r[3].endswith("_delta") and r[4] != "-":
            cells[4] = f"{r[4]} {_arrow(float(r[4]))}"
        shown.append(cells)
    widths = [max(len(r[i]) for r in [header, *shown]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(cells, widths)).rstrip() for cells in [header, *shown]]
    return "\n".join(lines) + "\n", buf.getvalue()


# -- argument parsing -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="compzsl", description="Compositional zero-shot detection experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="verb", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.epochs=50 (value parsed as JSON)")
        p.add_argument("--data-dir")
        p.add_argument("--out-dir")
        p.add_argument("--manifest")

    g = sub.add_parser("gen", parents=[common], help="render the pretrain and test datasets")
    with_config(g)
    g.add_argument("--pretrain-shots", type=int)
    g.add_argument("--test-shots", type=int)

    t = sub.add_parser("train", parents=[common], help="train token tables and evaluate on the test set")
    with_config(t)
    for flag in ("smoothing", "separation", "decorrelation"):
        t.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None)
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--baseline-csp", action="store_true", help="all three components off")
    mode.add_argument("--ca", action="store_true", help="all three components on")
    seeds = t.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="NMS mAP report for a checkpoint or a detections file")
    e.add_argument("--checkpoint")
    e.add_argument("--detections")
    e.add_argument("--dataset", required=True)
    e.add_argument("--manifest")
    e.add_argument("--iou-nms", type=float, default=0.5)
    e.add_argument("--out")

    c = sub.add_parser("confusions", parents=[common], help="mine confused pairs into an increment plan")
    c.add_argument("--run", required=True)
    c.add_argument("--threshold", type=float, default=0.2)
    c.add_argument("--max-pairs", type=int, default=2)
    c.add_argument("--out")

    i = sub.add_parser("increment", parents=[common], help="incremental tuning from a plan")
    i.add_argument("--run", required=True)
    i.add_argument("--plan")
    i.add_argument("--regime", choices=["prompt", "prompt-only", "all-tokens", "subset-tokens",
                                        "prompt_only", "all_tokens", "subset_tokens"])
    i.add_argument("--components", choices=["both", "affirmation", "negation"])
    i.add_argument("--epochs", type=int)
    i.add_argument("--lr", type=float)
    i.add_argument("--out-dir")
    i.add_argument("--force", action="store_true")

    r = sub.add_parser("report", parents=[common], help="ablation and increment tables over runs")
    r.add_argument("runs", nargs="+", help="run directories or directories of runs")
    r.add_argument("--csv", help="also write the table as CSV")
    return ap


def _config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, args.set)
    for key, val in (("data_dir", args.data_dir), ("out_dir", args.out_dir), ("manifest", args.manifest)):
        if val is not None:
            cfg.set(key, val)
    cfg.validate()
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "gen":
            cfg = _config_from_args(args)
            if args.pretrain_shots is not None:
                cfg.set("datasets.pretrain.shots", args.pretrain_shots)
            if args.test_shots is not None:
                cfg.set("datasets.test.shots", args.test_shots)
            print(json.dumps(cmd_gen(cfg), indent=2, sort_keys=True))
        elif args.verb == "train":
            cfg = _config_from_args(args)
            comp = cfg.doc["components"]
            if args.baseline_csp or args.ca:
                for k in comp:
                    comp[k] = bool(args.ca)
            for k in ("smoothing", "separation", "decorrelation"):
                if getattr(args, k) is not None:
                    comp[k] = getattr(args, k)
            if args.epochs is not None:
                cfg.set("train.epochs", args.epochs)
            if args.lr is not None:
                cfg.set("train.lr", args.lr)
            if args.seeds is not None:
                seeds = list(range(args.seeds))
            elif args.seed is not None:
                seeds = [args.seed]
            else:
                seeds = [int(cfg.doc["seed"])]
            cfg.validate()
            for run in cmd_train(cfg, seeds, force=args.force):
                print(run)
        elif args.verb == "eval":
            report = cmd_eval(args.checkpoint, args.dataset, args.manifest, args.detections, args.iou_nms)
            text = report.to_json() + "\n"
            if args.out:
                Path(args.out).write_text(text)
            print(text, end="")
        elif args.verb == "confusions":
            path = cmd_confusions(args.run, args.threshold, args.max_pairs, args.out)
            plan = json.loads(path.read_text())
            if not plan["pairs"]:
                print(f"warning: no confused pair at threshold {args.threshold}", file=sys.stderr)
            print(path)
        elif args.verb == "increment":
            print(cmd_increment(args.run, args.plan, args.regime, args.components, args.epochs, args.lr,
                                args.out_dir, args.force))
        elif args.verb == "report":
            text, table = cmd_report(args.runs)
            if args.csv:
                Path(args.csv).write_text(table)
            print(text, end="")
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured message
        if args.verbose:
            log.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "verb": args.verb}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
