"""Command-line interface: ``spikescr <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .augment import GSC_AUGMENT, SHD_AUGMENT, SSC_AUGMENT, AugmentConfig
from .data import (CurriculumSchedule, DenseDataset, EventDataset, SyntheticSpec, block_sum, load_dense,
                   load_events, save_dense, save_events, synthetic_dataset)
from .energy import E_AC_PJ, E_MAC_PJ, profile
from .errors import (ConfigurationError, DivergenceError, ParseError, SpikeSCRError, ValidationError)
from .layers import ModelConfig, SpikeSCR, canonical_json, load_checkpoint, save_checkpoint
from .train import (DistillConfig, OptimConfig, config_from_dict, confusion_matrix, evaluate, fit,
                    kdcl_run)

log = logging.getLogger("spikescr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

AUGMENT_PRESETS = {"shd": SHD_AUGMENT, "ssc": SSC_AUGMENT, "gsc": GSC_AUGMENT}


class UsageError(SpikeSCRError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run bookkeeping -------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    build: str
    started: str
    finished: str | None = None
    artifacts: dict = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("SPIKESCR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"SPIKESCR_SEED must be an integer, got {env!r}") from exc


def write_metrics(path: Path, rows: list[dict], append: bool = False) -> None:
    base = ["epoch", "stage", "lr", "loss_ce", "loss_kd", "train_acc", "val_acc"]
    extra = sorted({k for r in rows for k in r if k not in base})
    cols = base + extra
    if append and path.exists():
        with open(path, newline="") as f:
            cols = next(csv.reader(f))
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        if mode == "w":
            w.writeheader()
        for r in rows:
            w.writerow(r)


# -- configuration ------------------------------------------------------------------

CONFIG_SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "distill": DistillConfig,
                   "augment": AugmentConfig}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    for key in raw:
        if key not in CONFIG_SECTIONS and key not in ("augment_preset", "input_kind"):
            raise ConfigurationError(f"unknown config key: {key!r}")
    return raw


def merged_configs(args, raw: dict, n_channels: int, n_classes: int):
    model = dict(raw.get("model", {}))
    model.setdefault("input_channels", n_channels)
    model.setdefault("n_classes", n_classes)
    for flag, key in (("blocks", "n_blocks"), ("heads", "n_heads"), ("hidden", "hidden")):
        if getattr(args, flag, None) is not None:
            model[key] = getattr(args, flag)
    optim = dict(raw.get("optim", {}))
    for flag in ("lr", "epochs", "batch_size", "weight_decay", "t_max"):
        if getattr(args, flag, None) is not None:
            optim[flag] = getattr(args, flag)
    distill = dict(raw.get("distill", {}))
    for flag, key in (("kd_temperature", "temperature"), ("lambda1", "lambda1"), ("lambda2", "lambda2"),
                      ("warmup_epochs", "warmup_epochs"), ("kd_source", "kd_source")):
        if getattr(args, flag, None) is not None:
            distill[key] = getattr(args, flag)
    preset = getattr(args, "augment", None) or raw.get("augment_preset")
    augment = None
    if preset and preset != "none":
        if preset not in AUGMENT_PRESETS:
            raise ConfigurationError(f"unknown augment preset {preset!r}")
        augment = AUGMENT_PRESETS[preset]
    elif "augment" in raw:
        augment = config_from_dict(AugmentConfig, raw["augment"])
    return (ModelConfig.from_dict(model), config_from_dict(OptimConfig, optim),
            config_from_dict(DistillConfig, distill), augment)


# -- data helpers ----------------------------------------------------------------

def _load_any(path: str) -> EventDataset | DenseDataset:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(p, "rb") as f:
        head = f.read(4)
    if head == b"SDNS" or (p.suffix == ".sdns" and head == b""):
        return load_dense(p)
    return load_events(p)


def _dense(ds: EventDataset | DenseDataset, t_steps: int | None) -> DenseDataset:
    if isinstance(ds, DenseDataset):
        if t_steps is not None and ds.t_steps != t_steps and len(ds):
            raise UsageError(f"dense file has T={ds.t_steps}; --t-steps {t_steps} needs an event file")
        return ds
    if t_steps is None:
        raise UsageError("--t-steps is required for event files")
    return ds.dense(t_steps)


def _channels(ds: EventDataset | DenseDataset) -> int:
    return ds.n_neurons if isinstance(ds, EventDataset) else int(ds.x.shape[-1])


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = resolve_seed(args.seed)
    spec = SyntheticSpec(n_classes=args.classes, n_samples=args.samples, n_neurons=args.neurons,
                         duration=args.duration, seed=seed)
    ds = synthetic_dataset(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_events(out, ds)
    print(json.dumps({"out": str(out), "samples": len(ds), "classes": ds.n_classes,
                      "neurons": ds.n_neurons, "seed": seed}))
    return EXIT_OK


def _run_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    raw = load_config(args.config)
    data = _load_any(args.data)
    train = _dense(data, args.t_steps)
    val = _dense(_load_any(args.val), train.t_steps) if args.val else None
    model_cfg, optim, distill, augment = merged_configs(args, raw, _channels(data), max(train.n_classes, 1))
    run_dir = _run_dir(args)
    start_epoch = 0
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        start_epoch = int(meta.get("epoch", -1)) + 1
        model_cfg = model.cfg
    else:
        model = SpikeSCR(model_cfg, seed=seed)
    config = {"model": model_cfg.to_dict(), "optim": asdict(optim),
              "augment": augment.to_dict() if augment else None, "t_steps": train.t_steps,
              "input_kind": args.input_kind, "data": str(args.data)}
    (run_dir / "config.json").write_text(canonical_json(config) + "\n")
    manifest = RunManifest("train", config, seed, build_id(), _now())
    log.info("train: %d samples at T=%d, model %s", len(train), train.t_steps, model_cfg.tag)
    res = fit(model, train, optim, seed, val=val, start_epoch=start_epoch, augment=augment,
              input_kind=args.input_kind)
    ckpt = run_dir / "model.sscr"
    last = res.log[-1]["epoch"] if res.log else start_epoch - 1
    save_checkpoint(ckpt, model, {"epoch": last, "t_steps": train.t_steps, "seed": seed})
    write_metrics(run_dir / "metrics.csv", res.log, append=bool(args.resume))
    manifest.finished = _now()
    manifest.artifacts = {"checkpoint": ckpt.name, "metrics": "metrics.csv", "config": "config.json"}
    manifest.write(run_dir)
    print(json.dumps({"checkpoint": str(ckpt), "epochs": len(res.log), "t_steps": train.t_steps,
                      "final": res.final}, default=float))
    return EXIT_OK


def cmd_kdcl(args) -> int:
    seed = resolve_seed(args.seed)
    raw = load_config(args.config)
    try:
        schedule = CurriculumSchedule.parse(args.schedule, allow_single=True)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    data = _load_any(args.data)
    if not isinstance(data, EventDataset):
        raise UsageError("kdcl needs an event file so every stage can be re-binned")
    val = _load_any(args.val) if args.val else None
    if val is not None and not isinstance(val, EventDataset):
        raise UsageError("kdcl validation data must be an event file")
    model_cfg, optim, distill, augment = merged_configs(args, raw, data.n_neurons, max(data.n_classes, 1))
    run_dir = _run_dir(args)
    config = {"model": model_cfg.to_dict(), "optim": asdict(optim), "distill": asdict(distill),
              "augment": augment.to_dict() if augment else None, "schedule": schedule.t_steps,
              "data": str(args.data)}
    (run_dir / "config.json").write_text(canonical_json(config) + "\n")
    manifest = RunManifest("kdcl", config, seed, build_id(), _now())
    artifacts: dict = {"checkpoints": []}
    all_rows: list[dict] = []

    def on_stage(rep, model):
        path = run_dir / f"stage{rep.stage}_T{rep.t_steps}.sscr"
        save_checkpoint(path, model, {"stage": rep.stage, "t_steps": rep.t_steps, "seed": seed})
        artifacts["checkpoints"].append(path.name)
        all_rows.extend(rep.log)
        log.info("stage %d (T=%d) done: val %.4f", rep.stage, rep.t_steps, rep.val_acc)

    res = kdcl_run(schedule, data, model_cfg, distill, optim, seed, val_events=val, augment=augment,
                   on_stage=on_stage)
    report = {"schedule": schedule.t_steps, "stages": [s.summary() for s in res.stages]}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, default=float) + "\n")
    write_metrics(run_dir / "metrics.csv", all_rows)
    manifest.finished = _now()
    manifest.artifacts = {**artifacts, "report": "report.json", "metrics": "metrics.csv"}
    manifest.write(run_dir)
    print(json.dumps(report, default=float))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = _dense(_load_any(args.data), args.t_steps)
    if len(data) and data.x.shape[-1] != model.cfg.input_channels:
        raise ValidationError(f"data has {data.x.shape[-1]} channels, model expects {model.cfg.input_channels}")
    n_classes = model.cfg.n_classes
    data = DenseDataset(data.x, data.y, n_classes)
    if len(data) and data.y.max() >= n_classes:
        raise ValidationError(f"label {int(data.y.max())} outside model's {n_classes} classes")
    acc = evaluate(model, data)
    cm = confusion_matrix(model, data) if len(data) else np.zeros((n_classes, n_classes), np.int64)
    if args.confusion:
        with open(args.confusion, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["true"] + [f"pred_{j}" for j in range(n_classes)])
            for i, row in enumerate(cm):
                w.writerow([i] + [int(v) for v in row])
    print(json.dumps({"accuracy": acc, "samples": len(data), "t_steps": data.t_steps,
                      "confusion": cm.tolist()}))
    return EXIT_OK


def cmd_profile(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data = _dense(_load_any(args.data), args.t_steps)
    if len(data) == 0:
        data = DenseDataset(np.zeros((0, args.t_steps or 1, model.cfg.input_channels), np.float32),
                            np.zeros(0, np.int64), model.cfg.n_classes)
    report = profile(model, data, args.input_kind, e_mac_pj=args.e_mac_pj, e_ac_pj=args.e_ac_pj,
                     bill_float_ops=args.bill_float_ops)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(json.dumps(report.to_dict()["totals"]))
    return EXIT_OK


def cmd_rebin(args) -> int:
    data = _load_any(args.data)
    if isinstance(data, EventDataset):
        out = data.dense(args.t_steps)
    else:
        if data.t_steps % args.t_steps:
            raise UsageError(f"dense T={data.t_steps} is not a multiple of {args.t_steps}; rebin from events")
        factor = data.t_steps // args.t_steps
        x = np.stack([block_sum(s, factor) for s in data.x]) if len(data) else \
            np.zeros((0, args.t_steps, data.x.shape[-1]), np.float32)
        out = DenseDataset(x.astype(np.float32), data.y, data.n_classes)
    save_dense(args.out, out)
    print(json.dumps({"out": str(args.out), "samples": len(out), "t_steps": out.t_steps,
                      "total_count": float(out.x.sum())}))
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--config", help="JSON config with model/optim/distill/augment sections")
    p.add_argument("--blocks", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--t-max", type=int)
    p.add_argument("--augment", choices=["none", *AUGMENT_PRESETS])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spikescr", description="Spiking speech-command models with curriculum distillation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic event dataset (JSONL)")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--neurons", type=int, default=140)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="direct training at a single T")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--t-steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--input-kind", choices=["spike", "real"], default="spike")
    _model_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("kdcl", help="curriculum distillation over a T schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--schedule", required=True, help='comma-separated T levels, e.g. "40,20,10"')
    p.add_argument("--kd-temperature", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--kd-source", choices=["yhat", "mean", "potential"])
    _model_flags(p)
    p.set_defaults(fn=cmd_kdcl)

    p = sub.add_parser("eval", help="accuracy and confusion matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t-steps", type=int)
    p.add_argument("--confusion", help="write the confusion matrix CSV here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile", help="energy report (JSON/CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t-steps", type=int)
    p.add_argument("--input-kind", choices=["spike", "real"], default="spike")
    p.add_argument("--e-mac-pj", type=float, default=E_MAC_PJ)
    p.add_argument("--e-ac-pj", type=float, default=E_AC_PJ)
    p.add_argument("--bill-float-ops", action="store_true", help="bill RoPE and scale multiplies as MACs")
    p.add_argument("--json")
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("rebin", help="bin events (or block-sum a dense file) to a new T")
    p.add_argument("--data", required=True)
    p.add_argument("--t-steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rebin)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"spikescr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"spikescr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"spikescr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
