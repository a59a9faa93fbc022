"""Command-line entry point: ``sgrec preprocess | train | evaluate | sweep | recommend``.

Exit codes: 0 success, 2 bad or missing input, 3 empty data, 4 numeric
failure, 5 checkpoint incompatibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATION_NAMES, AblationFlags, TrainConfig, load_config_file
from .data import DatasetConfig, load_bundle, parse_checkins, preprocess, save_bundle
from .errors import DataFormatError, SGRecError
from .evaluator import DEFAULT_KS, evaluate_split, rank_pois
from .model import collate
from .plotting import plot_sweep, plot_training_log
from .seq2graph import augment_sequence
from .trainer import fit, model_from_checkpoint

logger = logging.getLogger("sgrec")

SEED_ENV = "SGREC_SEED"
SWEEP_AXES = {"D": ("dim", int), "gamma": ("gamma", float), "eta": ("eta", float), "layers": ("num_layers", int)}
STAT_KEYS = ("#User", "#POI", "#Cat.", "#Check-in", "#Seq.", "#Relation")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"sgrec-{__version__}"


class RunManifest:
    """Everything needed to rerun a command; written once, when the command finishes."""

    def __init__(self, command: str, argv, seed=None):
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": {},
            "inputs": {},
            "outputs": {},
            "seed": seed,
            "build": build_id(),
            "started": _now(),
            "finished": None,
        }

    def write(self, path) -> None:
        self.data["finished"] = _now()
        self.data["outputs"]["manifest"] = str(path)
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- configuration --------------------------------------------------------------


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise DataFormatError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _file_sections(path) -> dict:
    if not path:
        return {}
    try:
        return load_config_file(path)
    except (json.JSONDecodeError, ValueError) as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def resolve_dataset_config(args) -> DatasetConfig:
    file = _file_sections(args.config).get("dataset", {})
    preset = {"foursquare": DatasetConfig.foursquare, "gowalla": DatasetConfig.gowalla}.get(args.preset, DatasetConfig)
    kw = dict(file)
    env = _env_seed()
    if env is not None:
        kw["seed"] = env
    if args.seed is not None:
        kw["seed"] = args.seed
    try:
        return preset(**kw)
    except TypeError as exc:
        raise DataFormatError(f"bad dataset config: {exc}") from None


def resolve_train_config(args, extra=None) -> TrainConfig:
    """Defaults, then the config file, then ``SGREC_SEED``, then flags."""
    kw = dict(_file_sections(getattr(args, "config", None)).get("train", {}))
    kw.update(extra or {})
    env = _env_seed()
    if env is not None:
        kw["seed"] = env
    flag_map = {
        "dim": "dim",
        "gamma": "gamma",
        "eta": "eta",
        "layers": "num_layers",
        "epochs": "max_epochs",
        "batch_size": "batch_size",
        "lr": "learning_rate",
        "l2": "l2_lambda",
        "patience": "patience",
        "seed": "seed",
        "scope": "neighbor_scope",
        "dtype": "dtype",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    flags = kw.pop("ablation", {})
    ablation = AblationFlags(**flags) if isinstance(flags, dict) else flags
    if getattr(args, "disable", None):
        ablation = ablation.disable(*args.disable)
    kw["ablation"] = ablation
    if getattr(args, "no_write_back", False):
        kw["write_back"] = False
    try:
        return TrainConfig.from_dict(kw)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"bad training config: {exc}") from None


# -- commands -------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    cfg = resolve_dataset_config(args)
    manifest = RunManifest("preprocess", args.argv, cfg.seed)
    rows = parse_checkins(args.raw, fmt=args.format)
    ds = preprocess(rows, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checksum = save_bundle(ds, out)
    stats = ds.stats()
    print("\t".join(STAT_KEYS))
    print("\t".join(str(stats[k]) for k in STAT_KEYS))
    print(f"sha256\t{checksum}")
    manifest.data.update(config={"dataset": cfg.to_dict()}, inputs={"raw": str(args.raw), "format": args.format})
    manifest.data["outputs"] = {"bundle": str(out), "sha256": checksum}
    manifest.data["stats"] = stats
    manifest.data["malformed_lines"] = rows.malformed
    manifest.write(out.with_name(out.name + ".manifest.json"))
    return 0


def _train_into(ds, cfg, out: Path, stem: str = ""):
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / f"{stem}train_log.jsonl"

    def progress(rec, _model):
        logger.info(
            "epoch %d loss %.4f val nDCG@20 %s",
            rec["epoch"],
            rec["loss"],
            "-" if rec["val_ndcg20"] is None else f"{rec['val_ndcg20']:.4f}",
        )

    result = fit(ds, cfg, log_path=log_path, on_epoch=progress)
    ckpt_path = out / f"{stem}model.ckpt"
    save_checkpoint(result.best, ckpt_path)
    return result, ckpt_path, log_path


def cmd_train(args) -> int:
    ds = load_bundle(args.bundle)
    cfg = resolve_train_config(args)
    print(f"resolved config: D={cfg.dim} gamma={cfg.gamma} eta={cfg.eta} layers={cfg.num_layers} seed={cfg.seed}")
    off = [name for name, attr in ABLATION_NAMES.items() if not getattr(cfg.ablation, attr)]
    if off:
        print(f"disabled: {', '.join(off)}")
    manifest = RunManifest("train", args.argv, cfg.seed)
    out = Path(args.out)
    result, ckpt_path, log_path = _train_into(ds, cfg, out)
    curve = out / "training_curve.png"
    plot_training_log(result.log, curve)
    print(f"best epoch {result.best_epoch} of {result.last_epoch}; checkpoint {ckpt_path}")
    manifest.data.update(config={"train": cfg.to_dict()}, inputs={"bundle": str(args.bundle)})
    manifest.data["outputs"] = {"checkpoint": str(ckpt_path), "log": str(log_path), "curve": str(curve)}
    manifest.data["best_epoch"] = result.best_epoch
    manifest.write(out / "manifest.json")
    return 0


def _parse_ks(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise DataFormatError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise DataFormatError("--k values must be positive")
    return ks


def cmd_evaluate(args) -> int:
    ds = load_bundle(args.bundle)
    ckpt = load_checkpoint(args.checkpoint, ds.vocab.fingerprint())
    model = model_from_checkpoint(ckpt)
    ks = _parse_ks(args.k)
    report = evaluate_split(model, ds.split(args.split), ds.vocab, ks, split=args.split)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write_json(out)
        manifest = RunManifest("evaluate", args.argv, ckpt.config.seed)
        manifest.data.update(config={"train": ckpt.config.to_dict(), "ks": list(ks), "split": args.split})
        manifest.data["inputs"] = {"bundle": str(args.bundle), "checkpoint": str(args.checkpoint)}
        manifest.data["outputs"] = {"metrics": str(out)}
        if args.ranks:
            report.write_ranks_csv(args.ranks)
            manifest.data["outputs"]["ranks"] = str(args.ranks)
        manifest.write(out.with_name(out.stem + ".manifest.json"))
    elif args.ranks:
        report.write_ranks_csv(args.ranks)
    return 0


def _sweep_plan(args):
    extra = {}
    if args.spec:
        try:
            spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{args.spec}: {exc}") from None
        axis, values = spec.get("axis"), spec.get("values")
        extra = spec.get("train", {})
    else:
        axis = args.axis
        values = [v for v in (args.values or "").split(",") if v.strip()]
    if axis not in SWEEP_AXES:
        raise DataFormatError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise DataFormatError("sweep needs at least one value")
    key, cast = SWEEP_AXES[axis]
    try:
        values = [cast(v) if cast is float else int(float(v)) for v in values]
    except (TypeError, ValueError):
        raise DataFormatError(f"bad values for axis {axis}: {values!r}") from None
    return axis, key, values, extra


def cmd_sweep(args) -> int:
    ds = load_bundle(args.bundle)
    axis, key, values, extra = _sweep_plan(args)
    base = resolve_train_config(args, extra)
    manifest = RunManifest("sweep", args.argv, base.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        row = {"value": value, "hr20": None, "ndcg20": None, "error": ""}
        try:
            cfg = TrainConfig.from_dict({**base.to_dict(), key: value})
            result, _, _ = _train_into(ds, cfg, out, stem=f"{axis}={value}.")
            report = evaluate_split(model_from_checkpoint(result.best), ds.split(args.split), ds.vocab, (20,), split=args.split)
            row.update(hr20=report.hr(20), ndcg20=report.ndcg(20))
        except (SGRecError, ValueError, FloatingPointError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            logger.error("sweep point %s=%s failed: %s", axis, value, exc)
        rows.append(row)
        print(f"{axis}={value}\tHR@20={row['hr20']}\tnDCG@20={row['ndcg20']}{'  ' + row['error'] if row['error'] else ''}")
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["value", "hr20", "ndcg20", "error"])
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else v for k, v in r.items()})
    png = out / "sweep.png"
    plot_sweep(rows, axis, png)
    manifest.data.update(config={"train": base.to_dict(), "axis": axis, "values": values, "split": args.split})
    manifest.data["inputs"] = {"bundle": str(args.bundle), "spec": str(args.spec) if args.spec else None}
    manifest.data["outputs"] = {"csv": str(csv_path), "plot": str(png)}
    manifest.write(out / "manifest.json")
    return 0


def _read_recent(path, user):
    rows = parse_checkins(path)
    if user is not None:
        rows = [c for c in rows if c.user_id == user]
    if not rows:
        raise DataFormatError(f"{path}: no check-ins{'' if user is None else f' for user {user}'}")
    users = {c.user_id for c in rows}
    if len(users) > 1:
        raise DataFormatError(f"{path}: check-ins from several users; pick one with --user")
    return users.pop(), sorted(rows, key=lambda c: c.timestamp)


def cmd_recommend(args) -> int:
    ds = load_bundle(args.bundle)
    vocab = ds.vocab
    ckpt = load_checkpoint(args.checkpoint, vocab.fingerprint())
    model = model_from_checkpoint(ckpt)
    user_id, rows = _read_recent(args.checkins, args.user)
    if user_id not in vocab.user_index:
        raise DataFormatError(f"user {user_id!r} is not in the training vocabulary")
    known = [vocab.poi_index[c.poi_id] for c in rows if c.poi_id in vocab.poi_index]
    if len(known) < len(rows):
        logger.warning("ignored %d check-in(s) at POIs outside the vocabulary", len(rows) - len(known))
    if not known:
        raise DataFormatError("none of the supplied check-ins are at known POIs")
    known = known[-model.max_seq_len :]
    aug = augment_sequence(known, vocab.user_index[user_id], vocab)
    probs = model.forward(collate([aug], vocab.poi_cat), with_category=False).probs_poi.data[0]
    top = rank_pois(probs, 0, k=args.top).top
    print("poi_id,score")
    for p in top:
        print(f"{vocab.pois[p]},{probs[p]:.6g}")
    return 0


# -- argument parsing -----------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with optional 'dataset' and 'train' sections")
    p.add_argument("--dim", type=int, help="embedding size D (default 120)")
    p.add_argument("--gamma", type=float, help="neighbour sampling rate (default 0.2)")
    p.add_argument("--eta", type=float, help="category loss weight (default 0.2)")
    p.add_argument("--layers", type=int, help="stacked CA-GAT layers (default 2)")
    p.add_argument("--epochs", type=int, help="maximum epochs (default 100)")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int, help=f"overrides the config file and {SEED_ENV}")
    p.add_argument("--scope", choices=["per-user", "global"], help="neighbour scope of the transition index")
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--disable", action="append", choices=sorted(ABLATION_NAMES), help="switch off one component; repeatable")
    p.add_argument("--no-write-back", action="store_true", help="skip the epoch-end embedding write-back")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw check-ins to a dataset bundle")
    p.add_argument("raw")
    p.add_argument("out")
    p.add_argument("--format", choices=["canonical", "raw"], default="canonical")
    p.add_argument("--preset", choices=["foursquare", "gowalla"], help="session window preset (72h / 24h)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train and keep the best checkpoint")
    p.add_argument("bundle")
    p.add_argument("out", help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="HR@K and nDCG@K of a checkpoint")
    p.add_argument("bundle")
    p.add_argument("checkpoint")
    p.add_argument("--k", default=",".join(str(k) for k in DEFAULT_KS))
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--ranks", help="per-sequence ranks CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate once per value of one hyperparameter")
    p.add_argument("bundle")
    p.add_argument("out", help="output directory")
    p.add_argument("--axis", choices=sorted(SWEEP_AXES))
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--spec", help="JSON {axis, values, train} instead of --axis/--values")
    p.add_argument("--split", default="test", choices=["valid", "test"])
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("recommend", help="top-K POIs for one user's recent check-ins")
    p.add_argument("bundle")
    p.add_argument("checkpoint")
    p.add_argument("checkins", help="CSV with user_id,poi_id,category_id,timestamp")
    p.add_argument("--user")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except SGRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
