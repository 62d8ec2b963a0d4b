"""Command-line pipeline: prepare, train, evaluate, sweep, report.

Run directories are named by the hash of the fully merged config and live
under the directory given by the TRAJDIFF_RUNS environment variable
(default ./runs). Exit codes are stable: 0 success, 2 unreadable input or
bad config, 3 empty split, 4 non-finite loss abort, 5 vocabulary mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from .config import SCHEMA, config_hash, format_config, load_config
from .data import (
    by_split,
    dump_split_manifest,
    filter_and_split,
    load_interactions,
    read_split_manifest,
    write_id_map,
    write_split_manifest,
)
from .exceptions import (
    ConfigError,
    EmptyCorpusError,
    EmptySplitError,
    NumericsError,
    ParseError,
    VocabularyError,
)
from .losses import LossWeights
from .model import DenoiserConfig, PreferenceDenoiser
from .sampling import evaluate_examples
from .schedule import linear_schedule
from .training import (
    TrainConfig,
    fit,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    schedule_from_checkpoint,
)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_EMPTY_SPLIT = 3
EXIT_NUMERIC = 4
EXIT_VOCABULARY = 5

STATS_FILE = "stats.json"
MANIFEST_FILE = "split_manifest.jsonl"
ID_MAP_FILE = "id_map.tsv"
CHECKPOINT_FILE = "checkpoint.pt"
TRAIN_LOG_FILE = "train_log.jsonl"
RUN_MANIFEST_FILE = "manifest.json"


def run_root() -> Path:
    return Path(os.environ.get("TRAJDIFF_RUNS", "runs"))


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("trajdiff")
    except Exception:
        return "unknown"


def _jsonable(config: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()}


def _denoiser_config(cfg: dict) -> DenoiserConfig:
    return DenoiserConfig(
        n_max=cfg["traj.n_max"],
        k=cfg["traj.k"],
        embed_dim=cfg["model.d"],
        n_blocks=cfg["model.blocks"],
        n_heads=cfg["model.heads"],
        dropout=cfg["model.dropout"],
        mask_mode=cfg["model.mask"],
        cosine_scores=cfg["model.cosine"],
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["train.lr"],
        batch_size=cfg["train.batch"],
        max_epochs=cfg["train.epochs"],
        patience=cfg["train.patience"],
        eval_every=cfg["train.eval_every"],
        seed=cfg["train.seed"],
        select_topk=cfg["train.select_topk"],
        infer_steps=cfg["infer.steps"],
        weights=LossWeights(
            lam=cfg["loss.lambda"], gamma=cfg["loss.gamma"], reg_weight=cfg["loss.reg"]
        ),
        no_listpref=cfg["train.no_listpref"],
        no_simple=cfg["train.no_simple"],
        no_reg=cfg["train.no_reg"],
        trajectory_loss_only=cfg["train.trajectory_only"],
    )


def _read_stats(data_dir: Path) -> dict:
    with open(data_dir / STATS_FILE, encoding="utf-8") as fh:
        return json.load(fh)


def _check_data_compat(cfg: dict, stats: dict) -> None:
    for key, stat in (("traj.k", "k"), ("traj.n_max", "n_max")):
        if cfg[key] != stats[stat]:
            raise ConfigError(
                f"{key}={cfg[key]} does not match prepared data ({stat}={stats[stat]}); "
                "re-run prepare or fix the config"
            )


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    cfg = load_config(args.config, args.set)
    path = cfg["dataset.path"]
    if not path:
        raise ConfigError("dataset.path is not set")
    corpus = load_interactions(
        path,
        usecols=tuple(cfg["dataset.columns"]),
        delimiter=cfg["dataset.delimiter"],
    )
    examples = filter_and_split(corpus, k=cfg["traj.k"], n_max=cfg["traj.n_max"])
    splits = by_split(examples)

    out = Path(args.out) if args.out else run_root() / "prepared" / config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_id_map(corpus.item_map, out / ID_MAP_FILE)
    write_split_manifest(examples, out / MANIFEST_FILE)
    data_hash = hashlib.sha256(dump_split_manifest(examples).encode("utf-8")).hexdigest()

    n_valid = len(splits["train"])
    stats = {
        "raw_users": len(corpus.users),
        "n_items": corpus.n_items,
        "valid_sequences": n_valid,
        "examples_per_split": {name: len(rows) for name, rows in splits.items()},
        "k": cfg["traj.k"],
        "n_max": cfg["traj.n_max"],
        "vocab_hash": corpus.vocab_hash(),
        "data_hash": data_hash,
        "config_hash": config_hash(cfg),
    }
    with open(out / STATS_FILE, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"raw users: {stats['raw_users']}")
    print(f"items: {stats['n_items']}")
    print(
        f"valid sequences after filtering: {n_valid} "
        f"(k={cfg['traj.k']}, raw length > {1 + 3 * cfg['traj.k']})"
    )
    print(
        "train/valid/test examples: "
        + "/".join(str(len(splits[name])) for name in ("train", "valid", "test"))
    )
    print(f"wrote: {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    data_dir = Path(args.data)
    stats = _read_stats(data_dir)
    _check_data_compat(cfg, stats)
    splits = by_split(read_split_manifest(data_dir / MANIFEST_FILE))

    run_dir = Path(args.run_dir) if args.run_dir else run_root() / "runs" / config_hash(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = run_dir / CHECKPOINT_FILE

    manifest = {
        "config": _jsonable(cfg),
        "config_hash": config_hash(cfg),
        "data_dir": str(data_dir),
        "data_hash": stats["data_hash"],
        "vocab_hash": stats["vocab_hash"],
        "version": _package_version(),
        "created": int(time.time()),
    }
    with open(run_dir / RUN_MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    sched = linear_schedule(
        cfg["diffusion.steps"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"]
    )
    start_epoch = 0
    torch.manual_seed(cfg["train.seed"])  # reproducible parameter init
    model = PreferenceDenoiser(stats["n_items"], _denoiser_config(cfg))
    if args.resume and checkpoint_path.exists():
        payload = load_checkpoint(checkpoint_path, expected_vocab_hash=stats["vocab_hash"])
        model = model_from_checkpoint(payload)
        model.train()
        start_epoch = payload["epoch"] + 1
        print(f"resuming from epoch {payload['epoch']}")

    result = fit(
        model,
        sched,
        splits["train"],
        splits["valid"],
        _train_config(cfg),
        start_epoch=start_epoch,
        checkpoint_path=checkpoint_path,
        vocab_hash=stats["vocab_hash"],
    )
    # cover runs whose eval cadence never fired: persist the restored best state
    save_checkpoint(
        checkpoint_path,
        model,
        train_config=_train_config(cfg),
        vocab_hash=stats["vocab_hash"],
        epoch=result.best_epoch,
        metric=result.best_metric,
        sched=sched,
    )
    mode = "a" if start_epoch > 0 else "w"
    with open(run_dir / TRAIN_LOG_FILE, mode, encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    print(
        f"epochs run: {result.n_epochs} (early stop: {result.stopped_early}); "
        f"best epoch {result.best_epoch}, valid SeqNDCG {result.best_metric:.4f}"
    )
    print(f"run dir: {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.set)
    data_dir = Path(args.data)
    stats = _read_stats(data_dir)
    payload = load_checkpoint(args.checkpoint, expected_vocab_hash=stats["vocab_hash"])
    model = model_from_checkpoint(payload)
    sched = schedule_from_checkpoint(payload)
    if sched is None:
        sched = linear_schedule(
            cfg["diffusion.steps"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"]
        )

    examples = by_split(read_split_manifest(data_dir / MANIFEST_FILE))[args.split]
    if not examples:
        raise EmptySplitError(f"split {args.split!r} holds no examples")

    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "eval_summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "n_steps",
                "topk",
                "mean_hr",
                "seq_hr",
                "mean_ndcg",
                "seq_ndcg",
                "seq_match",
                "ppl",
                "ln_ppl",
                "seconds",
            ]
        )
        for n_steps in cfg["eval.steps"]:
            started = time.perf_counter()
            report = evaluate_examples(
                model,
                examples,
                sched,
                n_steps=n_steps,
                topk_values=tuple(cfg["eval.topk"]),
                batch_size=cfg["eval.batch"],
                seed=cfg["eval.seed"],
            )
            elapsed = time.perf_counter() - started
            with open(out / f"report_steps_{n_steps}.jsonl", "w", encoding="utf-8") as rf:
                rf.write(report.to_jsonl())
            for topk in report.topk_values:
                writer.writerow(
                    [
                        n_steps,
                        topk,
                        report.mean_hr[topk],
                        report.seq_hr[topk],
                        report.mean_ndcg[topk],
                        report.seq_ndcg[topk],
                        report.seq_match[topk],
                        report.ppl,
                        report.ln_ppl,
                        round(elapsed, 4),
                    ]
                )
            print(f"n_steps={n_steps} split={args.split} wall_clock={elapsed:.2f}s")
            print(report.format_table())
    print(f"wrote: {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    axes = []
    for item in args.grid:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not key=v1,v2,...")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if SCHEMA[key][1] == "int_list":
            raise ConfigError(f"cannot sweep list-valued key {key!r}")
        values = [part.strip() for part in raw.split(",") if part.strip()]
        if not values:
            raise ConfigError(f"grid entry {item!r} names no values")
        axes.append([(key, value) for value in values])

    combos = list(itertools.product(*axes))
    run_dirs = []
    commands = []
    for combo in combos:
        overrides = list(args.set) + [f"{key}={value}" for key, value in combo]
        cfg = load_config(args.config, overrides)
        run_dirs.append(run_root() / "runs" / config_hash(cfg))
        command = [sys.executable, "-m", "trajdiff", "train", "--data", args.data]
        if args.config:
            command += ["--config", args.config]
        for override in overrides:
            command += ["--set", override]
        commands.append(command)

    if args.workers <= 1:
        codes = []
        for combo, command in zip(combos, commands):
            train_args = argparse.Namespace(
                config=args.config,
                set=list(args.set) + [f"{key}={value}" for key, value in combo],
                data=args.data,
                run_dir=None,
                resume=False,
            )
            codes.append(cmd_train(train_args))
    else:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            codes = list(
                pool.map(lambda command: subprocess.run(command).returncode, commands)
            )

    for run_dir, code in zip(run_dirs, codes):
        print(f"sweep run {run_dir}: exit {code}")
    bad = [code for code in codes if code != 0]
    return bad[0] if bad else EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / TRAIN_LOG_FILE
    if not log_path.exists():
        raise FileNotFoundError(f"no training log at {log_path}")

    written = []
    loss_csv = out / "loss_curve.csv"
    with open(log_path, encoding="utf-8") as fh, open(
        loss_csv, "w", encoding="utf-8", newline=""
    ) as cf:
        writer = csv.writer(cf)
        writer.writerow(
            [
                "epoch",
                "loss_total",
                "loss_simple",
                "loss_list_pref",
                "loss_reg",
                "seconds",
                "valid_seq_ndcg",
            ]
        )
        for line in fh:
            entry = json.loads(line)
            writer.writerow(
                [
                    entry["epoch"],
                    entry["loss_total"],
                    entry["loss_simple"],
                    entry["loss_list_pref"],
                    entry["loss_reg"],
                    entry["seconds"],
                    entry["valid_seq_ndcg"],
                ]
            )
    written.append(loss_csv)

    report_paths = sorted((run_dir / "eval").glob("report_steps_*.jsonl"))
    if report_paths:
        position_csv = out / "position_hr.csv"
        with open(position_csv, "w", encoding="utf-8", newline="") as cf:
            writer = csv.writer(cf)
            writer.writerow(["n_steps", "topk", "position", "hr", "ndcg"])
            for path in report_paths:
                steps = int(path.stem.rsplit("_", 1)[1])
                with open(path, encoding="utf-8") as rf:
                    for line in rf:
                        record = json.loads(line)
                        if record.get("topk") is None:
                            continue
                        hr = record["per_position_hr"]
                        ndcg = record["per_position_ndcg"]
                        for position, (h, n) in enumerate(zip(hr, ndcg), start=1):
                            writer.writerow([steps, record["topk"], position, h, n])
        written.append(position_csv)

    for path in written:
        print(f"wrote: {path}")
    return EXIT_OK


# ----------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdiff",
        description="Train and evaluate a diffusion-based trajectory recommender.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config value (repeatable)",
        )

    p = sub.add_parser("prepare", help="split raw interactions into trajectory windows")
    add_config_flags(p)
    p.add_argument("--out", help="output directory (default under $TRAJDIFF_RUNS/prepared)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit the denoiser on a prepared dataset")
    add_config_flags(p)
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument("--run-dir", help="run directory (default named by config hash)")
    p.add_argument("--resume", action="store_true", help="continue from the run checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run inference on a split and write reports")
    add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", help="report directory (default <checkpoint dir>/eval)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train once per grid combination")
    add_config_flags(p)
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument(
        "--grid",
        action="append",
        required=True,
        metavar="KEY=V1,V2",
        help="axis of the sweep grid (repeatable; cartesian product)",
    )
    p.add_argument("--workers", type=int, default=1, help="parallel runs (subprocesses)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="export plot-ready CSVs from a run directory")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--out", help="CSV directory (default: the run directory)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, EmptyCorpusError, ConfigError, FileNotFoundError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except EmptySplitError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_EMPTY_SPLIT
    except NumericsError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except VocabularyError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VOCABULARY


if __name__ == "__main__":
    sys.exit(main())
