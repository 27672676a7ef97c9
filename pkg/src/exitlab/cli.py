"""Experiment driver.

    exitlab gen-data  --config cfg.json --out runs/a
    exitlab train     --config cfg.json --out runs/a [--alpha 0.02] [--seed 1]
    exitlab eval      --config cfg.json --out runs/a [--checkpoint runs/a/checkpoints/best.npz]
    exitlab hardness  --config cfg.json --out runs/a
    exitlab sweep     --config cfg.json --out runs/a
    exitlab gradcheck

Exit codes: 0 ok, 1 gradient check failed, 2 bad config, 3 data error,
4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .config import ExperimentConfig
from .core import Rng
from .data import Dataset, gen_synthetic, load_table, split_standardize, write_rows, write_table
from .errors import ConfigError, DataError, ExitLabError
from .hardness import (correctness_matrix, final_layer_losses, forgetting_events,
                       layer_profile, memorized_layers, spearman)
from .inference import (average_sweep, evaluate, evaluate_entropy, evaluate_full_depth,
                        exit_decisions, sweep_alpha)
from .model import BackboneConfig, ModelBundle, load_checkpoint
from .training import train_init, train_iterative

CATEGORY = {2: "config", 3: "data", 4: "training", 1: "error"}


class JsonLog:
    """One JSON object per line, appended to ``path`` and echoed to stderr."""

    def __init__(self, path: Path, echo: bool = True):
        self.path = path
        self.echo = echo
        path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict):
        line = json.dumps({"ts": round(time.time(), 3), **record}, sort_keys=True, default=float)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        if self.echo:
            print(line, file=sys.stderr)


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.raw["data"]
    if d["path"]:
        return load_table(d["path"], d["format"], d["num_classes"])
    return gen_synthetic(cfg.synthetic, cfg.seed)


def splits(cfg: ExperimentConfig):
    return split_standardize(load_dataset(cfg), tuple(cfg.raw["split"]), cfg.seed)


def model_config(cfg: ExperimentConfig, data: Dataset) -> BackboneConfig:
    return BackboneConfig(input_dim=data.feature_dim, num_classes=data.num_classes,
                          **cfg.raw["model"]).validate()


def stamp(cfg: ExperimentConfig, header, rows):
    """Prefix every table with the config hash and seed columns."""
    return ["config_hash", "seed"] + list(header), ([cfg.hash, cfg.seed] + list(r) for r in rows)


def write_stamped(cfg, path, header, rows):
    h, rs = stamp(cfg, header, rows)
    write_rows(path, h, rs)


def _checkpoint(args, cfg: ExperimentConfig, name: str) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "checkpoints" / name
    if not path.exists():
        raise DataError(f"checkpoint not found: {path} (run `exitlab train` first or pass --checkpoint)")
    return path


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    ds = gen_synthetic(cfg.synthetic, cfg.seed)
    out = cfg.out_dir
    write_table(ds, out / "dataset.csv")
    # the dataset table keeps the bare label,f0,... layout; provenance goes alongside
    (out / "dataset.meta.json").write_text(
        json.dumps({"config_hash": cfg.hash, "seed": cfg.seed, "n": len(ds),
                    "num_classes": ds.num_classes, "feature_dim": ds.feature_dim}, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} instances to {out / 'dataset.csv'}")
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    train, dev, _ = splits(cfg)
    m = ModelBundle(model_config(cfg, train), Rng(cfg.seed))
    log = JsonLog(out / "train_log.jsonl", echo=not args.quiet)
    (out / "config.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    report = train_iterative(m, train, dev, cfg.train, log=log, checkpoint_dir=out / "checkpoints",
                             checkpoint_meta={"config_hash": cfg.hash, "seed": cfg.seed})
    np.savez(out / "init_history.npz", history=report.init_history, ids=train.ids,
             config_hash=cfg.hash, seed=cfg.seed)
    write_stamped(cfg, out / "train_report.csv",
                  ["round", "dev_accuracy", "dev_mean_exit_layer", "dev_saved_layers",
                   "policy_objective", "task_objective", "memorized_histogram"],
                  ([r.round, r.dev_accuracy, r.dev_mean_exit_layer, r.dev_saved_layers,
                    r.policy_objective, r.task_objective,
                    " ".join(map(str, r.memorized_histogram))] for r in report.rounds))
    print(f"best round {report.best_round}: dev accuracy {report.best_dev_accuracy:.4f}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    m, _ = load_checkpoint(_checkpoint(args, cfg, "best.npz"))
    _, _, test = splits(cfg)
    preds, T = exit_decisions(m, test)
    write_stamped(cfg, out / "eval_records.csv", ["id", "label", "prediction", "exit_layer"],
                  zip(test.ids, test.y, preds, T))
    rows = []
    metrics = evaluate(m, test)
    rows.append(["policy", "", metrics.accuracy, metrics.mean_exit_layer, metrics.saved_layers, metrics.n])
    full = evaluate_full_depth(m, test)
    rows.append(["full_depth", "", full.accuracy, full.mean_exit_layer, full.saved_layers, full.n])
    for thr in cfg.raw["eval"]["entropy_thresholds"]:
        e = evaluate_entropy(m, test, float(thr))
        rows.append(["entropy", float(thr), e.accuracy, e.mean_exit_layer, e.saved_layers, e.n])
    write_stamped(cfg, out / "eval_summary.csv",
                  ["method", "threshold", "accuracy", "mean_exit_layer", "saved_layers", "n"], rows)
    for r in rows:
        print("  ".join(_fmt(v) for v in r))
    return 0


def cmd_hardness(args, cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    train, _, _ = splits(cfg)
    history_file = out / "init_history.npz"
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "init.npz"
    if ckpt.exists() and history_file.exists():
        m, _ = load_checkpoint(ckpt)
        with np.load(history_file) as z:
            history = z["history"]
    else:
        if args.checkpoint:
            raise DataError(f"checkpoint not found or no init history next to it: {ckpt}")
        # nothing trained yet: run the initialisation stage to get model + history
        m = ModelBundle(model_config(cfg, train), Rng(cfg.seed))
        _, history = train_init(m, train, cfg.train, Rng(cfg.seed))
    if history.shape[1] != len(train):
        raise DataError("init history does not match the training split")
    M = memorized_layers(correctness_matrix(m, train))
    loss = final_layer_losses(m, train)
    fe = np.array([forgetting_events(h) for h in history.T])
    write_stamped(cfg, out / "hardness_report.csv",
                  ["id", "memorized_layer", "final_layer_loss", "forgetting_events"],
                  zip(train.ids, M, loss, fe))
    rho_loss, rho_fe = spearman(M, loss), spearman(M, fe)
    summary = [["spearman_memorized_vs_loss", "no-variance" if rho_loss is None else rho_loss],
               ["spearman_memorized_vs_forgetting", "no-variance" if rho_fe is None else rho_fe]]
    write_stamped(cfg, out / "hardness_summary.csv", ["statistic", "value"], summary)
    write_stamped(cfg, out / "layer_profile.csv", ["layer", "mean_loss", "accuracy"],
                  ([t, l, a] for t, (l, a) in enumerate(layer_profile(m, train), start=1)))
    for name, v in summary:
        print(f"{name}: {_fmt(v)}")
    return 0


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    out = cfg.out_dir
    train, dev, test = splits(cfg)
    sw = cfg.raw["sweep"]
    log = JsonLog(out / "sweep_log.jsonl", echo=not args.quiet)
    records = sweep_alpha(model_config(cfg, train), cfg.train, sw["alphas"], sw["seeds"],
                          train, dev, test, log=log)
    write_stamped(cfg, out / "sweep.csv",
                  ["alpha", "run_seed", "accuracy", "mean_exit_layer", "saved_layers", "baseline_accuracy"],
                  ([r.alpha, r.seed, r.accuracy, r.mean_exit_layer, r.saved_layers, r.baseline_accuracy]
                   for r in records))
    avg = average_sweep(records)
    cols = ["alpha", "accuracy", "mean_exit_layer", "saved_layers", "baseline_accuracy", "seeds"]
    write_stamped(cfg, out / "sweep_summary.csv", cols, ([row[c] for c in cols] for row in avg))
    for row in avg:
        print("  ".join(f"{c}={_fmt(row[c])}" for c in cols))
    return 0


def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    g = cfg.raw["gradcheck"]
    errors = gc.run_suite(int(g["seeds"]), float(g["h"]))
    worst = max(errors)
    if args.out or cfg.raw["out"]:
        write_stamped(cfg, cfg.out_dir / "gradcheck.csv", ["check_seed", "max_relative_error"],
                      enumerate(errors))
    ok = worst < float(g["tolerance"])
    print(f"max relative error {worst:.3e} over {len(errors)} seeds: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "hardness": cmd_hardness,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: $EXITLAB_OUT/exp-<hash>)")
    common.add_argument("--alpha", type=float, help="override train.reward.alpha")
    common.add_argument("--checkpoint", help="model checkpoint for eval/hardness")
    common.add_argument("--quiet", action="store_true", help="do not echo log records")
    parser = argparse.ArgumentParser(prog="exitlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
        cfg = cfg.override(seed=args.seed, out=args.out, alpha=args.alpha)
        return COMMANDS[args.command](args, cfg)
    except ExitLabError as e:
        print(f"error[{CATEGORY.get(e.exit_code, 'error')}]: {e}", file=sys.stderr)
        return e.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
