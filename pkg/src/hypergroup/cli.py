"""Command-line entry point and the file-producing run helpers.

    hygma train --config run.ini [--seed N] [--out DIR] [--algo value|policy]
                [--ablation hgcn|gcn|single-group]
    hygma eval --config run.ini --checkpoint DIR/checkpoint.bin
    hygma ablate --config run.ini
    hygma complexity --config run.ini

Every subcommand writes CSV files into ``run.out_dir``.  Log verbosity on
stderr follows ``HYGMA_LOG`` (error, info or debug).
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import hypergraph as hgx
from . import spectral
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ABLATIONS, ConfigError, RunConfig, parse_config, to_text
from .learn import METRIC_FIELDS, Trainer, TrainingAborted, build_model, evaluate

log = logging.getLogger("hygma")

CHECKPOINT_NAME = "checkpoint.bin"
FINAL_WINDOW = 0.10
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    """Whole-file write through a temporary name, so no partial rows survive."""
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            values = [row[h] for h in header] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in values])
    os.replace(tmp, path)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints --------------------------------------------------------------------
def save_state(path: Path, trainer: Trainer, episodes_done: int | None = None) -> None:
    tensors = {name: p.data for name, p in trainer.model.named().items()}
    g = trainer.grouping
    tensors["grouping.labels"] = g.labels.astype(np.float64)
    tensors["grouping.cohesion"] = g.cohesion
    tensors["grouping.version"] = np.array(float(g.version))
    done = trainer.episode if episodes_done is None else episodes_done
    tensors["meta.episode"] = np.array(float(done))
    write_checkpoint(path, tensors)


def load_state(cfg: RunConfig, path: str | Path):
    """Model and grouping stored in a checkpoint; incompatible shapes are rejected."""
    tensors = read_checkpoint(path)
    for key in ("grouping.labels", "grouping.cohesion"):
        if key not in tensors:
            raise CheckpointError(f"{path}: missing {key}")
    labels = tensors["grouping.labels"].astype(int)
    if labels.shape != (cfg.env.n_predators,):
        raise CheckpointError(f"{path}: grouping covers {labels.size} agents, "
                              f"config has {cfg.env.n_predators}")
    model = build_model(cfg)
    try:
        model.load({k: v for k, v in tensors.items() if not k.startswith(("grouping.", "meta."))})
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    k = int(labels.max()) + 1
    grouping = spectral.Grouping(labels, k, tensors["grouping.cohesion"],
                                 version=int(tensors.get("grouping.version", np.array(0.0)).reshape(-1)[0]))
    return model, grouping


# -- subcommands --------------------------------------------------------------------
def run_train(cfg: RunConfig) -> int:
    """Train one configuration and write its artifacts; returns an exit status."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_text(cfg))
    trainer = Trainer(cfg)
    ckpt = out / CHECKPOINT_NAME
    status = 0
    tmp = out / "metrics.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        try:
            for row in trainer.run():
                writer.writerow([_fmt(row[h]) for h in METRIC_FIELDS])
                if (row["episode"] + 1) % cfg.learn.checkpoint_every == 0:
                    fh.flush()
                    save_state(ckpt, trainer, row["episode"] + 1)
                    log.info("episode %d steps %d reward %.2f k=%d", row["episode"], row["steps"],
                             row["reward"], row["k"])
        except TrainingAborted as exc:
            log.error("training aborted: %s", exc)
            status = 1
    os.replace(tmp, out / "metrics.csv")
    if status == 0:
        save_state(ckpt, trainer)
    _write_grouping_files(out, trainer)
    return status


def _write_grouping_files(out: Path, trainer: Trainer) -> None:
    co = trainer.tracker.cooccurrence
    n = co.shape[0]
    write_csv(out / "cooccurrence.csv", ["agent"] + [f"a{j}" for j in range(n)],
              [[i] + co[i].tolist() for i in range(n)])
    write_csv(out / "groups_timeline.csv", ["step", "version", "k", "eta", "labels"],
              [[step, g.version, g.k, g.eta_last, " ".join(map(str, g.labels.tolist()))]
               for step, g in trainer.tracker.timeline])


def run_eval(cfg: RunConfig, checkpoint: str | Path, episodes: int | None = None) -> dict:
    """Greedy rollouts from a checkpoint; writes eval.csv and returns the summary."""
    model, grouping = load_state(cfg, checkpoint)
    summary = evaluate(model, grouping, cfg.env, episodes or cfg.learn.eval_episodes, seed=cfg.seed)
    summary = {"checkpoint": Path(checkpoint).name, "seed": cfg.seed, **summary}
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", list(summary), [summary])
    return summary


def final_window_mean(values, fraction: float = FINAL_WINDOW) -> float:
    values = np.asarray(values, dtype=np.float64)
    count = max(1, int(round(len(values) * fraction)))
    return float(values[-count:].mean())


def convergence_episode(steps, epoch_len: int, sustain: int = 5, level: float = 0.9) -> int:
    """First episode from which the epoch-mean steps stay within ``level`` of the
    total improvement for ``sustain`` consecutive epochs; -1 if never improved."""
    steps = np.asarray(steps, dtype=np.float64)
    epochs = len(steps) // epoch_len
    if epochs < 1:
        return -1
    means = steps[: epochs * epoch_len].reshape(epochs, epoch_len).mean(axis=1)
    final = final_window_mean(means)
    gain = means[0] - final
    if gain <= 0:
        return -1
    good = means[0] - means >= level * gain
    for e in range(epochs - sustain + 1):
        if good[e:e + sustain].all():
            return e * epoch_len
    return -1


ABLATION_FIELDS = ["variant", "seed", "episodes", "final_window_mean_steps",
                   "final_window_mean_reward", "status", "convergence_episode_ext"]


def run_ablation_suite(cfg: RunConfig) -> list[dict]:
    """Train every variant with the shared seed; writes ablation.csv."""
    out = Path(cfg.out_dir)
    rows = []
    for variant in ABLATIONS:
        vcfg = copy.deepcopy(cfg)
        vcfg.ablation = variant
        vcfg.out_dir = str(out / variant)
        status = run_train(vcfg)
        metrics = read_csv(Path(vcfg.out_dir) / "metrics.csv")
        steps = [float(r["steps"]) for r in metrics]
        rewards = [float(r["reward"]) for r in metrics]
        rows.append({
            "variant": variant, "seed": cfg.seed, "episodes": len(metrics),
            "final_window_mean_steps": final_window_mean(steps) if steps else float("nan"),
            "final_window_mean_reward": final_window_mean(rewards) if rewards else float("nan"),
            "status": status,
            "convergence_episode_ext": convergence_episode(steps, max(1, len(steps) // 100)),
        })
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ABLATION_FIELDS, rows)
    return rows


COMPLEXITY_FIELDS = ["n", "k", "messages", "full", "ratio", "group_sizes"]


def complexity_report(cfg: RunConfig, sizes=(5, 10, 20)) -> list[dict]:
    """Message counts of balanced k-groupings against the fully connected n(n-1)."""
    rows = []
    for n in sorted(set(sizes) | {cfg.env.n_predators}):
        full = n * (n - 1)
        for k in range(1, 6):
            if k > n:
                continue
            g = hgx.balanced_grouping(n, k)
            msgs = hgx.message_count(hgx.build_hypergraph(g))
            rows.append({"n": n, "k": k, "messages": msgs, "full": full,
                         "ratio": msgs / full if full else 0.0,
                         "group_sizes": " ".join(map(str, np.bincount(g.labels).tolist()))})
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "complexity.csv", COMPLEXITY_FIELDS, rows)
    return rows


# -- argument handling ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hygma", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", help="train one configuration")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.add_argument("--algo", choices=("value", "policy"))
    train.add_argument("--ablation", choices=ABLATIONS)
    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--config", required=True)
    ev.add_argument("--checkpoint", required=True)
    for name, text in (("ablate", "train hgcn, gcn and single-group with shared seeds"),
                       ("complexity", "message counts of balanced groupings")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
    return parser


def _overrides(args) -> dict[str, str]:
    flags = {"seed": "run.seed", "out": "run.out_dir", "algo": "learn.mode",
             "ablation": "run.ablation"}
    return {key: str(getattr(args, attr)) for attr, key in flags.items()
            if getattr(args, attr, None) is not None}


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("HYGMA_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, _overrides(args))
        if args.command == "train":
            return run_train(cfg)
        if args.command == "eval":
            summary = run_eval(cfg, args.checkpoint)
            print(f"mean steps {summary['mean_steps']:.2f} +- {summary['std_steps']:.2f}, "
                  f"success {summary['success_rate']:.3f}")
            return 0
        if args.command == "ablate":
            rows = run_ablation_suite(cfg)
            for row in rows:
                print(f"{row['variant']:>12}  final-window steps {row['final_window_mean_steps']:.2f}")
            return 0 if all(r["status"] == 0 for r in rows) else 1
        complexity_report(cfg)
        return 0
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
