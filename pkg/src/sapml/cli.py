"""Command-line entry point: ``sapml <subcommand> --config C --seed S --out O``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import harness as H
from .tasks import STREAMS, dump_episodes


def _load_config(args) -> H.RunConfig:
    cfg = H.RunConfig.load(args.config) if args.config else H.RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "workers", None):
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.run:
        return Path(args.run) / "checkpoints" / "best.ckpt"
    raise SystemExit("error: pass --checkpoint or --run")


def _print_rows(rows) -> None:
    writer = csv.writer(sys.stdout)
    writer.writerow(H.METRICS_HEADER)
    for r in rows:
        writer.writerow([r.tasks_seen, r.split, r.metric, repr(r.mean), repr(r.ci95), f"{r.seconds:.3f}"])


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.out
    if out is None:
        raise SystemExit("error: train needs --out")
    _, tests = H.run_experiment(cfg, out, log=lambda s: print(s, file=sys.stderr))
    _print_rows(tests)
    return 0


def cmd_test(args) -> int:
    ckpt = H.load_checkpoint(_checkpoint_path(args))
    cfg = ckpt.run_config
    if args.seed is not None and args.seed != cfg.seed:
        # a different seed draws a fresh test stream for the same trained initialization
        ckpt.config = cfg.replace(seed=args.seed).to_dict()
    steps = args.steps if args.steps else cfg.test_steps
    with H.Workers(args.workers or cfg.workers) as workers:
        rows = [H.meta_test(ckpt, args.tasks, s, workers) for s in steps]
    if args.out:
        H.export_csv(rows, args.out)
    _print_rows(rows)
    return 0


def cmd_prune(args) -> int:
    ckpt = H.load_checkpoint(_checkpoint_path(args))
    new_cfg, fresh = H.prune_topk(ckpt, args.k)
    if args.seed is not None:
        new_cfg = new_cfg.replace(seed=args.seed)
    if args.out is None:
        raise SystemExit("error: prune needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    new_cfg.save(out / "pruned_config.json")
    print(f"pruned config written to {out / 'pruned_config.json'}")
    if args.retrain:
        _, tests = H.run_experiment(new_cfg, out / "retrained", log=lambda s: print(s, file=sys.stderr))
        _print_rows(tests)
    return 0


def cmd_strengths(args) -> int:
    paths = args.checkpoint_list or [str(_checkpoint_path(args))]
    rows = H.report_strengths([H.load_checkpoint(p) for p in paths])
    if args.out:
        H.export_strengths(rows, args.out)
    writer = csv.writer(sys.stdout)
    writer.writerow(("set", "op", "mean", "std", "n"))
    for r in rows:
        writer.writerow((r.op_set, r.op, "NA" if r.mean is None else f"{r.mean:.4f}",
                         "NA" if r.std is None else f"{r.std:.4f}", r.n))
    return 0


def cmd_search(args) -> int:
    cfg = _load_config(args)
    ranked = H.random_search(H.SearchSpace(), cfg, args.trials, cfg.seed, args.out)
    for r in ranked:
        print(r["rank"], r["status"], r["inner_lr"], r["inner_steps"], r["inner_steps_eval"], r["meta_batch"],
              r["val_metric"])
    return 0


def cmd_gen_tasks(args) -> int:
    cfg = _load_config(args)
    if args.out is None:
        raise SystemExit("error: gen-tasks needs --out")
    stream = STREAMS[args.split]
    n = dump_episodes((H.sample_episode(cfg, stream, i) for i in range(args.count)), args.out)
    print(f"wrote {n} episodes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sapml", description="Subspace adaptation prior experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output path")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "meta-train, validate and test; writes a run directory")
    p.add_argument("--workers", type=int)
    p = add("test", cmd_test, "meta-test a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--run", help="run directory (uses checkpoints/best.ckpt)")
    p.add_argument("--steps", type=int, nargs="+")
    p.add_argument("--tasks", type=int)
    p.add_argument("--workers", type=int)
    p = add("prune", cmd_prune, "top-K layer-wise pruning; emits a config for retraining")
    p.add_argument("--checkpoint")
    p.add_argument("--run")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--retrain", action="store_true")
    p = add("strengths", cmd_strengths, "report operation strengths")
    p.add_argument("--checkpoint")
    p.add_argument("--run")
    p.add_argument("checkpoint_list", nargs="*", help="several checkpoints to aggregate")
    p = add("search", cmd_search, "random hyperparameter search")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--workers", type=int)
    p = add("gen-tasks", cmd_gen_tasks, "dump sampled episodes as line-delimited JSON")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--split", choices=sorted(STREAMS), default="train")
    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
