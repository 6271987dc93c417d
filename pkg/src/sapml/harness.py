"""Experiment orchestration: meta-train with periodic validation and best-model
selection, meta-test, checkpoints, top-K pruning, strength reports and random
hyperparameter search."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .meta import DivergenceError, MetaConfig, evaluate_episode, make_optimizer, outer_step, task_meta_gradient
from .network import Network, build_convnet, build_mlp
from .ops import FC_KINDS, CONV_KINDS
from .tasks import (TEST, TRAIN, VALIDATION, Episode, FamilyRanges, TaskFamily, episode_rng, sample_family_task,
                    sample_sine_task, sample_synthetic_image_task)

TASKS = ("sine", "family", "image")
METRICS_HEADER = ("tasks_seen", "split", "metric", "mean", "ci95", "seconds")
CHECKPOINT_MAGIC = "SAPML-CHECKPOINT"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when meta-training hits a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None", rows: list) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint
        self.rows = rows


@dataclass
class RunConfig:
    task: str = "sine"
    learner: str = "sap"
    # fully-connected backbone
    sizes: list = field(default_factory=lambda: [1, 40, 40, 1])
    svd_ranks: list = field(default_factory=lambda: [5, 10, 15])
    # convolutional backbone (image task)
    n_way: int = 2
    side: int = 8
    channels: int = 8
    blocks: int = 2
    kernel: int = 3
    # per-position candidate lists, or "default"
    pools: object = "default"
    warps: object = None
    # task sampling
    k_shot: int = 5
    n_query: int = 50
    family: str = "none"
    frequency_range: list = field(default_factory=lambda: [0.5, 2.0])
    offset_range: list = field(default_factory=lambda: [-2.0, 2.0])
    noise: float = 0.1
    # meta-learning
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 1
    inner_steps_eval: int | None = None
    meta_batch: int = 4
    order: str = "second"
    optimizer: str = "adam"
    # protocol
    total_train_tasks: int = 70000
    validate_every: int = 2500
    val_tasks: int = 500
    test_tasks: int = 2000
    test_steps: list = field(default_factory=lambda: [1, 10])
    seed: int = 0
    workers: int = 1
    out: str | None = None

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        for name in ("k_shot", "n_query", "total_train_tasks", "validate_every", "val_tasks", "test_tasks",
                     "workers", "meta_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.validate_every > self.total_train_tasks:
            raise ValueError("validate_every cannot exceed total_train_tasks")
        if any(s < 0 for s in self.test_steps):
            raise ValueError("test_steps must be non-negative")
        TaskFamily.from_name(self.family)
        self.meta_config()

    def meta_config(self) -> MetaConfig:
        return MetaConfig(inner_lr=self.inner_lr, outer_lr=self.outer_lr, inner_steps=self.inner_steps,
                          inner_steps_eval=self.inner_steps_eval, meta_batch=self.meta_batch, order=self.order,
                          optimizer=self.optimizer, learner=self.learner)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    @property
    def higher_is_better(self) -> bool:
        return self.task == "image"

    @property
    def metric_name(self) -> str:
        return "accuracy" if self.task == "image" else "mse"


def build_network(cfg: RunConfig) -> Network:
    if cfg.task == "image":
        return build_convnet(cfg.n_way, cfg.side, cfg.channels, cfg.blocks, 1, cfg.learner, cfg.pools,
                             seed=cfg.seed, kernel=cfg.kernel)
    from .network import default_fc_pool

    pools = cfg.pools
    if cfg.learner == "sap" and pools == "default":
        dims = list(cfg.sizes[:-1]) + [cfg.sizes[-1]]
        pools = [default_fc_pool(d, cfg.svd_ranks) for d in dims]
    return build_mlp(cfg.sizes, cfg.learner, pools, seed=cfg.seed, warps=cfg.warps)


def sample_episode(cfg: RunConfig, stream: int, index: int) -> Episode:
    rng = episode_rng(cfg.seed, stream, index)
    if cfg.task == "sine":
        return sample_sine_task(rng, cfg.k_shot, cfg.n_query)
    if cfg.task == "family":
        ranges = FamilyRanges(frequency=tuple(cfg.frequency_range), offset=tuple(cfg.offset_range))
        return sample_family_task(TaskFamily.from_name(cfg.family), rng, cfg.k_shot, cfg.n_query, ranges)
    return sample_synthetic_image_task(rng, cfg.n_way, cfg.k_shot, cfg.side, cfg.n_query, cfg.noise)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    tasks_seen: int
    split: str
    metric: str
    mean: float
    ci95: float
    seconds: float
    # per-episode values behind an evaluation row; not serialized
    values: np.ndarray | None = field(default=None, repr=False, compare=False)

    def as_tuple(self) -> tuple:
        return (self.tasks_seen, self.split, self.metric, self.mean, self.ci95, self.seconds)

    def key(self) -> tuple:
        """Everything except wall time."""
        return (self.tasks_seen, self.split, self.metric, self.mean, self.ci95)


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 1.96 standard errors."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    return mean, float(1.96 * arr.std(ddof=1) / np.sqrt(arr.size))


def export_csv(rows: Iterable[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row.tasks_seen, row.split, row.metric, repr(row.mean), repr(row.ci95),
                             f"{row.seconds:.3f}"])


def read_csv(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(int(r[0]), r[1], r[2], float(r[3]), float(r[4]), float(r[5])) for r in reader]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    tasks_seen: int = 0
    best_score: float | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def network(self) -> Network:
        net = build_network(self.run_config)
        net.set_values(self.params)
        return net

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config,
            "tasks_seen": self.tasks_seen,
            "best_score": self.best_score,
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
            "optimizer": [[k, list(v.shape)] for k, v in self.optimizer.items()],
        }
        buf = io.BytesIO()
        buf.write(f"{CHECKPOINT_MAGIC} {self.version}\n".encode())
        buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arrays in (self.params, self.optimizer):
            for v in arrays.values():
                buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        first, _, rest = blob.partition(b"\n")
        magic, _, version = first.decode(errors="replace").partition(" ")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        if version != str(CHECKPOINT_VERSION):
            raise CheckpointVersionError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
        line, _, payload = rest.partition(b"\n")
        header = json.loads(line)
        offset = 0

        def take(spec):
            nonlocal offset
            out = {}
            for key, shape in spec:
                n = int(np.prod(shape, dtype=np.int64))
                out[key] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
                offset += 8 * n
            return out

        params = take(header["params"])
        optim = take(header["optimizer"])
        if offset != len(payload):
            raise ValueError("checkpoint payload size does not match its header")
        return cls(header["config"], params, optim, header["tasks_seen"], header["best_score"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def snapshot(cfg: RunConfig, net: Network, optimizer=None, tasks_seen: int = 0,
             best_score: float | None = None) -> Checkpoint:
    params = {k: v.copy() for k, v in net.values().items()}
    opt_state = {k: np.array(v, dtype=np.float64) for k, v in optimizer.state().items()} if optimizer else {}
    return Checkpoint(cfg.to_dict(), params, opt_state, tasks_seen, best_score)


# ---------------------------------------------------------------------------
# parallel helpers (results are always reduced in index order)


def _eval_chunk(args):
    config, params, stream, indices, steps = args
    cfg = RunConfig.from_dict(config)
    net = build_network(cfg)
    net.set_values(params)
    return [_eval_one(net, cfg, stream, i, steps) for i in indices]


def _eval_one(net: Network, cfg: RunConfig, stream: int, index: int, steps: int) -> float:
    ep = sample_episode(cfg, stream, index)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            res = evaluate_episode(net, ep, cfg.meta_config(), steps)
        return res.query_metric
    except DivergenceError:
        return 0.0 if cfg.higher_is_better else math.inf


def _grad_one(args):
    config, params, episode = args
    cfg = RunConfig.from_dict(config)
    net = build_network(cfg)
    net.set_values(params)
    return task_meta_gradient(net, episode, cfg.meta_config())


class Workers:
    """Optional process pool; ``workers=1`` runs everything inline."""

    def __init__(self, n: int) -> None:
        self.n = n
        self.pool = ProcessPoolExecutor(n) if n > 1 else None

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def evaluate(self, net: Network, cfg: RunConfig, stream: int, n_tasks: int, steps: int) -> list[float]:
        if self.pool is None:
            return [_eval_one(net, cfg, stream, i, steps) for i in range(n_tasks)]
        chunks = np.array_split(np.arange(n_tasks), self.n)
        jobs = [(cfg.to_dict(), net.values(), stream, c.tolist(), steps) for c in chunks if c.size]
        return [v for part in self.pool.map(_eval_chunk, jobs) for v in part]

    def gradient_mapper(self, cfg: RunConfig):
        if self.pool is None:
            return None

        def mapper(net, batch, mcfg):
            jobs = [(cfg.to_dict(), net.values(), ep) for ep in batch]
            return list(self.pool.map(_grad_one, jobs))

        return mapper


# ---------------------------------------------------------------------------
# evaluation


def _evaluate(net: Network, cfg: RunConfig, stream: int, n_tasks: int, steps: int, split: str,
              tasks_seen: int, workers: Workers | None = None) -> MetricsRow:
    start = time.perf_counter()
    own = workers is None
    workers = workers or Workers(cfg.workers)
    try:
        values = workers.evaluate(net, cfg, stream, n_tasks, steps)
    finally:
        if own:
            workers.close()
    mean, ci = summarize(values)
    return MetricsRow(tasks_seen, split, f"{cfg.metric_name}_T{steps}", mean, ci, time.perf_counter() - start,
                      np.asarray(values))


def meta_validate(ckpt: Checkpoint, n_tasks: int | None = None, steps: int | None = None,
                  workers: Workers | None = None) -> MetricsRow:
    cfg = ckpt.run_config
    steps = cfg.meta_config().inner_steps_eval if steps is None else steps
    return _evaluate(ckpt.network(), cfg, VALIDATION, n_tasks or cfg.val_tasks, steps, "val",
                     ckpt.tasks_seen, workers)


def meta_test(ckpt: Checkpoint, n_tasks: int | None = None, steps: int = 1,
              workers: Workers | None = None) -> MetricsRow:
    cfg = ckpt.run_config
    return _evaluate(ckpt.network(), cfg, TEST, n_tasks or cfg.test_tasks, steps, "test", ckpt.tasks_seen, workers)


def _better(score: float, best: float | None, higher: bool) -> bool:
    if best is None:
        return True
    return score > best if higher else score < best


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    rows: list[MetricsRow]


def meta_train(cfg: RunConfig, log=None) -> TrainResult:
    """Meta-train for ``cfg.total_train_tasks`` tasks, validating every
    ``cfg.validate_every`` tasks and keeping the best validated checkpoint."""
    net = build_network(cfg)
    mcfg = cfg.meta_config()
    opt = make_optimizer(mcfg)
    rows: list[MetricsRow] = []
    best: Checkpoint | None = None
    seen = 0
    window: list[float] = []
    start = time.perf_counter()
    with Workers(cfg.workers) as workers:
        mapper = workers.gradient_mapper(cfg)
        while seen < cfg.total_train_tasks:
            m = min(cfg.meta_batch, cfg.total_train_tasks - seen)
            batch = [sample_episode(cfg, TRAIN, seen + j) for j in range(m)]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    window.append(outer_step(net, batch, mcfg, opt, mapper))
            except DivergenceError as err:
                raise TrainingDiverged(f"diverged after {seen} tasks: {err}", best, rows) from err
            before, seen = seen, seen + m
            if seen // cfg.validate_every > before // cfg.validate_every or seen == cfg.total_train_tasks:
                mean, ci = summarize(window)
                rows.append(MetricsRow(seen, "train", "query_loss", mean, ci, time.perf_counter() - start))
                window = []
                ckpt = snapshot(cfg, net, opt, seen)
                row = meta_validate(ckpt, workers=workers)
                rows.append(row)
                if log:
                    log(f"tasks {seen}: val {row.metric} {row.mean:.4f} +- {row.ci95:.4f}")
                if _better(row.mean, best.best_score if best else None, cfg.higher_is_better):
                    ckpt.best_score = row.mean
                    best = ckpt
    last = snapshot(cfg, net, opt, seen, best.best_score if best else None)
    return TrainResult(best, last, rows)


# ---------------------------------------------------------------------------
# pruning, strengths, search


def resolved_pools(cfg: RunConfig) -> list[list[str]]:
    return build_network(cfg).spec["pools"]


def prune_topk(ckpt: Checkpoint, k: int, mode: str = "layerwise") -> tuple[RunConfig, Checkpoint]:
    """Keep the ``k`` strongest operations of every set (ties go to the lower index)
    and return a config plus a freshly initialized checkpoint for retraining."""
    if mode != "layerwise":
        raise ValueError(f"unsupported pruning mode {mode!r}")
    cfg = ckpt.run_config
    if cfg.learner != "sap":
        raise ValueError("pruning needs a SAP checkpoint")
    net = ckpt.network()
    pools = [list(p) for p in net.spec["pools"]]
    sets = {s.name: s for s in net.op_sets()}
    new_pools = []
    for i, pool in enumerate(pools):
        if not pool:
            new_pools.append([])
            continue
        opset = sets[f"O{i + 1}"]
        if not 1 <= k <= len(pool):
            raise ValueError(f"K={k} outside 1..{len(pool)} for set {opset.name}")
        w = opset.strengths()
        order = sorted(range(len(pool)), key=lambda j: (-w[j], j))
        keep = sorted(order[:k])
        new_pools.append([pool[j] for j in keep])
    new_cfg = cfg.replace(pools=new_pools)
    fresh = snapshot(new_cfg, build_network(new_cfg))
    return new_cfg, fresh


def _all_kind_specs(pools: Sequence[Sequence[str]]) -> list[str]:
    seen: list[str] = []
    for pool in pools:
        for spec in pool:
            if spec not in seen:
                seen.append(spec)
    order = {k: i for i, k in enumerate(FC_KINDS + CONV_KINDS)}
    return sorted(seen, key=lambda s: (order[s.partition(":")[0]], int(s.partition(":")[2] or 0)))


@dataclass
class StrengthRow:
    op_set: str
    op: str
    mean: float | None
    std: float | None
    n: int


def report_strengths(ckpts: Checkpoint | Sequence[Checkpoint]) -> list[StrengthRow]:
    """Softmax strength per (set, op kind), averaged over checkpoints; kinds
    absent from a set are reported with ``mean=None`` (NA)."""
    if isinstance(ckpts, Checkpoint):
        ckpts = [ckpts]
    tables = []
    pools = []
    for ck in ckpts:
        if ck.run_config.learner != "sap":
            raise ValueError("strength reports need SAP checkpoints")
        net = ck.network()
        tables.append(net.strengths())
        pools.extend(s.specs for s in net.op_sets())
    kinds = _all_kind_specs(pools)
    set_names = []
    for t in tables:
        set_names += [n for n in t if n not in set_names]
    rows = []
    for name in set_names:
        for kind in kinds:
            vals = [t[name][kind] for t in tables if name in t and kind in t[name]]
            if vals:
                arr = np.array(vals)
                rows.append(StrengthRow(name, kind, float(arr.mean()), float(arr.std(ddof=0)), len(vals)))
            else:
                rows.append(StrengthRow(name, kind, None, None, 0))
    return rows


def export_strengths(rows: Iterable[StrengthRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("set", "op", "mean", "std", "n"))
        for r in rows:
            na = r.mean is None
            writer.writerow((r.op_set, r.op, "NA" if na else repr(r.mean), "NA" if na else repr(r.std), r.n))


@dataclass
class SearchSpace:
    inner_lr: tuple[float, float] = (1e-3, 6e-1)
    train_steps: tuple[int, int] = (1, 10)
    max_test_steps: int = 15
    meta_batch: tuple[int, int] = (1, 10)

    def sample(self, rng: np.random.Generator) -> dict:
        lo, hi = np.log(self.inner_lr[0]), np.log(self.inner_lr[1])
        lr = float(np.clip(np.exp(rng.uniform(lo, hi)), *self.inner_lr))
        t = int(rng.integers(self.train_steps[0], self.train_steps[1] + 1))
        return {
            "inner_lr": lr,
            "inner_steps": t,
            "inner_steps_eval": int(rng.integers(t, self.max_test_steps + 1)),
            "meta_batch": int(rng.integers(self.meta_batch[0], self.meta_batch[1] + 1)),
        }


SEARCH_HEADER = ("rank", "trial", "status", "inner_lr", "inner_steps", "inner_steps_eval", "meta_batch",
                 "val_metric", "error")


def random_search(space: SearchSpace, base: RunConfig, trials: int, seed: int = 0,
                  out: str | Path | None = None) -> list[dict]:
    """Run ``trials`` shortened meta-training runs and rank them by best validation score."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng([seed, 7])
    report = []
    for i in range(trials):
        params = space.sample(rng)
        row = {"trial": i, **params, "status": "ok", "val_metric": None, "error": ""}
        try:
            result = meta_train(base.replace(**params))
            row["val_metric"] = result.best.best_score
        except (TrainingDiverged, ValueError, FloatingPointError) as err:
            row["status"], row["error"] = "failed", str(err)
        report.append(row)
    sign = -1.0 if base.higher_is_better else 1.0
    ok = sorted((r for r in report if r["status"] == "ok"), key=lambda r: (sign * r["val_metric"], r["trial"]))
    failed = [r for r in report if r["status"] != "ok"]
    ranked = ok + failed
    for rank, r in enumerate(ranked, 1):
        r["rank"] = rank
    if out is not None:
        with open(out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SEARCH_HEADER)
            writer.writeheader()
            for r in ranked:
                writer.writerow({k: r[k] for k in SEARCH_HEADER})
    return ranked


# ---------------------------------------------------------------------------
# run directories


def write_run(out: str | Path, cfg: RunConfig, result: TrainResult, test_rows: Sequence[MetricsRow]) -> Path:
    """Config snapshot, metrics.csv, strengths.csv and checkpoints/ under ``out``."""
    out = Path(out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    export_csv(list(result.rows) + list(test_rows), out / "metrics.csv")
    save_checkpoint(result.best, out / "checkpoints" / "best.ckpt")
    save_checkpoint(result.last, out / "checkpoints" / "last.ckpt")
    if cfg.learner == "sap":
        export_strengths(report_strengths(result.best), out / "strengths.csv")
    return out


def run_experiment(cfg: RunConfig, out: str | Path | None = None, log=None) -> tuple[TrainResult, list[MetricsRow]]:
    """Meta-train, then meta-test the best checkpoint at every ``test_steps`` setting."""
    result = meta_train(cfg, log)
    with Workers(cfg.workers) as workers:
        tests = [meta_test(result.best, steps=s, workers=workers) for s in cfg.test_steps]
    out = out if out is not None else cfg.out
    if out is not None:
        write_run(out, cfg, result, tests)
    return result, tests


__all__ = [
    "RunConfig", "MetricsRow", "Checkpoint", "CheckpointVersionError", "TrainingDiverged", "TrainResult",
    "SearchSpace", "StrengthRow", "build_network", "sample_episode", "summarize", "export_csv", "read_csv",
    "save_checkpoint", "load_checkpoint", "snapshot", "meta_train", "meta_validate", "meta_test", "prune_topk",
    "report_strengths", "export_strengths", "random_search", "write_run", "run_experiment", "resolved_pools",
]
