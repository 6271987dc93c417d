"""Bilevel meta-learning: per-task inner adaptation, the query-set meta-objective
and the outer update, for SAP, MAML and T-Net networks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .network import Network
from .tasks import Episode

ORDERS = ("first", "second")
OPTIMIZERS = ("sgd", "adam")


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 1
    inner_steps_eval: int | None = None
    meta_batch: int = 4
    order: str = "second"
    optimizer: str = "adam"
    learner: str = "sap"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.inner_steps_eval is None:
            self.inner_steps_eval = self.inner_steps
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.inner_steps_eval < self.inner_steps:
            raise ValueError("inner_steps_eval must be >= inner_steps")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.learner not in ("sap", "maml", "tnet"):
            raise ValueError(f"unknown learner {self.learner!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptResult:
    params: dict[str, Tensor]
    adapted_ids: list[str]
    support_loss_trace: list[float] = field(default_factory=list)
    query_loss: float | None = None
    query_metric: float | None = None

    @property
    def adapted_phi(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in self.adapted_ids}


def task_loss(net: Network, x, y, params: Mapping[str, Tensor], kind: str = "regression") -> Tensor:
    out = net.forward(x, params)
    if kind == "classification":
        return ad.softmax_cross_entropy(out, y)
    return ad.mse_loss(out, y)


def query_metric(net: Network, episode: Episode, params: Mapping[str, Tensor]) -> tuple[float, float]:
    """(query loss, metric) where the metric is MSE or accuracy."""
    with ad.no_record():
        out = net.forward(episode.x_query, params)
        if episode.kind == "classification":
            loss = ad.softmax_cross_entropy(out, episode.y_query).item()
            acc = float(np.mean(out.data.argmax(axis=1) == episode.y_query))
            return loss, acc
        loss = ad.mse_loss(out, episode.y_query).item()
        return loss, loss


def _adapt(net: Network, episode: Episode, cfg: MetaConfig, steps: int, track: bool,
           params: Mapping[str, Tensor] | None, ids: Sequence[str]) -> AdaptResult:
    """Plain gradient descent on the support loss over ``ids``.

    ``track`` keeps every step on the caller's graph: with second order the
    update chain stays differentiable, with first order each adapted value
    becomes a fresh leaf.  Without ``track`` every step uses its own
    throwaway graph and results are constants.
    """
    if len(episode.x_support) == 0:
        raise ValueError("empty support set")
    ids = list(ids)
    if params is None:
        params = net.tensors(requires_grad=track)
    p = dict(params)
    if not track:
        for k in ids:
            p[k] = Tensor(p[k].data, requires_grad=True)
    second = track and cfg.order == "second"
    alpha = cfg.inner_lr
    trace = []
    for step in range(steps):
        graph = None if track else Graph().__enter__()
        try:
            loss = task_loss(net, episode.x_support, episode.y_support, p, episode.kind)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError("non-finite support loss", step)
            trace.append(value)
            if not ids:
                continue
            grads = ad.gradient(loss, {k: p[k] for k in ids}, create_graph=second)
            for k in ids:
                if second:
                    p[k] = p[k] - grads[k] * alpha
                else:
                    p[k] = Tensor(p[k].data - alpha * grads[k].data, requires_grad=True)
        finally:
            if graph is not None:
                graph.__exit__()
    if not track:
        for k in ids:
            p[k] = Tensor(p[k].data)
    return AdaptResult(p, ids, trace)


def inner_adapt(net: Network, episode: Episode, cfg: MetaConfig, track_for_meta: bool = False,
                steps: int | None = None, params: Mapping[str, Tensor] | None = None) -> AdaptResult:
    """Adapt only the operation parameters of a SAP network on the support set."""
    if net.learner != "sap":
        raise ValueError(f"inner_adapt needs a SAP network, got {net.learner!r}")
    steps = cfg.inner_steps if steps is None else steps
    return _adapt(net, episode, cfg, steps, track_for_meta, params, net.adapt_ids())


def maml_adapt(net: Network, episode: Episode, cfg: MetaConfig, track_for_meta: bool = False,
               steps: int | None = None, params: Mapping[str, Tensor] | None = None) -> AdaptResult:
    """Adapt every base weight of a plain network."""
    if net.learner != "maml":
        raise ValueError(f"maml_adapt needs a MAML network, got {net.learner!r}")
    steps = cfg.inner_steps if steps is None else steps
    return _adapt(net, episode, cfg, steps, track_for_meta, params, net.adapt_ids())


def tnet_adapt(net: Network, episode: Episode, cfg: MetaConfig, track_for_meta: bool = False,
               steps: int | None = None, params: Mapping[str, Tensor] | None = None) -> AdaptResult:
    """Adapt base weights while warp layers stay frozen."""
    if net.learner != "tnet":
        raise ValueError(f"tnet_adapt needs a T-Net network, got {net.learner!r}")
    steps = cfg.inner_steps if steps is None else steps
    return _adapt(net, episode, cfg, steps, track_for_meta, params, net.adapt_ids())


ADAPTERS: dict[str, Callable[..., AdaptResult]] = {
    "sap": inner_adapt, "maml": maml_adapt, "tnet": tnet_adapt,
}


def adapt(net: Network, episode: Episode, cfg: MetaConfig, track_for_meta: bool = False,
          steps: int | None = None, params: Mapping[str, Tensor] | None = None) -> AdaptResult:
    return ADAPTERS[net.learner](net, episode, cfg, track_for_meta, steps, params)


def evaluate_episode(net: Network, episode: Episode, cfg: MetaConfig, steps: int | None = None) -> AdaptResult:
    """Adapt from the stored initialization and score the query set."""
    steps = cfg.inner_steps_eval if steps is None else steps
    res = adapt(net, episode, cfg, track_for_meta=False, steps=steps)
    res.query_loss, res.query_metric = query_metric(net, episode, res.params)
    return res


def meta_objective(net: Network, batch: Sequence[Episode], cfg: MetaConfig,
                   params: Mapping[str, Tensor]) -> Tensor:
    """Sum over the batch of query losses after tracked adaptation.

    Must run inside an active :class:`Graph` with ``params`` as leaves.  Under
    first order the adapted values are detached leaves, so differentiating
    this result with respect to ``params`` only sees direct dependencies.
    """
    if len(batch) < 1:
        raise ValueError("empty meta-batch")
    total = None
    for ep in batch:
        res = adapt(net, ep, cfg, track_for_meta=True, params=params)
        q = task_loss(net, ep.x_query, ep.y_query, res.params, ep.kind)
        total = q if total is None else total + q
    return total


def task_meta_gradient(net: Network, episode: Episode, cfg: MetaConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Query loss and its gradient with respect to every meta-parameter for one task."""
    with Graph():
        p0 = net.tensors(requires_grad=True)
        res = adapt(net, episode, cfg, track_for_meta=True, params=p0)
        q = task_loss(net, episode.x_query, episode.y_query, res.params, episode.kind)
        # first order: adapted values are leaves whose gradients stand in for the initial ones
        wrt = p0 if cfg.order == "second" else res.params
        grads = ad.gradient(q, wrt)
        return q.item(), {k: g.data for k, g in grads.items()}


def batch_meta_gradient(net: Network, batch: Sequence[Episode], cfg: MetaConfig,
                        mapper: Callable | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Summed per-task gradients, reduced in task order regardless of ``mapper``."""
    if mapper is None:
        results = [task_meta_gradient(net, ep, cfg) for ep in batch]
    else:
        results = mapper(net, batch, cfg)
    total_loss = 0.0
    total = {k: np.zeros_like(h.value) for k, h in net.params.items()}
    for loss, grads in results:
        total_loss += loss
        for k, g in grads.items():
            total[k] += g
    return total_loss, total


class SGD:
    def __init__(self, lr: float) -> None:
        self.lr = lr
        self.t = 0

    def step(self, net: Network, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            h = net.params[k]
            if h.trainable:
                h.value = h.value - self.lr * g

    def state(self) -> dict[str, np.ndarray]:
        return {"t": np.array([self.t], dtype=np.float64)}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, net: Network, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            h = net.params[k]
            if not h.trainable:
                continue
            m = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            h.value = h.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for k in sorted(self.m):
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v/")}


def make_optimizer(cfg: MetaConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.outer_lr)
    return Adam(cfg.outer_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def outer_step(net: Network, batch: Sequence[Episode], cfg: MetaConfig, optimizer,
               mapper: Callable | None = None) -> float:
    """One meta-update on the summed query loss; returns the mean query loss."""
    loss, grads = batch_meta_gradient(net, batch, cfg, mapper)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite query loss")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite meta-gradient for {k}")
    optimizer.step(net, grads)
    return loss / len(batch)


def predict_post_update_output(W: np.ndarray, O: np.ndarray, x: np.ndarray, alpha: float,
                               loss: Callable[[Tensor], Tensor]) -> np.ndarray:
    """Output of v = W O x after one gradient step on O, computed as
    v - alpha (W dL/dO) x: the frozen W warps the gradient step on O."""
    W, O, x = (np.asarray(a, dtype=np.float64) for a in (W, O, x))
    with Graph():
        o = Tensor(O, requires_grad=True)
        v = ad.matmul(ad.matmul(Tensor(W), o), Tensor(x))
        (g,) = ad.gradient(loss(v), [o])
    v0 = W @ O @ x
    return v0 - alpha * (W @ g.data) @ x


def post_update_output(W: np.ndarray, O: np.ndarray, x: np.ndarray, alpha: float,
                       loss: Callable[[Tensor], Tensor]) -> np.ndarray:
    """The same quantity computed by actually stepping O and re-running the layer."""
    W, O, x = (np.asarray(a, dtype=np.float64) for a in (W, O, x))
    with Graph():
        o = Tensor(O, requires_grad=True)
        v = ad.matmul(ad.matmul(Tensor(W), o), Tensor(x))
        (g,) = ad.gradient(loss(v), [o])
    return W @ (O - alpha * g.data) @ x


__all__ = [
    "MetaConfig", "AdaptResult", "DivergenceError", "inner_adapt", "maml_adapt", "tnet_adapt", "adapt",
    "evaluate_episode", "meta_objective", "task_meta_gradient", "batch_meta_gradient", "outer_step",
    "SGD", "Adam", "make_optimizer", "predict_post_update_output", "post_update_output", "task_loss",
    "query_metric",
]
