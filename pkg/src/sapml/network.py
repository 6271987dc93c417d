"""Network assembly for SAP, MAML and T-Net learners.

A network is a flat list of layers.  SAP interleaves operation sets with the
base affine layers (an operation set before every base layer plus one on the
output); T-Net places a frozen linear warp after every base layer; MAML is the
plain backbone.
"""

from __future__ import annotations

import copy
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ops import FC_KINDS, CONV_KINDS, InvalidRankError, OperationSet, ParamHandle, parse_kind

LEARNERS = ("sap", "maml", "tnet")
DEFAULT_SVD_RANKS = (5, 10, 15)
DEFAULT_CONV_SVD_RANKS = (1,)


def default_fc_pool(d: int, ranks: Sequence[int] = DEFAULT_SVD_RANKS) -> list[str]:
    """Every fully-connected kind; SVD ranks that are invalid for ``d`` are left out."""
    pool = ["identity", "matmul"]
    pool += [f"svd:{r}" for r in ranks if r < d]
    pool += ["elem_scale", "scalar_scale", "vector_shift", "scalar_shift"]
    return pool


def default_conv_pool(kernel: int = 3, ranks: Sequence[int] = DEFAULT_CONV_SVD_RANKS) -> list[str]:
    pool = ["conv_identity", "conv"]
    pool += [f"svd_conv:{r}" for r in ranks if r < kernel]
    pool += ["conv1x1", "mtl_scale", "channel_scale", "channel_shift", "scalar_shift_conv"]
    return pool


class Layer:
    def handles(self) -> list[ParamHandle]:
        return []

    def forward(self, z: Tensor, p: Mapping[str, Tensor]) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    """Affine base layer; the kernel is stored (in, out) so ``z @ W + b``."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 group: str = "theta", bias: bool = True) -> None:
        self.name, self.d_in, self.d_out = name, d_in, d_out
        bound = 1.0 / np.sqrt(d_in)
        self.w = ParamHandle(f"{name}.weight", rng.uniform(-bound, bound, (d_in, d_out)), group)
        self.b = ParamHandle(f"{name}.bias", rng.uniform(-bound, bound, d_out), group) if bias else None

    def handles(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def forward(self, z, p):
        if z.ndim != 2 or z.shape[1] != self.d_in:
            raise ad.ShapeError(f"{self.name}: expects (n, {self.d_in}), got {z.shape}")
        out = ad.matmul(z, p[self.w.id])
        return ad.add(out, p[self.b.id]) if self.b is not None else out


class Warp(Layer):
    """Bias-free linear projection initialized to the identity (T-Net)."""

    def __init__(self, name: str, dim: int, conv: bool = False) -> None:
        self.name, self.dim, self.conv = name, dim, conv
        self.m = ParamHandle(f"{name}.weight", np.eye(dim), "warp")

    def handles(self):
        return [self.m]

    def forward(self, z, p):
        if self.conv:
            return ad.conv2d(z, ad.reshape(p[self.m.id], (self.dim, self.dim, 1, 1)))
        return ad.matmul(z, p[self.m.id])


class Conv2d(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3) -> None:
        self.name, self.c_in, self.c_out = name, c_in, c_out
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.w = ParamHandle(f"{name}.weight", rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)), "theta")
        self.b = ParamHandle(f"{name}.bias", rng.uniform(-bound, bound, c_out), "theta")

    def handles(self):
        return [self.w, self.b]

    def forward(self, z, p):
        out = ad.conv2d(z, p[self.w.id])
        return ad.add(out, ad.reshape(p[self.b.id], (1, self.c_out, 1, 1)))


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int) -> None:
        self.name = name
        self.gamma = ParamHandle(f"{name}.gamma", np.ones(channels), "theta")
        self.beta = ParamHandle(f"{name}.beta", np.zeros(channels), "theta")

    def handles(self):
        return [self.gamma, self.beta]

    def forward(self, z, p):
        return ad.batch_norm(z, p[self.gamma.id], p[self.beta.id])


class OpSetLayer(Layer):
    def __init__(self, opset: OperationSet) -> None:
        self.opset = opset

    def handles(self):
        return self.opset.handles()

    def forward(self, z, p):
        return self.opset.apply(z, p)


class Relu(Layer):
    def forward(self, z, p):
        return ad.relu(z)


class MaxPool(Layer):
    def forward(self, z, p):
        return ad.maxpool2d(z)


class Flatten(Layer):
    def forward(self, z, p):
        return ad.flatten(z)


class Network:
    """Ordered layers plus a registry of their parameters.

    ``forward`` is functional: it takes a mapping from parameter id to Tensor
    so adapted (graph-tracked) values can be substituted for the stored ones.
    """

    def __init__(self, learner: str, layers: list[Layer], spec: dict | None = None) -> None:
        if learner not in LEARNERS:
            raise ValueError(f"unknown learner {learner!r}")
        self.learner = learner
        self.layers = layers
        self.spec = spec or {}
        self.params: dict[str, ParamHandle] = {}
        for layer in layers:
            for h in layer.handles():
                if h.id in self.params:
                    raise ValueError(f"duplicate parameter id {h.id}")
                self.params[h.id] = h

    @property
    def adapt_groups(self) -> tuple[str, ...]:
        return ("phi",) if self.learner == "sap" else ("theta",)

    def adapt_ids(self) -> list[str]:
        groups = self.adapt_groups
        return [k for k, h in self.params.items() if h.group in groups]

    def op_sets(self) -> list[OperationSet]:
        return [layer.opset for layer in self.layers if isinstance(layer, OpSetLayer)]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(h.value, requires_grad=requires_grad) for k, h in self.params.items()}

    def forward(self, x, p: Mapping[str, Tensor] | None = None) -> Tensor:
        if p is None:
            p = self.tensors()
        elif len(p) != len(self.params):
            full = self.tensors()
            full.update(p)
            p = full
        z = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            z = layer.forward(z, p)
        return z

    __call__ = forward

    def values(self) -> dict[str, np.ndarray]:
        return {k: h.value for k, h in self.params.items()}

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            h = self.params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != h.value.shape:
                raise ad.ShapeError(f"{k}: expected shape {h.value.shape}, got {v.shape}")
            h.value = v.copy()

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def strengths(self) -> dict[str, dict[str, float]]:
        """Softmax strengths per operation set, keyed by op kind spec."""
        return {s.name: dict(zip(s.specs, s.strengths().tolist())) for s in self.op_sets()}


def param_count(net: Network) -> int:
    return sum(h.size for h in net.params.values())


def partition(net: Network) -> tuple[list[ParamHandle], list[ParamHandle], list[ParamHandle]]:
    """Split parameters into (theta, phi, lam); T-Net warps count as theta."""
    theta = [h for h in net.params.values() if h.group in ("theta", "warp")]
    phi = [h for h in net.params.values() if h.group == "phi"]
    lam = [h for h in net.params.values() if h.group == "lam"]
    return theta, phi, lam


def _resolve_pools(pools, n_sets: int, defaults: list[list[str]]) -> list[list[str]]:
    if pools is None or pools == "default":
        return defaults
    if len(pools) != n_sets:
        raise ValueError(f"pool config lists {len(pools)} sets but the network has {n_sets} positions")
    return [defaults[i] if pool == "default" else list(pool) for i, pool in enumerate(pools)]


def _check_pool_kinds(pool: list[str], conv: bool, where: str) -> None:
    allowed = CONV_KINDS if conv else FC_KINDS
    for spec in pool:
        if parse_kind(spec)[0] not in allowed:
            kind = "convolutional" if conv else "fully-connected"
            raise ValueError(f"{where}: {spec!r} is not a {kind} operation")


def build_mlp(sizes: Sequence[int], learner: str = "sap", pools=None, rng=None, seed: int = 0,
              warps: Sequence[bool] | None = None) -> Network:
    """Fully-connected backbone ``sizes[0] -> ... -> sizes[-1]`` with ReLU between layers.

    For SAP, ``pools`` lists kind specs for each of the ``L + 1`` set positions
    (before each base layer, then on the output).  An empty list leaves a
    position without a set.  ``warps`` selects which base layers get a T-Net warp.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    sizes = list(sizes)
    n_layers = len(sizes) - 1
    if n_layers < 1:
        raise ValueError("need at least one layer")
    spec = {"kind": "mlp", "sizes": sizes, "learner": learner}
    if learner == "sap":
        set_dims = sizes[:-1] + [sizes[-1]]
        pools = _resolve_pools(pools, n_layers + 1, [default_fc_pool(d) for d in set_dims])
        spec["pools"] = pools
    if learner == "tnet":
        warps = [True] * n_layers if warps is None else list(warps)
        if len(warps) != n_layers:
            raise ValueError("warps must have one flag per base layer")
        spec["warps"] = warps

    # base weights first so their draws do not depend on the pool
    linears = [Linear(f"W{i + 1}", sizes[i], sizes[i + 1], rng) for i in range(n_layers)]
    layers: list[Layer] = []
    for i in range(n_layers):
        if learner == "sap" and pools[i]:
            _check_pool_kinds(pools[i], False, f"O{i + 1}")
            layers.append(OpSetLayer(OperationSet.build(f"O{i + 1}", pools[i], sizes[i], rng)))
        layers.append(linears[i])
        if learner == "tnet" and warps[i]:
            layers.append(Warp(f"T{i + 1}", sizes[i + 1]))
        if i < n_layers - 1:
            layers.append(Relu())
    if learner == "sap" and pools[n_layers]:
        _check_pool_kinds(pools[n_layers], False, f"O{n_layers + 1}")
        layers.append(OpSetLayer(OperationSet.build(f"O{n_layers + 1}", pools[n_layers], sizes[-1], rng)))
    return Network(learner, layers, spec)


def build_convnet(n_way: int, side: int = 8, channels: int = 8, blocks: int = 3, in_channels: int = 1,
                  learner: str = "sap", pools=None, rng=None, seed: int = 0, kernel: int = 3) -> Network:
    """Conv blocks (conv, maxpool, batch norm, relu), flatten, linear head.

    SAP set positions: one before every conv block (convolutional kinds), one
    before the head on the flattened features and one on the logits
    (fully-connected kinds).
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    spatial = side
    for _ in range(blocks):
        spatial //= 2
    if spatial < 1:
        raise ValueError(f"{blocks} pooling blocks do not fit a {side}x{side} input")
    feat = channels * spatial * spatial
    spec = {"kind": "conv", "n_way": n_way, "side": side, "channels": channels, "blocks": blocks,
            "in_channels": in_channels, "learner": learner, "kernel": kernel}
    if learner == "sap":
        defaults = [default_conv_pool(kernel) for _ in range(blocks)]
        defaults += [default_fc_pool(feat), default_fc_pool(n_way)]
        pools = _resolve_pools(pools, blocks + 2, defaults)
        spec["pools"] = pools

    convs = [Conv2d(f"W{b + 1}", in_channels if b == 0 else channels, channels, rng, kernel)
             for b in range(blocks)]
    head = Linear(f"W{blocks + 1}", feat, n_way, rng)
    layers: list[Layer] = []
    for b in range(blocks):
        c_in = in_channels if b == 0 else channels
        if learner == "sap" and pools[b]:
            _check_pool_kinds(pools[b], True, f"O{b + 1}")
            layers.append(OpSetLayer(OperationSet.build(f"O{b + 1}", pools[b], c_in, rng, kernel=kernel)))
        layers.append(convs[b])
        if learner == "tnet":
            layers.append(Warp(f"T{b + 1}", channels, conv=True))
        layers += [MaxPool(), BatchNorm(f"BN{b + 1}", channels), Relu()]
    layers.append(Flatten())
    if learner == "sap" and pools[blocks]:
        _check_pool_kinds(pools[blocks], False, f"O{blocks + 1}")
        layers.append(OpSetLayer(OperationSet.build(f"O{blocks + 1}", pools[blocks], feat, rng)))
    layers.append(head)
    if learner == "tnet":
        layers.append(Warp(f"T{blocks + 1}", n_way))
    if learner == "sap" and pools[blocks + 1]:
        _check_pool_kinds(pools[blocks + 1], False, f"O{blocks + 2}")
        layers.append(OpSetLayer(OperationSet.build(f"O{blocks + 2}", pools[blocks + 1], n_way, rng)))
    return Network(learner, layers, spec)


def build_from_spec(spec: dict, seed: int) -> Network:
    """Rebuild a network from the ``spec`` dict stored on every Network."""
    kind = spec.get("kind", "mlp")
    if kind == "mlp":
        return build_mlp(spec["sizes"], spec["learner"], spec.get("pools"), seed=seed,
                         warps=spec.get("warps"))
    if kind == "conv":
        return build_convnet(spec["n_way"], spec["side"], spec["channels"], spec["blocks"],
                             spec.get("in_channels", 1), spec["learner"], spec.get("pools"), seed=seed,
                             kernel=spec.get("kernel", 3))
    raise ValueError(f"unknown network kind {kind!r}")


__all__ = [
    "Network", "build_mlp", "build_convnet", "build_from_spec", "param_count", "partition",
    "default_fc_pool", "default_conv_pool", "InvalidRankError", "LEARNERS",
]
