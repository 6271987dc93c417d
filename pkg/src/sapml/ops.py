"""Candidate operations and softmax-weighted operation sets.

Every operation maps its input to an output of identical shape and is built
so that it leaves the input unchanged at initialization.  Fully-connected
kinds act on row batches ``(n, d)``; convolutional kinds act on ``(n, C, H, W)``.

Kind specs are strings, optionally with a rank suffix: ``"svd:5"``,
``"svd_conv:1"``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FC_KINDS = ("identity", "matmul", "svd", "elem_scale", "scalar_scale", "vector_shift", "scalar_shift")
CONV_KINDS = ("conv_identity", "conv", "svd_conv", "conv1x1", "mtl_scale", "channel_scale",
              "channel_shift", "scalar_shift_conv")

SVD_INIT_STD = 0.01


class InvalidRankError(ValueError):
    pass


class UnsupportedKindError(ValueError):
    pass


@dataclass
class ParamHandle:
    """A named parameter array.

    ``group`` places it in the meta-parameter partition: ``theta`` (base
    weights), ``phi`` (operation parameters), ``lam`` (strength logits) or
    ``warp`` (T-Net projections).
    """

    id: str
    value: np.ndarray
    group: str
    trainable: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)


def parse_kind(spec: str) -> tuple[str, int | None]:
    name, _, rank = spec.partition(":")
    if name not in FC_KINDS and name not in CONV_KINDS:
        raise UnsupportedKindError(f"unknown operation kind {spec!r}")
    if name in ("svd", "svd_conv"):
        if not rank:
            raise InvalidRankError(f"{name} needs a rank, e.g. '{name}:5'")
        return name, int(rank)
    if rank:
        raise UnsupportedKindError(f"{name} takes no rank suffix")
    return name, None


def _identity_kernel(c: int, k: int) -> np.ndarray:
    kern = np.zeros((c, c, k, k))
    kern[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    return kern


class CandidateOp:
    """Base class; subclasses set ``kind`` and implement ``apply``."""

    kind = "identity"
    conv = False

    def __init__(self, prefix: str, dim: int, rng: np.random.Generator | None = None,
                 rank: int | None = None, kernel: int = 3) -> None:
        self.prefix = prefix
        self.dim = dim
        self.rank = rank
        self.kernel = kernel
        self.params: list[ParamHandle] = []
        self.frozen_params: list[ParamHandle] = []
        self._build(rng)

    @property
    def spec(self) -> str:
        return f"{self.kind}:{self.rank}" if self.rank is not None else self.kind

    def _param(self, name: str, value: np.ndarray, group: str = "phi") -> ParamHandle:
        h = ParamHandle(f"{self.prefix}.{name}", np.asarray(value, dtype=np.float64), group)
        (self.params if group == "phi" else self.frozen_params).append(h)
        return h

    def _build(self, rng) -> None:
        pass

    def _check(self, z: Tensor) -> None:
        if self.conv:
            ok = z.ndim == 4 and z.shape[1] == self.dim
        else:
            ok = z.ndim == 2 and z.shape[1] == self.dim
        if not ok:
            raise ad.ShapeError(f"{self.kind}: expects dimension {self.dim}, got input {z.shape}")

    def apply(self, z: Tensor, p: Mapping[str, Tensor]) -> Tensor:
        self._check(z)
        return z

    def affine(self, values: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """The op as ``z -> A z + c`` on column vectors (fully-connected kinds)."""
        if self.conv:
            raise UnsupportedKindError(f"{self.kind} has no fully-connected affine form")
        return np.eye(self.dim), np.zeros(self.dim)

    def n_params(self) -> int:
        return sum(h.size for h in self.params)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.prefix!r}, dim={self.dim})"


class Identity(CandidateOp):
    kind = "identity"


class MatMul(CandidateOp):
    kind = "matmul"

    def _build(self, rng):
        self.m = self._param("M", np.eye(self.dim))

    def apply(self, z, p):
        self._check(z)
        return ad.matmul(z, p[self.m.id], tb=True)

    def affine(self, values):
        return values[self.m.id], np.zeros(self.dim)


class SvdMatMul(CandidateOp):
    """Residual low-rank map ``z + U diag(s) V^T z`` with ``s = 0`` at init."""

    kind = "svd"

    def _build(self, rng):
        if self.rank is None or not 1 <= self.rank < self.dim:
            raise InvalidRankError(f"svd rank {self.rank} must satisfy 1 <= rank < {self.dim}")
        if rng is None:
            raise ValueError("svd op needs a generator for its factor init")
        self.u = self._param("U", rng.normal(0.0, SVD_INIT_STD, (self.dim, self.rank)))
        self.s = self._param("S", np.zeros(self.rank))
        self.v = self._param("V", rng.normal(0.0, SVD_INIT_STD, (self.dim, self.rank)))

    def apply(self, z, p):
        self._check(z)
        low = ad.mul(ad.matmul(z, p[self.v.id]), p[self.s.id])
        return ad.add(z, ad.matmul(low, p[self.u.id], tb=True))

    def affine(self, values):
        u, s, v = values[self.u.id], values[self.s.id], values[self.v.id]
        return np.eye(self.dim) + (u * s) @ v.T, np.zeros(self.dim)


class ElemScale(CandidateOp):
    kind = "elem_scale"

    def _build(self, rng):
        self.s = self._param("s", np.ones(self.dim))

    def apply(self, z, p):
        self._check(z)
        return ad.mul(z, p[self.s.id])

    def affine(self, values):
        return np.diag(values[self.s.id]), np.zeros(self.dim)


class ScalarScale(CandidateOp):
    kind = "scalar_scale"

    def _build(self, rng):
        self.s = self._param("s", np.ones(1))

    def apply(self, z, p):
        self._check(z)
        return ad.mul(z, p[self.s.id])

    def affine(self, values):
        return values[self.s.id][0] * np.eye(self.dim), np.zeros(self.dim)


class VectorShift(CandidateOp):
    kind = "vector_shift"

    def _build(self, rng):
        self.b = self._param("b", np.zeros(self.dim))

    def apply(self, z, p):
        self._check(z)
        return ad.add(z, p[self.b.id])

    def affine(self, values):
        return np.eye(self.dim), values[self.b.id].copy()


class ScalarShift(CandidateOp):
    kind = "scalar_shift"

    def _build(self, rng):
        self.b = self._param("b", np.zeros(1))

    def apply(self, z, p):
        self._check(z)
        return ad.add(z, p[self.b.id])

    def affine(self, values):
        return np.eye(self.dim), np.full(self.dim, values[self.b.id][0])


class ConvIdentity(CandidateOp):
    kind = "conv_identity"
    conv = True


class Conv(CandidateOp):
    kind = "conv"
    conv = True

    def _build(self, rng):
        self.k = self._param("K", _identity_kernel(self.dim, self.kernel))

    def apply(self, z, p):
        self._check(z)
        return ad.conv2d(z, p[self.k.id])


class SvdConv(CandidateOp):
    """Residual convolution whose kernel for every channel pair is a rank-v product."""

    kind = "svd_conv"
    conv = True

    def _build(self, rng):
        c, k, v = self.dim, self.kernel, self.rank
        if v is None or not 1 <= v < k:
            raise InvalidRankError(f"svd_conv rank {v} must satisfy 1 <= rank < kernel size {k}")
        if rng is None:
            raise ValueError("svd_conv op needs a generator for its factor init")
        self.u = self._param("U", rng.normal(0.0, SVD_INIT_STD, (c, c, k, v)))
        self.s = self._param("S", np.zeros((c, c, v)))
        self.v = self._param("V", rng.normal(0.0, SVD_INIT_STD, (c, c, k, v)))

    def kernel_delta(self, p) -> Tensor:
        c, k, v = self.dim, self.kernel, self.rank
        us = ad.mul(p[self.u.id], ad.reshape(p[self.s.id], (c, c, 1, v)))
        outer = ad.mul(ad.reshape(us, (c, c, k, 1, v)), ad.reshape(p[self.v.id], (c, c, 1, k, v)))
        return ad.tsum(outer, axis=-1)

    def apply(self, z, p):
        self._check(z)
        return ad.add(z, ad.conv2d(z, self.kernel_delta(p)))


class Conv1x1(CandidateOp):
    kind = "conv1x1"
    conv = True

    def _build(self, rng):
        self.m = self._param("M", np.eye(self.dim))

    def apply(self, z, p):
        self._check(z)
        return ad.conv2d(z, ad.reshape(p[self.m.id], (self.dim, self.dim, 1, 1)))


class MtlScale(CandidateOp):
    """Convolution with ``Phi * K``: ``Phi`` (C x C) adapts, the kernel ``K`` is meta-learned only."""

    kind = "mtl_scale"
    conv = True

    def _build(self, rng):
        self.phi = self._param("Phi", np.ones((self.dim, self.dim)))
        self.k = self._param("K", _identity_kernel(self.dim, self.kernel), group="theta")

    def apply(self, z, p):
        self._check(z)
        c = self.dim
        return ad.conv2d(z, ad.mul(p[self.k.id], ad.reshape(p[self.phi.id], (c, c, 1, 1))))


class ChannelScale(CandidateOp):
    kind = "channel_scale"
    conv = True

    def _build(self, rng):
        self.s = self._param("s", np.ones(self.dim))

    def apply(self, z, p):
        self._check(z)
        return ad.mul(z, ad.reshape(p[self.s.id], (1, self.dim, 1, 1)))


class ChannelShift(CandidateOp):
    kind = "channel_shift"
    conv = True

    def _build(self, rng):
        self.b = self._param("b", np.zeros(self.dim))

    def apply(self, z, p):
        self._check(z)
        return ad.add(z, ad.reshape(p[self.b.id], (1, self.dim, 1, 1)))


class ScalarShiftConv(CandidateOp):
    kind = "scalar_shift_conv"
    conv = True

    def _build(self, rng):
        self.b = self._param("b", np.zeros(1))

    def apply(self, z, p):
        self._check(z)
        return ad.add(z, ad.reshape(p[self.b.id], (1, 1, 1, 1)))


OP_CLASSES: dict[str, type[CandidateOp]] = {
    cls.kind: cls
    for cls in (Identity, MatMul, SvdMatMul, ElemScale, ScalarScale, VectorShift, ScalarShift,
                ConvIdentity, Conv, SvdConv, Conv1x1, MtlScale, ChannelScale, ChannelShift,
                ScalarShiftConv)
}


def build_op(spec: str, dim: int, rng: np.random.Generator | None = None, prefix: str = "op",
             kernel: int = 3) -> CandidateOp:
    """Instantiate a candidate operation from its kind spec.

    ``dim`` is the feature dimension ``d`` for fully-connected kinds and the
    channel count ``C`` for convolutional kinds.
    """
    name, rank = parse_kind(spec)
    return OP_CLASSES[name](prefix, dim, rng, rank=rank, kernel=kernel)


def apply_op(op: CandidateOp, z: Tensor, values: Mapping[str, np.ndarray | Tensor] | None = None) -> Tensor:
    """Apply ``op`` using its stored values unless ``values`` overrides them."""
    return op.apply(z, _tensor_view(op.params + op.frozen_params, values))


def _tensor_view(handles, values) -> dict[str, Tensor]:
    out = {}
    for h in handles:
        v = h.value if values is None or h.id not in values else values[h.id]
        out[h.id] = v if isinstance(v, Tensor) else Tensor(v)
    return out


class OperationSet:
    """A layer's candidate pool combined with softmax strengths of its logits."""

    def __init__(self, name: str, ops: list[CandidateOp]) -> None:
        if not ops:
            raise ValueError(f"operation set {name} needs at least one op")
        self.name = name
        self.ops = ops
        self.conv = ops[0].conv
        if any(op.conv != self.conv for op in ops):
            raise UnsupportedKindError(f"{name}: cannot mix convolutional and fully-connected ops")
        self.dim = ops[0].dim
        self.logits = ParamHandle(f"{name}.logits", np.zeros(len(ops)), "lam")

    @classmethod
    def build(cls, name: str, specs: list[str], dim: int, rng=None, kernel: int = 3) -> "OperationSet":
        ops = [build_op(s, dim, rng, prefix=f"{name}.{i}.{parse_kind(s)[0]}", kernel=kernel)
               for i, s in enumerate(specs)]
        return cls(name, ops)

    @property
    def specs(self) -> list[str]:
        return [op.spec for op in self.ops]

    def handles(self) -> list[ParamHandle]:
        out = []
        for op in self.ops:
            out.extend(op.params)
            out.extend(op.frozen_params)
        out.append(self.logits)
        return out

    def strengths(self, logits: np.ndarray | None = None) -> np.ndarray:
        lg = self.logits.value if logits is None else np.asarray(logits)
        e = np.exp(lg - lg.max())
        return e / e.sum()

    def apply(self, z: Tensor, p: Mapping[str, Tensor]) -> Tensor:
        w = ad.softmax(p[self.logits.id])
        outs = ad.stack([op.apply(z, p) for op in self.ops])
        w = ad.reshape(w, (len(self.ops),) + (1,) * z.ndim)
        return ad.tsum(ad.mul(outs, w), axis=0)


def apply_operation_set(opset: OperationSet, z: Tensor, values=None) -> Tensor:
    return opset.apply(z, _tensor_view(opset.handles(), values))


def fold_operation_set(opset: OperationSet, values: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Collapse a fully-connected set into one homogeneous (d+1)x(d+1) matrix.

    ``folded @ [z; 1] == [apply_operation_set(opset, z); 1]`` for column vectors z.
    """
    if opset.conv:
        raise UnsupportedKindError(f"{opset.name}: convolutional sets cannot be folded")
    vals = {h.id: h.value for h in opset.handles()}
    if values is not None:
        vals.update({k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in values.items()})
    d = opset.dim
    w = opset.strengths(vals[opset.logits.id])
    folded = np.zeros((d + 1, d + 1))
    for wi, op in zip(w, opset.ops):
        a, c = op.affine(vals)
        folded[:d, :d] += wi * a
        folded[:d, d] += wi * c
    folded[d, d] = 1.0
    return folded
