import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sapml import autodiff as ad
from sapml.autodiff import Graph, Tensor
from sapml.ops import (CONV_KINDS, FC_KINDS, InvalidRankError, OperationSet, UnsupportedKindError,
                       apply_op, apply_operation_set, build_op, fold_operation_set, parse_kind)

from gradcheck import check_primitive
from pools import conv_kinds_for, fc_kinds_for, perturb, random_fc_pool

RNG = np.random.default_rng


def test_scalar_scale_init_leaves_input():
    op = build_op("scalar_scale", 2)
    assert np.array_equal(apply_op(op, Tensor([[3.0, -1.0]])).data, [[3.0, -1.0]])


def test_svd_delta_is_zero_at_init():
    op = build_op("svd:5", 40, RNG(0))
    z = RNG(1).normal(size=(7, 40))
    assert np.array_equal(apply_op(op, Tensor(z)).data, z)
    assert op.u.shape == (40, 5) and op.s.shape == (5,) and op.v.shape == (40, 5)
    assert np.all(op.s.value == 0)
    # factor draws are small but not degenerate
    assert 0.005 < op.u.value.std() < 0.02


def test_matmul_init_is_identity():
    assert np.array_equal(build_op("matmul", 2).m.value, [[1.0, 0.0], [0.0, 1.0]])


def test_conv_init_is_center_delta():
    op = build_op("conv", 2, kernel=3)
    k = op.k.value
    assert k[0, 0, 1, 1] == 1 and k[1, 1, 1, 1] == 1 and k.sum() == 2


def test_mtl_scale_kernel_is_frozen():
    op = build_op("mtl_scale", 3)
    assert [h.group for h in op.params] == ["phi"]
    assert [h.group for h in op.frozen_params] == ["theta"]
    assert np.array_equal(op.phi.value, np.ones((3, 3)))


def test_scalar_shift_value():
    op = build_op("scalar_shift", 2)
    assert np.array_equal(apply_op(op, Tensor([[0.0, 1.0]]), {op.b.id: np.array([2.0])}).data, [[2.0, 3.0]])


def test_elem_scale_value():
    op = build_op("elem_scale", 2)
    assert np.array_equal(apply_op(op, Tensor([[1.0, 4.0]]), {op.s.id: np.array([2.0, 0.5])}).data, [[2.0, 2.0]])


def test_channel_shift_value():
    op = build_op("channel_shift", 2)
    z = np.zeros((1, 2, 2, 2))
    out = apply_op(op, Tensor(z), {op.b.id: np.array([1.0, -1.0])}).data
    assert np.array_equal(out[0, 0], np.ones((2, 2)))
    assert np.array_equal(out[0, 1], -np.ones((2, 2)))


def test_svd_applies_low_rank_product():
    rng = RNG(3)
    op = build_op("svd:2", 4, rng)
    vals = perturb(op.params, rng)
    z = rng.normal(size=(5, 4))
    a = np.eye(4) + vals[op.u.id] @ np.diag(vals[op.s.id]) @ vals[op.v.id].T
    assert np.allclose(apply_op(op, Tensor(z), vals).data, z @ a.T, atol=1e-12)


def test_mtl_scale_is_conv_with_scaled_kernel():
    rng = RNG(4)
    op = build_op("mtl_scale", 2)
    phi = rng.normal(size=(2, 2))
    kern = rng.normal(size=(2, 2, 3, 3))
    z = rng.normal(size=(1, 2, 5, 5))
    out = apply_op(op, Tensor(z), {op.phi.id: phi, op.k.id: kern}).data
    ref = ad.conv2d(Tensor(z), Tensor(kern * phi[:, :, None, None])).data
    assert np.array_equal(out, ref)


@pytest.mark.parametrize("spec,dim", [("svd:5", 5), ("svd:7", 5), ("svd:0", 5), ("svd_conv:3", 2)])
def test_invalid_rank(spec, dim):
    with pytest.raises(InvalidRankError):
        build_op(spec, dim, RNG(0), kernel=3)


@pytest.mark.parametrize("spec", ["svd", "bogus", "matmul:3"])
def test_parse_kind_rejects(spec):
    with pytest.raises((InvalidRankError, UnsupportedKindError)):
        parse_kind(spec)


def test_apply_rejects_wrong_dimension():
    with pytest.raises(ad.ShapeError):
        apply_op(build_op("vector_shift", 3), Tensor(np.ones((2, 4))))
    with pytest.raises(ad.ShapeError):
        apply_op(build_op("channel_scale", 3), Tensor(np.ones((1, 2, 4, 4))))


@pytest.mark.parametrize("spec", fc_kinds_for(6))
def test_fc_kinds_identity_at_init_and_shape(spec):
    rng = RNG(5)
    op = build_op(spec, 6, rng)
    z = rng.normal(size=(9, 6))
    assert np.array_equal(apply_op(op, Tensor(z)).data, z)
    vals = perturb(op.params, rng)
    assert apply_op(op, Tensor(z), vals).shape == z.shape


@pytest.mark.parametrize("spec", conv_kinds_for(3))
def test_conv_kinds_identity_at_init_and_shape(spec):
    rng = RNG(6)
    op = build_op(spec, 3, rng, kernel=3)
    z = rng.normal(size=(2, 3, 6, 6))
    assert np.array_equal(apply_op(op, Tensor(z)).data, z)
    vals = perturb(op.params + op.frozen_params, rng)
    assert apply_op(op, Tensor(z), vals).shape == z.shape


def _op_gradcheck(op, rng, z_shape) -> float:
    handles = op.params + op.frozen_params
    arrays = perturb(handles, rng)
    arrays["z"] = rng.normal(size=z_shape)
    return check_primitive(lambda t: op.apply(t["z"], t), arrays, rng)


@pytest.mark.parametrize("spec", conv_kinds_for(3))
def test_conv_ops_gradients(spec):
    rng = RNG(7)
    op = build_op(spec, 2, rng, kernel=3)
    assert _op_gradcheck(op, rng, (2, 2, 4, 4)) < 1e-6


@pytest.mark.parametrize("spec", fc_kinds_for(4))
def test_fc_ops_gradients(spec):
    rng = RNG(8)
    op = build_op(spec, 4, rng)
    assert _op_gradcheck(op, rng, (3, 4)) < 1e-6


def test_set_convex_combination_example():
    opset = OperationSet.build("O", ["scalar_scale", "vector_shift"], 2)
    vals = {
        opset.ops[0].s.id: np.array([2.0]),
        opset.ops[1].b.id: np.array([1.0, -1.0]),
        opset.logits.id: np.log([0.25, 0.75]),
    }
    out = apply_operation_set(opset, Tensor([[1.0, 2.0]]), vals).data
    assert np.allclose(out, [[2.0, 1.75]], atol=1e-15)


def test_set_all_identity_any_logits():
    rng = RNG(9)
    opset = OperationSet.build("O", fc_kinds_for(5), 5, rng)
    z = rng.normal(size=(4, 5))
    out = apply_operation_set(opset, Tensor(z), {opset.logits.id: rng.normal(size=len(opset.ops)) * 3})
    assert np.allclose(out.data, z, atol=1e-14)


def test_single_op_set_equals_op():
    rng = RNG(10)
    opset = OperationSet.build("O", ["elem_scale"], 3, rng)
    vals = perturb(opset.handles(), rng)
    z = rng.normal(size=(2, 3))
    assert np.allclose(apply_operation_set(opset, Tensor(z), vals).data,
                       apply_op(opset.ops[0], Tensor(z), vals).data, atol=1e-15)


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        OperationSet("O", [])


def test_mixed_set_rejected():
    with pytest.raises(UnsupportedKindError):
        OperationSet.build("O", ["identity", "conv_identity"], 2)


@pytest.mark.parametrize("n", [1, 3, 9])
def test_uniform_init(n):
    opset = OperationSet.build("O", ["identity"] * n, 2)
    assert np.all(opset.strengths() == 1.0 / n)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12))
def test_strength_simplex(logits):
    opset = OperationSet.build("O", ["identity"] * len(logits), 2)
    w = opset.strengths(np.array(logits))
    assert np.all((w >= 0) & (w <= 1))
    assert abs(w.sum() - 1.0) < 1e-12


def test_fold_all_identity():
    opset = OperationSet.build("O", ["identity", "identity"], 3)
    assert np.array_equal(fold_operation_set(opset), np.eye(4))


def test_fold_scalar_scale_with_identity():
    opset = OperationSet.build("O", ["scalar_scale", "identity"], 3)
    folded = fold_operation_set(opset, {opset.ops[0].s.id: np.array([3.0])})
    assert np.allclose(folded[:3, :3], 2.0 * np.eye(3), atol=1e-15)
    assert np.array_equal(folded[:3, 3], np.zeros(3))


def test_fold_rejects_conv():
    with pytest.raises(UnsupportedKindError):
        fold_operation_set(OperationSet.build("O", ["conv_identity"], 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_fold_matches_application(seed, d):
    rng = RNG(seed)
    opset = OperationSet.build("O", random_fc_pool(rng, d), d, rng)
    vals = perturb(opset.handles(), rng)
    folded = fold_operation_set(opset, vals)
    z = rng.normal(size=(100, d))
    direct = apply_operation_set(opset, Tensor(z), vals).data
    homog = np.hstack([z, np.ones((100, 1))]) @ folded.T
    assert np.max(np.abs(homog[:, :d] - direct)) < 1e-10
    assert np.allclose(homog[:, d], 1.0)


def test_all_kinds_constructible():
    for kind in FC_KINDS:
        spec = f"{kind}:2" if kind == "svd" else kind
        assert build_op(spec, 4, RNG(0)).spec == spec
    for kind in CONV_KINDS:
        spec = f"{kind}:1" if kind == "svd_conv" else kind
        assert build_op(spec, 2, RNG(0)).spec == spec


def test_svd_conv_kernel_delta_is_rank_limited():
    rng = RNG(11)
    op = build_op("svd_conv:1", 2, rng, kernel=3)
    vals = perturb(op.params, rng)
    with Graph():
        delta = op.kernel_delta({k: Tensor(v) for k, v in vals.items()}).data
    for i in range(2):
        for j in range(2):
            assert np.linalg.matrix_rank(delta[i, j], tol=1e-10) <= 1
