import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branch_refs import ecb_branches, run_branches, run_conv
from esrkit.blocks import GraphBuilder, build_efdn, build_fmen, build_imdn, build_rlfn
from esrkit.executor import forward
from esrkit.graph import INPUT, ArchSpec, NodeSpec, validate
from esrkit.profiler import count_convs, count_flops
from esrkit.reparam import (
    Branch,
    ReparamError,
    collapse_arch,
    fold_bn,
    merge_identity,
    merge_parallel,
    merge_seq_1x1_kxk,
    prune_channels,
)
from esrkit.tensor import BnParams, ShapeError, batchnorm_inference
from esrkit.weights import init_weights


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape).astype(np.float32)


# merge_identity


def test_identity_from_zero_kernel():
    w, b = merge_identity(np.zeros((2, 2, 3, 3)), np.zeros(2))
    x = rand(np.random.default_rng(0), 1, 2, 6, 6)
    np.testing.assert_array_equal(run_conv(x, w, b), x)


@pytest.mark.parametrize("seed", range(5))
def test_identity_adds_input(seed):
    rng = np.random.default_rng(seed)
    w0, b0 = rand(rng, 4, 4, 3, 3), rand(rng, 4)
    w, b = merge_identity(w0, b0)
    np.testing.assert_array_equal(b, b0)
    x = rand(rng, 2, 4, 8, 8)
    assert np.max(np.abs(run_conv(x, w, b) - (run_conv(x, w0, b0) + x))) <= 1e-6


def test_identity_rejects_non_square():
    with pytest.raises(ShapeError):
        merge_identity(np.zeros((4, 3, 3, 3)))
    with pytest.raises(ShapeError):
        merge_identity(np.zeros((2, 2, 2, 2)))


# fold_bn


def bn(gamma, beta, mean, var, eps=0.0):
    return BnParams(*(np.asarray(v, np.float64) for v in (gamma, beta, mean, var)), epsilon=eps)


def test_fold_bn_identity_stats():
    w = np.random.default_rng(0).random((3, 2, 3, 3))
    b = np.arange(3.0)
    w2, b2 = fold_bn(w, b, bn([1] * 3, [0] * 3, [0] * 3, [1] * 3))
    np.testing.assert_allclose(w2, w, rtol=1e-7)
    np.testing.assert_allclose(b2, b)


def test_fold_bn_formula_case():
    w = np.random.default_rng(1).random((2, 2, 3, 3))
    w2, b2 = fold_bn(w, None, bn([2, 2], [1, 1], [0, 0], [1, 1]))
    np.testing.assert_allclose(w2, 2 * w, rtol=1e-6)
    np.testing.assert_array_equal(b2, [1, 1])


@pytest.mark.parametrize("seed", range(5))
def test_fold_bn_forward_equivalence(seed):
    rng = np.random.default_rng(seed)
    w, b = rand(rng, 5, 3, 3, 3), rand(rng, 5)
    p = bn(rng.uniform(0.5, 2, 5), rng.normal(size=5), rng.normal(size=5), rng.uniform(0.5, 2, 5), 1e-5)
    x = rand(rng, 2, 3, 8, 8)
    ref = batchnorm_inference(run_conv(x, w, b), p)
    w2, b2 = fold_bn(w, b, p)
    assert np.max(np.abs(run_conv(x, w2, b2) - ref)) <= 1e-5


def test_fold_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        fold_bn(np.zeros((3, 2, 1, 1)), None, bn([1, 1], [0, 0], [0, 0], [1, 1]))


# merge_seq_1x1_kxk


def test_seq_identity_first_stage():
    rng = np.random.default_rng(2)
    w3, b3 = rand(rng, 4, 4, 3, 3), rand(rng, 4)
    w, b = merge_seq_1x1_kxk(np.eye(4)[:, :, None, None], np.zeros(4), w3, b3)
    np.testing.assert_array_equal(w, w3)
    np.testing.assert_array_equal(b, b3)


@pytest.mark.parametrize("seed", range(5))
def test_seq_forward_with_bias_padding(seed):
    rng = np.random.default_rng(seed)
    w1, b1, w3, b3 = rand(rng, 8, 4, 1, 1), rand(rng, 8), rand(rng, 4, 8, 3, 3), rand(rng, 4)
    x = rand(rng, 1, 4, 8, 8)
    ref = run_conv(run_conv(x, w1, b1), w3, b3, pad_value=b1)
    w, b = merge_seq_1x1_kxk(w1, b1, w3, b3)
    assert np.max(np.abs(run_conv(x, w, b) - ref)) <= 1e-5


def test_seq_bias_only():
    rng = np.random.default_rng(3)
    _, b = merge_seq_1x1_kxk(rand(rng, 3, 2, 1, 1), rand(rng, 3), np.zeros((2, 3, 3, 3)), np.array([0.5, -1.0]))
    np.testing.assert_array_equal(b, [0.5, -1.0])


def test_seq_inner_mismatch():
    with pytest.raises(ShapeError, match="inner channel"):
        merge_seq_1x1_kxk(np.zeros((3, 2, 1, 1)), None, np.zeros((2, 4, 3, 3)), None)


# merge_parallel


def test_parallel_conv_plus_identity():
    rng = np.random.default_rng(4)
    w0 = rand(rng, 3, 3, 3, 3)
    w, _ = merge_parallel([Branch.conv(w0), Branch.identity(3)])
    expected, _ = merge_identity(w0)
    np.testing.assert_array_equal(w, expected)


@pytest.mark.parametrize("seed", range(5))
def test_parallel_full_ecb_set(seed):
    rng = np.random.default_rng(seed)
    branches = ecb_branches(rng, 6)
    x = rand(rng, 2, 6, 8, 8)
    w, b = merge_parallel(branches)
    assert np.max(np.abs(run_conv(x, w, b) - run_branches(branches, x))) <= 1e-4


def test_parallel_single_branch_unchanged():
    rng = np.random.default_rng(5)
    w0, b0 = rand(rng, 2, 3, 3, 3), rand(rng, 2)
    w, b = merge_parallel([Branch.conv(w0, b0)])
    np.testing.assert_array_equal(w, w0)
    np.testing.assert_array_equal(b, b0)


def test_parallel_rejects_incompatible_branch_by_index():
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeError, match="branch 2"):
        merge_parallel([Branch.conv(rand(rng, 3, 3, 3, 3)), Branch.identity(3), Branch.identity(4)])
    with pytest.raises(ShapeError, match="branch 1"):
        merge_parallel([Branch.identity(3), Branch.conv(rand(rng, 3, 3, 5, 5))])
    with pytest.raises(ValueError):
        merge_parallel([])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), perm_seed=st.integers(0, 2**31))
def test_parallel_order_invariant(seed, perm_seed):
    branches = ecb_branches(np.random.default_rng(seed), 3)
    order = np.random.default_rng(perm_seed).permutation(len(branches))
    w1, b1 = merge_parallel(branches)
    w2, b2 = merge_parallel([branches[i] for i in order])
    assert w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()


# prune_channels


def prune_arch():
    b = GraphBuilder(3, 1)
    c1 = b.conv("c1", INPUT, 8, 3)
    a = b.act("a1", c1, "leaky_relu", slope=0.1)
    c2 = b.conv("c2", a, 5, 3)
    c3 = b.conv("c3", INPUT, 4, 1)
    cat = b.concat("cat", c3, c2)
    b.conv("out", cat, 3, 3)
    return b.build()


def test_prune_keep_all_is_identity():
    a = prune_arch()
    w = init_weights(a, 0)
    a2, w2 = prune_channels(a, w, "c1", range(8))
    assert a2 == a and w2 is w


def test_prune_zeroed_channels_forward_unchanged():
    a = prune_arch()
    w = init_weights(a, 1)
    dead = [2, 6]
    w = w.updated({"c2.weight": np.where(np.isin(np.arange(8), dead)[None, :, None, None], 0, w["c2.weight"])})
    x = rand(np.random.default_rng(0), 1, 3, 12, 12)
    a2, w2 = prune_channels(a, w, "c1", [i for i in range(8) if i not in dead])
    assert validate(a2) == [] and a2.node("c1").get("out") == 6
    assert np.max(np.abs(forward(a2, w2, x) - forward(a, w, x))) <= 1e-6


def test_prune_through_concat_offsets():
    a = prune_arch()
    w = init_weights(a, 2)
    ow = w["out.weight"].copy()
    ow[:, 4 + 1] = 0  # c2 channel 1 sits after c3's 4 channels in the concat
    w = w.updated({"out.weight": ow})
    x = rand(np.random.default_rng(1), 1, 3, 10, 10)
    a2, w2 = prune_channels(a, w, "c2", [0, 2, 3, 4])
    assert w2["out.weight"].shape[1] == 8 and validate(a2) == []
    assert np.max(np.abs(forward(a2, w2, x) - forward(a, w, x))) <= 1e-6


def test_prune_errors():
    a = prune_arch()
    w = init_weights(a)
    with pytest.raises(ValueError, match="empty"):
        prune_channels(a, w, "c1", [])
    with pytest.raises(IndexError):
        prune_channels(a, w, "c1", [0, 8])
    with pytest.raises(ReparamError, match="a1"):
        prune_channels(a, w, "a1", [0])
    with pytest.raises(ReparamError, match="output"):
        prune_channels(a, w, "out", [0, 1])


def test_prune_rejects_attention_topology():
    a = build_rlfn(channels=8, blocks=1)
    with pytest.raises(ReparamError, match="unsupported|cannot prune"):
        prune_channels(a, init_weights(a), "b1.c3_r", [0, 1, 2])


# collapse_arch


@pytest.mark.parametrize("builder", [lambda: build_imdn(16, blocks=1, distill=4), lambda: build_rlfn(8, blocks=1)])
def test_collapse_plain_is_fixed_point(builder):
    a = builder()
    w = init_weights(a, 0)
    a2, w2 = collapse_arch(a, w)
    assert a2 == a
    assert set(w2) == set(w) and all(w2[k].tobytes() == w[k].tobytes() for k in w)


def test_collapse_bn_without_conv_errors():
    a = ArchSpec(
        (
            NodeSpec("c", "conv", {"in": 3, "out": 3, "k": 3, "pad": 1}, (INPUT,)),
            NodeSpec("r", "act", {"fn": "relu"}, ("c",)),
            NodeSpec("bn", "bn", {"ch": 3}, ("r",)),
        ),
        scale=1,
    )
    with pytest.raises(ReparamError, match="'bn'"):
        collapse_arch(a, init_weights(a))


def test_collapse_bad_group_is_named():
    b = GraphBuilder(3, 1)
    c = b.conv("g.a", INPUT, 3, 3, group="g")
    r = b.act("g.r", c, "relu", group="g")
    b.add("g", r, INPUT, group="g")
    a = b.build()
    with pytest.raises(ReparamError, match="'g'"):
        collapse_arch(a, init_weights(a))


@pytest.mark.parametrize(
    "builder",
    [lambda: build_fmen(pairs=2, channels=8), lambda: build_efdn(8, blocks=2), lambda: build_efdn(8, blocks=1, asymmetric=True)],
)
def test_collapse_equivalent_idempotent_monotone(builder):
    a = builder()
    w = init_weights(a, 7)
    c, wc = collapse_arch(a, w)
    assert c.count("bn") == 0 and not any(n.get("group") for n in c.nodes)
    assert count_convs(c) < count_convs(a) and count_flops(c, 32, 32) <= count_flops(a, 32, 32)
    c2, wc2 = collapse_arch(c, wc)
    assert c2 == c and all(wc2[k].tobytes() == wc[k].tobytes() for k in wc)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rand(rng, 1, 3, 24, 24)
        assert np.max(np.abs(forward(a, w, x, fast=True) - forward(c, wc, x, fast=True))) <= 1e-4
