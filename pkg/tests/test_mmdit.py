import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmp import oracles
from lmp.errors import NumericError, ShapeError
from lmp.fbdm import ForegroundMask
from lmp.latent import TokenLayout
from lmp.mmdit import (AttentionMap, BlockWeights, HiddenStates, ModelWeights, attend, block_forward,
                       feedforward, joint_attention, model_forward, partition, project_heads)
from lmp.rtmm import RmtmHook


def states(rng, m, n, d):
    return HiddenStates(rng.standard_normal((m, d)), rng.standard_normal((n, d)))


def test_uniform_logits_give_uniform_map():
    h = HiddenStates(np.ones((1, 4)), np.ones((1, 4)))
    _, amap, _ = joint_attention(h, BlockWeights.zeros(4, 1, 2))
    assert amap.data.tolist() == [[0.5, 0.5], [0.5, 0.5]]


def test_identical_values_give_that_value(rng):
    q = rng.standard_normal((1, 5, 3))
    k = rng.standard_normal((1, 5, 3))
    v = np.tile(np.array([1.5, -2.0, 0.25]), (1, 5, 1))
    out, _ = attend(q, k, v)
    np.testing.assert_allclose(out[0], np.tile(v[0, 0], (5, 1)), atol=1e-15)


def test_matches_dense_oracle_m2_n3(rng):
    w = BlockWeights.random(3, 0, width=6, heads=2, head_width=4)
    h = states(rng, 2, 3, 6)
    out, amap, _ = joint_attention(h, w)
    y, avg, per_head = oracles.joint_block_attention(h.prompt, h.video, w.wq, w.wk, w.wv, w.wo)
    np.testing.assert_allclose(amap.data, avg, rtol=0, atol=1e-6)
    np.testing.assert_allclose(amap.per_head, per_head, rtol=0, atol=1e-6)
    np.testing.assert_allclose(out.joined(), y, rtol=0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10), st.integers(0, 10_000))
def test_rows_stochastic_and_convex(m, n, seed):
    rng = np.random.default_rng(seed)
    w = BlockWeights.random(seed, 0, width=8, heads=2, head_width=4, scale=3.0)
    h = states(rng, m, n, 8)
    q, k, v = project_heads(h.joined(), w)
    out, a = attend(q, k, v)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    lo = v.min(axis=1, keepdims=True) - 1e-12
    hi = v.max(axis=1, keepdims=True) + 1e-12
    assert np.all(out >= lo) and np.all(out <= hi)


def test_partition_shapes_and_reassembly(rng):
    a = rng.random((5, 5))
    tt, tv, vt, vv = partition(a, 2, 3)
    assert [x.shape for x in (tt, tv, vt, vv)] == [(2, 2), (2, 3), (3, 2), (3, 3)]
    assert np.array_equal(np.block([[tt, tv], [vt, vv]]), a)


def test_partition_ignores_reference_columns(rng):
    a = rng.random((5, 9))
    tt, tv, vt, vv = partition(a, 2, 3)
    assert np.array_equal(np.block([[tt, tv], [vt, vv]]), a[:, :5])
    amap = AttentionMap(a, 2, 3, 4)
    assert np.array_equal(amap.tv, tv) and np.array_equal(amap.ref, a[:, 5:])
    with pytest.raises(ShapeError):
        partition(a, 3, 3)


def test_block_forward_without_hooks(rng):
    w = BlockWeights.random(1, 0, width=8, heads=2, head_width=4)
    h = states(rng, 3, 5, 8)
    out, trace = block_forward(h, w)
    attn_out, amap, (kv, vv) = joint_attention(h, w)
    expect = feedforward(attn_out, w)
    assert np.array_equal(out.joined(), expect.joined())
    assert np.array_equal(trace.attn.data, amap.data)
    assert trace.k_video.shape == (2, 5, 4) and np.array_equal(trace.k_video, kv)


def test_empty_mask_hook_is_noop(rng):
    w = BlockWeights.random(1, 0, width=8, heads=2, head_width=4)
    h = states(rng, 3, 6, 8)
    _, ref_trace = block_forward(states(rng, 3, 6, 8), w)
    plain, _ = block_forward(h, w)
    hooked, _ = block_forward(h, w, [RmtmHook(ForegroundMask.empty(TokenLayout(1, 2, 3)), ref_trace, 0.98)])
    assert plain.joined().tobytes() == hooked.joined().tobytes()


def test_hook_without_reference_trace_fails(rng):
    w = BlockWeights.random(1, 0, width=8, heads=2, head_width=4)
    with pytest.raises(ShapeError, match="reference"):
        block_forward(states(rng, 1, 2, 8), w, [RmtmHook(ForegroundMask.empty(TokenLayout(1, 1, 2)), None, 1.0)])


def test_block_forward_is_deterministic(rng):
    w = BlockWeights.random(5, 2)
    h = states(rng, 4, 12, 16)
    a, ta = block_forward(h, w)
    b, tb = block_forward(h, w)
    assert a.joined().tobytes() == b.joined().tobytes()
    assert ta.attn.data.tobytes() == tb.attn.data.tobytes()


def test_weights_reproducible_from_seed_and_block():
    a, b, c = BlockWeights.random(9, 1), BlockWeights.random(9, 1), BlockWeights.random(9, 2)
    assert a.wq.tobytes() == b.wq.tobytes() and a.wff.tobytes() == b.wff.tobytes()
    assert a.wq.tobytes() != c.wq.tobytes()


def test_model_forward_composition(rng):
    model = ModelWeights.random(0, blocks=3)
    h = states(rng, 2, 8, 16)
    out1, traces1 = model_forward(h, model.blocks[:1])
    single, _ = block_forward(h, model.blocks[0])
    assert np.array_equal(out1.joined(), single.joined()) and len(traces1) == 1
    _, traces = model_forward(h, model.blocks)
    assert len(traces) == 3
    zero = HiddenStates(np.zeros((2, 16)), np.zeros((8, 16)))
    out0, _ = model_forward(zero, [BlockWeights.zeros()] * 3)
    assert not out0.joined().any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_logits_name_block():
    w = BlockWeights.random(0, 0, width=4, heads=1, head_width=2, scale=1e300)
    h = HiddenStates(np.full((1, 4), 1e300), np.full((1, 4), 1e300))
    with pytest.raises(NumericError, match="block=3"):
        joint_attention(h, w, block=3)


def test_weights_save_load(tmp_path):
    model = ModelWeights.random(4, channels=3, blocks=2, width=8, heads=2, head_width=4)
    model.save(tmp_path / "w")
    back = ModelWeights.load(tmp_path / "w")
    assert len(back.blocks) == 2
    np.testing.assert_array_equal(back.blocks[1].wo, model.blocks[1].wo.astype(np.float32))
    np.testing.assert_array_equal(back.embed, model.embed.astype(np.float32))


def test_width_mismatch(rng):
    with pytest.raises(ShapeError):
        joint_attention(states(rng, 1, 2, 4), BlockWeights.random(0, 0, width=8))
