import numpy as np
import pytest

from lmp import oracles
from lmp.errors import ShapeError
from lmp.mmdit import AttentionMap, BlockWeights, HiddenStates, joint_attention
from lmp.rtmm import InjectionSpec, extended_attention, reference_mass


def setup(rng, m=1, n=2, r=1, d=6, heads=2, dk=3):
    w = BlockWeights.random(11, 0, width=d, heads=heads, head_width=dk)
    h = HiddenStates(rng.standard_normal((m, d)), rng.standard_normal((n, d)))
    return h, w, rng.standard_normal((heads, r, dk)), rng.standard_normal((heads, r, dk))


def test_lambda_one_is_plain_concatenation(rng):
    h, w, k, v = setup(rng, r=3)
    out, amap = extended_attention(h, w, InjectionSpec(k, v, 1.0))
    ref_out, ref_map, _ = joint_attention(h, w, extra=(k, v))
    assert out.joined().tobytes() == ref_out.joined().tobytes()
    assert amap.data.tobytes() == ref_map.data.tobytes()


def test_no_reference_rows_is_plain_attention(rng):
    h, w, _, _ = setup(rng)
    empty = np.zeros((2, 0, 3))
    out, amap = extended_attention(h, w, InjectionSpec(empty, empty, 0.3))
    ref_out, ref_map, _ = joint_attention(h, w)
    assert out.joined().tobytes() == ref_out.joined().tobytes()
    assert amap.r == 0 and amap.data.tobytes() == ref_map.data.tobytes()


def test_small_instance_against_oracle_and_positive_logit_ordering(rng):
    d, dk = 4, 2
    wqk = np.abs(rng.standard_normal((1, d, dk)))
    w = BlockWeights(wqk, wqk.copy(), rng.standard_normal((1, d, dk)), rng.standard_normal((dk, d)),
                     rng.standard_normal((d, d)))
    h = HiddenStates(np.abs(rng.standard_normal((1, d))), np.abs(rng.standard_normal((2, d))))
    k_ref = np.abs(rng.standard_normal((1, 1, dk))) + 0.1
    v_ref = rng.standard_normal((1, 1, dk))
    masses = {}
    for lam in (0.5, 1.0):
        out, amap = extended_attention(h, w, InjectionSpec(k_ref, v_ref, lam))
        y, avg, _ = oracles.joint_block_attention(h.prompt, h.video, w.wq, w.wk, w.wv, w.wo, k_ref, v_ref, lam)
        np.testing.assert_allclose(amap.data, avg, rtol=0, atol=1e-6)
        np.testing.assert_allclose(out.joined(), y, rtol=0, atol=1e-6)
        assert amap.data.shape == (3, 4)
        masses[lam] = reference_mass(amap, 1)
    assert masses[1.0] > masses[0.5]


def test_rows_sum_to_one(rng):
    h, w, k, v = setup(rng, m=3, n=5, r=4)
    _, amap = extended_attention(h, w, InjectionSpec(k, v, 0.7))
    np.testing.assert_allclose(amap.data.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(amap.per_head.sum(-1), 1.0, atol=1e-12)


def test_lambda_zero_still_gives_reference_mass(rng):
    h, w, k, v = setup(rng, r=2)
    _, amap = extended_attention(h, w, InjectionSpec(k, v, 0.0))
    assert reference_mass(amap, 2) > 0


def test_reference_mass_examples():
    uniform = AttentionMap(np.full((3, 7), 1 / 7), 1, 2, 4)
    assert reference_mass(uniform, 0) == 0.0
    assert reference_mass(uniform, 4) == pytest.approx(4 / 7, abs=1e-15)
    all_ref = np.zeros((3, 5))
    all_ref[:, 3:] = 0.5
    assert reference_mass(AttentionMap(all_ref, 1, 2, 2), 2) == 1.0
    with pytest.raises(ShapeError):
        reference_mass(uniform, 8)


def test_width_mismatch(rng):
    h, w, _, _ = setup(rng)
    bad = np.zeros((2, 1, 5))
    with pytest.raises(ShapeError):
        extended_attention(h, w, InjectionSpec(bad, bad))
    with pytest.raises(ShapeError):
        InjectionSpec(np.zeros((2, 1, 3)), np.zeros((2, 2, 3)))
