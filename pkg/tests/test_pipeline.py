import warnings

import numpy as np
import pytest

from lmp import oracles
from lmp.acceptance import CENTROID_FIXTURES, toy_spec
from lmp.errors import ConfigError, ShapeError
from lmp.fbdm import ForegroundMask, SaliencyVolume, aggregate_subject_saliency, select_foreground
from lmp.latent import LatentVideo, TokenLayout, random_prompt
from lmp.mmdit import ModelWeights
from lmp.pipeline import (Recorder, RunSpec, centroid_trajectory, gate_trace, generate_plain, lmp_generate,
                          trajectory_similarity)
from lmp.scheduler import ScheduleConfig
from lmp.synthetic import moving_blob


def small_spec(**overrides):
    model = ModelWeights.random(1, channels=3, blocks=2, width=8, heads=2, head_width=4)
    kwargs = dict(
        schedule=ScheduleConfig(T=6, T1=3, T2=5, T3=2, beta=1.0, seed=3),
        model=model, layout=TokenLayout(3, 3, 3),
        target_prompt=random_prompt(4, 8, (1,), 1), reference_prompt=random_prompt(4, 8, (0, 2), 2),
        reference_latent=moving_blob(3, 3, 3, 3, start=(0, 0), end=(2, 2), radius=0.8)[0])
    kwargs.update(overrides)
    return RunSpec(**kwargs)


def test_paper_gates():
    g = gate_trace(ScheduleConfig(T=50, T1=40, T2=45, T3=35))
    assert g.rtmm_steps() == set(range(41, 51))
    assert g.asm_steps() == set(range(36, 45))
    row = next(r for r in g.rows if r.t == 44)
    assert row.order == ("asm", "rtmm")
    assert g.to_csv().splitlines()[:3] == ["t,rtmm,asm", "50,1,0", "49,1,0"]


def test_asm_disabled_trace():
    g = gate_trace(ScheduleConfig(), asm_enabled=False)
    assert not g.asm_steps()
    res = lmp_generate(small_spec(asm_enabled=False))
    assert not res.gates.asm_steps() and not res.losses


def test_never_open_rtmm_gate_equals_plain_generation():
    spec = small_spec(schedule=ScheduleConfig(T=6, T1=6, T2=5, T3=2, seed=3), asm_enabled=False)
    res = lmp_generate(spec)
    assert not res.masks
    assert res.z0.data.tobytes() == generate_plain(spec).data.tobytes()


def test_interventions_change_output():
    spec = small_spec()
    assert lmp_generate(spec).z0.data.tobytes() != generate_plain(spec).data.tobytes()


def test_loss_log_and_masks_follow_gates():
    spec = small_spec()
    res = lmp_generate(spec)
    assert sorted(res.masks) == [4, 5, 6]
    assert sorted({t for t, _, _ in res.losses}) == [3, 4]
    assert {b for _, b, _ in res.losses} == {0, 1}
    lines = res.losses_csv().splitlines()
    assert lines[0] == "t,block,loss" and len(lines) == 1 + 4


class Capture(Recorder):
    def __init__(self):
        self.blocks = []

    def block(self, t, block, branch, h_in, trace):
        self.blocks.append((t, block, branch, h_in, trace))


def test_mask_comes_from_previous_reference_pass():
    spec = small_spec()
    cap = Capture()
    res = lmp_generate(spec, cap)
    ref_5 = [tr for t, b, br, _, tr in cap.blocks if t == 5 and br == "ref"]
    expect = select_foreground(aggregate_subject_saliency(ref_5, (0, 2), spec.layout), spec.policy)
    assert np.array_equal(res.masks[4].indices, expect.indices)
    # at t = T the initial reference pass on the same inputs supplies the traces
    ref_6 = [tr for t, b, br, _, tr in cap.blocks if t == 6 and br == "ref"]
    first = select_foreground(aggregate_subject_saliency(ref_6, (0, 2), spec.layout), spec.policy)
    assert np.array_equal(res.masks[6].indices, first.indices)


def test_target_consumes_same_block_reference_cache():
    spec = small_spec(asm_enabled=False)
    cap = Capture()
    res = lmp_generate(spec, cap)
    t, b = 6, 1
    ref_trace = next(tr for tt, bb, br, _, tr in cap.blocks if (tt, bb, br) == (t, b, "ref"))
    h_in, tar_trace = next((h, tr) for tt, bb, br, h, tr in cap.blocks if (tt, bb, br) == (t, b, "tar"))
    mask = res.masks[t]
    w = spec.model.blocks[b]
    k_ref, v_ref = ref_trace.k_video[:, mask.indices], ref_trace.v_video[:, mask.indices]
    _, avg, _ = oracles.joint_block_attention(h_in.prompt, h_in.video, w.wq, w.wk, w.wv, w.wo, k_ref, v_ref,
                                              spec.schedule.lam)
    np.testing.assert_allclose(tar_trace.attn.data, avg, atol=1e-9)


def test_generated_reference_mode_runs():
    res = lmp_generate(small_spec(reference_latent=None))
    assert np.all(np.isfinite(res.z0.data))


def test_image_to_video_keeps_first_frame(rng):
    frame = rng.standard_normal((3, 3, 3))
    res = lmp_generate(small_spec(init_frame=frame))
    assert np.array_equal(res.z0.data[0], frame)


def test_determinism():
    spec = small_spec()
    a, b = lmp_generate(spec), lmp_generate(spec)
    assert a.z0.data.tobytes() == b.z0.data.tobytes()
    assert a.losses_csv() == b.losses_csv()


def test_toy_spec_shape():
    spec = toy_spec(T=5)
    assert spec.layout.n == 512 and len(spec.model.blocks) == 4 and spec.model.width == 16


def test_spec_validation():
    with pytest.raises(ConfigError):
        small_spec(target_prompt=random_prompt(4, 6, (1,), 1))
    with pytest.raises(ConfigError):
        small_spec(reference_latent=LatentVideo(np.zeros((2, 3, 3, 3))))


@pytest.mark.parametrize("layout,frames,expect", CENTROID_FIXTURES)
def test_centroid_fixtures(layout, frames, expect):
    idx = sorted(layout.index(f, y, x) for f, pts in enumerate(frames) for y, x in pts)
    np.testing.assert_allclose(centroid_trajectory(ForegroundMask(layout, idx)), expect, atol=1e-12)
    sets = [[layout.index(f, y, x) for y, x in pts] for f, pts in enumerate(frames)]
    np.testing.assert_allclose(centroid_trajectory(sets, layout), expect, atol=1e-12)


def test_weighted_centroid():
    vol = SaliencyVolume(TokenLayout(1, 2, 2), [0.0, 1.0, 0.0, 3.0])
    np.testing.assert_allclose(centroid_trajectory(vol), [(0.75, 1.0)])


def test_centroid_empty_frame():
    layout = TokenLayout(2, 2, 2)
    with pytest.raises(ShapeError):
        centroid_trajectory(ForegroundMask(layout, [0, 1]))


def test_similarity_examples(rng):
    a = rng.standard_normal((6, 2))
    assert trajectory_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    reflected = 2 * a.mean(axis=0) - a
    assert trajectory_similarity(a, reflected) == pytest.approx(-1.0, abs=1e-12)
    b = rng.standard_normal((6, 2))
    want = 0.5 * (oracles.pearson(list(a[:, 0]), list(b[:, 0])) + oracles.pearson(list(a[:, 1]), list(b[:, 1])))
    assert trajectory_similarity(a, b) == pytest.approx(want, abs=1e-9)


def test_similarity_constant_series_warns():
    a = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert trajectory_similarity(a, a) == pytest.approx(0.5)
    assert caught
    with pytest.raises(ShapeError):
        trajectory_similarity(a, a[:2])


def test_blob_motion_is_recovered_by_centroids():
    video, centres = moving_blob(6, 10, 10, 2, start=(2, 2), end=(7, 5), radius=1.0, amplitude=5.0)
    energy = np.linalg.norm(video.data, axis=-1)
    vol = SaliencyVolume(TokenLayout(6, 10, 10), (energy ** 4).reshape(-1))
    assert trajectory_similarity(centroid_trajectory(vol), centres) > 0.95
