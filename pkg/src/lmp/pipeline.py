"""Gated reference/target denoising loop and the motion-trajectory proxy.

Per timestep (descending) the reference latent is obtained, both branches
are mapped to hidden states, and the blocks run in order. In each block the
reference branch runs first on its own inputs, which yields the K/V cache
the target consumes; the target then runs with its hooks (appearance
suppression before attention, reference injection inside it).
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .asm import AsmHook
from .errors import ConfigError, LMPError, ShapeError
from .fbdm import ForegroundMask, SaliencyVolume, TopFraction, aggregate_subject_saliency, select_foreground
from .latent import LatentVideo, PromptTokens, TokenLayout, detokenize, tokenize
from .mmdit import HiddenStates, ModelWeights, block_forward, model_forward
from .rtmm import RmtmHook
from .scheduler import (BlendSchedule, NoiseSchedule, ScheduleConfig, denoise_update, linear_schedule,
                        make_blend_schedule, proportional_noise)

log = logging.getLogger(__name__)


@dataclass
class RunSpec:
    schedule: ScheduleConfig
    model: ModelWeights
    layout: TokenLayout
    target_prompt: PromptTokens
    reference_prompt: PromptTokens
    reference_latent: LatentVideo = None  # None: generate the reference in parallel
    init_frame: np.ndarray = None         # (h, w, c) image-to-video conditioning
    initial_latent: LatentVideo = None    # target z_T; seeded Gaussian when None
    policy: object = field(default_factory=TopFraction)
    asm_enabled: bool = True
    asm_fraction: float = 0.2
    noise: NoiseSchedule = None
    blend: BlendSchedule = None

    def __post_init__(self):
        T = self.schedule.T
        if self.noise is None:
            self.noise = linear_schedule(T)
        if self.blend is None:
            self.blend = make_blend_schedule(T, "linear")
        if self.noise.T != T or self.blend.T != T:
            raise ConfigError("noise/blend schedules must have the same T as the run")
        d = self.model.width
        if self.target_prompt.width != d or self.reference_prompt.width != d:
            raise ConfigError(f"prompt widths must equal the model width {d}")
        shape = (self.layout.frames, self.layout.height, self.layout.width, self.model.channels)
        if self.reference_latent is not None and self.reference_latent.shape != shape:
            raise ConfigError(f"reference latent has shape {self.reference_latent.shape}, expected {shape}")
        if self.initial_latent is not None and self.initial_latent.shape != shape:
            raise ConfigError(f"initial latent has shape {self.initial_latent.shape}, expected {shape}")
        if self.init_frame is not None and np.shape(self.init_frame) != shape[1:]:
            raise ConfigError(f"initial frame has shape {np.shape(self.init_frame)}, expected {shape[1:]}")

    @property
    def latent_shape(self):
        return (self.layout.frames, self.layout.height, self.layout.width, self.model.channels)


@dataclass(frozen=True)
class GateRow:
    t: int
    rtmm: bool
    asm: bool
    order: tuple  # hooks applied in each block, in application order


@dataclass
class GateTrace:
    rows: list = field(default_factory=list)

    def rtmm_steps(self):
        return {r.t for r in self.rows if r.rtmm}

    def asm_steps(self):
        return {r.t for r in self.rows if r.asm}

    def to_csv(self):
        return "t,rtmm,asm\n" + "".join(f"{r.t},{int(r.rtmm)},{int(r.asm)}\n" for r in self.rows)


def gate_trace(schedule, asm_enabled=True):
    rows = []
    for t in range(schedule.T, 0, -1):
        asm = asm_enabled and schedule.asm_active(t)
        rtmm = schedule.rtmm_active(t)
        order = tuple(name for name, on in (("asm", asm), ("rtmm", rtmm)) if on)
        rows.append(GateRow(t, rtmm, asm, order))
    return GateTrace(rows)


class Recorder:
    """No-op observer; subclasses persist whatever they need."""

    def block(self, t, block, branch, h_in, trace):
        pass

    def step(self, t, saliency, mask):
        pass

    def loss(self, t, block, value):
        pass


@dataclass
class GenerationResult:
    z0: LatentVideo
    gates: GateTrace
    losses: list = field(default_factory=list)  # (t, block, loss)
    masks: dict = field(default_factory=dict)   # t -> ForegroundMask
    saliency: dict = field(default_factory=dict)

    def losses_csv(self):
        return "t,block,loss\n" + "".join(f"{t},{b},{loss!r}\n" for t, b, loss in self.losses)


def _streams(seed):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def _initial(spec, rng):
    if spec.initial_latent is not None:
        return spec.initial_latent
    return LatentVideo(rng.standard_normal(spec.latent_shape))


def _mapping(z, prompt, model):
    tokens, _ = tokenize(z, model.embed)
    return HiddenStates(prompt.data, tokens)


def _condition(z, init_frame):
    if init_frame is None:
        return z
    data = np.array(z.data)
    data[0] = init_frame
    return LatentVideo(data)


def lmp_generate(spec, recorder=None):
    recorder = recorder or Recorder()
    sched = spec.schedule
    model = spec.model
    layout = spec.layout
    rng_tar, rng_ref, rng_eps = _streams(sched.seed)
    gates = gate_trace(sched, spec.asm_enabled)
    result = GenerationResult(None, gates)

    z = _initial(spec, rng_tar)
    if spec.reference_latent is not None:
        eps_ref = LatentVideo(rng_eps.standard_normal(spec.latent_shape))
        z_ref = None
    else:
        z_ref = LatentVideo(rng_ref.standard_normal(spec.latent_shape))

    def reference_latent(t):
        if spec.reference_latent is not None:
            return proportional_noise(spec.reference_latent, t, eps_ref, spec.blend)
        return z_ref

    prev_traces = None
    if any(row.rtmm for row in gates.rows):
        _, prev_traces = model_forward(_mapping(reference_latent(sched.T), spec.reference_prompt, model),
                                       model.blocks)

    ref_subjects = spec.reference_prompt.subject_indices
    for row in gates.rows:
        t = row.t
        try:
            z = _condition(z, spec.init_frame)
            h_tar = _mapping(z, spec.target_prompt, model)
            h_ref = _mapping(reference_latent(t), spec.reference_prompt, model)
            mask = None
            if row.rtmm:
                sal = aggregate_subject_saliency(prev_traces, ref_subjects, layout)
                mask = select_foreground(sal, spec.policy)
                result.masks[t] = mask
                result.saliency[t] = sal
                recorder.step(t, sal, mask)
            traces = []
            for b, w in enumerate(model.blocks):
                try:
                    ref_in = h_ref
                    h_ref, ref_trace = block_forward(h_ref, w, (), block=b)
                    traces.append(ref_trace)
                    hooks = []
                    if row.asm:
                        hooks.append(AsmHook(ref_in.prompt, ref_subjects, sched.beta, spec.asm_fraction))
                    if row.rtmm:
                        hooks.append(RmtmHook(mask, ref_trace, sched.lam))
                    tar_in = h_tar
                    h_tar, tar_trace = block_forward(h_tar, w, hooks, block=b)
                    if row.asm:
                        result.losses.append((t, b, hooks[0].loss))
                        recorder.loss(t, b, hooks[0].loss)
                    recorder.block(t, b, "ref", ref_in, ref_trace)
                    recorder.block(t, b, "tar", tar_in, tar_trace)
                except LMPError as err:
                    raise err.with_context(block=b)
            prev_traces = traces
            eps_hat = detokenize(h_tar.video, layout, model.project)
            z = denoise_update(z, eps_hat, t, spec.noise)
            if z_ref is not None:
                z_ref = denoise_update(z_ref, detokenize(h_ref.video, layout, model.project), t, spec.noise)
        except LMPError as err:
            raise err.with_context(t=t)
        log.debug("t=%d rtmm=%s asm=%s", t, row.rtmm, row.asm)
    result.z0 = _condition(z, spec.init_frame)
    return result


def generate_plain(spec):
    """Baseline generation with no interventions, same seeds as ``lmp_generate``."""
    model = spec.model
    rng_tar, _, _ = _streams(spec.schedule.seed)
    z = _initial(spec, rng_tar)
    for t in range(spec.schedule.T, 0, -1):
        z = _condition(z, spec.init_frame)
        h, _ = model_forward(_mapping(z, spec.target_prompt, model), model.blocks)
        z = denoise_update(z, detokenize(h.video, spec.layout, model.project), t, spec.noise)
    return _condition(z, spec.init_frame)


def centroid_trajectory(source, layout=None):
    """Per-frame (row, col) centroid of a foreground mask or saliency volume."""
    if isinstance(source, ForegroundMask):
        layout = source.layout
        out = []
        for f in range(layout.frames):
            members = source.frame_members(f)
            if members.size == 0:
                raise ShapeError(f"frame {f} has no selected tokens")
            local = members - f * layout.frame_size
            out.append((float(np.mean(local // layout.width)), float(np.mean(local % layout.width))))
        return np.array(out)
    if isinstance(source, SaliencyVolume):
        vol = source.volume()
        ys, xs = np.mgrid[: vol.shape[1], : vol.shape[2]]
        out = []
        for f, frame in enumerate(vol):
            total = frame.sum()
            if total <= 0:
                raise ShapeError(f"frame {f} has zero saliency")
            out.append((float((frame * ys).sum() / total), float((frame * xs).sum() / total)))
        return np.array(out)
    if layout is None:
        raise ShapeError("per-frame token sets need a layout")
    out = []
    for f, members in enumerate(source):
        members = np.asarray(list(members), dtype=np.int64)
        if members.size == 0:
            raise ShapeError(f"frame {f} has no selected tokens")
        pos = np.array([layout.position(i)[1:] for i in members], dtype=np.float64)
        out.append(tuple(pos.mean(axis=0)))
    return np.array(out)


def _pearson(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        warnings.warn("constant centroid series; correlation taken as 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return float((xc * yc).sum() / denom)


def trajectory_similarity(a, b):
    """Mean Pearson correlation of the row and column centroid series."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] < 2:
        raise ShapeError("trajectories must be (frames >= 2, 2) arrays")
    return 0.5 * (_pearson(a[:, 0], b[:, 0]) + _pearson(a[:, 1], b[:, 1]))
