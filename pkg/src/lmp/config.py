"""JSON run configuration -> ``RunSpec``.

Tensor fields are paths to LMPT files, resolved relative to the directory
holding the config. See README.md for the full schema.
"""
import json
import os

import numpy as np

from . import tensorio
from .errors import ConfigError
from .fbdm import make_policy
from .latent import LatentVideo, PromptTokens, TokenLayout, random_prompt
from .mmdit import ModelWeights
from .pipeline import RunSpec
from .scheduler import ScheduleConfig, linear_schedule, make_blend_schedule

SEED_ENV = "LMP_SEED"


def _section(cfg, key):
    value = cfg.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"'{key}' must be an object")
    return value


def _prompt(section, name, width, base, default_seed):
    if "subject_indices" not in section:
        raise ConfigError(f"{name}.subject_indices is required")
    subjects = section["subject_indices"]
    if "tokens" in section and section["tokens"] is not None:
        data = tensorio.load(os.path.join(base, section["tokens"])).astype(np.float64)
        return PromptTokens(data, subjects)
    return random_prompt(int(section.get("length", 6)), width, subjects, section.get("seed", default_seed))


def spec_from_dict(cfg, base="."):
    """Build a ``RunSpec`` from a parsed config. Raises ``ConfigError`` on bad fields."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    try:
        seed = int(os.environ.get(SEED_ENV, cfg.get("seed", 0)))
        sch = _section(cfg, "schedule")
        schedule = ScheduleConfig(
            T=int(sch.get("T", 50)), T1=int(sch.get("T1", 40)), T2=int(sch.get("T2", 45)),
            T3=int(sch.get("T3", 35)), lam=float(sch.get("lambda", 0.98)), beta=float(sch.get("beta", 100.0)),
            seed=seed, gate_interpretation=sch.get("gate_interpretation", "literal"))
        ns = _section(cfg, "noise")
        noise = linear_schedule(schedule.T, float(ns.get("beta_start", 1e-4)), ns.get("beta_end"),
                                float(ns.get("abar_final", 0.01)))
        blend = make_blend_schedule(schedule.T, cfg.get("blend", "linear"), noise)

        mc = _section(cfg, "model")
        if mc.get("weights"):
            model = ModelWeights.load(os.path.join(base, mc["weights"]))
        else:
            model = ModelWeights.random(int(mc.get("seed", 0)), channels=int(mc.get("channels", 4)),
                                        blocks=int(mc.get("blocks", 4)), width=int(mc.get("width", 16)),
                                        heads=int(mc.get("heads", 2)), head_width=int(mc.get("head_width", 8)))
        lc = _section(cfg, "latent")
        layout = TokenLayout(int(lc.get("frames", 8)), int(lc.get("height", 8)), int(lc.get("width", 8)))

        target = _prompt(_section(cfg, "target_prompt"), "target_prompt", model.width, base, seed + 1)
        reference = _prompt(_section(cfg, "reference_prompt"), "reference_prompt", model.width, base, seed + 2)

        rc = _section(cfg, "reference")
        source = rc.get("source", "generated")
        if source == "latent":
            if "path" not in rc:
                raise ConfigError("reference.path is required when source is 'latent'")
            ref_latent = LatentVideo(tensorio.load(os.path.join(base, rc["path"])).astype(np.float64))
        elif source == "generated":
            ref_latent = None
        else:
            raise ConfigError(f"unknown reference source {source!r}")

        init = cfg.get("init_frame")
        init_frame = tensorio.load(os.path.join(base, init)).astype(np.float64) if init else None

        z_T = cfg.get("initial_latent")
        initial = LatentVideo(tensorio.load(os.path.join(base, z_T)).astype(np.float64)) if z_T else None

        fc = _section(cfg, "fbdm")
        policy_name = fc.get("policy", "top_fraction")
        policy = make_policy(policy_name, fc.get("q" if policy_name == "top_fraction" else "tau"))

        ac = _section(cfg, "asm")
        return RunSpec(schedule=schedule, model=model, layout=layout, target_prompt=target,
                       reference_prompt=reference, reference_latent=ref_latent, init_frame=init_frame,
                       initial_latent=initial,
                       policy=policy, asm_enabled=bool(ac.get("enabled", True)),
                       asm_fraction=float(ac.get("fraction", 0.2)), noise=noise, blend=blend)
    except (TypeError, KeyError) as err:
        raise ConfigError(f"malformed config: {err}") from err


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return cfg


def load_run_spec(path):
    return spec_from_dict(load_config(path), os.path.dirname(os.path.abspath(path)))
