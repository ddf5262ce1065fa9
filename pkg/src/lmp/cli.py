"""``lmp`` command line: generate, inspect, noise, selftest.

Exit codes: 0 success, 1 selftest failure, 2 config error, 3 I/O error,
4 numeric failure.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import tensorio
from .artifacts import DumpWriter, load_attention, save_mask, write_heatmaps
from .config import SEED_ENV, load_config, spec_from_dict
from .errors import ConfigError, FormatError, LMPError, NumericError, ShapeError
from .fbdm import aggregate_subject_saliency, make_policy, select_foreground
from .latent import LatentVideo, TokenLayout
from .pipeline import lmp_generate
from .scheduler import linear_schedule, make_blend_schedule, proportional_noise

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("lmp")


def _fail(code, message):
    print(f"lmp: error: {message}", file=sys.stderr)
    return code


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_generate(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        return _fail(EXIT_CONFIG, f"config not found: {args.config}")
    except OSError as err:
        return _fail(EXIT_CONFIG, f"cannot read config: {err}")
    except ConfigError as err:
        return _fail(EXIT_CONFIG, str(err))
    try:
        spec = spec_from_dict(cfg, os.path.dirname(os.path.abspath(args.config)))
    except (ConfigError, ShapeError) as err:
        return _fail(EXIT_CONFIG, str(err))
    except (FormatError, OSError) as err:
        return _fail(EXIT_IO, str(err))

    out = args.out_dir
    try:
        os.makedirs(out, exist_ok=True)
        steps = cfg.get("dump_steps")
        writer = DumpWriter(out, spec.layout, attn=args.dump_attn, saliency=args.dump_saliency, steps=steps)
        result = lmp_generate(spec, writer)
        tensorio.save(os.path.join(out, "z0.lmpt"), result.z0.data)
        tensorio.atomic_write_bytes(os.path.join(out, "gates.csv"), result.gates.to_csv().encode())
        if result.losses:
            tensorio.atomic_write_bytes(os.path.join(out, "losses.csv"), result.losses_csv().encode())
    except NumericError as err:
        return _fail(EXIT_NUMERIC, str(err))
    except (FormatError, OSError) as err:
        return _fail(EXIT_IO, str(err))
    except LMPError as err:
        return _fail(EXIT_NUMERIC, str(err))
    if args.trace_gates:
        sys.stdout.write(result.gates.to_csv())
    return EXIT_OK


def cmd_inspect(args):
    layout = TokenLayout(*args.layout) if args.layout else None
    try:
        maps = []
        for path in args.dumps:
            amap, layout_i = load_attention(path, layout, args.prompt_length)
            if maps and layout_i != layout:
                raise FormatError(f"{path}: layout differs from earlier dumps")
            layout = layout_i
            maps.append(amap)
    except (FormatError, OSError, ShapeError) as err:
        return _fail(EXIT_IO, str(err))
    try:
        policy = make_policy(args.policy, args.value)
        sal = aggregate_subject_saliency(maps, args.subjects, layout)
        mask = select_foreground(sal, policy)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, str(err))
    except ShapeError as err:
        return _fail(EXIT_IO, str(err))
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        constant = write_heatmaps(args.out_dir, sal)
        tensorio.save(os.path.join(args.out_dir, "saliency.lmpt"), sal.volume())
        save_mask(os.path.join(args.out_dir, "mask.lmpt"), mask)
    except OSError as err:
        return _fail(EXIT_IO, str(err))
    for f in constant:
        print(f"lmp: warning: frame {f} saliency is constant; heatmap is all zeros", file=sys.stderr)
    return EXIT_OK


def cmd_noise(args):
    try:
        T, kind, seed, noise_cfg = args.steps, args.blend, args.seed, {}
        if args.config:
            cfg = load_config(args.config)
            T = int(cfg.get("schedule", {}).get("T", T))
            kind = cfg.get("blend", kind)
            seed = int(cfg.get("seed", seed))
            noise_cfg = cfg.get("noise", {})
        seed = int(os.environ.get(SEED_ENV, seed))
        noise = linear_schedule(T, float(noise_cfg.get("beta_start", 1e-4)), noise_cfg.get("beta_end"),
                                float(noise_cfg.get("abar_final", 0.01)))
        blend = make_blend_schedule(T, kind, noise)
    except FileNotFoundError as err:
        return _fail(EXIT_CONFIG, f"config not found: {err.filename}")
    except (ConfigError, ValueError, TypeError, AttributeError) as err:
        return _fail(EXIT_CONFIG, str(err))
    try:
        z0 = LatentVideo(tensorio.load(args.video).astype(np.float64))
    except (FormatError, OSError, ShapeError) as err:
        return _fail(EXIT_IO, str(err))
    if not 0 <= args.t <= T:
        return _fail(EXIT_CONFIG, f"t={args.t} outside [0, {T}]")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    eps = LatentVideo(rng.standard_normal(z0.shape))
    zt = proportional_noise(z0, args.t, eps, blend)
    try:
        tensorio.save(args.out, zt.data)
    except OSError as err:
        return _fail(EXIT_IO, str(err))
    return EXIT_OK


def cmd_selftest(args):
    from .acceptance import run_all

    results = run_all()
    for res in results:
        print(res.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser():
    p = argparse.ArgumentParser(prog="lmp", description="Zero-shot motion transfer on a toy joint-attention denoiser.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the gated denoising loop from a JSON config")
    g.add_argument("config")
    g.add_argument("-o", "--out-dir", default="lmp_out")
    g.add_argument("--dump-attn", action="store_true", help="write attention maps per (step, block)")
    g.add_argument("--dump-saliency", action="store_true", help="write saliency volumes and masks per step")
    g.add_argument("--trace-gates", action="store_true", help="also print the gate trace CSV to stdout")
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("inspect", help="saliency heatmaps and foreground mask from attention dumps")
    i.add_argument("dumps", nargs="+", help="attention dumps; several are averaged as blocks")
    i.add_argument("--subjects", type=_int_list, required=True)
    i.add_argument("-o", "--out-dir", default="lmp_inspect")
    i.add_argument("--policy", default="top_fraction", choices=("top_fraction", "threshold"))
    i.add_argument("--value", type=float, default=None, help="q for top_fraction, tau for threshold")
    i.add_argument("--layout", type=_int_list, default=None, help="f,h,w when no sidecar is present")
    i.add_argument("--prompt-length", type=int, default=None, help="m when no sidecar is present")
    i.set_defaults(func=cmd_inspect)

    n = sub.add_parser("noise", help="proportionally noise a latent video")
    n.add_argument("video")
    n.add_argument("--t", type=int, required=True)
    n.add_argument("-o", "--out", required=True)
    n.add_argument("--steps", type=int, default=50, help="total steps T")
    n.add_argument("--blend", default="linear")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--config", default=None, help="run config supplying T, blend, noise and seed")
    n.set_defaults(func=cmd_noise)

    s = sub.add_parser("selftest", help="run every oracle check")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
