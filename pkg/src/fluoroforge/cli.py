"""Command-line entry points: ``simulate``, ``reconstruct`` and ``evaluate``.

Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 dimension mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .imaging import (
    FrameStack,
    Image,
    StackError,
    ensure_dir_writable,
    load_image,
    load_stack,
    save_image,
    save_stack,
    temporal_mean,
)
from .inference.em import reconstruct, render_fluorophores
from .inference.model import InferenceConfig
from .metrics import psnr, rsp_rse, ssim
from .photophysics import default_profile, load_profile
from .simulator import SimulationConfig, simulate_stack
from .tiling import owns, split_tiles, stitch

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIMS = 4
THREADS_ENV = "FLUOROFORGE_THREADS"

log = logging.getLogger("fluoroforge")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class DimensionError(ValueError):
    pass


def _profile(path):
    if path is None:
        return default_profile()
    try:
        return load_profile(path)
    except OSError as exc:
        raise CliError(f"cannot read profile: {exc}", EXIT_IO) from None
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid profile: {exc}", EXIT_USAGE) from None


def _load_png(path) -> Image:
    try:
        return load_image(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _load_stack(path) -> FrameStack:
    try:
        return load_stack(path)
    except (OSError, StackError) as exc:
        raise CliError(f"cannot read stack {path}: {exc}", EXIT_IO) from None


def _seed_for_tile(seed: int | None, index: int) -> int | None:
    if seed is None:
        return None
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def bicubic_prior(stack: FrameStack, scale: int) -> np.ndarray:
    """Bicubic upsample of the temporal mean, clipped at zero and scaled to a unit peak."""
    mean = temporal_mean(stack).pixels.astype(np.float32)
    up = PILImage.fromarray(mean, mode="F").resize(
        (stack.width * scale, stack.height * scale), PILImage.Resampling.BICUBIC
    )
    prior = np.clip(np.asarray(up, dtype=np.float64), 0.0, None)
    peak = prior.max()
    return prior / peak if peak > 0 else prior


def default_jobs() -> int:
    jobs = os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            pass
    return jobs


def _reconstruct_tile(args):
    data, prior, config = args
    result = reconstruct(data, prior, config)
    raw = render_fluorophores(result.fluorophores, prior.shape)
    return raw, [f.to_json() for f in result.fluorophores], result.trace_json()


def run_reconstruction(stack: FrameStack, prior: np.ndarray, config: InferenceConfig,
                       tile: tuple[int, int] | None = None, overlap: int = 0, jobs: int = 1):
    """Reconstruct a whole stack, optionally tile by tile.

    Returns ``(sr, fluorophores, trace)`` where ``sr`` is normalized to a unit
    peak. Each tile gets a seed derived from ``(config.rng_seed, tile index)``
    so the output does not depend on ``jobs``.
    """
    scale = config.scale
    data = stack.as_array()
    if prior.shape != (stack.height * scale, stack.width * scale):
        raise DimensionError(
            f"prior is {prior.shape[1]}x{prior.shape[0]} but the stack "
            f"{stack.width}x{stack.height} at scale {scale} needs "
            f"{stack.width * scale}x{stack.height * scale}"
        )
    if tile is None:
        result = reconstruct(stack, prior, config)
        return result.sr_image.pixels, [f.to_json() for f in result.fluorophores], result.trace_json()

    tw, th = tile
    tiles = split_tiles(stack.width, stack.height, min(tw, stack.width), min(th, stack.height), overlap)
    work = []
    for t in tiles:
        rs, cs = t.slices()
        hrs, hcs = t.slices(scale)
        cfg = config.with_(rng_seed=_seed_for_tile(config.rng_seed, t.index))
        work.append((np.ascontiguousarray(data[:, rs, cs]), np.ascontiguousarray(prior[hrs, hcs]), cfg))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            outputs = list(pool.map(_reconstruct_tile, work))
    else:
        outputs = [_reconstruct_tile(w) for w in work]

    raw = stitch(tiles, [o[0] for o in outputs], scale)
    peak = raw.max()
    sr = raw / peak if peak > 0 else raw
    fluorophores = []
    for t, (_, fl, _) in zip(tiles, outputs):
        for f in fl:
            gx, gy = f["x"] + t.x * scale, f["y"] + t.y * scale
            if owns(t, (stack.width, stack.height), gx, gy, scale):
                fluorophores.append({**f, "x": gx, "y": gy})
    trace = {"tiles": [
        {"x": t.x, "y": t.y, "w": t.w, "h": t.h, **o[2]} for t, o in zip(tiles, outputs)
    ]}
    return sr, fluorophores, trace


def cmd_simulate(args) -> int:
    if args.frames < 1:
        raise CliError("--frames must be >= 1", EXIT_USAGE)
    if args.scale < 1:
        raise CliError("--scale must be >= 1", EXIT_USAGE)
    if args.count_scale <= 0:
        raise CliError("--count-scale must be positive", EXIT_USAGE)
    profile = _profile(args.profile)
    density = _load_png(args.input)
    if density.height % args.scale or density.width % args.scale:
        raise CliError(
            f"scale {args.scale} does not divide input dimensions {density.width}x{density.height}",
            EXIT_DIMS,
        )
    config = SimulationConfig(frames=args.frames, scale=args.scale, count_scale=args.count_scale,
                              rng_seed=args.seed)
    stack, truth = simulate_stack(density, profile, config, keep_ground_truth=args.emit_ground_truth)
    try:
        out = ensure_dir_writable(args.out)
        save_stack(stack, out)
        if args.emit_ground_truth:
            gt = ensure_dir_writable(out / "ground_truth")
            for i, frame in enumerate(truth):
                save_image(frame, gt / f"frame_{i:04d}.png")
    except OSError as exc:
        raise CliError(f"cannot write stack: {exc}", EXIT_IO) from None
    log.info("wrote %d frames of %dx%d to %s", stack.frame_count, stack.width, stack.height, args.out)
    return EXIT_OK


def _parse_tile(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise CliError(f"--tile expects <w>x<h>, got {text!r}", EXIT_USAGE) from None
    if w < 1 or h < 1:
        raise CliError("--tile dimensions must be positive", EXIT_USAGE)
    return w, h


def cmd_reconstruct(args) -> int:
    if args.iters < 1:
        raise CliError("--iters must be >= 1", EXIT_USAGE)
    if args.overlap < 0:
        raise CliError("--overlap must be >= 0", EXIT_USAGE)
    jobs = args.jobs if args.jobs is not None else default_jobs()
    if jobs < 1:
        raise CliError("--jobs must be >= 1", EXIT_USAGE)
    tile = _parse_tile(args.tile) if args.tile else None
    profile = _profile(args.profile)
    stack = _load_stack(args.stack)
    scale = args.scale or stack.scale_factor or 8
    if scale <= 1 and args.scale is None:
        scale = 8
    prior = _load_png(args.prior).pixels if args.prior else bicubic_prior(stack, scale)
    config = InferenceConfig.from_profile(profile, iterations=args.iters, scale=scale, rng_seed=args.seed)
    try:
        sr, fluorophores, trace = run_reconstruction(stack, prior, config, tile, args.overlap, jobs)
    except DimensionError as exc:
        raise CliError(str(exc), EXIT_DIMS) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    try:
        out = ensure_dir_writable(args.out)
        save_image(sr, out / "sr.png")
        with open(out / "fluorophores.json", "w") as fh:
            json.dump(fluorophores, fh, indent=1)
        with open(out / "trace.json", "w") as fh:
            json.dump(trace, fh, indent=1)
    except OSError as exc:
        raise CliError(f"cannot write results: {exc}", EXIT_IO) from None
    return EXIT_OK


def _json_number(v: float):
    if math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return v


def evaluate(recon: Image, truth: Image | None = None, stack: FrameStack | None = None,
             reference: Image | None = None, scale: int | None = None) -> dict:
    """Metrics dictionary; PSNR/SSIM need ``truth``, RSP/RSE need ``stack`` or ``reference``."""
    out = {}
    if truth is not None:
        if truth.shape != recon.shape:
            raise DimensionError(
                f"dimension mismatch: recon {recon.width}x{recon.height} vs truth {truth.width}x{truth.height}"
            )
        out["psnr_db"] = _json_number(psnr(truth, recon))
        out["ssim"] = ssim(truth, recon)
    if stack is not None or reference is not None:
        ref = reference if reference is not None else temporal_mean(stack)
        if scale is None:
            scale = recon.width // ref.width if ref.width else 0
        if scale < 1 or recon.shape != (ref.height * scale, ref.width * scale):
            raise DimensionError(
                f"dimension mismatch: recon {recon.width}x{recon.height} vs reference "
                f"{ref.width}x{ref.height}"
            )
        out.update(rsp_rse(ref, recon, scale).to_json())
    return out


def cmd_evaluate(args) -> int:
    if args.truth is None and args.stack is None:
        raise CliError("evaluate needs --truth and/or --stack", EXIT_USAGE)
    recon = _load_png(args.recon)
    truth = _load_png(args.truth) if args.truth else None
    stack = _load_stack(args.stack) if args.stack else None
    reference = _load_png(args.reference) if args.reference else None
    scale = args.scale
    if scale is None and stack is not None and stack.scale_factor > 1:
        scale = stack.scale_factor
    try:
        metrics = evaluate(recon, truth, stack, reference, scale)
    except DimensionError as exc:
        raise CliError(str(exc), EXIT_DIMS) from None
    print(json.dumps(metrics))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fluoroforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a low-resolution stack from a density PNG")
    p.add_argument("--input", required=True, help="16-bit grayscale density map")
    p.add_argument("--profile", help="calibration profile JSON (default: bundled mEos3.2-like)")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--count-scale", type=float, default=SimulationConfig.count_scale,
                   help="expected fluorophores per unit of density")
    p.add_argument("--seed", type=int)
    p.add_argument("--emit-ground-truth", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="Bayesian reconstruction of a stack")
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prior", help="high-resolution prior PNG (default: bicubic temporal mean)")
    p.add_argument("--profile", help="calibration profile JSON (default: bundled mEos3.2-like)")
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--scale", type=int, help="upsampling factor (default: from the stack manifest)")
    p.add_argument("--tile", help="tile size <w>x<h> in stack pixels (default: no tiling)")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--jobs", type=int, help=f"parallel tiles (default: CPUs, capped by ${THREADS_ENV})")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="print quality metrics as JSON")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", help="ground truth PNG (enables PSNR/SSIM)")
    p.add_argument("--stack", help="stack directory (enables RSP/RSE against its temporal mean)")
    p.add_argument("--reference", help="diffraction-limited reference PNG overriding the temporal mean")
    p.add_argument("--scale", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
