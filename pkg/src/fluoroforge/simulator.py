"""Stochastic simulation of blinking fluorophore image stacks from a density map.

The pipeline per frame: render emitting fluorophores on the high-resolution
canvas, add a DC background, bin down to the sensor grid, add read noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import FrameStack, Image, add_gaussian_noise, downsample
from .photophysics import (
    CalibrationProfile,
    FluorophoreState,
    render_psf,
    sample_photon_intensity,
    sample_psf_width,
    step_states,
)


@dataclass
class Fluorophore:
    x: float
    y: float
    state: FluorophoreState
    base_sigma: float = 0.0
    id: int = 0


@dataclass(frozen=True)
class SimulationConfig:
    frames: int = 200
    scale: int = 8
    count_scale: float = 0.1
    rng_seed: int | None = None
    exposure_ms: float = 50.0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not self.count_scale > 0:
            raise ValueError("count_scale must be positive")


def populate_fluorophores(density: Image, count_scale: float, rng: np.random.Generator,
                          initial_state_probs=(0.0, 1.0, 0.0)) -> list[Fluorophore]:
    """Scatter fluorophores with Poisson(count_scale * pixel value) per pixel.

    Positions are uniform within their source pixel.
    """
    if not count_scale > 0:
        raise ValueError("count_scale must be positive")
    counts = rng.poisson(count_scale * density.pixels)
    rows, cols = np.nonzero(counts)
    reps = counts[rows, cols]
    rows = np.repeat(rows, reps)
    cols = np.repeat(cols, reps)
    n = rows.size
    xs = cols + rng.random(n)
    ys = rows + rng.random(n)
    states = rng.choice(3, size=n, p=np.asarray(initial_state_probs, dtype=float))
    return [
        Fluorophore(float(x), float(y), FluorophoreState(int(s)), id=i)
        for i, (x, y, s) in enumerate(zip(xs, ys, states))
    ]


def simulate_frame(population: list[Fluorophore], profile: CalibrationProfile,
                   canvas_dims: tuple[int, int], rng: np.random.Generator,
                   pixel_size_nm: float = 1.0) -> tuple[Image, list[Fluorophore]]:
    """Render one high-resolution frame, then advance every fluorophore one step.

    The frame shows the states the fluorophores hold on entry; the returned
    population carries the states for the next frame. Each emitting
    fluorophore gets a freshly drawn PSF width and peak intensity.
    """
    canvas = np.zeros(canvas_dims)
    updated = []
    for f in population:
        if f.state == FluorophoreState.EMITTING:
            sigma = sample_psf_width(profile.psf, rng)
            i0 = sample_photon_intensity(profile.photon, rng)
            render_psf(canvas, f.x, f.y, i0, sigma)
            f = Fluorophore(f.x, f.y, f.state, sigma, f.id)
        updated.append(f)
    if updated:
        states = np.array([f.state for f in updated], dtype=np.int8)
        nxt = step_states(states, profile.transfer, rng)
        updated = [
            Fluorophore(f.x, f.y, FluorophoreState(int(s)), f.base_sigma, f.id)
            for f, s in zip(updated, nxt)
        ]
    return Image(canvas, pixel_size_nm), updated


def add_background(image: Image, strength_factor: float) -> Image:
    """Add a uniform DC offset of ``strength_factor * mean(image)``."""
    if strength_factor < 0:
        raise ValueError("background strength factor must be nonnegative")
    offset = strength_factor * float(image.pixels.mean())
    return Image(image.pixels + offset, image.pixel_size_nm)


def simulate_stack(density: Image, profile: CalibrationProfile, config: SimulationConfig,
                   keep_ground_truth: bool = False) -> tuple[FrameStack, list[Image]]:
    """Run the full simulation; returns the low-resolution stack and, if asked,
    the high-resolution frames before background and binning."""
    h, w = density.shape
    if h % config.scale or w % config.scale:
        raise ValueError(
            f"scale {config.scale} does not divide density dimensions {w}x{h}"
        )
    rng = np.random.default_rng(config.rng_seed)
    population = populate_fluorophores(density, config.count_scale, rng, profile.initial_state_probs)
    lo, hi = profile.background_factor_range
    factor = rng.uniform(lo, hi) if hi > lo else lo

    frames, truth = [], []
    for _ in range(config.frames):
        hr, population = simulate_frame(population, profile, (h, w), rng, density.pixel_size_nm)
        if keep_ground_truth:
            truth.append(hr)
        lr = downsample(add_background(hr, factor), config.scale)
        frames.append(add_gaussian_noise(lr, profile.noise_sigma, rng))

    stack = FrameStack(
        tuple(frames),
        exposure_ms=config.exposure_ms,
        scale_factor=config.scale,
        rng_seed=config.rng_seed,
        profile_digest=profile.digest(),
    )
    return stack, truth


def curve_phantom(height: int, width: int, n_curves: int = 3, thickness: float = 1.5,
                  seed: int | None = 0) -> Image:
    """Filament-like test object: a few straight and sinusoidal curves.

    Each curve is an anti-aliased band of half-width ``thickness`` with value 1.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    out = np.zeros((height, width))
    for i in range(n_curves):
        if i % 2 == 0:
            angle = rng.uniform(0, np.pi)
            cx, cy = rng.uniform(0.3, 0.7) * width, rng.uniform(0.3, 0.7) * height
            d = np.abs((xx - cx) * np.sin(angle) - (yy - cy) * np.cos(angle))
        else:
            amp = rng.uniform(0.05, 0.2) * height
            freq = rng.uniform(0.5, 2.0) * 2 * np.pi / width
            phase = rng.uniform(0, 2 * np.pi)
            base = rng.uniform(0.3, 0.7) * height
            d = np.abs(yy - (base + amp * np.sin(freq * xx + phase)))
        out = np.maximum(out, np.clip(thickness + 0.5 - d, 0.0, 1.0))
    return Image(out)
