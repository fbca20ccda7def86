"""Prior-initialized EM over a factorial HMM of blinking fluorophores.

Each fluorophore is its own three-state chain; the chains couple only through
the summed image. The E-step re-samples one chain at a time with FFBS while
the others are held fixed (a Gibbs sweep over chains). The M-step fits the
chain's position, brightness and width by conjugate gradient. A likelihood
ratio with prior odds then decides whether the fluorophore stays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..imaging import FrameStack, Image
from ..photophysics import render_psf
from .conjugate_gradient import minimize_cg
from .ffbs import ffbs, safe_log
from .model import (
    EMITTING,
    BayesPriors,
    FluorophoreHypothesis,
    InferenceConfig,
    Patch,
    ReconstructionResult,
    ResidualContext,
    estimate_background,
    estimate_noise_sigma,
    footprint,
    gaussian_loglik,
    log_intensity_prior,
    neg_log_posterior,
    support_patch,
)

log = logging.getLogger(__name__)

DEDUP_RADIUS = 0.5


class MStepError(RuntimeError):
    """The M-step was asked to fit a fluorophore that never emits."""


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def initialize_from_prior(prior, config: InferenceConfig, rng: np.random.Generator,
                          stack_shape: tuple[int, int] | None = None) -> list[FluorophoreHypothesis]:
    """Seed candidate fluorophores from a high-resolution prior image.

    Every pixel brighter than ``candidate_threshold`` times the prior maximum
    yields one candidate with peak ``sqrt(I)`` placed at the pixel center plus
    uniform jitter in ``[-jitter_limit, jitter_limit]`` per axis. The brightest
    pixels win when the area-scaled cap is reached.
    """
    img = _pixels(prior)
    if np.any(img < 0):
        raise ValueError("prior must be nonnegative")
    H, W = img.shape
    if stack_shape is not None and (H, W) != (stack_shape[0] * config.scale, stack_shape[1] * config.scale):
        raise ValueError(
            f"dimension mismatch: prior {W}x{H} is not {config.scale}x the stack "
            f"{stack_shape[1]}x{stack_shape[0]}"
        )
    peak = float(img.max())
    if peak <= 0:
        return []
    flat = img.ravel()
    idx = np.flatnonzero(flat >= config.candidate_threshold * peak)
    idx = idx[np.argsort(-flat[idx], kind="stable")]
    cap = max(1, int(round(config.candidate_cap * (H * W) / config.cap_reference_area)))
    idx = idx[:cap]

    rows, cols = np.divmod(idx, W)
    J = config.jitter_limit
    jx = rng.uniform(-J, J, idx.size) if J > 0 else np.zeros(idx.size)
    jy = rng.uniform(-J, J, idx.size) if J > 0 else np.zeros(idx.size)
    xs = np.clip(cols + 0.5 + jx, 0.0, np.nextafter(W, 0))
    ys = np.clip(rows + 0.5 + jy, 0.0, np.nextafter(H, 0))
    return [
        FluorophoreHypothesis(float(x), float(y), math.sqrt(float(v)), config.sigma_init)
        for x, y, v in zip(xs, ys, flat[idx])
    ]


def residual_context(data: np.ndarray, background: np.ndarray, others: np.ndarray,
                     patch: Patch, noise_sigma: float, scale: int) -> ResidualContext:
    """Residual of ``data`` after background and the other fluorophores' model."""
    rs, cs = patch.slices
    resid = data[:, rs, cs] - background[:, None, None] - others[:, rs, cs]
    H, W = data.shape[1:]
    return ResidualContext(patch, resid, noise_sigma, scale, (H * scale, W * scale))


def emission_gain(h: FluorophoreHypothesis, ctx: ResidualContext, params=None) -> np.ndarray:
    """Per-frame log-likelihood of "emitting" minus "not emitting"."""
    x, y, i0, sigma = params if params is not None else (h.x, h.y, h.i0, h.sigma)
    k = footprint(x, y, i0, sigma, ctx.patch, ctx.scale)
    proj = np.tensordot(ctx.residual, k, axes=([1, 2], [0, 1]))
    return (2.0 * proj - float((k * k).sum())) / (2.0 * ctx.noise_sigma**2)


def e_step_ffbs(h: FluorophoreHypothesis, ctx: ResidualContext, config: InferenceConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Sample the fluorophore's state path given everything else fixed."""
    gain = emission_gain(h, ctx)
    log_em = np.zeros((gain.size, 3))
    log_em[:, EMITTING] = gain
    return ffbs(log_em, np.asarray(config.initial_state_probs), config.transfer.matrix(), rng)


def _bounds(h: FluorophoreHypothesis, ctx: ResidualContext, config: InferenceConfig):
    J = config.jitter_limit
    Hh, Wh = ctx.canvas_shape
    lo_s, hi_s = config.sigma_bounds
    lower = np.array([max(0.0, h.x - J), max(0.0, h.y - J), -np.inf, math.log(lo_s)])
    upper = np.array([min(float(Wh), h.x + J), min(float(Hh), h.y + J), np.inf, math.log(hi_s)])
    if config.photon.log_sigma == 0:
        lower[2] = upper[2] = config.photon.log_mu
    return lower, upper


def m_step_map(h: FluorophoreHypothesis, ctx: ResidualContext, config: InferenceConfig):
    """MAP estimate of ``(x, y, i0, sigma)`` with the state path held fixed.

    Position moves at most ``jitter_limit`` per call; the returned point never
    has a lower conditional log-posterior than the (box-projected) entry point.
    """
    on = h.emitting
    n_emit = int(on.sum())
    if n_emit == 0:
        raise MStepError("fluorophore has no emitting frames")
    R = ctx.residual[on].sum(axis=0)

    # positions in units of the PSF width keep the problem well conditioned
    scaling = np.array([config.sigma_init, config.sigma_init, 1.0, 1.0])

    def objective(z):
        f, g = neg_log_posterior(z * scaling, R, n_emit, ctx.patch, ctx.scale, ctx.noise_sigma, config.photon)
        return f, g * scaling

    lower, upper = _bounds(h, ctx, config)
    theta0 = np.clip([h.x, h.y, math.log(h.i0), math.log(h.sigma)], lower, upper)
    f0 = objective(theta0 / scaling)[0]
    res = minimize_cg(objective, theta0 / scaling, lower / scaling, upper / scaling,
                      max_iter=config.cg_max_iter)
    assert res.fun <= f0 + 1e-9 * (1.0 + abs(f0)), "M-step increased the negative log-posterior"
    x, y, u, v = res.x * scaling
    return float(x), float(y), math.exp(u), math.exp(v)


def accept_test(h: FluorophoreHypothesis, ctx: ResidualContext, priors: BayesPriors,
                noise_sigma: float | None = None) -> tuple[bool, float]:
    """Posterior odds of "fluorophore here" versus "nothing here", in log space.

    Returns ``(accepted, log_ratio)``; the fluorophore is accepted only when
    the odds strictly exceed one.
    """
    if noise_sigma is not None and noise_sigma != ctx.noise_sigma:
        ctx = ResidualContext(ctx.patch, ctx.residual, noise_sigma, ctx.scale, ctx.canvas_shape)
    on = h.emitting
    loglik_gain = float(emission_gain(h, ctx)[on].sum()) if on.any() else 0.0
    log_ratio = loglik_gain + priors.log_odds
    return log_ratio > 0.0, log_ratio


def expand_neighbors(accepted, config: InferenceConfig, rng: np.random.Generator,
                     existing=None, canvas_shape: tuple[int, int] | None = None) -> list[FluorophoreHypothesis]:
    """Propose new candidates around each accepted fluorophore.

    Each parent gets ``neighbors_per_fluorophore`` proposals at a uniform
    distance in ``(0, jitter_limit]`` and uniform angle. Proposals within half
    a pixel of an existing hypothesis or an earlier proposal are dropped.
    """
    accepted = list(accepted)
    if not accepted or config.neighbors_per_fluorophore == 0:
        return []
    existing = accepted if existing is None else list(existing)
    grid: dict[tuple[int, int], list[tuple[float, float]]] = {}

    def cell(x, y):
        return int(math.floor(x / DEDUP_RADIUS)), int(math.floor(y / DEDUP_RADIUS))

    def near(x, y):
        cx, cy = cell(x, y)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for px, py in grid.get((cx + dx, cy + dy), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < DEDUP_RADIUS**2:
                        return True
        return False

    def insert(x, y):
        grid.setdefault(cell(x, y), []).append((x, y))

    for e in existing:
        insert(e.x, e.y)

    n = config.neighbors_per_fluorophore
    J = config.jitter_limit
    out = []
    for parent in accepted:
        dist = J * (1.0 - rng.random(n))
        angle = 2.0 * math.pi * rng.random(n)
        for d, a in zip(dist, angle):
            x = parent.x + d * math.cos(a)
            y = parent.y + d * math.sin(a)
            if canvas_shape is not None:
                Hh, Wh = canvas_shape
                if not (0.0 <= x < Wh and 0.0 <= y < Hh):
                    continue
            if near(x, y):
                continue
            insert(x, y)
            out.append(FluorophoreHypothesis(x, y, parent.i0, parent.sigma))
    return out


def render_fluorophores(fluorophores, shape: tuple[int, int]) -> np.ndarray:
    canvas = np.zeros(shape)
    for f in fluorophores:
        render_psf(canvas, f.x, f.y, f.i0, f.sigma)
    return canvas


def state_log_prob(states: np.ndarray, init, trans) -> float:
    li, lt = safe_log(init), safe_log(trans)
    return float(li[states[0]] + lt[states[:-1], states[1:]].sum())


@dataclass
class _Slot:
    hyp: FluorophoreHypothesis
    patch: Patch | None = None
    kernel: np.ndarray | None = None


class _Sampler:
    """Mutable EM state: data, background, summed model and live fluorophores."""

    def __init__(self, data, background, noise_sigma, config, rng):
        self.data = data
        self.bg = background
        self.noise = noise_sigma
        self.config = config
        self.rng = rng
        self.model = np.zeros_like(data)
        T, H, W = data.shape
        self.lr_shape = (H, W)
        self.hr_shape = (H * config.scale, W * config.scale)
        self.radius = config.jitter_limit + 4.0 * config.sigma_bounds[1]
        self.slots: list[_Slot] = []

    def _remove(self, slot: _Slot):
        if slot.patch is None:
            return
        on = np.flatnonzero(slot.hyp.emitting)
        rs, cs = slot.patch.slices
        self.model[on, rs, cs] -= slot.kernel
        slot.patch = slot.kernel = None

    def _add(self, slot: _Slot):
        h = slot.hyp
        p = support_patch(h, self.config.scale, self.lr_shape)
        if p.height == 0 or p.width == 0:
            return
        k = footprint(h.x, h.y, h.i0, h.sigma, p, self.config.scale)
        on = np.flatnonzero(h.emitting)
        rs, cs = p.slices
        self.model[on, rs, cs] += k
        slot.patch, slot.kernel = p, k

    def update(self, slot: _Slot) -> bool:
        """One E/M/accept round for a single fluorophore; returns whether it survives."""
        cfg = self.config
        h = slot.hyp
        self._remove(slot)
        patch = Patch.around(h.x, h.y, self.radius, cfg.scale, self.lr_shape)
        if patch.height == 0 or patch.width == 0:
            h.accepted = False
            return False
        ctx = residual_context(self.data, self.bg, self.model, patch, self.noise, cfg.scale)
        h.states = e_step_ffbs(h, ctx, cfg, self.rng)
        if not h.emitting.any():
            h.accepted = False
            return False
        h.x, h.y, h.i0, h.sigma = m_step_map(h, ctx, cfg)
        ok, _ = accept_test(h, ctx, cfg.priors)
        h.accepted = ok
        if ok:
            self._add(slot)
        return ok

    def log_posterior(self) -> float:
        resid = self.data - self.bg[:, None, None] - self.model
        total = gaussian_loglik(resid, self.noise)
        init, trans = self.config.initial_state_probs, self.config.transfer.matrix()
        for s in self.slots:
            total += log_intensity_prior(s.hyp.i0, self.config.photon)
            total += state_log_prob(s.hyp.states, init, trans)
        return total


def reconstruct(stack: FrameStack | np.ndarray, prior, config: InferenceConfig) -> ReconstructionResult:
    """Refine a prior super-resolution image against the raw frames.

    Stops after ``config.iterations`` sweeps, or earlier once the total
    log-posterior has changed by less than ``convergence_tol`` (relative) for
    ``plateau_iterations`` consecutive sweeps.
    """
    if isinstance(stack, FrameStack):
        data = stack.as_array()
        pixel_size = stack.pixel_size_nm
    else:
        data = np.asarray(stack, dtype=np.float64)
        pixel_size = 1.0
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("empty stack")
    T, H, W = data.shape
    prior_px = _pixels(prior)
    if prior_px.shape != (H * config.scale, W * config.scale):
        raise ValueError(
            f"dimension mismatch: prior {prior_px.shape[1]}x{prior_px.shape[0]} is not "
            f"{config.scale}x the stack {W}x{H}"
        )

    rng = np.random.default_rng(config.rng_seed)
    background = estimate_background(data, config.background_percentile)
    noise = config.noise_sigma if config.noise_sigma is not None else estimate_noise_sigma(data)
    sampler = _Sampler(data, background, noise, config, rng)

    candidates = initialize_from_prior(prior_px, config, rng)
    trace = [sampler.log_posterior()]
    counts = [0]
    plateau = 0
    iterations_run = 0
    log.info("reconstruct: %d frames of %dx%d, %d initial candidates", T, W, H, len(candidates))

    live = [_Slot(h) for h in candidates]
    for it in range(config.iterations):
        iterations_run = it + 1
        order = rng.permutation(len(live))
        survivors = [live[i] for i in order if sampler.update(live[i])]
        sampler.slots = survivors

        proposals = expand_neighbors(
            [s.hyp for s in survivors], config, rng,
            existing=[s.hyp for s in survivors], canvas_shape=sampler.hr_shape,
        )
        for h in proposals:
            slot = _Slot(h)
            if sampler.update(slot):
                sampler.slots.append(slot)
        live = list(sampler.slots)

        trace.append(sampler.log_posterior())
        counts.append(len(live))
        log.debug("iteration %d: %d fluorophores, log-posterior %.6g", iterations_run, counts[-1], trace[-1])
        if not live:
            break
        prev = trace[-2]
        rel = abs(trace[-1] - prev) / max(abs(prev), 1.0)
        plateau = plateau + 1 if rel < config.convergence_tol else 0
        if plateau >= config.plateau_iterations:
            break

    fluorophores = [s.hyp for s in sampler.slots]
    canvas = render_fluorophores(fluorophores, sampler.hr_shape)
    peak = float(canvas.max())
    sr = canvas / peak if peak > 0 else canvas
    return ReconstructionResult(
        sr_image=Image(sr, pixel_size / config.scale),
        fluorophores=fluorophores,
        log_posterior_trace=trace,
        iterations_run=iterations_run,
        count_trace=counts,
        peak=peak,
    )
