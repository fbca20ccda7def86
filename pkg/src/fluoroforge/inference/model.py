"""Observation model shared by the E- and M-steps.

A fluorophore at high-resolution position ``(x, y)`` with peak ``i0`` and width
``sigma`` contributes a block-averaged Gaussian to the low-resolution frames
in which it emits. Because the Gaussian is separable and block averaging acts
on rows and columns independently, the low-resolution footprint on a patch is
``i0 / scale**2 * outer(Ey, Ex)`` with ``Ex``/``Ey`` the per-block sums of the
1-D Gaussian profiles. Everything the M-step needs reduces to these vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from ..imaging import FrameStack, Image
from ..photophysics import (
    PSF_TRUNCATION,
    CalibrationProfile,
    FluorophoreState,
    PhotonModel,
    TransferTable,
    default_profile,
)

EMITTING = int(FluorophoreState.EMITTING)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BayesPriors:
    p_f: float = 0.3
    p_n: float = 0.7

    def __post_init__(self):
        if not (self.p_f > 0 and self.p_n > 0) or abs(self.p_f + self.p_n - 1.0) > 1e-9:
            raise ValueError("p_f and p_n must be positive and sum to 1")

    @property
    def log_odds(self) -> float:
        return math.log(self.p_f / self.p_n)


def _default_profile_field(name):
    return field(default_factory=lambda: getattr(default_profile(), name))


@dataclass(frozen=True)
class InferenceConfig:
    iterations: int = 60
    neighbors_per_fluorophore: int = 4
    jitter_limit: float = 8.0
    scale: int = 8
    noise_sigma: float | None = None
    priors: BayesPriors = field(default_factory=BayesPriors)
    transfer: TransferTable = _default_profile_field("transfer")
    photon: PhotonModel = _default_profile_field("photon")
    initial_state_probs: tuple[float, float, float] = _default_profile_field("initial_state_probs")
    sigma_init: float = field(default_factory=lambda: default_profile().psf.mean_sigma())
    sigma_bounds: tuple[float, float] | None = None
    rng_seed: int | None = None
    convergence_tol: float = 1e-3
    plateau_iterations: int = 5
    candidate_threshold: float = 0.02
    candidate_cap: int = 2000
    cap_reference_area: int = 480 * 480
    background_percentile: float = 10.0
    cg_max_iter: int = 30

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.jitter_limit < 0:
            raise ValueError("jitter_limit must be >= 0")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.neighbors_per_fluorophore < 0:
            raise ValueError("neighbors_per_fluorophore must be >= 0")
        if self.noise_sigma is not None and not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        if not self.sigma_init > 0:
            raise ValueError("sigma_init must be positive")
        if self.sigma_bounds is None:
            object.__setattr__(self, "sigma_bounds", (0.5 * self.sigma_init, 2.0 * self.sigma_init))
        lo, hi = self.sigma_bounds
        if not 0 < lo <= self.sigma_init <= hi:
            raise ValueError("sigma_bounds must bracket sigma_init and be positive")

    @classmethod
    def from_profile(cls, profile: CalibrationProfile, **overrides) -> "InferenceConfig":
        sig = profile.psf.sigmas
        params = dict(
            transfer=profile.transfer,
            photon=profile.photon,
            initial_state_probs=profile.initial_state_probs,
            sigma_init=profile.psf.mean_sigma(),
            sigma_bounds=(0.5 * float(sig.min()), 1.5 * float(sig.max())),
            noise_sigma=profile.noise_sigma if profile.noise_sigma > 0 else None,
        )
        params.update(overrides)
        return cls(**params)

    def with_(self, **changes) -> "InferenceConfig":
        return replace(self, **changes)


@dataclass
class FluorophoreHypothesis:
    x: float
    y: float
    i0: float
    sigma: float
    states: np.ndarray | None = None
    accepted: bool = False

    def __post_init__(self):
        if not (self.i0 > 0 and self.sigma > 0):
            raise ValueError("hypothesis needs positive i0 and sigma")

    @property
    def emitting(self) -> np.ndarray:
        if self.states is None:
            return np.zeros(0, dtype=bool)
        return self.states == EMITTING

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "i0": self.i0, "sigma": self.sigma}


@dataclass
class ReconstructionResult:
    sr_image: Image
    fluorophores: list[FluorophoreHypothesis]
    log_posterior_trace: list[float]
    iterations_run: int
    count_trace: list[int] = field(default_factory=list)
    peak: float = 0.0

    def trace_json(self) -> dict:
        return {
            "iterations_run": self.iterations_run,
            "log_posterior": self.log_posterior_trace,
            "accepted_counts": self.count_trace,
        }


@dataclass(frozen=True)
class Patch:
    """Low-resolution rectangle ``[row, row + height) x [col, col + width)``."""

    row: int
    col: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.row + self.height), slice(self.col, self.col + self.width)

    @classmethod
    def around(cls, x: float, y: float, radius: float, scale: int, shape: tuple[int, int]) -> "Patch":
        """Smallest low-res patch covering the high-res disc's bounding box, clipped to ``shape``."""
        h, w = shape
        c0 = max(0, int(math.floor((x - radius) / scale)))
        c1 = min(w, int(math.floor((x + radius) / scale)) + 1)
        r0 = max(0, int(math.floor((y - radius) / scale)))
        r1 = min(h, int(math.floor((y + radius) / scale)) + 1)
        return cls(r0, c0, max(r1 - r0, 0), max(c1 - c0, 0))


@dataclass
class ResidualContext:
    """Data minus background minus every other fluorophore, on one patch.

    ``residual`` has shape (T, patch.height, patch.width).
    """

    patch: Patch
    residual: np.ndarray
    noise_sigma: float
    scale: int
    canvas_shape: tuple[int, int]  # high-res (height, width)


def axis_profile(center: float, sigma: float, start: int, n: int, scale: int, derivatives: bool = False):
    """Per-block sums of ``exp(-(u - center)^2 / 2 sigma^2)`` over high-res pixel centers.

    With ``derivatives`` also returns the derivatives with respect to
    ``center`` and ``sigma``.
    """
    u = np.arange(start * scale, (start + n) * scale) + 0.5
    d = u - center
    e = np.exp(-(d * d) / (2.0 * sigma * sigma))
    prof = e.reshape(n, scale).sum(axis=1)
    if not derivatives:
        return prof
    s2 = sigma * sigma
    de_dc = (e * d / s2).reshape(n, scale).sum(axis=1)
    de_ds = (e * d * d / (s2 * sigma)).reshape(n, scale).sum(axis=1)
    return prof, de_dc, de_ds


def footprint(x: float, y: float, i0: float, sigma: float, patch: Patch, scale: int) -> np.ndarray:
    """Block-averaged Gaussian spot on ``patch``, in low-resolution intensity units."""
    ex = axis_profile(x, sigma, patch.col, patch.width, scale)
    ey = axis_profile(y, sigma, patch.row, patch.height, scale)
    return (i0 / (scale * scale)) * np.outer(ey, ex)


def support_patch(h: FluorophoreHypothesis, scale: int, shape: tuple[int, int]) -> Patch:
    return Patch.around(h.x, h.y, PSF_TRUNCATION * h.sigma, scale, shape)


def estimate_background(data: np.ndarray, percentile: float = 10.0) -> np.ndarray:
    """Per-frame DC level as a low percentile of that frame's pixels."""
    return np.percentile(data.reshape(data.shape[0], -1), percentile, axis=1)


def estimate_noise_sigma(data: np.ndarray) -> float:
    """Median temporal standard deviation over the dimmest tenth of pixels."""
    mean = data.mean(axis=0).ravel()
    std = data.std(axis=0).ravel()
    n = max(1, int(math.ceil(0.1 * mean.size)))
    dim = np.argsort(mean, kind="stable")[:n]
    sigma = float(np.median(std[dim]))
    return sigma if sigma > 0 else 1e-3


def gaussian_loglik(residual: np.ndarray, noise_sigma: float) -> float:
    r = residual.ravel()
    return float(-0.5 * (r @ r) / noise_sigma**2 - r.size * (HALF_LOG_2PI + math.log(noise_sigma)))


def model_frames(shape: tuple[int, int, int], hypotheses, scale: int) -> np.ndarray:
    """Sum of footprints of every hypothesis in every frame where it emits."""
    T, H, W = shape
    model = np.zeros(shape)
    for h in hypotheses:
        if h.states is None:
            continue
        on = np.flatnonzero(h.emitting)
        if on.size == 0:
            continue
        p = support_patch(h, scale, (H, W))
        if p.height == 0 or p.width == 0:
            continue
        rs, cs = p.slices
        model[on, rs, cs] += footprint(h.x, h.y, h.i0, h.sigma, p, scale)
    return model


def frame_loglik(stack: FrameStack | np.ndarray, hypotheses, noise_sigma: float,
                 background=None, scale: int = 8) -> float:
    """Gaussian log-likelihood of all frames given the emitting hypotheses.

    ``background`` may be a scalar, a per-frame array, or ``None`` to use the
    per-frame 10th percentile.
    """
    if not noise_sigma > 0:
        raise ValueError("noise_sigma must be positive")
    data = stack.as_array() if isinstance(stack, FrameStack) else np.asarray(stack, dtype=np.float64)
    if background is None:
        background = estimate_background(data)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (data.shape[0],))
    resid = data - bg[:, None, None] - model_frames(data.shape, hypotheses, scale)
    return gaussian_loglik(resid, noise_sigma)


def log_intensity_prior(i0: float, photon: PhotonModel) -> float:
    """Log density of the log-normal peak-intensity prior (0 when degenerate)."""
    if photon.log_sigma == 0:
        return 0.0
    u = math.log(i0)
    s = photon.log_sigma
    return -u - math.log(s) - HALF_LOG_2PI - 0.5 * ((u - photon.log_mu) / s) ** 2


@numba.jit(nopython=True, nogil=True, cache=True)
def _axis_terms(center, sigma, start, n, scale):
    prof = np.zeros(n)
    dc = np.zeros(n)
    ds = np.zeros(n)
    s2 = sigma * sigma
    for b in range(n):
        for j in range(scale):
            d = (start + b) * scale + j + 0.5 - center
            e = np.exp(-d * d / (2.0 * s2))
            prof[b] += e
            dc[b] += e * d / s2
            ds[b] += e * d * d / (s2 * sigma)
    return prof, dc, ds


@numba.jit(nopython=True, nogil=True, cache=True)
def _nlp_kernel(x, y, u, v, R, n_emit, row, col, scale, noise_sigma, log_mu, log_sigma):
    h, w = R.shape
    i0 = np.exp(u)
    sigma = np.exp(v)
    ex, ex_c, ex_s = _axis_terms(x, sigma, col, w, scale)
    ey, ey_c, ey_s = _axis_terms(y, sigma, row, h, scale)
    a = i0 / (scale * scale)

    exx = 0.0
    ex_exc = 0.0
    ex_exs = 0.0
    for j in range(w):
        exx += ex[j] * ex[j]
        ex_exc += ex[j] * ex_c[j]
        ex_exs += ex[j] * ex_s[j]
    eyy = 0.0
    ey_eyc = 0.0
    ey_eys = 0.0
    for i in range(h):
        eyy += ey[i] * ey[i]
        ey_eyc += ey[i] * ey_c[i]
        ey_eys += ey[i] * ey_s[i]

    # bilinear forms ey^T R ex and friends
    kR = 0.0
    kR_x = 0.0
    kR_y = 0.0
    kR_s = 0.0
    for i in range(h):
        r_ex = 0.0
        r_exc = 0.0
        r_exs = 0.0
        for j in range(w):
            r = R[i, j]
            r_ex += r * ex[j]
            r_exc += r * ex_c[j]
            r_exs += r * ex_s[j]
        kR += ey[i] * r_ex
        kR_x += ey[i] * r_exc
        kR_y += ey_c[i] * r_ex
        kR_s += ey_s[i] * r_ex + ey[i] * r_exs
    kR *= a
    kR_x *= a
    kR_y *= a
    kR_s *= a
    kk = a * a * eyy * exx

    inv = 1.0 / (2.0 * noise_sigma * noise_sigma)
    f = inv * (n_emit * kk - 2.0 * kR)
    g = np.empty(4)
    g[0] = inv * (n_emit * a * a * eyy * 2.0 * ex_exc - 2.0 * kR_x)
    g[1] = inv * (n_emit * a * a * exx * 2.0 * ey_eyc - 2.0 * kR_y)
    g[2] = inv * (n_emit * 2.0 * kk - 2.0 * kR)
    dkk_s = a * a * 2.0 * (ey_eys * exx + eyy * ex_exs)
    g[3] = sigma * inv * (n_emit * dkk_s - 2.0 * kR_s)
    if log_sigma > 0:
        s2 = log_sigma * log_sigma
        z = u - log_mu
        f += u + 0.5 * z * z / s2
        g[2] += 1.0 + z / s2
    return f, g


def neg_log_posterior(theta, summed_residual: np.ndarray, n_emit: int, patch: Patch,
                      scale: int, noise_sigma: float, photon: PhotonModel):
    """Negative log-posterior of one fluorophore, up to a parameter-free constant.

    ``theta = (x, y, log i0, log sigma)``. ``summed_residual`` is the residual
    summed over the ``n_emit`` frames in which the fluorophore emits. Returns
    ``(value, gradient)``.
    """
    x, y, u, v = (float(t) for t in theta)
    R = np.ascontiguousarray(summed_residual, dtype=np.float64)
    return _nlp_kernel(x, y, u, v, R, float(n_emit), patch.row, patch.col, scale,
                       noise_sigma, photon.log_mu, photon.log_sigma)
