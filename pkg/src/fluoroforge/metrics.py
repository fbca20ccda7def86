"""Reconstruction quality metrics: PSNR, SSIM, and resolution-scaled RSP/RSE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize

from .imaging import RAW_MAX, Image, block_mean

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")


def psnr(truth, test, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pixels(truth), _pixels(test)
    _check_same_shape(a, b)
    if not max_value > 0:
        raise ValueError("max_value must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(truth, test, data_range: float = 1.0) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5).

    Local statistics are computed with reflected borders; the mean excludes a
    5-pixel margin where the window overhangs the image.
    """
    a, b = _pixels(truth), _pixels(test)
    _check_same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    win = _gaussian_window()

    def filt(x):
        return ndimage.correlate(x, win, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    pad = SSIM_WINDOW // 2
    return float((num / den)[pad:-pad, pad:-pad].mean())


@dataclass(frozen=True)
class SquirrelFit:
    rsp: float
    rse: float
    alpha: float
    beta: float
    sigma_star: float

    def to_json(self) -> dict:
        return {"rsp": self.rsp, "rse": self.rse, "sigma_star": self.sigma_star,
                "alpha": self.alpha, "beta": self.beta}


def _resolution_scale(sr: np.ndarray, sigma_lr: float, scale: int) -> np.ndarray:
    blurred = ndimage.gaussian_filter(sr, sigma_lr * scale, mode="reflect")
    return block_mean(blurred, scale)


def _affine_fit(ref: np.ndarray, model: np.ndarray) -> tuple[float, float, float]:
    """Least-squares ``ref ~ alpha * model + beta``; returns (alpha, beta, sum of squares)."""
    m = model.ravel()
    r = ref.ravel()
    m_mean, r_mean = m.mean(), r.mean()
    dm = m - m_mean
    var = float(dm @ dm)
    alpha = float(dm @ (r - r_mean)) / var if var > 0 else 0.0
    beta = float(r_mean - alpha * m_mean)
    resid = r - (alpha * m + beta)
    return alpha, beta, float(resid @ resid)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    return float(da @ db) / den if den > 0 else 0.0


def rsp_rse(reference, sr, scale: int, sigma_range=(0.5, 4.0), n_sigma: int = 20,
            refine: bool = True) -> SquirrelFit:
    """Compare a super-resolution image with a diffraction-limited reference.

    The SR image is blurred by a Gaussian of width ``sigma`` (low-res px),
    binned to the reference grid and affinely fitted to it. ``sigma`` is
    chosen on a grid over ``sigma_range`` and then polished with a bounded
    scalar search; the polish is kept only if it lowers the residual. RSE is
    reported in raw 16-bit units.
    """
    ref, hr = _pixels(reference), _pixels(sr)
    if hr.shape != (ref.shape[0] * scale, ref.shape[1] * scale):
        raise ValueError(
            f"dimension mismatch: SR {hr.shape[1]}x{hr.shape[0]} is not {scale}x "
            f"reference {ref.shape[1]}x{ref.shape[0]}"
        )
    lo, hi = sigma_range
    if n_sigma < 1 or hi < lo:
        raise ValueError("empty sigma range")
    grid = np.linspace(lo, hi, n_sigma)

    def sse(s):
        return _affine_fit(ref, _resolution_scale(hr, s, scale))[2]

    costs = [sse(s) for s in grid]
    k = int(np.argmin(costs))
    best_sigma, best_cost = float(grid[k]), costs[k]
    if refine and n_sigma > 1 and best_cost > 0:
        a = grid[max(k - 1, 0)]
        b = grid[min(k + 1, n_sigma - 1)]
        res = optimize.minimize_scalar(sse, bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-4})
        if res.fun < best_cost:
            best_sigma, best_cost = float(res.x), float(res.fun)

    model = _resolution_scale(hr, best_sigma, scale)
    alpha, beta, cost = _affine_fit(ref, model)
    fitted = alpha * model + beta
    rsp = _pearson(ref, fitted)
    rse = math.sqrt(cost / ref.size) * RAW_MAX
    return SquirrelFit(rsp=rsp, rse=rse, alpha=alpha, beta=beta, sigma_star=best_sigma)
