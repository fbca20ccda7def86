"""Fluorophore photophysics: three-state switching, Gaussian PSF, calibrated profiles."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import IntEnum
from importlib import resources
from pathlib import Path

import numpy as np

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
PSF_TRUNCATION = 4.0


class FluorophoreState(IntEnum):
    EMITTING = 0
    DARK = 1
    BLEACHED = 2


@dataclass(frozen=True)
class TransferTable:
    """Switching probabilities between successive frames.

    ``p1``/``p2`` leave the emitting state (to emitting/dark), ``p3``/``p4``/``p5``
    leave the dark state (to emitting/dark/bleached). Whatever mass ``p1 + p2``
    leaves unassigned is emitting-to-bleached.
    """

    p1: float
    p2: float
    p3: float
    p4: float
    p5: float

    def __post_init__(self):
        ps = (self.p1, self.p2, self.p3, self.p4, self.p5)
        if any(not 0.0 <= p <= 1.0 for p in ps):
            raise ValueError(f"transfer probabilities must lie in [0, 1], got {ps}")
        if self.p1 + self.p2 > 1.0 + 1e-9:
            raise ValueError("p1 + p2 must not exceed 1")
        if abs(self.p3 + self.p4 + self.p5 - 1.0) > 1e-9:
            raise ValueError("p3 + p4 + p5 must equal 1")

    @property
    def emitting_to_bleached(self) -> float:
        return max(0.0, 1.0 - self.p1 - self.p2)

    def matrix(self) -> np.ndarray:
        """Row-stochastic 3x3 matrix indexed by :class:`FluorophoreState`."""
        return np.array(
            [
                [self.p1, self.p2, self.emitting_to_bleached],
                [self.p3, self.p4, self.p5],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_json(self) -> dict:
        return {"p1": self.p1, "p2": self.p2, "p3": self.p3, "p4": self.p4, "p5": self.p5}


@dataclass(frozen=True)
class PsfModel:
    """Empirical FWHM distribution, in high-resolution pixels."""

    fwhm_table: tuple[tuple[float, float], ...]

    def __post_init__(self):
        table = tuple((float(f), float(w)) for f, w in self.fwhm_table)
        if not table:
            raise ValueError("fwhm_table must not be empty")
        if any(f <= 0 for f, _ in table):
            raise ValueError("all FWHM entries must be positive")
        weights = np.array([w for _, w in table])
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("fwhm_table weights must be nonnegative and sum to 1")
        object.__setattr__(self, "fwhm_table", table)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([fwhm_to_sigma(f) for f, _ in self.fwhm_table])

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.fwhm_table])

    def mean_sigma(self) -> float:
        return float(self.sigmas @ self.weights)


@dataclass(frozen=True)
class PhotonModel:
    """Log-normal distribution of the peak intensity ``I0``."""

    log_mu: float
    log_sigma: float

    def __post_init__(self):
        if self.log_sigma < 0:
            raise ValueError("log_sigma must be nonnegative")


@dataclass(frozen=True)
class CalibrationProfile:
    transfer: TransferTable
    psf: PsfModel
    photon: PhotonModel
    background_factor_range: tuple[float, float]
    noise_sigma: float
    initial_state_probs: tuple[float, float, float]

    def __post_init__(self):
        lo, hi = self.background_factor_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError(f"background_factor_range must satisfy 0 <= lo <= hi < 1, got {(lo, hi)}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        probs = tuple(float(p) for p in self.initial_state_probs)
        if len(probs) != 3 or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("initial_state_probs must be three nonnegative values summing to 1")
        object.__setattr__(self, "background_factor_range", (float(lo), float(hi)))
        object.__setattr__(self, "initial_state_probs", probs)

    def to_json(self) -> dict:
        return {
            "transfer": self.transfer.to_json(),
            "psf": {"fwhm_table": [list(e) for e in self.psf.fwhm_table]},
            "photon": {"log_mu": self.photon.log_mu, "log_sigma": self.photon.log_sigma},
            "background_factor_range": list(self.background_factor_range),
            "noise_sigma": self.noise_sigma,
            "initial_state_probs": list(self.initial_state_probs),
        }

    @classmethod
    def from_json(cls, data: dict) -> "CalibrationProfile":
        try:
            return cls(
                transfer=TransferTable(**{k: float(data["transfer"][k]) for k in ("p1", "p2", "p3", "p4", "p5")}),
                psf=PsfModel(tuple(tuple(e) for e in data["psf"]["fwhm_table"])),
                photon=PhotonModel(float(data["photon"]["log_mu"]), float(data["photon"]["log_sigma"])),
                background_factor_range=tuple(data["background_factor_range"]),
                noise_sigma=float(data["noise_sigma"]),
                initial_state_probs=tuple(data["initial_state_probs"]),
            )
        except KeyError as exc:
            raise ValueError(f"calibration profile missing key {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_profile(path) -> CalibrationProfile:
    with open(Path(path)) as fh:
        return CalibrationProfile.from_json(json.load(fh))


def default_profile() -> CalibrationProfile:
    """The bundled mEos3.2-like profile. Engineering defaults, not a measured calibration."""
    text = resources.files("fluoroforge").joinpath("profiles/meos32.json").read_text()
    return CalibrationProfile.from_json(json.loads(text))


def step_state(state: FluorophoreState, table: TransferTable, rng: np.random.Generator) -> FluorophoreState:
    if state == FluorophoreState.BLEACHED:
        return FluorophoreState.BLEACHED
    row = table.matrix()[int(state)]
    return FluorophoreState(_pick(row, rng.random()))


def step_states(states: np.ndarray, table: TransferTable, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`step_state` over an integer state array (one uniform per entry)."""
    cdf = np.cumsum(table.matrix(), axis=1)
    u = rng.random(states.shape)
    rows = cdf[states]
    nxt = (u[:, None] >= rows[:, :2]).sum(axis=1)
    # Bleached stays put regardless of round-off in the cumulative sums.
    return np.where(states == FluorophoreState.BLEACHED, FluorophoreState.BLEACHED, nxt).astype(np.int8)


def _pick(probs: np.ndarray, u: float) -> int:
    acc = 0.0
    for i, p in enumerate(probs[:-1]):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


def fwhm_to_sigma(fwhm: float) -> float:
    if not fwhm > 0:
        raise ValueError(f"FWHM must be positive, got {fwhm}")
    return fwhm / FWHM_PER_SIGMA


def sigma_to_fwhm(sigma: float) -> float:
    return sigma * FWHM_PER_SIGMA


def sample_psf_width(psf: PsfModel, rng: np.random.Generator) -> float:
    idx = _pick(psf.weights, rng.random())
    return fwhm_to_sigma(psf.fwhm_table[idx][0])


def sample_photon_intensity(photon: PhotonModel, rng: np.random.Generator) -> float:
    return math.exp(photon.log_mu + photon.log_sigma * rng.standard_normal())


def render_psf(canvas: np.ndarray, x0: float, y0: float, i0: float, sigma: float) -> None:
    """Add a Gaussian spot to ``canvas`` in place.

    Pixel ``[row, col]`` is evaluated at its center ``(col + 0.5, row + 0.5)``;
    contributions beyond ``4 * sigma`` from the spot center are dropped.
    """
    if not sigma > 0:
        raise ValueError(f"PSF sigma must be positive, got {sigma}")
    if i0 < 0:
        raise ValueError("I0 must be nonnegative")
    h, w = canvas.shape
    radius = PSF_TRUNCATION * sigma
    c0 = max(0, int(math.floor(x0 - radius - 0.5)))
    c1 = min(w, int(math.ceil(x0 + radius + 0.5)))
    r0 = max(0, int(math.floor(y0 - radius - 0.5)))
    r1 = min(h, int(math.ceil(y0 + radius + 0.5)))
    if c0 >= c1 or r0 >= r1:
        return
    dx2 = (np.arange(c0, c1) + 0.5 - x0) ** 2
    dy2 = (np.arange(r0, r1) + 0.5 - y0) ** 2
    d2 = dy2[:, None] + dx2[None, :]
    spot = i0 * np.exp(-d2 / (2.0 * sigma * sigma))
    spot[d2 > radius * radius] = 0.0
    canvas[r0:r1, c0:c1] += spot
