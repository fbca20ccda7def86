"""Shared fixtures and brute-force oracles for the test suite."""

import itertools
import math

import numpy as np

from fluoroforge.imaging import FrameStack, downsample
from fluoroforge.photophysics import (
    CalibrationProfile,
    FluorophoreState,
    PhotonModel,
    PsfModel,
    TransferTable,
)
from fluoroforge.simulator import Fluorophore, simulate_frame


def static_profile(fwhm=7.0, i0=0.6, noise=0.0):
    """Always-on emitter with degenerate photon and PSF models."""
    return CalibrationProfile(
        transfer=TransferTable(1.0, 0.0, 0.0, 1.0, 0.0),
        psf=PsfModel(((fwhm, 1.0),)),
        photon=PhotonModel(math.log(i0), 0.0),
        background_factor_range=(0.0, 0.0),
        noise_sigma=noise,
        initial_state_probs=(1.0, 0.0, 0.0),
    )


def static_emitter_stack(x, y, profile, lr_shape=(20, 20), scale=8, frames=50, seed=0):
    """Noiseless stack of always-on emitters at the given high-res positions."""
    xs, ys = np.atleast_1d(x), np.atleast_1d(y)
    pop = [Fluorophore(float(a), float(b), FluorophoreState.EMITTING, id=i)
           for i, (a, b) in enumerate(zip(xs, ys))]
    rng = np.random.default_rng(seed)
    hr_shape = (lr_shape[0] * scale, lr_shape[1] * scale)
    out = []
    for _ in range(frames):
        hr, pop = simulate_frame(pop, profile, hr_shape, rng)
        out.append(downsample(hr, scale))
    return FrameStack(tuple(out), scale_factor=scale)


def enumerate_marginals(emission, init, trans):
    """Posterior state marginals by summing over every path."""
    T, K = emission.shape
    marg = np.zeros((T, K))
    for path in itertools.product(range(K), repeat=T):
        p = init[path[0]] * emission[0, path[0]]
        for t in range(1, T):
            p *= trans[path[t - 1], path[t]] * emission[t, path[t]]
        for t, s in enumerate(path):
            marg[t, s] += p
    return marg / marg[0].sum()


def forward_backward_marginals(emission, init, trans):
    """Textbook scaled forward-backward posterior marginals."""
    T, K = emission.shape
    alpha = np.zeros((T, K))
    beta = np.ones((T, K))
    a = init * emission[0]
    alpha[0] = a / a.sum()
    for t in range(1, T):
        a = (alpha[t - 1] @ trans) * emission[t]
        alpha[t] = a / a.sum()
    for t in range(T - 2, -1, -1):
        b = trans @ (emission[t + 1] * beta[t + 1])
        beta[t] = b / b.sum()
    post = alpha * beta
    return post / post.sum(axis=1, keepdims=True)


def ffbs_frequencies(emission, init, trans, n, seed=0):
    from fluoroforge.inference.ffbs import ffbs

    rng = np.random.default_rng(seed)
    log_em = np.log(emission)
    T, K = emission.shape
    counts = np.zeros((T, K))
    idx = np.arange(T)
    for _ in range(n):
        counts[idx, ffbs(log_em, init, trans, rng)] += 1
    return counts / n
