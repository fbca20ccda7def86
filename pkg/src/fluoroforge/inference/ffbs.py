"""Forward filtering, backward sampling for small discrete-state HMMs."""

from __future__ import annotations

import numba
import numpy as np


@numba.jit(nopython=True, nogil=True, cache=True)
def _logsumexp(v):
    m = -np.inf
    for x in v:
        if x > m:
            m = x
    if m == -np.inf:
        return m
    s = 0.0
    for x in v:
        s += np.exp(x - m)
    return m + np.log(s)


@numba.jit(nopython=True, nogil=True, cache=True)
def forward_filter(log_emission, log_init, log_trans):
    """Normalized log filtering distributions ``log p(s_t | y_1..t)``.

    Returns ``(log_alpha, log_evidence)``; every row of ``log_alpha`` is
    normalized to sum to one in probability space.
    """
    T, K = log_emission.shape
    log_alpha = np.empty((T, K))
    tmp = np.empty(K)
    log_evidence = 0.0
    for k in range(K):
        log_alpha[0, k] = log_init[k] + log_emission[0, k]
    c = _logsumexp(log_alpha[0])
    log_evidence += c
    for k in range(K):
        log_alpha[0, k] -= c
    for t in range(1, T):
        for k in range(K):
            for j in range(K):
                tmp[j] = log_alpha[t - 1, j] + log_trans[j, k]
            log_alpha[t, k] = _logsumexp(tmp) + log_emission[t, k]
        c = _logsumexp(log_alpha[t])
        log_evidence += c
        for k in range(K):
            log_alpha[t, k] -= c
    return log_alpha, log_evidence


@numba.jit(nopython=True, nogil=True, cache=True)
def _sample_log(logp, u):
    c = _logsumexp(logp)
    acc = 0.0
    last = 0
    for k in range(logp.shape[0]):
        if logp[k] == -np.inf:
            continue
        last = k
        acc += np.exp(logp[k] - c)
        if u < acc:
            return k
    return last


@numba.jit(nopython=True, nogil=True, cache=True)
def backward_sample(log_alpha, log_trans, uniforms):
    T, K = log_alpha.shape
    states = np.empty(T, dtype=np.int8)
    states[T - 1] = _sample_log(log_alpha[T - 1], uniforms[T - 1])
    logp = np.empty(K)
    for t in range(T - 2, -1, -1):
        nxt = states[t + 1]
        for k in range(K):
            logp[k] = log_alpha[t, k] + log_trans[k, nxt]
        states[t] = _sample_log(logp, uniforms[t])
    return states


def safe_log(p) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=np.float64))


def ffbs(log_emission: np.ndarray, init: np.ndarray, trans: np.ndarray,
         rng: np.random.Generator) -> np.ndarray:
    """Draw one state path from ``p(s_1..T | y_1..T)``.

    Parameters
    ----------
    log_emission : (T, K) array
        Per-frame log-likelihood of the observation under each state. Only
        differences within a row matter.
    init : (K,) array
        Distribution of the first state.
    trans : (K, K) array
        Row-stochastic transition matrix.
    rng : numpy Generator
        Supplies exactly T uniforms, so the draw is reproducible.
    """
    log_emission = np.ascontiguousarray(log_emission, dtype=np.float64)
    log_alpha, _ = forward_filter(log_emission, safe_log(init), safe_log(trans))
    uniforms = rng.random(log_emission.shape[0])
    return backward_sample(log_alpha, safe_log(trans), uniforms)
