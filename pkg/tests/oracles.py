"""Independent reference implementations used as test oracles.

Nothing in here imports from the package's numerics: Bessel values come
from an arbitrary-precision power series (mpmath), mixture EM and Kalman
recursions are written directly from the textbook definitions with plain
dense linear algebra. These stay deliberately naive so they remain an
independent route to the same answers.
"""

from __future__ import annotations

import mpmath as mp
import numpy as np
from scipy.special import ive

mp.mp.dps = 50


def series_log_bessel_i(order: float, arg: float, terms: int = 200) -> float:
    """Arbitrary-precision ascending power series for log I_v(x)."""
    v = mp.mpf(order)
    x = mp.mpf(arg)
    if x == 0:
        return 0.0 if v == 0 else float("-inf")
    y = x * x / 4
    t = mp.mpf(1)
    s = mp.mpf(1)
    for m in range(1, terms + 1):
        t *= y / (m * (v + m))
        s += t
    return float(mp.log(s) + v * mp.log(x / 2) - mp.loggamma(v + 1))


def mp_log_bessel_i(order: float, arg: float) -> float:
    """mpmath's own modified Bessel, for arguments beyond series reach."""
    if arg == 0:
        return 0.0 if order == 0 else float("-inf")
    return float(mp.log(mp.besseli(mp.mpf(order), mp.mpf(arg))))


def mp_bessel_ratio(d: int, kappa: float) -> float:
    if kappa == 0:
        return 0.0
    k = mp.mpf(kappa)
    return float(mp.besseli(mp.mpf(d) / 2, k) / mp.besseli(mp.mpf(d) / 2 - 1, k))


def scipy_bessel_ratio(d: int, kappa) -> np.ndarray:
    """Scaled-Bessel route to A_D; valid where ive does not underflow."""
    kappa = np.asarray(kappa, dtype=float)
    return ive(d / 2.0, kappa) / ive(d / 2.0 - 1.0, kappa)


def variational_vmf_mixture_em(
    feats: np.ndarray,
    init_dirs: np.ndarray,
    kappa_ems: float,
    kappa0: float,
    sweeps: int,
):
    """Mean-field vMF mixture EM on a single batch, written from scratch.

    Beliefs over each component mean are vMF with direction rho and
    concentration gamma; responsibilities use the expected direction
    A_D(gamma) * rho. The initial-prior pseudo-message kappa0 * mu0 is the
    only non-data term. Mixing weights stay uniform.
    """
    n, d = feats.shape
    k = init_dirs.shape[0]
    rho = init_dirs.copy()
    gamma = np.full(k, kappa0, dtype=float)
    resp = np.full((n, k), 1.0 / k)
    for _ in range(sweeps):
        a = scipy_bessel_ratio(d, gamma)
        expected = a[:, None] * rho
        logits = kappa_ems * (feats @ expected.T)
        logits -= logits.max(axis=1, keepdims=True)
        resp = np.exp(logits)
        resp /= resp.sum(axis=1, keepdims=True)
        numer = kappa0 * init_dirs + kappa_ems * (resp.T @ feats)
        gamma = np.linalg.norm(numer, axis=1)
        rho = numer / gamma[:, None]
    return rho, gamma, resp


def dense_kalman_filter(
    means0: np.ndarray,
    cov0: np.ndarray,
    transition: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    observations: list,
):
    """Textbook Kalman filter with explicit inverses, one latent chain.

    Each element of `observations` is either None (no update) or a tuple
    (obs_mean, obs_count) giving an averaged observation with noise r /
    obs_count. Returns filtered means/covs per step.
    """
    d = means0.shape[0]
    m, p = means0.copy(), cov0.copy()
    means, covs = [], []
    for entry in observations:
        m = transition @ m
        p = transition @ p @ transition.T + q
        if entry is not None:
            obs, count = entry
            r_eff = r / count
            gain = p @ np.linalg.inv(p + r_eff)
            m = m + gain @ (obs - m)
            p = (np.eye(d) - gain) @ p
        means.append(m.copy())
        covs.append(p.copy())
    return means, covs


def dense_rts_smoother(means, covs, transition, q):
    """Rauch-Tung-Striebel backward pass with explicit inverses."""
    t = len(means)
    sm = [None] * t
    sc = [None] * t
    gains = [None] * max(t - 1, 0)
    sm[-1], sc[-1] = means[-1].copy(), covs[-1].copy()
    for i in range(t - 2, -1, -1):
        p_pred = transition @ covs[i] @ transition.T + q
        j = covs[i] @ transition.T @ np.linalg.inv(p_pred)
        sm[i] = means[i] + j @ (sm[i + 1] - transition @ means[i])
        sc[i] = covs[i] + j @ (sc[i + 1] - p_pred) @ j.T
        gains[i] = j
    return sm, sc, gains


def map_pooled_gaussian_mixture_em(
    step_feats: list,
    schedule: list,
    init_means: np.ndarray,
    prior_means: np.ndarray,
    prior_cov: np.ndarray,
    sigma_ems: np.ndarray,
):
    """MAP EM for a Gaussian mixture with tied (time-constant) means.

    Component means carry a Gaussian prior N(prior_means, prior_cov) and
    are shared across the step-partitioned data; mixing weights are per
    step. The M step for the means is the posterior mean given all
    responsibility-weighted data. `schedule` lists, per EM iteration,
    which step indices are visible (so an incremental-arrival history can
    be replayed exactly). This is the static analogue of a
    zero-transition-noise chain over a pooled window.
    """
    k, d = init_means.shape
    means = init_means.copy()
    mixings = [np.full(k, 1.0 / k) for _ in step_feats]
    prior_prec = np.linalg.inv(prior_cov)
    ems_prec = np.linalg.inv(sigma_ems)
    resps = [None] * len(step_feats)
    for avail in schedule:
        for s in avail:
            feats = step_feats[s]
            logits = np.empty((feats.shape[0], k))
            for j in range(k):
                diff = feats - means[j]
                logits[:, j] = np.log(mixings[s][j]) - 0.5 * np.einsum(
                    "ni,ij,nj->n", diff, ems_prec, diff
                )
            logits -= logits.max(axis=1, keepdims=True)
            resps[s] = np.exp(logits)
            resps[s] /= resps[s].sum(axis=1, keepdims=True)
        for j in range(k):
            wsum = sum(resps[s][:, j].sum() for s in avail)
            wdata = sum(resps[s][:, j] @ step_feats[s] for s in avail)
            post_prec = prior_prec + wsum * ems_prec
            rhs = prior_prec @ prior_means[j] + ems_prec @ wdata
            means[j] = np.linalg.solve(post_prec, rhs)
        for s in avail:
            mixings[s] = resps[s].mean(axis=0)
    return means, resps
