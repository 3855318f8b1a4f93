"""Covariate-driven hidden semi-Markov chain and its expanded-HMM recursions.

The semi-Markov chain is represented on the super-states ``(k, d)``, state ``k``
(0-based) and dwell ``d`` in ``1..m``. Dwell times beyond ``m`` share the hazard
at ``d = m`` through a self-loop on ``(k, m)``, i.e. a geometric tail.

Arrays indexed by dwell use position ``d - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InputError, NumericalError

HAZARD_EPS = 1e-10
LINKS = ("cloglog", "logit")


def inverse_link(eta, link="cloglog"):
    """Inverse link clamped to ``[HAZARD_EPS, 1 - HAZARD_EPS]``."""
    eta = np.asarray(eta, dtype=float)
    if link == "cloglog":
        q = -np.expm1(-np.exp(np.minimum(eta, 700.0)))
    elif link == "logit":
        q = 1.0 / (1.0 + np.exp(-np.clip(eta, -700.0, 700.0)))
    else:
        raise InputError(f"unknown link {link!r}; expected one of {LINKS}")
    return np.clip(q, HAZARD_EPS, 1.0 - HAZARD_EPS)


def link_function(q, link="cloglog"):
    q = np.clip(np.asarray(q, dtype=float), HAZARD_EPS, 1.0 - HAZARD_EPS)
    if link == "cloglog":
        return np.log(-np.log1p(-q))
    if link == "logit":
        return np.log(q) - np.log1p(-q)
    raise InputError(f"unknown link {link!r}; expected one of {LINKS}")


@dataclass
class HazardParams:
    """Per-state hazard regression ``g(q_k) = beta0_k + beta1_k d + z' beta2_k``."""

    beta0: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    link: str = "cloglog"

    def __post_init__(self):
        self.beta0 = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        K = self.beta0.shape[0]
        self.beta1 = np.atleast_1d(np.asarray(self.beta1, dtype=float))
        self.beta2 = np.asarray(self.beta2, dtype=float).reshape(K, -1)
        if self.beta1.shape != (K,):
            raise InputError("beta1 must have one entry per state")
        if self.link not in LINKS:
            raise InputError(f"unknown link {self.link!r}; expected one of {LINKS}")

    @property
    def K(self):
        return self.beta0.shape[0]

    @property
    def L(self):
        return self.beta2.shape[1]

    def coef(self, k):
        """Coefficient vector ``(beta0, beta1, beta2...)`` of state ``k``."""
        return np.concatenate([[self.beta0[k], self.beta1[k]], self.beta2[k]])

    def copy(self):
        return HazardParams(self.beta0.copy(), self.beta1.copy(), self.beta2.copy(), self.link)


def check_switch_matrix(omega, tol=1e-12):
    """Validate a conditional switching matrix and return it as an array.

    For ``K = 1`` the only admissible matrix is ``[[1.0]]``: a departure renews
    the single state at dwell 1.
    """
    omega = np.asarray(omega, dtype=float)
    K = omega.shape[0]
    if omega.shape != (K, K):
        raise InputError("omega must be square")
    if K == 1:
        if omega[0, 0] != 1.0:
            raise InputError("omega must be [[1.0]] for a single state")
        return omega
    if np.any(np.diag(omega) != 0.0):
        raise InputError("omega must have an exactly zero diagonal")
    if np.any(omega < 0) or np.any(np.abs(omega.sum(axis=1) - 1.0) > tol):
        raise InputError("omega rows must be probability vectors")
    return omega


def default_switch_matrix(K):
    """Uniform off-diagonal switching; the row-reversed identity when ``K = 2``."""
    if K == 1:
        return np.ones((1, 1))
    omega = np.full((K, K), 1.0 / (K - 1))
    np.fill_diagonal(omega, 0.0)
    return omega


def check_initial_distribution(pi, tol=1e-12):
    pi = np.asarray(pi, dtype=float)
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > tol:
        raise InputError("initial distribution must be nonnegative and sum to 1")
    return pi


@dataclass(frozen=True)
class ExpandedChain:
    """Layout of the ``K * m`` super-states."""

    K: int
    m: int

    def __post_init__(self):
        if self.K < 1 or self.m < 1:
            raise InputError("K and m must be positive")

    @property
    def size(self):
        return self.K * self.m

    def index(self, k, d):
        if not (0 <= k < self.K and 1 <= d <= self.m):
            raise InputError(f"super-state ({k}, {d}) out of range")
        return k * self.m + d - 1

    def state_dwell(self, s):
        if not 0 <= s < self.size:
            raise InputError(f"super-state index {s} out of range")
        return divmod(s, self.m)[0], s % self.m + 1


def hazard(d, z, k, params: HazardParams):
    """Probability of leaving state ``k`` after dwelling ``d`` steps under covariates ``z``."""
    if d < 1:
        raise InputError("dwell must be >= 1")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (params.L,):
        raise InputError(f"hazard covariates have length {z.shape[0]}, expected {params.L}")
    eta = params.beta0[k] + params.beta1[k] * d + z @ params.beta2[k]
    return float(inverse_link(eta, params.link))


def _covariate_rows(z, L):
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        return z
    if L == 0:
        return np.zeros((z.shape[0] if z.ndim == 1 else 1, 0))
    return z.reshape(-1, L)


def hazard_array(params: HazardParams, z, m):
    """Hazards ``q[t, k, d-1] = q_k(d, z_t)`` for all rows of ``z`` and ``d = 1..m``."""
    z = _covariate_rows(z, params.L)
    d = np.arange(1, m + 1, dtype=float)
    eta = (params.beta0[None, :, None] + params.beta1[None, :, None] * d[None, None, :]
           + (z @ params.beta2.T)[:, :, None])
    return inverse_link(eta, params.link)


def dwell_pmf(k, params: HazardParams, z_path, d_max):
    """Sojourn pmf of state ``k`` for ``d = 1..d_max`` along a covariate path.

    ``z_path[d-1]`` is the covariate vector in force at dwell ``d``.
    """
    if d_max < 1:
        raise InputError("d_max must be >= 1")
    z_path = _covariate_rows(z_path, params.L)
    if z_path.shape[0] < d_max:
        raise InputError("z_path must provide a covariate vector for each dwell 1..d_max")
    d = np.arange(1, d_max + 1, dtype=float)
    q = inverse_link(params.beta0[k] + params.beta1[k] * d + z_path[:d_max] @ params.beta2[k], params.link)
    survival = np.concatenate([[1.0], np.cumprod(1.0 - q)[:-1]])
    return q * survival


def transition_matrix(params, z_t, chain: ExpandedChain):
    """Dense ``(K m) x (K m)`` transition matrix into a time with hazard covariates ``z_t``.

    ``params`` needs ``hazard`` and ``omega`` attributes.
    """
    hz, omega = params.hazard, np.asarray(params.omega)
    K, m = chain.K, chain.m
    z_t = np.atleast_1d(np.asarray(z_t, dtype=float))
    if z_t.shape != (hz.L,):
        raise InputError(f"hazard covariates have length {z_t.shape[0]}, expected {hz.L}")
    q = hazard_array(hz, z_t[None, :], m)[0]
    G = np.zeros((K * m, K * m))
    for k in range(K):
        for d in range(1, m + 1):
            i = chain.index(k, d)
            G[i, chain.index(k, min(d + 1, m))] += 1.0 - q[k, d - 1]
            for j in range(K):
                if omega[k, j] > 0:
                    G[i, chain.index(j, 1)] += q[k, d - 1] * omega[k, j]
    return G


@dataclass
class Posteriors:
    """Smoothed quantities from one forward-backward pass.

    ``stay[t]``, ``leave[t]`` and ``switch[t]`` describe the transition from
    ``t - 1`` into ``t`` (all zero at ``t = 0``). ``filtered`` holds the normalized
    forward probabilities and ``predicted`` the one-step-ahead state weights.
    """

    uni: np.ndarray
    stay: np.ndarray
    leave: np.ndarray
    switch: np.ndarray
    loglik: float
    filtered: np.ndarray
    predicted: np.ndarray

    @property
    def state_probs(self):
        """Smoothed marginal state probabilities, shape ``(T, K)``."""
        return self.uni.sum(axis=2)


@numba.njit(cache=True)
def _forward(q, omega, pi, e):
    T, K, m = q.shape
    alpha = np.zeros((T, K, m))
    pred = np.zeros((T, K))
    logc = np.zeros(T)
    a = np.zeros((K, m))
    for k in range(K):
        a[k, 0] = pi[k]
        pred[0, k] = pi[k]
    for t in range(T):
        if t > 0:
            prev = alpha[t - 1]
            a[:, :] = 0.0
            for k in range(K):
                out = 0.0
                for d in range(m):
                    mass = prev[k, d]
                    lv = mass * q[t, k, d]
                    out += lv
                    a[k, min(d + 1, m - 1)] += mass - lv
                for j in range(K):
                    a[j, 0] += out * omega[k, j]
            for k in range(K):
                s = 0.0
                for d in range(m):
                    s += a[k, d]
                pred[t, k] = s
        c = 0.0
        for k in range(K):
            for d in range(m):
                a[k, d] *= e[t, k]
                c += a[k, d]
        if not c > 0.0:
            return alpha, pred, logc, t
        for k in range(K):
            for d in range(m):
                alpha[t, k, d] = a[k, d] / c
        logc[t] = np.log(c)
    return alpha, pred, logc, -1


@numba.njit(cache=True)
def _backward(q, omega, e, alpha, logc):
    T, K, m = q.shape
    beta = np.ones((K, m))
    uni = np.zeros((T, K, m))
    stay = np.zeros((T, K, m))
    leave = np.zeros((T, K, m))
    switch = np.zeros((T, K, K))
    entry = np.zeros(K)
    for k in range(K):
        for d in range(m):
            uni[T - 1, k, d] = alpha[T - 1, k, d]
    for t in range(T - 1, 0, -1):
        c = np.exp(logc[t])
        for j in range(K):
            entry[j] = e[t, j] * beta[j, 0] / c
        newbeta = np.zeros((K, m))
        prev = alpha[t - 1]
        for k in range(K):
            out_k = 0.0
            for j in range(K):
                out_k += omega[k, j] * entry[j]
            for d in range(m):
                nxt = min(d + 1, m - 1)
                st = (1.0 - q[t, k, d]) * e[t, k] * beta[k, nxt] / c
                lv = q[t, k, d] * out_k
                newbeta[k, d] = st + lv
                stay[t, k, d] = prev[k, d] * st
                leave[t, k, d] = prev[k, d] * lv
                w = prev[k, d] * q[t, k, d]
                for j in range(K):
                    switch[t, k, j] += w * omega[k, j] * entry[j]
        beta = newbeta
        s = 0.0
        for k in range(K):
            for d in range(m):
                uni[t - 1, k, d] = prev[k, d] * beta[k, d]
                s += uni[t - 1, k, d]
        for k in range(K):
            for d in range(m):
                uni[t - 1, k, d] /= s
    return uni, stay, leave, switch


def _check_emission(emission_loglik):
    bad = ~np.isfinite(emission_loglik)
    if bad.any():
        t, k = np.argwhere(bad)[0]
        raise NumericalError(f"non-finite emission log-density at t={t}, state={k}")


def forward_pass(z, params, emission_loglik):
    """Scaled forward recursion.

    Returns ``(filtered, predicted, loglik)`` where ``predicted[t]`` is the
    state distribution at ``t`` given observations before ``t``.
    """
    emission_loglik = np.asarray(emission_loglik, dtype=float)
    _check_emission(emission_loglik)
    q = hazard_array(params.hazard, z, params.m)
    shift = emission_loglik.max(axis=1)
    e = np.exp(emission_loglik - shift[:, None])
    alpha, pred, logc, fail = _forward(q, np.asarray(params.omega, dtype=float),
                                       np.asarray(params.pi, dtype=float), e)
    if fail >= 0:
        raise NumericalError(f"forward recursion lost all probability mass at t={fail}")
    return alpha, pred, float(np.sum(logc) + np.sum(shift)), q, e, logc


def forward_backward(data, params, emission_loglik):
    """Exact smoothing on the expanded chain.

    Parameters
    ----------
    data : Dataset
        Supplies the hazard covariates ``z``.
    params
        Object with ``hazard``, ``omega``, ``pi`` and ``m`` attributes.
    emission_loglik : (T, K) array
        State-conditional log-densities; rows that only condition the
        autoregression should be passed as zeros.
    """
    alpha, pred, loglik, q, e, logc = forward_pass(data.z, params, emission_loglik)
    uni, stay, leave, switch = _backward(q, np.asarray(params.omega, dtype=float), e, alpha, logc)
    return Posteriors(uni=uni, stay=stay, leave=leave, switch=switch, loglik=loglik,
                      filtered=alpha, predicted=pred)


def filtering_weights(data, params, emission_loglik):
    """One-step-ahead state probabilities ``psi[t, k] = P(u_t = k | y_<t)``.

    Row 0 is the initial distribution.
    """
    _, pred, _, _, _, _ = forward_pass(data.z, params, emission_loglik)
    return pred / pred.sum(axis=1, keepdims=True)


def map_labels(posteriors):
    """MAP state per time from the dwell-marginalized posteriors; ties go to the lowest index."""
    uni = posteriors.uni if isinstance(posteriors, Posteriors) else np.asarray(posteriors)
    return np.argmax(uni.sum(axis=2), axis=1)


viterbi_map = map_labels


def truncation_mass(posteriors):
    """Smoothed mass sitting at the tail super-state ``d = m``, per state.

    Large values suggest that ``m`` truncates the non-geometric part of the
    sojourn law too early.
    """
    uni = posteriors.uni
    return uni[:, :, -1].sum(axis=0) / uni.shape[0]
