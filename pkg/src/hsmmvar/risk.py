"""Dynamic risk measures on the one-step-ahead Gaussian-mixture predictive law.

Risk means high values: ``VaR(tau)`` is the ``1 - tau`` quantile and ``ES(tau)``
the mean beyond it. Conditional versions fix the other coordinates either at a
distress quantile ``VaR(tau_star)`` or at the median.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import factorial

import numpy as np
from scipy.special import erfc, logsumexp

from .emission import conditional_means, emission_loglik
from .errors import InputError, NumericalError
from .hidden import filtering_weights

CDF_TOL = 1e-10
MAX_SHAPLEY_P = 12
_SQRT2 = np.sqrt(2.0)


def _norm_sf(z):
    return 0.5 * erfc(z / _SQRT2)


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)


@dataclass
class PredictiveMixture:
    """``sum_k weights[k] N(means[k], covs[k])`` at time ``t``."""

    t: int
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @property
    def p(self):
        return self.means.shape[1]

    def marginal(self, i):
        """Univariate mixture ``(w, mu, sd)`` of coordinate ``i``."""
        return self.weights, self.means[:, i], np.sqrt(self.covs[:, i, i])

    def pdf(self, Y):
        """Density at the rows of ``Y`` (used by integration checks)."""
        Y = np.atleast_2d(Y)
        out = np.zeros(Y.shape[0])
        for w, mu, S in zip(self.weights, self.means, self.covs):
            Linv = np.linalg.inv(np.linalg.cholesky(S))
            r = (Y - mu) @ Linv.T
            out += w * np.exp(-0.5 * (r * r).sum(1) - np.log(np.diag(np.linalg.cholesky(S))).sum()
                              - 0.5 * self.p * np.log(2 * np.pi))
        return out


def predictive_mixtures(data, params):
    """Predictive mixtures for every time ``t >= H`` (0-based)."""
    H = params.var.H
    psi = filtering_weights(data, params, emission_loglik(data, params.var))
    mu = conditional_means(data, params.var)
    return [PredictiveMixture(t, psi[t], mu[t - H], params.var.Sigma) for t in range(H, data.T)]


def predictive_mixture(t, data, params):
    """One-step-ahead mixture of ``y_t`` given its past, for a 0-based ``t >= H``."""
    H = params.var.H
    if t < H or t >= data.T:
        raise InputError(f"predictive mixture needs {H} lags; got t={t}")
    psi = filtering_weights(data, params, emission_loglik(data, params.var))
    mu = conditional_means(data, params.var)
    return PredictiveMixture(t, psi[t], mu[t - H], params.var.Sigma)


# -- univariate mixture primitives (batched over leading axes) ---------------------------

def mixture_cdf(x, w, mu, sd):
    x = np.asarray(x, dtype=float)[..., None]
    return np.sum(w * (1.0 - _norm_sf((x - mu) / sd)), axis=-1)


def mixture_quantile(w, mu, sd, prob):
    """Quantile of univariate Gaussian mixtures by bisection on the CDF.

    ``w, mu, sd`` have shape ``(..., K)`` and ``prob`` broadcasts against ``(...)``.
    Stops when the CDF is within ``CDF_TOL`` of ``prob`` or the bracket cannot shrink.
    """
    w, mu, sd = (np.asarray(a, dtype=float) for a in (w, mu, sd))
    prob = np.asarray(prob, dtype=float)
    K = np.broadcast_shapes(w.shape, mu.shape, sd.shape)[-1]
    batch = np.broadcast_shapes(w.shape[:-1], mu.shape[:-1], sd.shape[:-1], prob.shape)
    w, mu, sd = (np.broadcast_to(a, batch + (K,)) for a in (w, mu, sd))
    prob = np.broadcast_to(prob, batch)
    lo = np.min(mu - 10 * sd, axis=-1)
    hi = np.max(mu + 10 * sd, axis=-1)
    mid = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        F = np.sum(w * (1.0 - _norm_sf((mid[..., None] - mu) / sd)), axis=-1)
        done = (np.abs(F - prob) <= CDF_TOL) | (hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid)))
        if np.all(done):
            break
        below = F < prob
        lo = np.where(~done & below, mid, lo)
        hi = np.where(~done & ~below, mid, hi)
    return mid


def mixture_tail_mean(w, mu, sd, threshold):
    """``E[Y | Y >= threshold]`` for univariate mixtures (batched)."""
    zk = (np.asarray(threshold, dtype=float)[..., None] - mu) / sd
    sf = _norm_sf(zk)
    num = np.sum(w * (sf * mu + sd * _norm_pdf(zk)), axis=-1)
    return num / np.sum(w * sf, axis=-1)


def _check_tau(tau):
    if not 0 < tau < 1:
        raise InputError("tail level must lie in (0, 1)")


def marginal_var(mix: PredictiveMixture, i, tau=0.05):
    _check_tau(tau)
    return float(mixture_quantile(*mix.marginal(i), 1.0 - tau))


def marginal_es(mix: PredictiveMixture, i, tau=0.05):
    _check_tau(tau)
    w, mu, sd = mix.marginal(i)
    return float(mixture_tail_mean(w, mu, sd, mixture_quantile(w, mu, sd, 1.0 - tau)))


def marginal_sd(mix: PredictiveMixture, i):
    w, mu, sd = mix.marginal(i)
    m1 = w @ mu
    return float(np.sqrt(w @ (sd * sd + mu * mu) - m1 * m1))


# -- conditioning ---------------------------------------------------------------------

@dataclass
class DistressConfig:
    """Target ``i`` with the other coordinates split into distress and non-distress sets.

    ``nondistress=None`` means every coordinate other than ``target`` and the
    distress set.
    """

    target: int
    distress: tuple = ()
    nondistress: tuple | None = None
    tau: float = 0.05
    tau_star: float = 0.05

    def resolve(self, p):
        hd = tuple(sorted(self.distress))
        if self.nondistress is None:
            hn = tuple(j for j in range(p) if j != self.target and j not in hd)
        else:
            hn = tuple(sorted(self.nondistress))
        allset = set(hd) | set(hn)
        if set(hd) & set(hn) or self.target in allset or not allset <= set(range(p)):
            raise InputError("distress and non-distress sets must be disjoint subsets of the other coordinates")
        for tau in (self.tau, self.tau_star):
            if not 0 < tau <= 0.5:
                raise InputError("tau and tau_star must lie in (0, 0.5]")
        return hd, hn


def conditioning_values(mix: PredictiveMixture, tau_star=0.05):
    """Per-coordinate distress values ``VaR(tau_star)`` and medians."""
    w, mu, sd = mix.weights, mix.means, np.sqrt(np.einsum("kii->ki", mix.covs))
    q = mixture_quantile(w, mu.T[None], sd.T[None], np.array([[1.0 - tau_star], [0.5]]))
    return q[0], q[1]


def condition(mix: PredictiveMixture, i, idx, values):
    """Univariate mixture of coordinate ``i`` given ``y[idx] = values``.

    ``values`` may carry leading batch axes; the result ``(w, mu, sd)`` then has
    shape ``(..., K)``.
    """
    idx = list(idx)
    values = np.asarray(values, dtype=float)
    K = mix.weights.shape[0]
    if not idx:
        w, mu, sd = mix.marginal(i)
        shape = values.shape[:-1] if values.ndim else ()
        return (np.broadcast_to(w, shape + (K,)), np.broadcast_to(mu, shape + (K,)),
                np.broadcast_to(sd, shape + (K,)))
    batch = values.shape[:-1]
    logw = np.empty(batch + (K,))
    mean = np.empty(batch + (K,))
    var = np.empty(K)
    for k in range(K):
        S, mu = mix.covs[k], mix.means[k]
        Scc = S[np.ix_(idx, idx)]
        try:
            Lc = np.linalg.cholesky(Scc)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"conditioning covariance of component {k} is singular") from exc
        gain = np.linalg.solve(Scc, S[idx, i])
        dev = values - mu[idx]
        r = np.linalg.solve(Lc, dev.reshape(-1, len(idx)).T).T.reshape(dev.shape)
        logw[..., k] = (np.log(mix.weights[k]) if mix.weights[k] > 0 else -np.inf) \
            - 0.5 * np.sum(r * r, axis=-1) - np.log(np.diag(Lc)).sum()
        mean[..., k] = mu[i] + dev @ gain
        var[k] = S[i, i] - S[idx, i] @ gain
    if np.any(var <= 0):
        raise NumericalError("conditional variance is not positive")
    w = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
    return w, mean, np.broadcast_to(np.sqrt(var), mean.shape)


def conditional_mixture(mix: PredictiveMixture, config: DistressConfig):
    """Univariate mixture of the target under the distress configuration."""
    hd, hn = config.resolve(mix.p)
    nu_d, med = conditioning_values(mix, config.tau_star)
    idx = list(hd) + list(hn)
    vals = np.concatenate([nu_d[list(hd)], med[list(hn)]])
    return condition(mix, config.target, idx, vals)


def mcovar(mix: PredictiveMixture, config: DistressConfig):
    w, mu, sd = conditional_mixture(mix, config)
    return float(mixture_quantile(w, mu, sd, 1.0 - config.tau))


def mcoes(mix: PredictiveMixture, config: DistressConfig):
    w, mu, sd = conditional_mixture(mix, config)
    return float(mixture_tail_mean(w, mu, sd, mixture_quantile(w, mu, sd, 1.0 - config.tau)))


# -- Shapley attribution --------------------------------------------------------------

def subset_weight(size, p):
    """Weight of a coalition of ``size`` others when attributing among ``p - 1`` players."""
    n = p - 1
    return factorial(size) * factorial(n - size - 1) / factorial(n)


def _coalitions(mix: PredictiveMixture, i, tau, tau_star):
    """Subsets of the other coordinates with their conditional MCoVaR and MCoES."""
    p = mix.p
    others = [j for j in range(p) if j != i]
    nu_d, med = conditioning_values(mix, tau_star)
    subsets = [c for r in range(len(others) + 1) for c in combinations(others, r)]
    vals = np.array([[nu_d[j] if j in s else med[j] for j in others] for s in subsets]).reshape(len(subsets), len(others))
    w, mu, sd = condition(mix, i, others, vals)
    q = np.atleast_1d(mixture_quantile(w, mu, sd, 1.0 - tau))
    es = np.atleast_1d(mixture_tail_mean(w, mu, sd, q))
    return subsets, q, es


def coalition_measures(mix: PredictiveMixture, i, tau=0.05, tau_star=0.05, measure="mcovar"):
    """``eta_i(H)`` for every distress set ``H`` of the other coordinates.

    Returns a dict keyed by sorted tuples; the complement of ``H`` sits at medians.
    """
    if measure not in ("mcovar", "mcoes"):
        raise InputError(f"unknown risk measure {measure!r}")
    subsets, q, es = _coalitions(mix, i, tau, tau_star)
    vals = q if measure == "mcovar" else es
    return {s: float(v) for s, v in zip(subsets, vals)}


@dataclass
class ShapleyMatrix:
    """``values[i, j]``: standardized contribution of ``j`` to the risk of ``i`` (diagonal 0)."""

    t: int
    values: np.ndarray
    sigma: np.ndarray
    raw: np.ndarray


def shapley_from_measures(eta, i, p):
    """Raw Shapley values of every ``j != i`` from coalition measures ``eta``."""
    out = np.zeros(p)
    for j in range(p):
        if j == i:
            continue
        rest = [l for l in range(p) if l not in (i, j)]
        tot = 0.0
        for r in range(len(rest) + 1):
            wgt = subset_weight(r, p)
            for c in combinations(rest, r):
                tot += wgt * (eta[tuple(sorted(c + (j,)))] - eta[c])
        out[j] = tot
    return out


def shapley(mix: PredictiveMixture, tau=0.05, tau_star=0.05, measure="mcovar"):
    """Standardized Shapley matrix of one predictive mixture."""
    p = mix.p
    if p > MAX_SHAPLEY_P:
        raise InputError(f"exact Shapley enumeration is limited to p <= {MAX_SHAPLEY_P}")
    raw = np.zeros((p, p))
    sigma = np.array([marginal_sd(mix, i) for i in range(p)])
    for i in range(p):
        raw[i] = shapley_from_measures(coalition_measures(mix, i, tau, tau_star, measure), i, p)
    return ShapleyMatrix(mix.t, raw / sigma[:, None], sigma, raw)


@dataclass
class RiskReport:
    """Risk series for ``t = H..T-1``.

    ``mcovar``/``mcoes`` condition on every other coordinate being in distress.
    """

    times: np.ndarray
    psi: np.ndarray
    var: np.ndarray
    es: np.ndarray
    mcovar: np.ndarray
    mcoes: np.ndarray
    shapley: np.ndarray
    sigma: np.ndarray
    measure: str
    tau: float
    tau_star: float

    def columns(self, names):
        p = len(names)
        cols = []
        for label in ("VaR", "ES", "MCoVaR", "MCoES"):
            cols += [f"{label}_{n}" for n in names]
        cols += [f"Sh_{names[i]}<-{names[j]}" for i in range(p) for j in range(p)]
        return cols

    def matrix(self):
        n = self.times.shape[0]
        return np.column_stack([self.var, self.es, self.mcovar, self.mcoes, self.shapley.reshape(n, -1)])


def _shapley_coefficients(subsets, i, p):
    """Matrix ``M`` with ``raw[:, j] = eta @ M[:, j]`` over the listed subsets."""
    M = np.zeros((len(subsets), p))
    for r, sub in enumerate(subsets):
        for j in range(p):
            if j == i:
                continue
            if j in sub:
                M[r, j] = subset_weight(len(sub) - 1, p)
            else:
                M[r, j] = -subset_weight(len(sub), p)
    return M


def risk_series(data, params, tau=0.05, tau_star=0.05, measure="mcovar"):
    """All risk measures for ``t = H..T-1``, vectorized over time.

    Agrees with the per-mixture functions (:func:`marginal_var`, :func:`mcovar`,
    :func:`shapley`); the distress and median values are refreshed at every ``t``.
    """
    if measure not in ("mcovar", "mcoes"):
        raise InputError(f"unknown risk measure {measure!r}")
    _check_tau(tau)
    _check_tau(tau_star)
    p = data.p
    if p > MAX_SHAPLEY_P:
        raise InputError(f"exact Shapley enumeration is limited to p <= {MAX_SHAPLEY_P}")
    H = params.var.H
    psi = filtering_weights(data, params, emission_loglik(data, params.var))[H:]
    mu = conditional_means(data, params.var)  # (n, K, p)
    S = params.var.Sigma
    n, K = psi.shape
    sdK = np.sqrt(np.einsum("kii->ki", S))  # (K, p)
    muT = mu.transpose(0, 2, 1)  # (n, p, K)
    wT = psi[:, None, :]
    var = mixture_quantile(wT, muT, sdK.T[None], 1.0 - tau)
    es = mixture_tail_mean(wT, muT, sdK.T[None], var)
    refs = mixture_quantile(psi[:, None, None, :], muT[:, None], sdK.T[None, None],
                            np.array([[1.0 - tau_star], [0.5]]))
    nu_d, med = refs[:, 0], refs[:, 1]
    m1 = np.einsum("nk,nkp->np", psi, mu)
    sigma = np.sqrt(np.einsum("nk,nkp->np", psi, sdK[None] ** 2 + mu ** 2) - m1 ** 2)
    co_var = np.zeros((n, p))
    co_es = np.zeros((n, p))
    sh = np.zeros((n, p, p))
    logpsi = np.log(np.maximum(psi, 1e-300))
    for i in range(p):
        others = [j for j in range(p) if j != i]
        subsets = [c for r in range(len(others) + 1) for c in combinations(others, r)]
        mask = np.array([[j in sub for j in others] for sub in subsets], dtype=bool).reshape(len(subsets), len(others))
        vals = np.where(mask[None], nu_d[:, None, others], med[:, None, others])  # (n, nsub, p-1)
        logw = np.empty(vals.shape[:2] + (K,))
        mean = np.empty(vals.shape[:2] + (K,))
        cvar = np.empty(K)
        for k in range(K):
            Scc = S[k][np.ix_(others, others)]
            try:
                Lc = np.linalg.cholesky(Scc)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"conditioning covariance of component {k} is singular") from exc
            gain = np.linalg.solve(Scc, S[k][others, i])
            dev = vals - mu[:, None, k, others]
            r = np.linalg.solve(Lc, dev.reshape(-1, len(others)).T).T.reshape(dev.shape)
            logw[..., k] = logpsi[:, None, k] - 0.5 * np.sum(r * r, axis=-1) - np.log(np.diag(Lc)).sum()
            mean[..., k] = mu[:, None, k, i] + dev @ gain
            cvar[k] = S[k][i, i] - S[k][others, i] @ gain
        if np.any(cvar <= 0):
            raise NumericalError("conditional variance is not positive")
        w = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
        sd = np.broadcast_to(np.sqrt(cvar), mean.shape)
        q = mixture_quantile(w, mean, sd, 1.0 - tau)  # (n, nsub)
        e = mixture_tail_mean(w, mean, sd, q)
        co_var[:, i] = q[:, -1]
        co_es[:, i] = e[:, -1]
        eta = q if measure == "mcovar" else e
        sh[:, i, :] = eta @ _shapley_coefficients(subsets, i, p) / sigma[:, i:i + 1]
    times = np.arange(H, data.T)
    return RiskReport(times, psi, var, es, co_var, co_es, sh, sigma, measure, tau, tau_star)
