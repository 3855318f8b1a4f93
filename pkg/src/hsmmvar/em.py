"""Penalized EM for the hidden semi-Markov VAR model and ICL-based selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import emission as em_var
from .emission import VarParams
from .errors import DegenerateStateError, HSMMVarError, InputError, NumericalError
from .hidden import (
    HazardParams,
    Posteriors,
    check_initial_distribution,
    check_switch_matrix,
    default_switch_matrix,
    forward_backward,
    hazard_array,
    inverse_link,
    link_function,
)

log = logging.getLogger(__name__)

EM_TOL = 1e-4
IRLS_MAX_ITER = 100
IRLS_MAX_HALVINGS = 20
BETA_BOUND = 30.0


@dataclass
class ModelParams:
    """Every estimable quantity of the model plus the dwell truncation ``m``."""

    hazard: HazardParams
    omega: np.ndarray
    pi: np.ndarray
    var: VarParams
    m: int = 28

    def __post_init__(self):
        self.omega = check_switch_matrix(self.omega)
        self.pi = check_initial_distribution(self.pi)
        K = self.var.K
        if self.hazard.K != K or self.omega.shape[0] != K or self.pi.shape[0] != K:
            raise InputError("hazard, omega, pi and VAR blocks disagree on the number of states")

    @property
    def dims(self):
        v = self.var
        return {"K": v.K, "p": v.p, "H": v.H, "J": v.J, "L": self.hazard.L, "m": self.m}

    @property
    def K(self):
        return self.var.K

    def flat(self):
        """All parameters as one vector (used for the relative-change stopping rule)."""
        v, h = self.var, self.hazard
        return np.concatenate([v.b0.ravel(), v.B.ravel(), v.A.ravel(), v.Sigma.ravel(),
                               h.beta0, h.beta1, h.beta2.ravel(), self.omega.ravel(), self.pi])

    def copy(self):
        return ModelParams(self.hazard.copy(), self.omega.copy(), self.pi.copy(), self.var.copy(), self.m)


@dataclass
class FitResult:
    params: ModelParams
    posteriors: Posteriors | None
    loglik_trace: list
    icl: float
    iterations: int
    converged: bool
    lambda0: float
    df: int = 0
    seed: int | None = None

    @property
    def loglik(self):
        return self.loglik_trace[-1]


@dataclass
class GridSelection:
    """Outcome of a ``(K, lambda0)`` grid search."""

    K_list: list
    lambda_grid: list
    cells: list
    selected: FitResult
    params: dict = field(default_factory=dict)

    @property
    def selected_cell(self):
        return {"K": self.selected.params.K, "lambda0": self.selected.lambda0}

    def icl_table(self):
        """ICL as an array ``(len(K_list), len(lambda_grid))``; NaN for failed cells."""
        tab = np.full((len(self.K_list), len(self.lambda_grid)), np.nan)
        for c in self.cells:
            if c["icl"] is not None:
                tab[self.K_list.index(c["K"]), c["index"]] = c["icl"]
        return tab


def lambda_grid(n=20, lo=1e-4, hi=0.05, mode="log"):
    """Baseline penalties: 0 followed by ``n`` values between ``lo`` and ``hi``.

    ``mode="log"`` spaces the logarithms evenly, ``"linear"`` the values, and
    ``"exp"`` returns ``exp`` of evenly spaced exponents in ``[lo, hi]``.
    """
    if mode == "log":
        vals = np.geomspace(lo, hi, n)
    elif mode == "linear":
        vals = np.linspace(lo, hi, n)
    elif mode == "exp":
        vals = np.exp(np.linspace(lo, hi, n))
    else:
        raise InputError(f"unknown lambda grid mode {mode!r}")
    return [0.0] + [float(v) for v in vals]


def _state_weights(post, H):
    return post.uni[H:].sum(axis=2)


def _wls_minnorm(X, Y, w):
    sw = np.sqrt(w)
    D = np.column_stack([np.ones(X.shape[0]), X]) * sw[:, None]
    sol = np.linalg.lstsq(D, Y * sw[:, None], rcond=None)[0]
    return sol[0], sol[1:].T


def _run_lengths(labels):
    change = np.flatnonzero(np.diff(labels)) + 1
    bounds = np.concatenate([[0], change, [labels.size]])
    return np.diff(bounds)


def initialize(data, K, seed=0, H=1, m=28, link="cloglog", method="kmeans"):
    """Starting values from a seeded hard partition of the regression rows.

    ``method="kmeans"`` clusters the standardized outcomes; ``method="blocks"``
    splits time into ``K`` contiguous blocks assigned to states in a seeded
    order. Each part gets an unpenalized VAR fit. Hazards start constant with
    mean dwell ``T / (4K)`` for blocks and the mean run length of the partition
    for k-means.
    """
    T = data.T
    if T <= H + K:
        raise InputError(f"series of length {T} is too short for H={H} and K={K}")
    X, Y = em_var.design_matrix(data, H)
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    if K == 1:
        labels = np.zeros(n, dtype=int)
    elif method == "blocks":
        order = rng.permutation(K)
        labels = order[np.minimum(np.arange(n) * K // n, K - 1)]
    elif method == "kmeans":
        from sklearn.cluster import KMeans

        Ys = (Y - Y.mean(axis=0)) / np.where(Y.std(axis=0) > 0, Y.std(axis=0), 1.0)
        km = KMeans(n_clusters=K, n_init=1, random_state=int(rng.integers(2**31 - 1)))
        labels = km.fit_predict(Ys)
        # canonical ordering: by mean of the first outcome
        rank = np.argsort([Y[labels == k, 0].mean() if np.any(labels == k) else np.inf for k in range(K)])
        labels = np.argsort(rank)[labels]
    else:
        raise InputError(f"unknown initialization method {method!r}")

    p, J = data.p, data.J
    b0 = np.zeros((K, p))
    Cs = []
    Sig = np.zeros((K, p, p))
    for k in range(K):
        w = (labels == k).astype(float)
        if w.sum() < 2:
            w = np.ones(n)
        bk, Ck = _wls_minnorm(X, Y, w)
        b0[k] = bk
        Cs.append(Ck)
        Sig[k] = em_var.covariance_update(Y - bk - X @ Ck.T, w)
    var = VarParams(b0, np.zeros((K, p, J)), np.zeros((K, H, p, p)), Sig)
    for k in range(K):
        var.set_coef(k, b0[k], Cs[k])

    if method == "kmeans" and K > 1:
        mean_dwell = max(float(np.mean(_run_lengths(labels))), 1.5)
    else:
        mean_dwell = max(T / (4.0 * K), 1.5)
    q0 = float(link_function(1.0 / mean_dwell, link))
    hz = HazardParams(np.full(K, q0), np.zeros(K), np.zeros((K, data.L)), link)
    return ModelParams(hz, default_switch_matrix(K), np.full(K, 1.0 / K), var, m)


def e_step(data, params: ModelParams):
    return forward_backward(data, params, em_var.emission_loglik(data, params.var))


def _hazard_rows(data, post, k, m):
    T = data.T
    d = np.arange(1, m + 1, dtype=float)
    s = post.leave[1:, k, :].ravel()
    f = post.stay[1:, k, :].ravel()
    keep = (s + f) > 1e-14
    Z = np.repeat(data.z[1:], m, axis=0)
    D = np.tile(d, T - 1)
    X = np.column_stack([np.ones(D.size), D, Z])
    return X[keep], s[keep], f[keep]


def _binom_loglik(X, s, f, beta, link):
    q = inverse_link(X @ beta, link)
    return float(s @ np.log(q) + f @ np.log1p(-q))


def irls_hazard(X, successes, failures, beta, link="cloglog", tol=1e-10):
    """Weighted binomial regression for one state's hazards by Fisher scoring.

    Each row contributes ``s log q + f log(1 - q)``. Steps are halved while the
    log-likelihood decreases and coefficients are kept within ``+-BETA_BOUND``.
    """
    s, f = np.asarray(successes, float), np.asarray(failures, float)
    beta = np.clip(np.asarray(beta, float).copy(), -BETA_BOUND, BETA_BOUND)
    n = s + f
    ll = _binom_loglik(X, s, f, beta, link)
    if not np.isfinite(ll):
        raise NumericalError("hazard log-likelihood is not finite at the starting point")
    for _ in range(IRLS_MAX_ITER):
        eta = X @ beta
        if link == "cloglog":
            ee = np.exp(np.minimum(eta, 700.0))
            q = -np.expm1(-ee)
            dq = ee * np.exp(-ee)
        else:
            q = 1.0 / (1.0 + np.exp(-eta))
            dq = q * (1.0 - q)
        q = np.clip(q, 1e-10, 1 - 1e-10)
        v = q * (1.0 - q)
        score = X.T @ ((s - n * q) * dq / v)
        wts = n * dq * dq / v
        info = (X * wts[:, None]).T @ X
        try:
            step = np.linalg.solve(info + 1e-12 * np.eye(info.shape[0]), score)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular information matrix in hazard regression") from exc
        t = 1.0
        for _ in range(IRLS_MAX_HALVINGS + 1):
            cand = np.clip(beta + t * step, -BETA_BOUND, BETA_BOUND)
            ll_new = _binom_loglik(X, s, f, cand, link)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            return beta
        moved = np.max(np.abs(cand - beta))
        beta, ll = cand, ll_new
        if moved < tol * (1.0 + np.max(np.abs(beta))):
            break
    return beta


def m_step(data, posteriors: Posteriors, params: ModelParams, lambda0=0.0):
    """One maximization step given the current posteriors.

    ``params`` supplies warm starts and is returned unchanged where a block has
    no information (Omega rows without switches, ``K = 1`` hazards).
    """
    K, m, H, p = params.K, params.m, params.var.H, params.var.p
    new = params.copy()
    pi = posteriors.uni[0].sum(axis=1)
    new.pi = pi / pi.sum()

    if K >= 3:
        S = posteriors.switch[1:].sum(axis=0)
        np.fill_diagonal(S, 0.0)
        for k in range(K):
            tot = S[k].sum()
            if tot > 1e-300:
                new.omega[k] = S[k] / tot
        np.fill_diagonal(new.omega, 0.0)

    if K >= 2:
        hz = new.hazard
        for k in range(K):
            X, s, f = _hazard_rows(data, posteriors, k, m)
            if X.shape[0] == 0:
                continue
            try:
                b = irls_hazard(X, s, f, hz.coef(k), hz.link)
            except NumericalError as exc:
                raise NumericalError(f"hazard regression failed for state {k}: {exc}") from exc
            hz.beta0[k], hz.beta1[k], hz.beta2[k] = b[0], b[1], b[2:]

    W = _state_weights(posteriors, H)
    for k in range(K):
        w = W[:, k]
        Nk = w.sum()
        if Nk < p + 1:
            raise DegenerateStateError(
                f"state {k} has effective sample size {Nk:.3g} < p + 1", state=k)
        lam = lambda0 * np.sqrt(Nk)
        b0, C = em_var.weighted_lasso_fit(data, w, lam, H, init=params.var.coef(k))
        new.var.set_coef(k, b0, C)
        new.var.Sigma[k] = em_var.covariance_update(em_var.state_residuals(data, new.var, k), w)
    return new


def relative_change(old: ModelParams, new: ModelParams):
    """Largest parameter change: relative for coefficients, absolute for ``omega`` and ``pi``.

    Probabilities drifting towards 0 shrink geometrically under EM, so their
    relative change would never settle.
    """
    a, b = old.flat(), new.flat()
    n_prob = old.omega.size + old.pi.size
    rel = np.abs(b - a) / (np.abs(b) + 1e-8)
    rel[-n_prob:] = np.abs(b - a)[-n_prob:]
    return float(np.max(rel))


def degrees_of_freedom(params: ModelParams):
    v = params.var
    K, p = v.K, v.p
    df = int(np.count_nonzero(v.B) + np.count_nonzero(v.A)) + K * p + K * p * (p + 1) // 2
    if K >= 2:
        df += K * (2 + params.hazard.L)
    if K >= 3:
        df += K * (K - 2)
    return df + K - 1


def icl(fit: FitResult, data):
    """Completed-data BIC: ``-2 (loglik + sum_t log max_s post[t, s]) + df log(T - H)``.

    ``s`` runs over super-states; lower is better.
    """
    post = fit.posteriors
    T = post.uni.shape[0]
    best = post.uni.reshape(T, -1).max(axis=1)
    completed = fit.loglik + float(np.sum(np.log(np.maximum(best, 1e-300))))
    df = degrees_of_freedom(fit.params)
    return -2.0 * completed + df * np.log(data.T - fit.params.var.H)


def fit(data, K, lambda0=0.0, seed=0, H=1, m=28, link="cloglog", max_iter=500,
        tol=EM_TOL, init: ModelParams | None = None, init_method="kmeans"):
    """Penalized EM from ``init`` (or :func:`initialize` with ``seed``).

    Stops when every parameter changes by less than ``tol`` relative to its
    magnitude, or after ``max_iter`` iterations (``converged=False``).
    """
    if lambda0 < 0:
        raise InputError("lambda0 must be nonnegative")
    params = init.copy() if init is not None else initialize(data, K, seed, H, m, link, init_method)
    if params.K != K:
        raise InputError("initial parameters have the wrong number of states")
    params.var.validate()
    trace = []
    converged = False
    it = 0
    post = e_step(data, params)
    while it < max_iter:
        trace.append(post.loglik)
        new = m_step(data, post, params, lambda0)
        it += 1
        change = relative_change(params, new)
        params = new
        post = e_step(data, params)
        if change < tol:
            converged = True
            break
    trace.append(post.loglik)
    res = FitResult(params, post, trace, np.nan, it, converged, float(lambda0), seed=seed)
    res.df = degrees_of_freedom(params)
    res.icl = float(icl(res, data))
    return res


def grid_select(data, K_list=(2, 3, 4), lambda0_list=None, seeds=(0,), H=1, m=28,
                link="cloglog", max_iter=500, init_method="kmeans", keep_posteriors=False):
    """Fit every ``(K, lambda0)`` cell and select the smallest ICL.

    For each ``K`` and seed the penalties are visited in increasing order, each
    fit warm-started from the previous one. The best seed per cell is kept.
    A cell whose fit fails (degenerate state, numerical error) is recorded with
    its error and skipped.
    """
    lambda0_list = lambda_grid() if lambda0_list is None else list(lambda0_list)
    if not len(K_list) or not len(lambda0_list):
        raise InputError("grids must be non-empty")
    order = np.argsort(lambda0_list, kind="stable")
    best = {}
    errors = {}
    for K in K_list:
        for seed in seeds:
            start = None
            for idx in order:
                lam = lambda0_list[idx]
                try:
                    res = fit(data, K, lam, seed, H, m, link, max_iter, init=start,
                              init_method=init_method)
                except (DegenerateStateError, NumericalError) as exc:
                    log.info("K=%d lambda0=%g seed=%s failed: %s", K, lam, seed, exc)
                    errors.setdefault((K, idx), str(exc))
                    start = None
                    continue
                start = res.params
                log.debug("K=%d lambda0=%g seed=%s icl=%.3f iters=%d", K, lam, seed, res.icl, res.iterations)
                cur = best.get((K, idx))
                if cur is None or res.icl < cur.icl:
                    best[(K, idx)] = res if keep_posteriors else replace(res, posteriors=None)
    if not best:
        raise NumericalError("every grid cell failed: " + "; ".join(sorted(set(errors.values())))[:2000])
    cells = []
    for K in K_list:
        for idx, lam in enumerate(lambda0_list):
            r = best.get((K, idx))
            cells.append({
                "K": K, "index": idx, "lambda0": float(lam),
                "icl": None if r is None else float(r.icl),
                "loglik": None if r is None else float(r.loglik),
                "df": None if r is None else int(r.df),
                "iterations": None if r is None else int(r.iterations),
                "converged": None if r is None else bool(r.converged),
                "seed": None if r is None else r.seed,
                "error": errors.get((K, idx)) if r is None else None,
            })
    pool = [r for r in best.values() if r.converged] or list(best.values())
    selected = min(pool, key=lambda r: (r.icl, r.params.K, r.lambda0))
    if selected.posteriors is None:
        selected = replace(selected, posteriors=e_step(data, selected.params))
    params = {key: r.params for key, r in best.items()}
    return GridSelection(list(K_list), [float(v) for v in lambda0_list], cells, selected, params)


def permute_states(params: ModelParams, perm):
    """Relabel states so that new state ``i`` is old state ``perm[i]``."""
    perm = np.asarray(perm)
    v, h = params.var, params.hazard
    var = VarParams(v.b0[perm], v.B[perm], v.A[perm], v.Sigma[perm])
    hz = HazardParams(h.beta0[perm], h.beta1[perm], h.beta2[perm], h.link)
    omega = params.omega[np.ix_(perm, perm)]
    return ModelParams(hz, omega, params.pi[perm], var, params.m)


def param_vector(params: ModelParams):
    """Named flat parameter vector with 1-based indices in the names."""
    v, h = params.var, params.hazard
    names, vals = [], []

    def add(prefix, arr):
        for idx in np.ndindex(arr.shape):
            names.append(f"{prefix}[{','.join(str(i + 1) for i in idx)}]")
            vals.append(float(arr[idx]))

    add("b0", v.b0)
    add("B", v.B)
    add("A", v.A)
    add("Sigma", v.Sigma)
    add("beta0", h.beta0)
    add("beta1", h.beta1)
    add("beta2", h.beta2)
    add("omega", params.omega)
    add("pi", params.pi)
    return names, np.array(vals)
