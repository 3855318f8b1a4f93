"""State-dependent Gaussian VAR(H) emissions with exogenous covariates.

For regression rows ``t = H..T-1`` the design row is
``[x_t, y_{t-1}, ..., y_{t-H}]`` and the coefficient row of outcome ``j`` is
``[B[j], A_1[j], ..., A_H[j]]``; the intercept ``b0[j]`` is kept apart and is
never penalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import linalg

from .errors import DegenerateStateError, InputError, NumericalError

COV_FLOOR = 1e-8
CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
LOG2PI = np.log(2.0 * np.pi)


@dataclass
class VarParams:
    """Emission parameters for all states.

    Shapes: ``b0 (K, p)``, ``B (K, p, J)``, ``A (K, H, p, p)``, ``Sigma (K, p, p)``.
    """

    b0: np.ndarray
    B: np.ndarray
    A: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        self.b0 = np.asarray(self.b0, dtype=float)
        K, p = self.b0.shape
        self.B = np.asarray(self.B, dtype=float).reshape(K, p, -1)
        self.A = np.asarray(self.A, dtype=float).reshape(K, -1, p, p)
        self.Sigma = np.asarray(self.Sigma, dtype=float).reshape(K, p, p)

    @property
    def K(self):
        return self.b0.shape[0]

    @property
    def p(self):
        return self.b0.shape[1]

    @property
    def J(self):
        return self.B.shape[2]

    @property
    def H(self):
        return self.A.shape[1]

    def coef(self, k):
        """Slope matrix ``(p, J + p H)`` of state ``k`` aligned with :func:`design_matrix`."""
        return np.concatenate([self.B[k]] + [self.A[k, h] for h in range(self.H)], axis=1)

    def set_coef(self, k, b0, C):
        J, p = self.J, self.p
        self.b0[k] = b0
        self.B[k] = C[:, :J]
        for h in range(self.H):
            self.A[k, h] = C[:, J + h * p: J + (h + 1) * p]

    def copy(self):
        return VarParams(self.b0.copy(), self.B.copy(), self.A.copy(), self.Sigma.copy())

    def validate(self, tol=1e-12):
        for k in range(self.K):
            S = self.Sigma[k]
            if np.max(np.abs(S - S.T)) > tol:
                raise InputError(f"Sigma of state {k} is not symmetric")
            if np.linalg.eigvalsh(S).min() <= 0:
                raise InputError(f"Sigma of state {k} is not positive definite")


def design_matrix(data, H):
    """Regression design ``(T - H, J + p H)`` and matching outcomes ``(T - H, p)``."""
    T = data.T
    if T <= H:
        raise InputError(f"series of length {T} is too short for {H} lags")
    lags = [data.y[H - h:T - h] for h in range(1, H + 1)]
    X = np.concatenate([data.x[H:]] + lags, axis=1)
    return X, data.y[H:]


def conditional_mean(t, k, data, params: VarParams):
    """``b0_k + B_k x_t + sum_h A_hk y_{t-h}`` for a 0-based time ``t >= H``."""
    H = params.H
    if t < H or t >= data.T:
        raise InputError(f"conditional mean needs {H} lags; got t={t}")
    mu = params.b0[k] + params.B[k] @ data.x[t]
    for h in range(1, H + 1):
        mu = mu + params.A[k, h - 1] @ data.y[t - h]
    return mu


def conditional_means(data, params: VarParams):
    """All conditional means, shape ``(T - H, K, p)``."""
    X, _ = design_matrix(data, params.H)
    return np.stack([params.b0[k] + X @ params.coef(k).T for k in range(params.K)], axis=1)


def emission_loglik(data, params: VarParams):
    """State-conditional Gaussian log-densities, shape ``(T, K)``.

    The first ``H`` rows only provide lags and are returned as zeros.
    """
    H, K = params.H, params.K
    _, Y = design_matrix(data, H)
    mu = conditional_means(data, params)
    out = np.zeros((data.T, K))
    for k in range(K):
        try:
            Lc = linalg.cholesky(params.Sigma[k], lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"covariance of state {k} is not positive definite") from exc
        r = linalg.solve_triangular(Lc, (Y - mu[:, k]).T, lower=True)
        out[H:, k] = (-0.5 * params.p * LOG2PI - np.log(np.diag(Lc)).sum()
                      - 0.5 * np.einsum("ij,ij->j", r, r))
    return out


@numba.njit(cache=True)
def _soft(v, lam):
    if v > lam:
        return v - lam
    if v < -lam:
        return v + lam
    return 0.0


@numba.njit(cache=True)
def _objective(G, c, beta, lam):
    P = beta.shape[0]
    quad = 0.0
    for i in range(P):
        s = 0.0
        for j in range(P):
            s += G[i, j] * beta[j]
        quad += beta[i] * s
    lin = 0.0
    l1 = 0.0
    for i in range(P):
        lin += c[i] * beta[i]
        l1 += abs(beta[i])
    return 0.5 * quad - lin + lam * l1


@numba.njit(cache=True)
def _cd(G, c, lam, beta, tol, max_sweeps):
    P = beta.shape[0]
    grad = c - G @ beta
    trace = np.empty(max_sweeps + 1)
    trace[0] = _objective(G, c, beta, lam)
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        delta = 0.0
        for l in range(P):
            if G[l, l] <= 0.0:
                continue
            old = beta[l]
            new = _soft(grad[l] + G[l, l] * old, lam) / G[l, l]
            if new != old:
                diff = new - old
                for i in range(P):
                    grad[i] -= G[i, l] * diff
                beta[l] = new
                if abs(diff) > delta:
                    delta = abs(diff)
        trace[sweeps] = _objective(G, c, beta, lam)
        if delta < tol:
            break
    return beta, sweeps, trace[:sweeps + 1]


def _polish(G, c, lam, beta):
    """Exact solution on the current support when it satisfies the optimality conditions."""
    act = beta != 0
    if not act.any():
        return beta
    s = np.sign(beta[act])
    try:
        sol = np.linalg.solve(G[np.ix_(act, act)], c[act] - lam * s)
    except np.linalg.LinAlgError:
        return beta
    if np.any(np.sign(sol) != s):
        return beta
    cand = np.zeros_like(beta)
    cand[act] = sol
    grad = c - G @ cand
    if np.any(np.abs(grad[~act]) > lam * (1 + 1e-9) + 1e-14):
        return beta
    return cand


@dataclass
class LassoInfo:
    sweeps: np.ndarray
    objective_traces: list
    lambda_max: float


def _standardized_problem(X, Y, w):
    W = w.sum()
    xm = w @ X / W
    ym = w @ Y / W
    Xc = X - xm
    xs = np.sqrt(w @ (Xc * Xc) / W)
    usable = xs > 1e-12 * (1.0 + np.abs(xm))
    scale = np.where(usable, xs, 1.0)
    Xs = Xc / scale
    Xs[:, ~usable] = 0.0
    Xw = Xs * w[:, None]
    G = Xw.T @ Xs / W
    Cmat = Xw.T @ (Y - ym) / W
    return G, Cmat, xm, ym, scale, usable


def _penalized_rows(data, weights, H):
    X, Y = design_matrix(data, H)
    w = np.asarray(weights, dtype=float)
    if w.shape == (data.T,):
        w = w[H:]
    elif w.shape != (data.T - H,):
        raise InputError("weights must have one entry per time")
    if np.any(w < -1e-12):
        raise InputError("weights must be nonnegative")
    w = np.clip(w, 0.0, None)
    if not w.sum() > 0:
        raise DegenerateStateError("all weights are zero")
    return X, Y, w


def lambda_max(data, weights, H):
    """Smallest penalty that zeroes every penalized coefficient."""
    X, Y, w = _penalized_rows(data, weights, H)
    _, Cmat, *_ = _standardized_problem(X, Y, w)
    return float(np.abs(Cmat).max()) if Cmat.size else 0.0


def weighted_lasso_fit(data, weights, lambda_k, H, init=None, return_info=False):
    """Weighted L1-penalized least squares for one state, one outcome at a time.

    Each outcome ``j`` minimizes

        sum_t w_t e_tj^2 / (2 sum_t w_t) + lambda_k * ||beta_j||_1

    over the slopes expressed on weighted-standardized predictors, by cyclic
    coordinate descent. The returned coefficients are on the original scale.

    Parameters
    ----------
    weights : array of length T (the first H entries are ignored) or T - H
    init : (p, J + p H) array, optional
        Warm start for the slopes on the original scale.

    Returns
    -------
    b0 : (p,) intercepts
    C : (p, J + p H) slopes, see :meth:`VarParams.coef`
    """
    if lambda_k < 0:
        raise InputError("penalty must be nonnegative")
    X, Y, w = _penalized_rows(data, weights, H)
    G, Cmat, xm, ym, scale, usable = _standardized_problem(X, Y, w)
    p, P = Y.shape[1], X.shape[1]
    C = np.zeros((p, P))
    sweeps = np.zeros(p, dtype=int)
    traces = []
    for j in range(p):
        start = np.zeros(P) if init is None else np.asarray(init, dtype=float)[j] * scale
        start = np.where(usable, start, 0.0)
        beta, n, trace = _cd(G, Cmat[:, j].copy(), float(lambda_k), start.copy(), CD_TOL, CD_MAX_SWEEPS)
        beta = _polish(G, Cmat[:, j], float(lambda_k), beta)
        C[j] = np.where(usable, beta / scale, 0.0)
        sweeps[j] = n
        traces.append(trace)
    b0 = ym - C @ xm
    if return_info:
        lmax = float(np.abs(Cmat).max()) if Cmat.size else 0.0
        return b0, C, LassoInfo(sweeps, traces, lmax)
    return b0, C


def lasso_objective(data, weights, lambda_k, H, b0, C):
    """Value of the penalized criterion minimized by :func:`weighted_lasso_fit`."""
    X, Y, w = _penalized_rows(data, weights, H)
    _, _, _, _, scale, _ = _standardized_problem(X, Y, w)
    R = Y - b0 - X @ C.T
    return float((w @ (R * R)).sum() / (2 * w.sum()) + lambda_k * np.abs(C * scale).sum())


def covariance_update(residuals, weights):
    """Weighted residual covariance with an eigenvalue floor at ``COV_FLOOR``."""
    E = np.asarray(residuals, dtype=float)
    w = np.asarray(weights, dtype=float)
    W = w.sum()
    if not W > 0:
        raise DegenerateStateError("covariance update needs positive total weight")
    S = (E * w[:, None]).T @ E / W
    S = 0.5 * (S + S.T)
    lo = np.linalg.eigvalsh(S).min()
    if lo < COV_FLOOR:
        S = S + (COV_FLOOR - lo) * np.eye(S.shape[0])
    return S


def relaxed_refit(data, weights, active_set, H):
    """Unpenalized weighted least squares restricted to ``active_set``.

    ``active_set`` is a boolean ``(p, J + p H)`` mask; inactive slopes stay 0.
    """
    X, Y, w = _penalized_rows(data, weights, H)
    active_set = np.asarray(active_set, dtype=bool)
    p, P = Y.shape[1], X.shape[1]
    if active_set.shape != (p, P):
        raise InputError(f"active set must have shape {(p, P)}")
    sw = np.sqrt(w)
    b0 = np.zeros(p)
    C = np.zeros((p, P))
    for j in range(p):
        cols = np.flatnonzero(active_set[j])
        D = np.column_stack([np.ones(X.shape[0]), X[:, cols]]) * sw[:, None]
        sol, _, rank, _ = np.linalg.lstsq(D, Y[:, j] * sw, rcond=None)
        if rank < D.shape[1]:
            raise NumericalError(f"restricted design is singular for outcome row {j}")
        b0[j] = sol[0]
        C[j, cols] = sol[1:]
    return b0, C


def state_residuals(data, params: VarParams, k):
    X, Y = design_matrix(data, params.H)
    return Y - params.b0[k] - X @ params.coef(k).T


@dataclass
class StabilityReport:
    radius: np.ndarray
    stable: np.ndarray
    marginal_mean: np.ndarray


def companion_matrix(A):
    """Companion matrix of a lag sequence ``A`` of shape ``(H, p, p)``."""
    H, p, _ = A.shape
    M = np.zeros((p * H, p * H))
    M[:p] = np.concatenate(list(A), axis=1)
    M[p:, :-p] = np.eye(p * (H - 1))
    return M


def stability_check(params: VarParams):
    """Spectral radius of each state's companion matrix and the implied mean.

    The mean is ``(I - sum_h A_h)^{-1} b0`` with covariates at zero; it is NaN
    for states whose lag polynomial is singular at one.
    """
    K, p = params.K, params.p
    radius = np.zeros(K)
    mean = np.full((K, p), np.nan)
    for k in range(K):
        if params.H > 0:
            radius[k] = np.max(np.abs(np.linalg.eigvals(companion_matrix(params.A[k]))))
        try:
            mean[k] = np.linalg.solve(np.eye(p) - params.A[k].sum(axis=0), params.b0[k])
        except np.linalg.LinAlgError:
            pass
    return StabilityReport(radius=radius, stable=radius < 1.0, marginal_mean=mean)
