"""Simulation from the generative model and parametric bootstrap."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import em as em_mod
from .data import Dataset
from .emission import relaxed_refit, covariance_update, state_residuals, stability_check
from .em import ModelParams, permute_states, param_vector
from .errors import HSMMVarError, InputError, NumericalError
from .hidden import hazard_array

log = logging.getLogger(__name__)

BURN_IN = 200
MAX_FAILED_SHARE = 0.2


@dataclass
class SimConfig:
    """Everything needed to draw one synthetic dataset.

    ``x`` and ``z`` are explicit covariate paths; when omitted they are drawn
    as standard normals with ``J`` and ``L`` columns taken from ``params``.
    """

    params: ModelParams
    T: int
    seed: int = 0
    x: np.ndarray | None = None
    z: np.ndarray | None = None
    time: np.ndarray | None = None
    y_names: tuple = ()

    def __post_init__(self):
        dims = self.params.dims
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        if self.x is None:
            self.x = rng.standard_normal((self.T, dims["J"]))
        if self.z is None:
            self.z = rng.standard_normal((self.T, dims["L"]))
        self.x = np.asarray(self.x, dtype=float).reshape(self.T, dims["J"])
        self.z = np.asarray(self.z, dtype=float).reshape(self.T, dims["L"])
        report = stability_check(self.params.var)
        if not report.stable.all():
            bad = np.flatnonzero(~report.stable)
            raise InputError(f"states {bad.tolist()} are not stable (spectral radius {report.radius[bad]})")

    def rngs(self):
        chain, obs = np.random.SeedSequence([self.seed, 2]).spawn(2)
        return np.random.default_rng(chain), np.random.default_rng(obs)


def simulate_chain(params: ModelParams, z, rng):
    """Draw a state path and its (uncapped) dwell path along hazard covariates ``z``.

    The hazard uses the dwell capped at ``m``; ``dwell`` records the true count.
    """
    z = np.asarray(z, dtype=float)
    T, K, m = z.shape[0], params.K, params.m
    q = hazard_array(params.hazard, z, m)
    u = rng.random(T)
    dest = rng.random(T)
    cum = np.cumsum(params.omega, axis=1)
    states = np.empty(T, dtype=int)
    dwell = np.empty(T, dtype=int)
    states[0] = int(np.searchsorted(np.cumsum(params.pi), rng.random(), side="right"))
    states[0] = min(states[0], K - 1)
    dwell[0] = 1
    for t in range(1, T):
        k, d = states[t - 1], dwell[t - 1]
        if u[t] < q[t, k, min(d, m) - 1]:
            states[t] = min(int(np.searchsorted(cum[k], dest[t], side="right")), K - 1)
            dwell[t] = 1
        else:
            states[t] = k
            dwell[t] = d + 1
    return states, dwell


def simulate_observations(params: ModelParams, states, x, rng, burn_in=BURN_IN):
    """Draw outcomes given a state path.

    The lag buffer is warmed up for ``burn_in`` steps under the first state with
    covariates held at ``x[0]``; those draws are discarded.
    """
    v = params.var
    report = stability_check(v)
    if not report.stable.all():
        bad = np.flatnonzero(~report.stable)
        raise InputError(f"states {bad.tolist()} are not stable (spectral radius {report.radius[bad]})")
    x = np.asarray(x, dtype=float)
    T, p, H = len(states), v.p, v.H
    chol = np.linalg.cholesky(v.Sigma)
    total = burn_in + T
    eps = rng.standard_normal((total, p))
    y = np.zeros((total + H, p))
    Astack = v.A.transpose(0, 2, 1, 3).reshape(v.K, p, H * p)
    for s in range(total):
        t = s - burn_in
        k = states[0] if t < 0 else states[t]
        xt = x[0] if t < 0 else x[t]
        lagged = y[s:s + H][::-1].ravel()
        y[s + H] = v.b0[k] + v.B[k] @ xt + Astack[k] @ lagged + chol[k] @ eps[s]
    return y[H + burn_in:]


def simulate(config: SimConfig):
    """Draw ``(dataset, states, dwell)`` for ``config``."""
    rc, ro = config.rngs()
    states, dwell = simulate_chain(config.params, config.z, rc)
    y = simulate_observations(config.params, states, config.x, ro)
    data = Dataset(y, config.x, config.z, config.time, config.y_names)
    return data, states, dwell


# -- segmentation metrics ---------------------------------------------------------------

def align_labels(truth, labels, K_true=None, K_est=None):
    """Permutation ``perm`` with estimated state ``perm[i]`` matched to true state ``i``.

    Uses the assignment maximizing agreement. Only defined for equal state counts.
    """
    K_true = int(max(truth.max(), labels.max()) + 1) if K_true is None else K_true
    K_est = K_true if K_est is None else K_est
    if K_true != K_est:
        raise InputError("label alignment needs equal numbers of states")
    conf = np.zeros((K_true, K_est))
    np.add.at(conf, (truth, labels), 1)
    rows, cols = linear_sum_assignment(-conf)
    perm = np.empty(K_true, dtype=int)
    perm[rows] = cols
    return perm


def accuracy(truth, labels):
    """Share of correctly labelled times after the best relabelling of ``labels``."""
    truth, labels = np.asarray(truth), np.asarray(labels)
    K = int(max(truth.max(), labels.max()) + 1)
    conf = np.zeros((K, K))
    np.add.at(conf, (truth, labels), 1)
    rows, cols = linear_sum_assignment(-conf)
    return float(conf[rows, cols].sum() / truth.size)


def adjusted_rand(truth, labels):
    from sklearn.metrics import adjusted_rand_score

    return float(adjusted_rand_score(truth, labels))


# -- parametric bootstrap ---------------------------------------------------------------

def debias(data, fitted: em_mod.FitResult):
    """Relaxed-LASSO refit: unpenalized VAR on the selected support, then covariances."""
    params = fitted.params.copy()
    post = fitted.posteriors if fitted.posteriors is not None else em_mod.e_step(data, params)
    H = params.var.H
    W = post.uni[H:].sum(axis=2)
    for k in range(params.K):
        active = params.var.coef(k) != 0
        b0, C = relaxed_refit(data, W[:, k], active, H)
        params.var.set_coef(k, b0, C)
        params.var.Sigma[k] = covariance_update(state_residuals(data, params.var, k), W[:, k])
    return params


@dataclass
class BootstrapResult:
    B: int
    names: list
    point: np.ndarray
    estimates: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mean: np.ndarray
    selection: np.ndarray
    selected_K: list
    selected_lambda: list
    failures: list = field(default_factory=list)
    debiased: ModelParams | None = None
    level: float = 0.95

    def table(self):
        """Rows ``(name, point, mean, lower, upper, selection)``."""
        return [(n, self.point[i], self.mean[i], self.lower[i], self.upper[i], self.selection[i])
                for i, n in enumerate(self.names)]


def _slope_mask(names):
    return np.array([n.startswith(("B[", "A[")) for n in names])


def parametric_bootstrap(data, fitted: em_mod.FitResult, B, K_list=None, lambda0_list=None,
                         seeds=(0,), seed=0, level=0.95, max_iter=500, init_method="kmeans"):
    """Simulate ``B`` datasets from the debiased fit and re-run the whole selection on each.

    Covariates are held at their observed paths. Replicas are aligned to the
    simulating states through their MAP segmentation; replicas that select a
    different ``K`` enter the selection counts but not the intervals.
    """
    if B < 1:
        raise InputError("B must be >= 1")
    truth = debias(data, fitted)
    K = truth.K
    dims = truth.dims
    K_list = [K] if K_list is None else list(K_list)
    lambda0_list = [fitted.lambda0] if lambda0_list is None else list(lambda0_list)
    names, point = param_vector(fitted.params)
    children = np.random.SeedSequence([seed, 3]).spawn(B)
    rows, sel_K, sel_lam, failures = [], [], [], []
    for b in range(B):
        rc, ro = [np.random.default_rng(s) for s in children[b].spawn(2)]
        try:
            states, _ = simulate_chain(truth, data.z, rc)
            y = simulate_observations(truth, states, data.x, ro)
            rep = data.replace_y(y)
            gs = em_mod.grid_select(rep, K_list, lambda0_list, seeds, dims["H"], dims["m"],
                                    truth.hazard.link, max_iter, init_method)
        except HSMMVarError as exc:
            log.info("bootstrap replica %d failed: %s", b, exc)
            failures.append({"replica": b, "error": str(exc)})
            continue
        res = gs.selected
        sel_K.append(res.params.K)
        sel_lam.append(res.lambda0)
        if res.params.K == K:
            labels = np.argmax(res.posteriors.state_probs, axis=1)
            perm = align_labels(states, labels, K, K)
            rows.append(param_vector(permute_states(res.params, perm))[1])
        log.info("bootstrap replica %d: K=%d lambda0=%g", b, res.params.K, res.lambda0)
    if len(failures) > MAX_FAILED_SHARE * B:
        raise NumericalError(f"{len(failures)} of {B} bootstrap replicas failed")
    est = np.array(rows).reshape(-1, len(names))
    a = (1 - level) / 2
    if est.shape[0]:
        lower, upper = np.quantile(est, [a, 1 - a], axis=0)
        mean = est.mean(axis=0)
        selection = np.where(_slope_mask(names), (est != 0).mean(axis=0), np.nan)
    else:
        lower = upper = mean = selection = np.full(len(names), np.nan)
    return BootstrapResult(B, names, point, est, lower, upper, mean, selection, sel_K, sel_lam,
                           failures, truth, level)
