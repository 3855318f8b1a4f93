"""Bundled ground-truth configurations.

``simulation(K)`` reproduces the design of the K = 2, 3, 4 simulation study:
p = 3 outcomes, H = 4 lags, one standard normal covariate shared by the
emission mean and the hazards. Intercepts, covariate effects, dwell
coefficients and switching probabilities are the reference true values. The
lag matrices are chosen here: they are stable, decrease from lag 1
to lag 3 within each outcome and leave room for a lag-4 term. Correlation
matrices were drawn once from an inverse-Wishart centred on the identity
(seed 20240501) and frozen here.

``application_like()`` mimics the dimensions of the air-quality application
(p = 5, H = 7, two emission and two hazard covariates, daily dates).
"""
from __future__ import annotations

import numpy as np

from .emission import VarParams
from .em import ModelParams
from .hidden import HazardParams, default_switch_matrix

_B0 = [[3.0, 1.5, 2.0], [-1.0, -2.0, -1.5], [0.75, 0.25, -0.25], [1.25, -1.0, 0.5]]
_B = [[0.5, 0.0, 0.0], [-0.2, 0.4, -0.1], [0.6, 0.0, 0.1], [0.0, -0.5, 0.0]]
_BETA = [(-1.0, 0.15, -0.5), (-2.0, 0.35, 0.5), (-0.5, 0.0, 0.1), (-3.0, 0.5, -0.2)]
_CORR = [
    [[1.0, 0.136, 0.346], [0.136, 1.0, -0.154], [0.346, -0.154, 1.0]],
    [[1.0, -0.309, -0.157], [-0.309, 1.0, 0.521], [-0.157, 0.521, 1.0]],
    [[1.0, 0.654, 0.534], [0.654, 1.0, 0.154], [0.534, 0.154, 1.0]],
    [[1.0, 0.051, 0.076], [0.051, 1.0, -0.582], [0.076, -0.582, 1.0]],
]
_A = [
    [  # state 1
        [[0.40, 0.15, 0.00], [0.00, 0.35, 0.00], [0.20, 0.00, 0.30]],
        [[0.20, 0.00, 0.00], [0.00, 0.20, 0.00], [0.00, 0.00, 0.15]],
        [[0.10, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.00]],
        [[0.00, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.20]],
    ],
    [  # state 2
        [[0.30, 0.00, 0.00], [0.20, 0.40, 0.00], [0.00, 0.00, 0.45]],
        [[0.15, 0.00, 0.00], [0.00, 0.20, 0.00], [0.00, 0.00, 0.00]],
        [[0.00, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.00]],
        [[0.20, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.00]],
    ],
    [  # state 3
        [[0.25, 0.00, 0.00], [0.00, 0.30, 0.15], [0.00, 0.00, 0.35]],
        [[0.00, 0.00, 0.00], [0.00, 0.15, 0.00], [0.00, 0.00, 0.20]],
        [[0.00, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.00]],
        [[0.00, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.00]],
    ],
    [  # state 4
        [[0.45, 0.00, 0.00], [0.00, 0.25, 0.00], [0.00, 0.20, 0.30]],
        [[0.20, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.15]],
        [[0.00, 0.00, 0.00], [0.00, 0.00, 0.00], [0.00, 0.00, 0.00]],
        [[0.00, 0.00, 0.00], [0.00, 0.20, 0.00], [0.00, 0.00, 0.00]],
    ],
]
_OMEGA = {
    3: [[0.0, 0.5, 0.5], [0.9, 0.0, 0.1], [0.45, 0.55, 0.0]],
    4: [[0.0, 0.25, 0.25, 0.5], [0.7, 0.0, 0.2, 0.1], [0.15, 0.25, 0.0, 0.6], [0.3, 0.2, 0.5, 0.0]],
}

SIMULATION_T = 1100


def simulation(K=2, m=28):
    """True parameters of the simulation-study scenario with ``K`` states."""
    if K not in (2, 3, 4):
        raise ValueError("simulation scenarios exist for K = 2, 3, 4")
    var = VarParams(
        b0=np.array(_B0[:K]),
        B=np.array(_B[:K])[:, :, None],
        A=np.array(_A[:K]),
        Sigma=np.array(_CORR[:K]),
    )
    beta = np.array(_BETA[:K])
    hz = HazardParams(beta[:, 0], beta[:, 1], beta[:, 2:], "cloglog")
    omega = default_switch_matrix(2) if K == 2 else np.array(_OMEGA[K])
    return ModelParams(hz, omega, np.full(K, 1.0 / K), var, m)


def simulation_covariates(T=SIMULATION_T, seed=0):
    """One mean-zero Gaussian covariate used both as ``x`` and ``z``."""
    w = np.random.default_rng(np.random.SeedSequence([seed, 7])).standard_normal((T, 1))
    return w, w.copy()


# -- application-like synthetic truth -------------------------------------------------

APP_T = 1096
APP_NAMES = ("NO", "NO2", "PM1", "PM2.5r", "PM10r")
APP_H = 7

_APP_MU = [[3.76, 3.70, 1.80, 1.00, 2.76], [2.34, 3.24, 0.84, 0.67, 1.77]]


def _app_lags(scale):
    A = np.zeros((APP_H, 5, 5))
    A[0] = np.array([
        [0.45, 0.10, 0.00, 0.00, 0.00],
        [0.15, 0.35, 0.00, 0.00, 0.00],
        [0.00, 0.00, 0.40, 0.10, 0.00],
        [0.00, 0.00, 0.00, 0.35, 0.10],
        [0.00, 0.00, 0.00, 0.15, 0.40],
    ]) * scale
    A[1] = np.diag([0.10, 0.10, 0.10, 0.00, 0.00]) * scale
    A[6] = np.diag([0.10, 0.00, 0.00, 0.00, 0.10]) * scale
    return A


def _app_sigma(rho_n, rho_pm, rho_cross, sd):
    R = np.eye(5)
    R[0, 1] = R[1, 0] = rho_n
    R[3, 4] = R[4, 3] = rho_pm
    R[2, 3] = R[3, 2] = R[2, 4] = R[4, 2] = rho_pm / 2
    for i in (0, 1):
        for j in (2, 3, 4):
            R[i, j] = R[j, i] = rho_cross
    return R * np.outer(sd, sd)


def application_like():
    """Two-state truth shaped after the air-quality fit.

    Emission covariates: a seasonal temperature proxy and a weekend flag.
    Hazard covariates: standardized wind speed and precipitation. The
    high-pollution state has a decreasing hazard (long spells) and leaves it
    faster with wind and rain; the low state has a constant hazard.
    """
    K, p = 2, 5
    A = np.stack([_app_lags(1.0), _app_lags(0.8)])
    B = np.zeros((K, p, 2))
    B[0, :, 0] = [-0.10, -0.05, -0.08, 0.00, 0.00]
    B[0, :, 1] = [-0.30, -0.20, 0.00, 0.00, 0.00]
    B[1, :, 0] = [-0.05, 0.00, -0.06, 0.00, 0.05]
    B[1, :, 1] = [-0.25, -0.15, 0.00, 0.00, 0.00]
    b0 = np.stack([(np.eye(p) - A[k].sum(axis=0)) @ np.array(_APP_MU[k]) for k in range(K)])
    Sigma = np.stack([
        _app_sigma(0.8, 0.7, 0.5, np.array([0.45, 0.35, 0.40, 0.35, 0.40])),
        _app_sigma(0.7, 0.6, 0.1, np.array([0.50, 0.40, 0.45, 0.40, 0.45])),
    ])
    var = VarParams(b0, B, A, Sigma)
    hz = HazardParams(np.array([-2.0, -0.9]), np.array([-0.03, 0.0]),
                      np.array([[0.5, 0.5], [-0.3, -0.3]]), "cloglog")
    return ModelParams(hz, default_switch_matrix(2), np.array([0.5, 0.5]), var, 28)


def application_covariates(T=APP_T, seed=0, start="2020-01-01"):
    """Dates plus emission covariates ``(temperature, weekend)`` and hazard covariates ``(wind, precipitation)``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    dates = np.arange(np.datetime64(start), np.datetime64(start) + T)
    doy = np.arange(T) / 365.25
    temp = np.sin(2 * np.pi * (doy - 0.3)) + 0.3 * rng.standard_normal(T)
    # 1970-01-01 was a Thursday: weekday index 0 = Monday
    weekday = (dates.astype("datetime64[D]").astype(int) + 3) % 7
    weekend = (weekday >= 5).astype(float)
    wind = rng.standard_normal(T)
    rain = np.maximum(rng.standard_normal(T), 0.0) * 2.0 - 0.8
    x = np.column_stack([temp, weekend])
    z = np.column_stack([wind, rain])
    return dates.astype(str), x, z
