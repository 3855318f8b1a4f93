import numpy as np
import pytest
from scipy.optimize import minimize

from hsmmvar import em
from hsmmvar.data import Dataset
from hsmmvar.emission import VarParams, design_matrix
from hsmmvar.errors import DegenerateStateError, InputError
from hsmmvar.hidden import HazardParams, default_switch_matrix, inverse_link
from hsmmvar.simboot import SimConfig, simulate

from oracles import weighted_least_squares


def two_state_truth(p=2, H=1, J=1, L=1, sep=3.0):
    A = np.zeros((2, H, p, p))
    A[0, 0] = 0.3 * np.eye(p)
    A[1, 0] = -0.2 * np.eye(p)
    b0 = np.array([np.full(p, sep / 2), np.full(p, -sep / 2)])
    B = np.zeros((2, p, J))
    B[0, 0, 0] = 0.5
    var = VarParams(b0, B, A, np.stack([np.eye(p), 0.5 * np.eye(p) + 0.2]))
    hz = HazardParams([-2.5, -2.0], [0.02, 0.0], np.array([[0.3] * L, [-0.3] * L]))
    return em.ModelParams(hz, default_switch_matrix(2), np.array([0.5, 0.5]), var, m=10)


def small_instance(seed, T=300, **kw):
    truth = two_state_truth(**kw)
    data, states, _ = simulate(SimConfig(truth, T, seed))
    return truth, data, states


class TestGrid:
    def test_default_grid(self):
        g = em.lambda_grid()
        assert len(g) == 21 and g[0] == 0.0
        assert g[1] == pytest.approx(1e-4) and g[-1] == pytest.approx(0.05)
        assert np.allclose(np.diff(np.log(g[1:])), np.log(500) / 19)

    def test_modes(self):
        assert em.lambda_grid(3, 0.0, 1.0, "exp") == pytest.approx([0.0, 1.0, np.exp(0.5), np.e])
        assert em.lambda_grid(3, 1.0, 3.0, "linear") == pytest.approx([0.0, 1.0, 2.0, 3.0])
        with pytest.raises(InputError):
            em.lambda_grid(mode="cubic")


class TestInitialize:
    def test_deterministic(self):
        _, data, _ = small_instance(0)
        a = em.initialize(data, 2, seed=3, H=1, m=10)
        b = em.initialize(data, 2, seed=3, H=1, m=10)
        np.testing.assert_array_equal(a.flat(), b.flat())

    def test_blocks_mean_dwell(self):
        _, data, _ = small_instance(0)
        p = em.initialize(data, 3, seed=0, H=1, m=10, method="blocks")
        q = inverse_link(p.hazard.beta0)
        np.testing.assert_allclose(1 / q, 300 / 12, rtol=1e-12)
        np.testing.assert_allclose(p.omega, default_switch_matrix(3))
        np.testing.assert_allclose(p.pi, 1 / 3)
        assert np.all(p.hazard.beta1 == 0) and np.all(p.hazard.beta2 == 0)

    def test_too_short(self):
        data = Dataset(np.zeros((3, 1)))
        with pytest.raises(InputError):
            em.initialize(data, 2, H=1)

    def test_unknown_method(self):
        _, data, _ = small_instance(0)
        with pytest.raises(InputError):
            em.initialize(data, 2, method="spectral")


def _wbinom_negll(beta, X, s, f, link):
    q = inverse_link(X @ beta, link)
    return -(s @ np.log(q) + f @ np.log1p(-q))


class TestMStep:
    @pytest.mark.parametrize("link", ["cloglog", "logit"])
    def test_irls_matches_direct_optimizer(self, link):
        rng = np.random.default_rng(1)
        n = 400
        X = np.column_stack([np.ones(n), rng.integers(1, 15, n), rng.normal(size=n)])
        true = np.array([-1.5, 0.08, 0.4])
        q = inverse_link(X @ true, link)
        tot = rng.uniform(0.2, 1.0, n)
        s = tot * q * rng.uniform(0.5, 1.5, n)
        f = tot - np.minimum(s, tot * 0.99)
        s = np.minimum(s, tot * 0.99)
        beta = em.irls_hazard(X, s, f, np.zeros(3), link)
        ref = minimize(_wbinom_negll, np.zeros(3), args=(X, s, f, link), method="BFGS",
                       options={"gtol": 1e-10, "maxiter": 10000})
        np.testing.assert_allclose(beta, ref.x, atol=1e-5)
        assert _wbinom_negll(beta, X, s, f, link) <= ref.fun + 1e-9

    def test_irls_bounded(self):
        X = np.ones((5, 1))
        beta = em.irls_hazard(X, np.ones(5), np.zeros(5), np.zeros(1))
        assert abs(beta[0]) <= em.BETA_BOUND

    def _posteriors(self, K=3, seed=2):
        rng = np.random.default_rng(seed)
        truth = two_state_truth()
        data, _, _ = simulate(SimConfig(truth, 200, seed))
        params = em.initialize(data, K, seed=seed, H=1, m=10)
        return data, params, em.e_step(data, params)

    def test_pi_is_first_posterior(self):
        data, params, post = self._posteriors()
        new = em.m_step(data, post, params)
        np.testing.assert_allclose(new.pi, post.uni[0].sum(axis=1), atol=1e-14)

    def test_omega_maximizes_its_block(self):
        data, params, post = self._posteriors()
        new = em.m_step(data, post, params)
        S = post.switch[1:].sum(axis=0)
        np.fill_diagonal(S, 0.0)

        def q_omega(om):
            mask = ~np.eye(3, dtype=bool)
            return float(np.sum(S[mask] * np.log(om[mask])))

        best = q_omega(new.omega)
        rng = np.random.default_rng(0)
        for _ in range(200):
            om = new.omega.copy()
            for k in range(3):
                off = [j for j in range(3) if j != k]
                om[k, off] = rng.dirichlet(np.ones(2) * 5)
            assert q_omega(om) <= best + 1e-12
        np.testing.assert_allclose(new.omega.sum(axis=1), 1.0, atol=1e-14)
        assert np.all(np.diag(new.omega) == 0)

    def test_hazard_block_matches_optimizer(self):
        data, params, post = self._posteriors(K=2)
        new = em.m_step(data, post, params)
        for k in range(2):
            X, s, f = em._hazard_rows(data, post, k, params.m)
            ref = minimize(_wbinom_negll, new.hazard.coef(k) + 0.1, args=(X, s, f, "cloglog"), method="BFGS",
                           options={"gtol": 1e-9, "maxiter": 10000})
            np.testing.assert_allclose(new.hazard.coef(k), ref.x, atol=1e-4)

    def test_degenerate_state(self):
        data, params, post = self._posteriors(K=2)
        post.uni[:, 1, :] = 0.0
        post.uni[:, 0, 0] = 1.0
        with pytest.raises(DegenerateStateError) as err:
            em.m_step(data, post, params)
        assert err.value.state == 1


class TestFit:
    @pytest.mark.parametrize("seed", range(5))
    def test_loglik_non_decreasing(self, seed):
        _, data, _ = small_instance(seed)
        res = em.fit(data, 2, 0.0, seed=seed, H=1, m=10, max_iter=200)
        assert np.all(np.diff(res.loglik_trace) >= -1e-8)

    def test_single_state_is_one_shot_var(self):
        rng = np.random.default_rng(3)
        data = Dataset(rng.normal(size=(150, 2)), rng.normal(size=(150, 1)))
        res = em.fit(data, 1, 0.0, H=2, m=5)
        assert res.converged and res.iterations <= 2
        X, Y = design_matrix(data, 2)
        b0, C = weighted_least_squares(X, Y, np.ones(X.shape[0]))
        np.testing.assert_allclose(res.params.var.b0[0], b0, atol=1e-8)
        np.testing.assert_allclose(res.params.var.coef(0), C, atol=1e-8)

    def test_recovers_separated_states(self):
        truth, data, states = small_instance(4, T=600)
        res = em.fit(data, 2, 0.0, H=1, m=10)
        labels = np.argmax(res.posteriors.state_probs, axis=1)
        agree = max(np.mean(labels == states), np.mean(labels != states))
        assert agree > 0.95

    def test_penalty_sparsifies(self):
        _, data, _ = small_instance(5)
        dense = em.fit(data, 2, 0.0, H=2, m=10)
        sparse = em.fit(data, 2, 0.05, H=2, m=10, init=dense.params)
        nz = lambda r: np.count_nonzero(r.params.var.A) + np.count_nonzero(r.params.var.B)
        assert nz(sparse) < nz(dense)
        assert sparse.df < dense.df

    def test_icl_formula(self):
        _, data, _ = small_instance(6)
        res = em.fit(data, 2, 0.0, H=1, m=10)
        post = res.posteriors
        best = post.uni.reshape(data.T, -1).max(axis=1)
        manual = -2 * (res.loglik + np.log(best).sum()) + res.df * np.log(data.T - 1)
        assert res.icl == pytest.approx(manual, rel=1e-12)

    def test_degrees_of_freedom(self):
        p = two_state_truth(p=2, H=1, J=1, L=1)
        # slopes: B has 1 nonzero, A has 4; intercepts 4; covariances 6; hazards 6; initial probs 1
        assert em.degrees_of_freedom(p) == 1 + 4 + 4 + 6 + 6 + 1

    def test_negative_penalty(self):
        _, data, _ = small_instance(0)
        with pytest.raises(InputError):
            em.fit(data, 2, -0.1)

    def test_deterministic(self):
        _, data, _ = small_instance(7)
        a = em.fit(data, 2, 0.001, seed=1, H=1, m=10)
        b = em.fit(data, 2, 0.001, seed=1, H=1, m=10)
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())
        assert a.loglik_trace == b.loglik_trace


class TestSelection:
    def test_grid_prefers_true_K(self):
        _, data, _ = small_instance(8, T=500)
        gs = em.grid_select(data, [1, 2, 3], [0.0, 0.01], seeds=[0], H=1, m=10)
        assert gs.selected.params.K == 2
        tab = gs.icl_table()
        assert tab.shape == (3, 2)
        assert gs.selected.icl == pytest.approx(np.nanmin(tab))
        assert gs.selected.posteriors is not None

    def test_empty_grid(self):
        _, data, _ = small_instance(0)
        with pytest.raises(InputError):
            em.grid_select(data, [], [0.0])

    def test_relative_change(self):
        p = two_state_truth()
        q = p.copy()
        assert em.relative_change(p, q) == 0.0
        q.var.b0[0, 0] *= 1.01
        assert em.relative_change(p, q) == pytest.approx(0.01 / 1.01, rel=1e-6)
        r = p.copy()
        r.pi = np.array([0.5 - 1e-6, 0.5 + 1e-6])
        assert em.relative_change(p, r) == pytest.approx(1e-6, rel=1e-6)

    def test_permutation_leaves_likelihood(self):
        truth, data, _ = small_instance(9)
        perm = em.permute_states(truth, [1, 0])
        assert em.e_step(data, perm).loglik == pytest.approx(em.e_step(data, truth).loglik, abs=1e-9)
        names, vals = em.param_vector(perm)
        assert names[0] == "b0[1,1]" and vals[0] == truth.var.b0[1, 0]
