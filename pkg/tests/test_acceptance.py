"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line.

The simulation-study and application-shape pipelines run through the CLI in
module-scoped fixtures; the determinism check reruns both into fresh
directories and compares manifests byte for byte.
"""
import json
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import yaml

from hsmmvar import cli, em, risk, scenarios
from hsmmvar.data import Dataset
from hsmmvar.emission import VarParams, design_matrix, emission_loglik, lambda_max, weighted_lasso_fit
from hsmmvar.fileio import load_model, read_table
from hsmmvar.hidden import HazardParams, default_switch_matrix, dwell_pmf, forward_backward, inverse_link, link_function
from hsmmvar.risk import DistressConfig, PredictiveMixture
from hsmmvar.simboot import SimConfig, adjusted_rand, align_labels, simulate, simulate_chain

from oracles import (
    conditional_by_precision,
    enumerate_paths,
    mc_quantile_and_es,
    quantile_se,
    sample_marginal,
    shapley_by_permutations,
    weighted_least_squares,
)

ROOT = Path(__file__).resolve().parents[1]
N_REPLICAS = 20
BOOT_B = 30


# -- 1 ------------------------------------------------------------------------------

def _random_stable_instance(rng, m, T, link):
    p, H = 2, 1
    A = np.stack([np.diag(rng.uniform(-0.6, 0.6, p)) for _ in range(2)])[:, None]
    Sig = []
    for _ in range(2):
        M = rng.normal(size=(p, p))
        Sig.append(M @ M.T / p + 0.5 * np.eye(p))
    var = VarParams(rng.normal(0, 2, (2, p)), rng.normal(0, 0.5, (2, p, 1)), A, np.array(Sig))
    hz = HazardParams(rng.normal(-1, 0.7, 2), rng.normal(0, 0.3, 2), rng.normal(0, 0.5, (2, 1)), link)
    data = Dataset(rng.normal(size=(T, p)), rng.normal(size=(T, 1)), rng.normal(size=(T, 1)))
    params = SimpleNamespace(hazard=hz, omega=default_switch_matrix(2), pi=rng.dirichlet([1, 1]), m=m)
    return data, params, emission_loglik(data, var)


def test_criterion_1_oracle_likelihood(criterion):
    rng = np.random.default_rng(2024)
    cases = [(m, T, link, r) for m in (2, 3) for T in (4, 5, 6) for link in ("cloglog", "logit") for r in range(3)]
    inst = [_random_stable_instance(rng, m, T, link) for m, T, link, _ in cases]
    forward_backward(*inst[0])  # compile outside the timed region
    worst, elapsed = 0.0, 0.0
    for data, params, e in inst:
        t0 = time.perf_counter()
        post = forward_backward(data, params, e)
        elapsed += time.perf_counter() - t0
        ll, ps, pd = enumerate_paths(params.hazard, params.omega, params.pi, params.m, data.z, e)
        worst = max(worst, abs(post.loglik - ll), np.abs(post.state_probs - ps).max(), np.abs(post.uni - pd).max())
    ok = worst <= 1e-10 and elapsed < 1.0
    assert criterion("1", ok, f"{len(cases)} instances, max deviation {worst:.2e} (tol 1e-10), "
                              f"forward_backward time {elapsed:.3f}s (< 1s)")


# -- 2 ------------------------------------------------------------------------------

def _random_two_state(rng, p=2):
    b0 = rng.normal(0, 1.5, (2, p))
    A = np.stack([np.diag(rng.uniform(-0.5, 0.5, p)) for _ in range(2)])[:, None]
    Sig = []
    for _ in range(2):
        M = rng.normal(size=(p, p))
        Sig.append(M @ M.T / p + 0.3 * np.eye(p))
    var = VarParams(b0, rng.normal(0, 0.3, (2, p, 1)), A, np.array(Sig))
    hz = HazardParams(rng.uniform(-3, -1, 2), rng.uniform(0, 0.2, 2), rng.normal(0, 0.3, (2, 1)))
    return em.ModelParams(hz, default_switch_matrix(2), np.array([0.5, 0.5]), var, m=15)


def test_criterion_2_em_ascent(criterion):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst, iters = np.inf, []
    for r in range(20):
        truth = _random_two_state(rng)
        x = rng.normal(size=(300, 1))
        data, _, _ = simulate(SimConfig(truth, 300, r, x, x.copy()))
        res = em.fit(data, 2, 0.0, seed=r, H=1, m=15)
        worst = min(worst, float(np.min(np.diff(res.loglik_trace))))
        iters.append(res.iterations)
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-8 and elapsed < 60
    assert criterion("2", ok, f"20 fits, smallest loglik increment {worst:.3e} (slack -1e-8), "
                              f"iterations {min(iters)}-{max(iters)}, {elapsed:.1f}s (< 60s)")


# -- 3 ------------------------------------------------------------------------------

def _write_config(path, template, **updates):
    doc = yaml.safe_load((ROOT / "configs" / template).read_text())
    for key, val in updates.items():
        section, field = key.split("__")
        doc[section][field] = val
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return path


def _cli(*args):
    code = cli.main([str(a) for a in args])
    assert code == 0, f"hsmmvar {' '.join(map(str, args))} exited with {code}"


def run_simulation_study(root):
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for r in range(N_REPLICAS):
        rep = root / f"rep{r:02d}"
        cfg = _write_config(root / f"rep{r:02d}.yaml", "simulation.yaml", data__path=f"rep{r:02d}/sim/data.csv")
        _cli("simulate", "--config", cfg, "--seed", r, "--out", rep / "sim")
        _cli("select", "--config", cfg, "--seed", r, "--out", rep / "select")
    return time.perf_counter() - t0


def _labels(path, col):
    _, rows = read_table(path)
    return np.array([int(r[col]) - 1 for r in rows])


@pytest.fixture(scope="module")
def sim_study(tmp_path_factory):
    root = tmp_path_factory.mktemp("simulation_study")
    elapsed = run_simulation_study(root)
    truth = scenarios.simulation(2)
    out = SimpleNamespace(root=root, elapsed=elapsed, K=[], ari=[], beta0=[], A=[])
    for r in range(N_REPLICAS):
        rep = root / f"rep{r:02d}"
        manifest = json.loads((rep / "select" / "manifest.json").read_text())
        K = manifest["selection"]["K"]
        states = _labels(rep / "sim" / "states.csv", 1)
        labels = _labels(rep / "select" / "segmentation.csv", 1)
        out.K.append(K)
        out.ari.append(adjusted_rand(states, labels))
        if K == 2:
            params, _ = load_model(rep / "select" / "model.json")
            perm = align_labels(states, labels, 2, 2)
            aligned = em.permute_states(params, perm)
            out.beta0.append(aligned.hazard.beta0)
            out.A.append(aligned.var.A)
    out.true_nonzero = truth.var.A != 0
    return out


def test_criterion_3a_selects_two_states(sim_study, criterion):
    n2 = sum(k == 2 for k in sim_study.K)
    counts = {k: sim_study.K.count(k) for k in sorted(set(sim_study.K))}
    assert criterion("3a", n2 >= 18, f"K = 2 selected in {n2}/{N_REPLICAS} replicas (need >= 18), counts {counts}")


def test_criterion_3b_segmentation_ari(sim_study, criterion):
    ari = float(np.mean(sim_study.ari))
    assert criterion("3b", ari >= 0.95, f"mean ARI {ari:.4f} (need >= 0.95), min {min(sim_study.ari):.4f}")


def test_criterion_3c_dwell_intercept(sim_study, criterion):
    b = np.array(sim_study.beta0)
    mean = float(b[:, 0].mean()) if b.size else np.nan
    ok = abs(mean - (-1.0)) <= 0.15
    assert criterion("3c", ok, f"mean beta0 for the state with true beta0 = -1: {mean:.4f} over {len(b)} "
                               f"K = 2 replicas (need within +-0.15); other state mean "
                               f"{float(b[:, 1].mean()) if b.size else np.nan:.4f} (true -2)")


def test_criterion_3d_sparsity_pattern(sim_study, criterion):
    A = np.array(sim_study.A)
    sel = (A != 0).mean(axis=0)
    nz, z = sim_study.true_nonzero, ~sim_study.true_nonzero
    rate_zero, rate_nonzero = float(sel[z].mean()), float(sel[nz].mean())
    ok = rate_zero < 0.5 and rate_nonzero > 0.9
    assert criterion("3d", ok, f"true-zero AR coefficients selected {100 * rate_zero:.1f}% (need < 50%), "
                               f"true-nonzero {100 * rate_nonzero:.1f}% (need > 90%); per-coefficient range "
                               f"zeros {sel[z].min():.2f}-{sel[z].max():.2f}, nonzeros {sel[nz].min():.2f}-{sel[nz].max():.2f}")


def test_criterion_3_runtime(sim_study, criterion):
    assert criterion("3 runtime", sim_study.elapsed < 7200,
                     f"{N_REPLICAS} simulate+select runs in {sim_study.elapsed / 60:.1f} min (target < 120 min)")


# -- 4 ------------------------------------------------------------------------------

def test_criterion_4_lasso(criterion):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst, nonzero_at_max = 0.0, 0
    for r in range(50):
        T, p, J, H = int(rng.integers(60, 200)), int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(1, 4))
        data = Dataset(rng.normal(size=(T, p)), rng.normal(size=(T, J)))
        w = rng.uniform(0.05, 1.0, T)
        b0, C = weighted_lasso_fit(data, w, 0.0, H)
        X, Y = design_matrix(data, H)
        rb, rC = weighted_least_squares(X, Y, w[H:])
        worst = max(worst, np.abs(b0 - rb).max(), np.abs(C - rC).max())
        lm = lambda_max(data, w, H)
        for lam in (lm, 1.5 * lm):
            _, Cz = weighted_lasso_fit(data, w, lam, H)
            nonzero_at_max += int(np.count_nonzero(Cz))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and nonzero_at_max == 0 and elapsed < 10
    assert criterion("4", ok, f"50 instances, max |lasso(0) - WLS| {worst:.2e} (tol 1e-8), "
                              f"{nonzero_at_max} nonzero coefficients at lambda >= lambda_max, {elapsed:.2f}s (< 10s)")


# -- 5 ------------------------------------------------------------------------------

def test_criterion_5_dwell_law(criterion):
    t0 = time.perf_counter()
    q = 0.3
    hz = HazardParams([link_function(q)], [0.0], np.zeros((1, 0)))
    pmf = dwell_pmf(0, hz, np.zeros((60, 0)), 60)
    qq = float(inverse_link(hz.beta0[0]))
    d = np.arange(1, 61)
    geo_err = float(np.max(np.abs(pmf / (qq * (1 - qq) ** (d - 1)) - 1)))
    hz2 = HazardParams([link_function(q)] * 2, [0.0, 0.0], np.zeros((2, 0)))
    two = em.ModelParams(hz2, default_switch_matrix(2), np.array([1.0, 0.0]),
                         VarParams(np.zeros((2, 1)), np.zeros((2, 1, 0)), np.zeros((2, 1, 1, 1)), np.ones((2, 1, 1))), m=5)
    states, dwell = simulate_chain(two, np.zeros((200_000, 0)), np.random.default_rng(5))
    ends = np.flatnonzero(np.r_[dwell[1:] == 1, False])
    spells = dwell[ends][1:]
    emp = np.searchsorted(np.sort(spells), d, side="right") / spells.size
    ks = float(np.max(np.abs(emp - np.cumsum(pmf))))
    elapsed = time.perf_counter() - t0
    ok = geo_err < 1e-13 and ks < 0.01 and elapsed < 30
    assert criterion("5", ok, f"geometric pmf max relative error {geo_err:.1e} (rounding only, < 1e-13); "
                              f"Kolmogorov distance {ks:.4f} over {spells.size} spells (< 0.01); {elapsed:.1f}s (< 30s)")


# -- 6 ------------------------------------------------------------------------------

def _random_mixture(rng, p):
    w = rng.dirichlet([2.0, 2.0])
    mu = rng.normal(0, 1.5, (2, p))
    covs = []
    for _ in range(2):
        M = rng.normal(size=(p, p))
        covs.append(M @ M.T / p + 0.3 * np.eye(p))
    return PredictiveMixture(0, w, mu, np.array(covs))


def test_criterion_6_risk_oracles(criterion):
    rng = np.random.default_rng(6)
    n, tau = 10_000_000, 0.05
    t0 = time.perf_counter()
    zmax, eff, perm = 0.0, 0.0, 0.0
    n_checks, misses = 0, []
    for r in range(20):
        p = 3 + r % 2
        mix = _random_mixture(rng, p)
        nu, _ = risk.conditioning_values(mix, tau)
        for i in range(p):
            w, mu, sd = mix.marginal(i)
            draws = sample_marginal(w, mu, sd, n, rng)
            v_mc, es_mc, se_es = mc_quantile_and_es(draws, tau)
            v, es = risk.marginal_var(mix, i, tau), risk.marginal_es(mix, i, tau)
            zs = [abs(v - v_mc) / quantile_se(v, w, mu, sd, tau, n), abs(es - es_mc) / se_es]
            others = [j for j in range(p) if j != i]
            cw, cmu, csd = conditional_by_precision(mix.weights, mix.means, mix.covs, i, others, nu[others])
            cfg = DistressConfig(i, tuple(others), (), tau, tau)
            cond = sample_marginal(cw, cmu, csd, n, rng)
            cv_mc, ces_mc, cse = mc_quantile_and_es(cond, tau)
            cv, ces = risk.mcovar(mix, cfg), risk.mcoes(mix, cfg)
            zs += [abs(cv - cv_mc) / quantile_se(cv, cw, cmu, csd, tau, n), abs(ces - ces_mc) / cse]
            n_checks += 4
            zmax = max(zmax, *zs)
            misses += [(r, i, k, round(z, 2)) for k, z in zip(("VaR", "ES", "MCoVaR", "MCoES"), zs) if z > 3]
            eta = risk.coalition_measures(mix, i, tau, tau, "mcovar")
            sh = risk.shapley(mix, tau, tau)
            full = tuple(others)
            eff = max(eff, abs(np.sum(sh.values[i] * sh.sigma[i]) - (eta[full] - eta[()])))
            if p == 4:
                ref = shapley_by_permutations(others, lambda s: eta[s])
                perm = max(perm, max(abs(sh.raw[i, j] - v) for j, v in ref.items()))
    elapsed = time.perf_counter() - t0
    ok = not misses and eff <= 1e-8 and perm <= 1e-10 and elapsed < 300
    assert criterion("6", ok, f"{n_checks} VaR/ES/MCoVaR/MCoES comparisons with 1e7 draws, largest |z| {zmax:.2f} "
                              f"(need <= 3){', misses ' + str(misses) if misses else ''}; efficiency error {eff:.1e} "
                              f"(1e-8); p = 4 permutation error {perm:.1e} (1e-10); {elapsed:.0f}s (< 300s)")


# -- 7 ------------------------------------------------------------------------------

APP_DATA = ROOT / "data" / "application_synthetic.csv"


def run_application(root):
    root.mkdir(parents=True, exist_ok=True)
    cfg = _write_config(root / "application.yaml", "application.yaml", data__path=str(APP_DATA), model__file=None)
    t0 = time.perf_counter()
    _cli("select", "--config", cfg, "--out", root / "select")
    _cli("bootstrap", "--config", cfg, "--model", root / "select" / "model.json", "--out", root / "bootstrap")
    _cli("risk", "--config", cfg, "--model", root / "select" / "model.json", "--out", root / "risk")
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def application(tmp_path_factory):
    root = tmp_path_factory.mktemp("application")
    return root, run_application(root)


def _interior_minima(icl_path):
    header, rows = read_table(icl_path)
    out = {}
    for K in sorted({int(r[0]) for r in rows}):
        vals = np.array([np.nan if r[2] == "NA" or r[6] != "1" else float(r[2]) for r in rows if int(r[0]) == K])
        j = int(np.nanargmin(vals))
        out[K] = 0 < j < len(vals) - 1
    return out


def test_criterion_7_application_shape(application, criterion):
    root, elapsed = application
    sel = json.loads((root / "select" / "manifest.json").read_text())
    boot = json.loads((root / "bootstrap" / "manifest.json").read_text())
    rk = json.loads((root / "risk" / "manifest.json").read_text())
    K = sel["selection"]["K"]
    header, rows = read_table(root / "select" / "stability.csv")
    flags_ok = len(rows) == K and header[:3] == ["state", "spectral_radius", "stable"] and \
        all(r[2] in ("0", "1") for r in rows) and len(sel["fit"]["stability"]) == K
    interior = _interior_minima(root / "select" / "icl.csv")
    rh, rrows = read_table(root / "risk" / "risk.csv")
    p, H = 5, 7
    shape_ok = len(rrows) == 1096 - H and len(rh) == 1 + p * p + 4 * p
    ok = (all(m["status"] == "ok" for m in (sel, boot, rk)) and K in (2, 3, 4) and flags_ok
          and any(interior.values()) and shape_ok and boot["bootstrap"]["B"] == BOOT_B and elapsed < 4 * 3600)
    stable = [r[2] for r in rows]
    assert criterion("7", ok, f"select -> bootstrap(B={boot['bootstrap']['B']}) -> risk completed; selected K = {K}, "
                              f"lambda0 = {sel['selection']['lambda0']:.3g}; stability flags {stable}; interior ICL "
                              f"minimum by K {interior}; risk.csv {len(rrows)} x {len(rh) - 1}; "
                              f"{elapsed / 60:.1f} min (< 240 min)")


# -- 8 ------------------------------------------------------------------------------

def test_criterion_8_determinism(sim_study, application, tmp_path_factory, criterion):
    first_sim, (first_app, _) = sim_study.root, application
    again = tmp_path_factory.mktemp("rerun")
    run_simulation_study(again / "simulation_study")
    run_application(again / "application")
    pairs = [(p, again / "simulation_study" / p.relative_to(first_sim)) for p in sorted(first_sim.rglob("manifest.json"))]
    pairs += [(p, again / "application" / p.relative_to(first_app)) for p in sorted(first_app.rglob("manifest.json"))]
    diff = [str(a.relative_to(a.parents[1])) for a, b in pairs if a.read_bytes() != b.read_bytes()]
    ok = len(pairs) == 2 * N_REPLICAS + 3 and not diff
    assert criterion("8", ok, f"{len(pairs)} manifests compared after rerun, {len(diff)} differ"
                              f"{' ' + str(diff[:5]) if diff else ''}")
