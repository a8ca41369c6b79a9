import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import one_factor_model, random_params, two_factor_model
from test_gp import forward_draws
from fsem.basis import make_basis, penalty_matrix
from fsem.dataset import FunctionalDataset
from fsem.fit import (
    FitConfig,
    MCEngine,
    SufficientStats,
    _argmax_smallest,
    check_convergence,
    e_step,
    fit_mcem,
    m_step,
    m_step_measurement,
    m_step_structural,
    mc_schedule,
    penalized_q,
    select_smoothing,
)
from fsem.gp import assemble_joint_moments
from fsem.modelspec import build_design, build_measurement_design, build_structural_design
from fsem.sim import SimScenario, estimate_curves, generate, scenario_model, truth_curves


# ---------------------------------------------------------------------------
# complete-data fixtures for the M-step oracles

def _complete_data(design, N=30, seed=0):
    """Known latent vectors and covariates; returns (u list, covariate dicts, SufficientStats)."""
    rng = np.random.default_rng(seed)
    J = design.J
    us, covs, ws = [], [], []
    for _ in range(N):
        u = rng.normal(size=design.n_latent)
        cov = {"a": rng.normal(), "b": rng.uniform(-2, 2), "c": rng.normal(size=J)}
        w = np.concatenate([u, design.covariate_features(cov)])
        us.append(u)
        covs.append(cov)
        ws.append(w)
    W = np.array(ws)
    p = design.model.spec.p
    stats = SufficientStats(W.T @ W, rng.uniform(1.0, 5.0, p), np.full(p, 10.0 * N), N, 1)
    return us, covs, stats


def _factor_coefs(design, u):
    return np.array([u[design.slices[m]] for m in design.model.spec.factors])


def _gls(Xs, ys, Sigma, P):
    """Penalized GLS; minimum-norm solution when the normal equations are singular."""
    Sinv = np.linalg.inv(Sigma)
    G = sum(X.T @ Sinv @ X for X in Xs) + P
    r = sum(X.T @ Sinv @ y for X, y in zip(Xs, ys))
    return np.linalg.lstsq(G, r, rcond=1e-12)[0]


def _measurement_oracle(design, us, params, j, alpha):
    model = design.model
    blocks = design.blocks
    J = design.J
    Xs, ys = [], []
    for u in us:
        F, A, f_anchor = build_measurement_design(model, _factor_coefs(design, u), blocks)
        keep = np.flatnonzero(np.diag(A[j]))
        Xs.append(F[:, keep])
        y = u[design.slices[j]].copy()
        for (ind, _), f in f_anchor.items():
            if ind == j:
                y -= blocks.projector @ f
        ys.append(y)
    free = [ld for ld in model.loadings_of(j) if not ld.anchored]
    sizes = [J] + [{"fixed": 1, "concurrent": J, "historical": J * J}[ld.effect] for ld in free]
    P = np.zeros((sum(sizes), sum(sizes)))
    pos = J
    for ld, wd in zip(free, sizes[1:]):
        P[pos:pos + wd, pos:pos + wd] = alpha * penalty_matrix(design.basis, ld.effect).matrix
        pos += wd
    theta = _gls(Xs, ys, params.Sigma_eps[j], P)
    out = {("beta", j): theta[:J]}
    pos = J
    for ld, wd in zip(free, sizes[1:]):
        out[("loading", j, ld.factor)] = theta[pos:pos + wd]
        pos += wd
    resid = [y - X @ theta for X, y in zip(Xs, ys)]
    return out, sum(np.outer(r, r) for r in resid) / len(us)


def _structural_oracle(design, us, covs, params, m, alpha):
    model = design.model
    spec = model.spec
    J = design.J
    Xs, ys = [], []
    for u, cov in zip(us, covs):
        S, B = build_structural_design(model, _factor_coefs(design, u), cov, design.blocks, design.covariate_bases)
        keep = np.flatnonzero(np.diag(B[m]))
        Xs.append(S[:, keep])
        ys.append(u[design.slices[m]])
    pieces = []
    for e in spec.latent_edges:
        if e.target == m:
            pieces.append((("gamma_eta", m, e.source), penalty_matrix(design.basis, e.effect).matrix))
    for e in spec.covariate_edges:
        if e.factor != m:
            continue
        if e.effect == "smooth":
            Pm = penalty_matrix(design.basis, "smooth", design.covariate_bases[e.covariate]).matrix
        else:
            Pm = penalty_matrix(design.basis, "concurrent").matrix
        pieces.append((("gamma_x", m, e.covariate), Pm))
    sizes = [Pm.shape[0] for _, Pm in pieces]
    P = np.zeros((sum(sizes), sum(sizes)))
    pos = 0
    for (_, Pm), wd in zip(pieces, sizes):
        P[pos:pos + wd, pos:pos + wd] = alpha * Pm
        pos += wd
    theta = _gls(Xs, ys, params.Sigma_zeta[m], P)
    out, pos = {}, 0
    for (key, _), wd in zip(pieces, sizes):
        out[key] = theta[pos:pos + wd]
        pos += wd
    resid = [y - X @ theta for X, y in zip(Xs, ys)]
    return out, sum(np.outer(r, r) for r in resid) / len(us), Xs


@pytest.fixture(scope="module")
def rich_design():
    return build_design(two_factor_model(), make_basis("bspline", 5), covariate_ranges={"b": (-2.0, 2.0)},
                        covariate_basis_size=4)


@pytest.mark.parametrize("alpha", [0.0, 1.0])
@pytest.mark.parametrize("indicator", ["z1", "z2", "z3", "z4"])
def test_measurement_m_step_matches_gls_oracle(rich_design, alpha, indicator):
    params = random_params(rich_design, seed=5)
    us, _, stats = _complete_data(rich_design)
    coefs, Sigma, s2 = m_step_measurement(rich_design, stats, params, indicator, alpha)
    want, Sigma_want = _measurement_oracle(rich_design, us, params, indicator, alpha)
    assert set(coefs) == set(want)
    for k in want:
        assert np.max(np.abs(coefs[k] - want[k])) < 1e-8
    assert np.max(np.abs(Sigma - Sigma_want)) < 1e-8
    j = rich_design.model.spec.indicators.index(indicator)
    assert s2 == pytest.approx(stats.rss[j] / stats.n_obs[j], rel=1e-14)


@pytest.mark.parametrize("alpha", [0.0, 1.0])
@pytest.mark.parametrize("factor", ["f1", "f2"])
def test_structural_m_step_matches_gls_oracle(rich_design, alpha, factor):
    params = random_params(rich_design, seed=6)
    us, covs, stats = _complete_data(rich_design, N=300, seed=1)
    coefs, Sigma = m_step_structural(rich_design, stats, params, factor, alpha)
    want, Sigma_want, Xs = _structural_oracle(rich_design, us, covs, params, factor, alpha)
    assert set(coefs) == set(want)
    got = np.concatenate([coefs[k] for k in want])
    ref = np.concatenate(list(want.values()))
    if alpha == 0.0 and factor == "f2":
        # unpenalized historical surface: only the s <= t half is identified,
        # and both sides return the minimum-norm solution
        assert np.linalg.matrix_rank(sum(X.T @ X for X in Xs)) < got.size
        assert max(np.max(np.abs(X @ (got - ref))) for X in Xs) < 1e-8
    else:
        assert np.max(np.abs(got - ref)) < 1e-8
    assert np.max(np.abs(Sigma - Sigma_want)) < 1e-8


def test_huge_penalty_gives_linear_loading(rich_design):
    params = random_params(rich_design, seed=7)
    _, _, stats = _complete_data(rich_design)
    coefs, _, _ = m_step_measurement(rich_design, stats, params, "z4", 1e12)
    lam = coefs[("loading", "z4", "f2")]
    R2 = penalty_matrix(rich_design.basis, "concurrent").matrix
    assert lam @ R2 @ lam < 1e-6


def test_zero_residuals_give_zero_noise_variance(rich_design):
    params = random_params(rich_design, seed=8)
    _, _, stats = _complete_data(rich_design)
    stats.rss[:] = 0.0
    _, _, s2 = m_step_measurement(rich_design, stats, params, "z2", 0.0)
    assert s2 == 0.0


def test_no_regressors_gives_second_moment():
    design = build_design(one_factor_model(covariate=False), make_basis("bspline", 5))
    params = random_params(design, seed=0)
    rng = np.random.default_rng(0)
    U = rng.normal(size=(25, design.n_latent))
    W = np.hstack([U, np.ones((25, 1))])
    stats = SufficientStats(W.T @ W, np.ones(2), np.full(2, 50.0), 25, 1)
    coefs, Sigma = m_step_structural(design, stats, params, "eta", 1.0)
    eta = U[:, design.slices["eta"]]
    assert coefs == {}
    np.testing.assert_allclose(Sigma, eta.T @ eta / 25, atol=1e-12)


# ---------------------------------------------------------------------------
# the M-step maximizes Q conditionally

def _toy_stats(design, seed):
    params = random_params(design, seed=seed)
    rng = np.random.default_rng(seed)
    obs, covs = [], []
    for _ in range(12):
        o = {}
        for j in design.model.spec.indicators:
            t = np.sort(rng.uniform(0, 1, 6))
            o[j] = (t, rng.normal(size=6))
        obs.append(o)
        covs.append({"x": rng.normal()})
    ds = FunctionalDataset(tuple(f"s{i}" for i in range(12)), design.model.spec.indicators, obs, covs)
    return params, ds, e_step(design, params, ds, 40, seed=seed)


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.sampled_from([0.0, 0.1, 3.0]), k=st.integers(0, 10_000))
def test_m_step_is_conditional_maximizer(seed, alpha, k):
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    params, _, stats = _toy_stats(design, seed)
    new = m_step(design, stats, params, alpha)
    # coefficients maximize Q with the covariances held at their previous values
    mixed = new.copy()
    mixed.Sigma_eps = {j: params.Sigma_eps[j].copy() for j in params.Sigma_eps}
    mixed.Sigma_zeta = {m: params.Sigma_zeta[m].copy() for m in params.Sigma_zeta}
    q0 = penalized_q(design, mixed, stats, alpha)
    keys = [t.key for eq in design.equations for t in eq.free_terms]
    key = keys[k % len(keys)]
    vec = np.asarray(mixed.get(key), dtype=float)
    pos = (k // len(keys)) % vec.size
    for step in (1e-3, -1e-3):
        trial = mixed.copy()
        v = vec.copy()
        v[pos] += step
        trial.set(key, v)
        assert penalized_q(design, trial, stats, alpha) <= q0 + 1e-8 * abs(q0)
    # covariances and noise variances maximize Q given the new coefficients
    q1 = penalized_q(design, new, stats, alpha)
    for step in (1e-3, -1e-3):
        trial = new.copy()
        trial.sigma2["z1"] = new.sigma2["z1"] * (1 + step)
        S = trial.Sigma_zeta["eta"]
        trial.Sigma_zeta["eta"] = S + step * np.trace(S) / S.shape[0] * np.eye(S.shape[0])
        assert penalized_q(design, trial, stats, alpha) <= q1 + 1e-8 * abs(q1)


def test_m_step_does_not_decrease_q():
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    params, ds, stats = _toy_stats(design, 3)
    for _ in range(20):
        new = m_step(design, stats, params, 0.5)
        assert penalized_q(design, new, stats, 0.5) >= penalized_q(design, params, stats, 0.5) - 1e-8
        params = new


# ---------------------------------------------------------------------------
# E-step

def _dense_dataset(design, params, N=6, M=25, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0.02, 0.98, M)
    obs = [{j: (t.copy(), rng.normal(size=M)) for j in design.model.spec.indicators} for _ in range(N)]
    covs = [{"x": rng.normal()} for _ in range(N)]
    return FunctionalDataset(tuple(f"s{i}" for i in range(N)), design.model.spec.indicators, obs, covs)


def test_exact_e_step_matches_brute_force_conditioning():
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    params = random_params(design, seed=4)
    rng = np.random.default_rng(1)
    obs = [{"z1": (np.sort(rng.uniform(0, 1, 4)), rng.normal(size=4)), "z2": (np.sort(rng.uniform(0, 1, 3)),
                                                                               rng.normal(size=3))}
           for _ in range(3)]
    obs[2]["z2"] = (np.zeros(0), np.zeros(0))
    ds = FunctionalDataset(("a", "b", "c"), ("z1", "z2"), obs, [{"x": 0.4}, {"x": -1.0}, {"x": 2.0}])
    stats = e_step(design, params, ds, 1, exact=True)
    jm = assemble_joint_moments(design, params, ds)
    Mt = np.zeros_like(stats.Mt)
    rss = np.zeros(2)
    for i, s in enumerate(jm.subjects):
        # joint (u, z) covariance, conditioned with an explicit inverse
        Szi = np.linalg.inv(s.Sigma_z)
        C = jm.Sigma_u @ s.H.T
        m = s.mu_u + C @ Szi @ (s.z - s.mu_z)
        V = jm.Sigma_u - C @ Szi @ C.T
        f = design.covariate_features(ds.covariates[i])
        w = np.concatenate([m, f])
        Mt += np.outer(w, w)
        Mt[:m.size, :m.size] += V
        r2 = (s.z - s.H @ m) ** 2 + np.einsum("kd,de,ke->k", s.H, V, s.H)
        rss += np.bincount(s.owner, weights=r2, minlength=2)
    assert np.max(np.abs(stats.Mt - Mt)) < 1e-9 * max(1.0, np.abs(Mt).max())
    np.testing.assert_allclose(stats.rss, rss, rtol=1e-10)
    np.testing.assert_array_equal(stats.n_obs, [12, 6])


def test_exact_e_step_noise_free_limit():
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    params = random_params(design, seed=2)
    for j in params.sigma2:
        params.sigma2[j] = 1e-12
    ds = _dense_dataset(design, params)
    stats = e_step(design, params, ds, 1, exact=True)
    # y is pinned down by least squares on the dense grid
    Yhat = {}
    for j in ("z1", "z2"):
        E = design.basis.evaluate(ds.observations[0][j][0])
        Yhat[j] = np.array([np.linalg.lstsq(E.T, ds.observations[i][j][1], rcond=None)[0] for i in range(ds.N)])
    for a in ("z1", "z2"):
        for b in ("z1", "z2"):
            block = stats.Mt[design.slices[a], design.slices[b]]
            assert np.max(np.abs(block - Yhat[a].T @ Yhat[b])) < 1e-6


def test_e_step_deterministic_with_seed():
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    params = random_params(design, seed=3)
    ds = _dense_dataset(design, params, M=5)
    a = e_step(design, params, ds, 1, seed=9)
    b = e_step(design, params, ds, 1, seed=9)
    np.testing.assert_array_equal(a.Mt, b.Mt)
    np.testing.assert_array_equal(a.rss, b.rss)
    c = e_step(design, params, ds, 1, seed=10)
    assert not np.array_equal(a.Mt, c.Mt)


def test_doubling_draws_halves_monte_carlo_variance():
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    params = random_params(design, seed=3)
    ds = _dense_dataset(design, params, N=4, M=6)
    exact = e_step(design, params, ds, 1, exact=True).Mt
    err = {}
    for n in (50, 100):
        err[n] = np.mean([np.sum((e_step(design, params, ds, n, seed=s).Mt - exact) ** 2) for s in range(200)])
    assert 2.0 * 0.8 < err[50] / err[100] < 2.0 * 1.2


def test_e_step_rejects_zero_draws(toy_design):
    params = random_params(toy_design)
    ds = _dense_dataset(toy_design, params, N=2, M=3)
    with pytest.raises(ValueError):
        e_step(toy_design, params, ds, 0)


# ---------------------------------------------------------------------------
# schedule, convergence, smoothing selection

def test_mc_schedule():
    cfg = FitConfig()
    assert [mc_schedule(i, cfg) for i in (1, 10, 11, 20, 21)] == [100, 100, 150, 150, 225]
    assert mc_schedule(200, cfg) == 1000


def test_check_convergence(toy_design):
    p = random_params(toy_design, seed=1)
    assert check_convergence(p, p.copy()) == (0.0, 0.0, True)
    q = p.copy()
    q.beta["z1"] = q.beta["z1"] + np.r_[0.01, np.zeros(5)]
    tc, ts, ok = check_convergence(p, q)
    assert tc == pytest.approx(0.01) and ts == 0.0 and not ok
    q = p.copy()
    q.sigma2["z2"] += 2e-4
    assert not check_convergence(p, q)[2]
    q.beta["z1"] = np.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        check_convergence(p, q)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(tol_coef=0.0)
    with pytest.raises(ValueError):
        FitConfig(alpha_grid=(-1.0,))
    with pytest.raises(ValueError, match="unknown fit setting"):
        FitConfig.from_settings({"bogus": 1})


def test_argmax_ties_go_to_smallest():
    assert _argmax_smallest([1e-3, 1e-2, 1e-1], [5.0, 5.0, 5.0]) == 1e-3
    assert _argmax_smallest([1e-3, 1e-2, 1e-1], [1.0, 7.0, 7.0]) == 1e-2


def _sim1_data(N, seed, M=None):
    scn = SimScenario.defaults("sim1", N=N, **({"M": M} if M else {}))
    data, truth = generate(scn, np.random.default_rng([seed, 0]))
    return scn, data, truth


def test_single_value_grid_skips_cv():
    scn, data, _ = _sim1_data(5, 0)
    cfg = FitConfig(J=scn.J, alpha_grid=(0.25,), max_iter=1)
    alpha = select_smoothing(scenario_model(scn), data, cfg)
    assert set(alpha.values()) == {0.25}


def test_cv_rejects_too_few_subjects():
    scn, data, _ = _sim1_data(3, 0)
    with pytest.raises(ValueError, match="folds"):
        select_smoothing(scenario_model(scn), data, FitConfig(J=scn.J, cv_folds=5, max_iter=1))


# ---------------------------------------------------------------------------
# whole fits

def test_fit_is_deterministic():
    scn, data, _ = _sim1_data(20, 1)
    cfg = FitConfig(J=scn.J, max_iter=4, seed=3)
    a = fit_mcem(scenario_model(scn), data, cfg)
    b = fit_mcem(scenario_model(scn), data, cfg)
    assert a.params.to_dict() == b.params.to_dict()
    assert a.iterations == 4 and not a.converged
    assert len(a.tol_coef) == 4


def test_fit_callback_and_warm_start():
    scn, data, _ = _sim1_data(20, 2)
    seen = []
    cfg = FitConfig(J=scn.J, max_iter=3)
    res = fit_mcem(scenario_model(scn), data, cfg, callback=lambda it, p, s: seen.append((it, s.n_mc)))
    assert seen == [(1, 100), (2, 100), (3, 100)]
    again = fit_mcem(scenario_model(scn), data, dataclasses.replace(cfg, max_iter=1), init=res)
    assert again.iterations == 1


@pytest.mark.slow
def test_exact_em_fixed_point_is_self_consistent():
    """Refitting from a converged estimate stops within three iterations."""
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    truth = random_params(design, seed=12)
    rng = np.random.default_rng(0)
    t = np.linspace(0.05, 0.95, 8)
    names = tuple(f"s{i}" for i in range(80))
    covs = [{"x": rng.normal()} for _ in names]
    grid = FunctionalDataset(names, ("z1", "z2"), [{j: (t, np.zeros(8)) for j in ("z1", "z2")} for _ in names], covs)
    z = forward_draws(design, truth, grid, 1, rng)
    ds = FunctionalDataset(names, ("z1", "z2"), [{"z1": (t, zi[0, :8]), "z2": (t, zi[0, 8:])} for zi in z], covs)
    engine = MCEngine(design, ds)
    params = truth
    for _ in range(3000):
        new = m_step(design, engine.run(params, None, exact=True), params, 0.1)
        done = check_convergence(params, new, 1e-5, 1e-6)[2]
        params = new
        if done:
            break
    assert done
    for it in range(1, 4):
        new = m_step(design, engine.run(params, None, exact=True), params, 0.1)
        done = check_convergence(params, new)[2]
        params = new
        if done:
            break
    assert done and it <= 3


@pytest.mark.slow
def test_loading_error_shrinks_with_sample_size():
    errs = {50: [], 100: []}
    for seed in range(8):
        for N in errs:
            scn, data, truth = _sim1_data(N, 100 + seed)
            cfg = FitConfig(J=scn.J, alpha=0.0372759, identification="unit_variance", seed=seed)
            res = fit_mcem(scenario_model(scn), data, cfg)
            est = estimate_curves(res.design.basis, res.params, scn)
            tr = truth_curves(truth, scn)
            errs[N].append(np.mean((est["lambda1"] - tr["lambda1"]) ** 2))
    assert np.median(errs[100]) < np.median(errs[50])


@pytest.mark.slow
def test_cv_prefers_heavy_smoothing_for_linear_loadings():
    design = build_design(one_factor_model(covariate=False), make_basis("bspline", 6))
    J = design.J
    x, _ = design.basis.quadrature()
    lam = design.basis.project(0.5 + x)
    grid = tuple(np.logspace(-4, 2, 4))
    upper = 0
    for r in range(20):
        rng = np.random.default_rng([r, 3])
        obs = []
        for _ in range(40):
            t = np.sort(rng.uniform(0, 1, 10))
            E = design.basis.evaluate(t)
            eta = rng.normal(size=J) @ np.diag(np.linspace(1.0, 0.3, J))
            f = E.T @ eta
            obs.append({"z1": (t, f + 0.3 * rng.normal(size=t.size)),
                        "z2": (t, (E.T @ lam) * f + 0.3 * rng.normal(size=t.size))})
        ds = FunctionalDataset(tuple(f"s{i}" for i in range(40)), ("z1", "z2"), obs, [{} for _ in range(40)])
        cfg = FitConfig(J=J, alpha_grid=grid, max_iter=30, seed=r)
        alpha = select_smoothing(design.model, ds, cfg, design=design, per_equation=False)
        upper += alpha["z2"] >= grid[2]
    assert upper > 10
