import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import one_factor_model, random_params
from fsem.basis import make_basis
from fsem.dataset import FunctionalDataset
from fsem.gp import (
    GPError,
    ParamSet,
    assemble_joint_moments,
    conditional_moments,
    psd_sqrt,
    sample_conditional,
)
from fsem.modelspec import build_coefficient_blocks, build_design


def _small_dataset(times, covs=None):
    obs = [{"z1": (np.asarray(t1), np.zeros(len(t1))), "z2": (np.asarray(t2), np.zeros(len(t2)))} for t1, t2 in times]
    return FunctionalDataset(tuple(f"s{i}" for i in range(len(times))), ("z1", "z2"), obs,
                             covs or [{"x": 0.0} for _ in times])


def forward_draws(design, params, dataset, n, rng):
    """Simulate z for every subject from the structural equations directly."""
    model = design.model
    blocks = design.blocks
    cb = build_coefficient_blocks(model, params, blocks)
    J = design.J
    out = []
    for i in range(dataset.N):
        x = dataset.covariates[i]["x"]
        zeta = rng.multivariate_normal(np.zeros(J), params.Sigma_zeta["eta"], size=n)
        eta = x * params.gamma_x[("eta", "x")][None, :] + zeta
        parts = []
        for j in model.spec.indicators:
            t = dataset.observations[i][j][0]
            if t.size == 0:
                continue
            eps = rng.multivariate_normal(np.zeros(J), params.Sigma_eps[j], size=n)
            y = params.beta[j][None, :] + eta @ (cb["Lambda"][j] + cb["Lambda_anchor"][j]).T + eps
            e = rng.normal(0.0, np.sqrt(params.sigma2[j]), size=(n, t.size))
            parts.append(y @ design.basis.evaluate(t) + e)
        out.append(np.hstack(parts))
    return out


def test_sigma_z_matches_forward_simulation():
    basis = make_basis("bspline", 5)
    design = build_design(one_factor_model(), basis)
    params = random_params(design, seed=11)
    ds = _small_dataset([([0.1, 0.4, 0.6, 0.9], [0.2, 0.3, 0.7, 1.0]), ([0.0, 0.25, 0.5, 0.8], [0.15, 0.45, 0.55, 0.95])],
                        [{"x": 0.7}, {"x": -1.2}])
    jm = assemble_joint_moments(design, params, ds)
    draws = forward_draws(design, params, ds, 100_000, np.random.default_rng(5))
    for s, z in zip(jm.subjects, draws):
        n = z.shape[0]
        zc = z - z.mean(axis=0)
        emp = zc.T @ zc / (n - 1)
        prods = zc[:, :, None] * zc[:, None, :]
        se = prods.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(emp - s.Sigma_z) < 5 * se)
        mse = z.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(z.mean(axis=0) - s.mu_z) < 5 * mse)


def test_sigma_z_structure_is_exact():
    basis = make_basis("bspline", 6)
    design = build_design(one_factor_model(), basis)
    params = random_params(design, seed=2)
    ds = _small_dataset([([0.1, 0.5], [0.3]), ([], [0.2, 0.9])], [{"x": 1.0}, {"x": 0.0}])
    jm = assemble_joint_moments(design, params, ds)
    for s in jm.subjects:
        sig = np.array([params.sigma2[("z1", "z2")[j]] for j in s.owner])
        np.testing.assert_allclose(s.Sigma_z, s.H @ jm.Sigma_u @ s.H.T + np.diag(sig), atol=1e-13)


def test_zero_structural_part():
    basis = make_basis("bspline", 6)
    design = build_design(one_factor_model(), basis)
    params = random_params(design, seed=3)
    params.gamma_x[("eta", "x")] = np.zeros(6)
    ds = _small_dataset([([0.5], [0.5])], [{"x": 2.0}])
    jm = assemble_joint_moments(design, params, ds)
    np.testing.assert_array_equal(jm.mu_eta(0), 0.0)
    np.testing.assert_allclose(jm.Sigma_eta, params.Sigma_zeta["eta"], atol=1e-14)


def test_anchored_identity_measurement():
    basis = make_basis("bspline", 6)
    design = build_design(one_factor_model(), basis)
    params = random_params(design, seed=4)
    for j in ("z1", "z2"):
        params.beta[j] = np.zeros(6)
    params.loadings[("z2", "eta")] = design.anchor_coefficient("concurrent")
    ds = _small_dataset([([0.5], [0.5])], [{"x": 1.5}])
    jm = assemble_joint_moments(design, params, ds)
    mu_eta = jm.mu_eta(0)
    t = np.linspace(0, 1, 9)
    E = basis.evaluate(t)
    for j in ("z1", "z2"):
        mu_y = jm.subjects[0].mu_u[design.slices[j]]
        np.testing.assert_allclose(E.T @ mu_y, E.T @ mu_eta, atol=1e-10)


def test_conditional_empty_set_returns_marginal():
    mu = np.array([1.0, 2.0])
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    m, C = conditional_moments(mu, S, [], [])
    np.testing.assert_array_equal(m, mu)
    np.testing.assert_array_equal(C, S)


def test_conditional_independent_block_is_marginal():
    mu = np.array([1.0, 2.0, -1.0])
    S = np.diag([2.0, 1.0, 3.0])
    S[0, 1] = S[1, 0] = 0.4
    m, C = conditional_moments(mu, S, [2], [5.0])
    np.testing.assert_allclose(m, mu[:2])
    np.testing.assert_allclose(C, S[:2, :2])


def _brute_force(mu, S, b, v):
    a = np.setdiff1d(np.arange(mu.size), b)
    inv = np.linalg.inv(S[np.ix_(b, b)])
    return mu[a] + S[np.ix_(a, b)] @ inv @ (v - mu[b]), S[np.ix_(a, a)] - S[np.ix_(a, b)] @ inv @ S[np.ix_(b, a)]


def test_conditional_three_dimensional_hand_built():
    mu = np.array([0.5, -1.0, 2.0])
    S = np.array([[4.0, 1.2, -0.8], [1.2, 2.0, 0.5], [-0.8, 0.5, 1.5]])
    for b in ([1], [2], [0, 2], [1, 2]):
        v = np.array([0.3, -0.7])[: len(b)]
        m, C = conditional_moments(mu, S, b, v)
        me, Ce = _brute_force(mu, S, np.array(b), v)
        assert np.max(np.abs(m - me)) < 1e-10
        assert np.max(np.abs(C - Ce)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000), k=st.integers(1, 2))
def test_conditional_matches_explicit_inverse(seed, k):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    S = A @ A.T + 0.5 * np.eye(3)
    mu = rng.normal(size=3)
    b = np.sort(rng.choice(3, size=k, replace=False))
    v = rng.normal(size=k)
    m, C = conditional_moments(mu, S, b, v)
    me, Ce = _brute_force(mu, S, b, v)
    assert np.max(np.abs(m - me)) < 1e-10
    assert np.max(np.abs(C - Ce)) < 1e-10
    assert np.allclose(C, C.T)


def test_conditional_singular_block_raises():
    S = np.zeros((2, 2))
    with pytest.raises(GPError):
        conditional_moments(np.zeros(2), S, [1], [1.0])


def test_degenerate_sampling():
    mu = np.array([1.0, -2.0, 3.0])
    draws = sample_conditional(mu, np.zeros((3, 3)), 50, 0)
    np.testing.assert_array_equal(draws, np.tile(mu, (50, 1)))


def test_sampling_mean_and_determinism():
    mu = np.array([1.0, -2.0])
    S = np.array([[1.0, 0.6], [0.6, 2.0]])
    n = 100_000
    d = sample_conditional(mu, S, n, np.random.default_rng(1))
    assert np.all(np.abs(d.mean(axis=0) - mu) < 4 * np.sqrt(np.diag(S) / n))
    np.testing.assert_array_equal(sample_conditional(mu, S, 10, 42), sample_conditional(mu, S, 10, 42))
    with pytest.raises(GPError):
        sample_conditional(mu, S, 0, 1)


def test_psd_sqrt_rejects_indefinite():
    with pytest.raises(GPError):
        psd_sqrt(np.diag([1.0, -0.5]))
    root, clipped = psd_sqrt(np.diag([1.0, -1e-12]))
    assert clipped > 0
    np.testing.assert_allclose(root @ root.T, np.diag([1.0, 0.0]), atol=1e-12)


def test_paramset_round_trip_and_validation():
    design = build_design(one_factor_model(), make_basis("bspline", 6))
    p = random_params(design, seed=8)
    q = ParamSet.from_dict(p.to_dict())
    assert q.to_dict() == p.to_dict()
    bad = p.copy()
    bad.sigma2["z1"] = 0.0
    with pytest.raises(GPError):
        bad.validate()
    bad = p.copy()
    bad.Sigma_eps["z1"] = -np.eye(6)
    with pytest.raises(GPError):
        bad.validate()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_joint_covariances_symmetric_psd(seed):
    design = build_design(one_factor_model(), make_basis("bspline", 5))
    params = random_params(design, seed=seed)
    rng = np.random.default_rng(seed)
    ds = _small_dataset([(np.sort(rng.uniform(0, 1, 3)), np.sort(rng.uniform(0, 1, 2)))], [{"x": rng.normal()}])
    jm = assemble_joint_moments(design, params, ds)
    for S in (jm.Sigma_u, jm.subjects[0].Sigma_z):
        assert np.array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() > -1e-10 * np.trace(S)
