"""Penalized Monte Carlo EM for functional structural equation models.

The E-step draws the latent coefficients ``u = (y, eta)`` from their
conditional law given the observed curves and covariates and averages the
complete-data sufficient statistics. Every M-step quantity is a function of

* ``Mt = sum_i E[w_i w_i^T]`` with ``w_i = (u_i, covariate features, 1)``,
* ``RSS_j = sum_i E||z_ij - E_ij^T y_ij||^2``,

so one E-step produces one small matrix regardless of the sample size.

Monte Carlo draws use common random numbers: subject i always consumes the
standard-normal stream seeded by ``(seed, i)``, and a draw is
``m_i + V_i^{1/2} xi``. The sample moments of the draws are then formed from
the per-subject mean and second moment of ``xi`` exactly, which costs the
same for any number of draws.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .basis import BasisSystem, make_basis
from .gp import (
    GPError,
    ParamSet,
    _latent_moments,
    assemble_joint_moments,
    observation_matrix,
    psd_sqrt,
    subject_features,
)
from .modelspec import ModelDesign, ValidatedModel, build_design, coefficient_map

__all__ = [
    "FitConfig",
    "FitResult",
    "SufficientStats",
    "MCEngine",
    "make_design",
    "initialize_params",
    "e_step",
    "m_step_measurement",
    "m_step_structural",
    "m_step",
    "penalized_q",
    "check_convergence",
    "mc_schedule",
    "fit_mcem",
    "observed_loglik",
    "select_smoothing",
    "rescale_unit_variance",
    "observed_time_range",
    "multiplication_operator",
]

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    """Settings of the Monte Carlo EM.

    ``alpha`` is a float (shared by every equation), a dict keyed by
    indicator/factor name, or ``'cv'`` to run :func:`select_smoothing`.
    """

    n_mc: int = 100
    mc_growth: float = 1.5
    mc_every: int = 10
    mc_cap: int = 1000
    max_iter: int = 200
    tol_coef: float = 1e-3
    tol_sigma2: float = 1e-4
    alpha: object = 1e-3
    cv_folds: int = 5
    alpha_grid: tuple = tuple(np.logspace(-6, 2, 8))
    seed: int = 0
    basis_kind: str = "bspline"
    J: int = 10
    identification: str = "anchored"

    def __post_init__(self):
        if self.tol_coef <= 0 or self.tol_sigma2 <= 0:
            raise ValueError("tolerances must be positive")
        if self.n_mc < 1 or self.max_iter < 1:
            raise ValueError("n_mc and max_iter must be >= 1")
        if any(a < 0 for a in self.alpha_grid):
            raise ValueError("alpha grid values must be >= 0")
        if self.identification not in ("anchored", "unit_variance"):
            raise ValueError(f"unknown identification {self.identification!r}")

    @classmethod
    def from_settings(cls, settings: dict) -> "FitConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(settings) - known
        if bad:
            raise ValueError(f"unknown fit setting(s): {sorted(bad)}")
        kw = dict(settings)
        if "alpha_grid" in kw:
            g = kw["alpha_grid"]
            kw["alpha_grid"] = tuple(float(a) for a in (g if isinstance(g, list) else [g]))
        return cls(**kw)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["alpha_grid"] = [float(a) for a in self.alpha_grid]
        if not isinstance(self.alpha, (str, dict)):
            out["alpha"] = float(self.alpha)
        return out


@dataclass(eq=False)
class SufficientStats:
    Mt: np.ndarray
    rss: np.ndarray
    n_obs: np.ndarray
    N: int
    n_mc: int
    loglik: float = float("nan")
    clipped: float = 0.0


@dataclass(eq=False)
class FitResult:
    params: ParamSet
    anchored_params: ParamSet
    alpha: dict
    converged: bool
    iterations: int
    tol_coef: list
    tol_sigma2: list
    loglik_trace: list
    loglik: float
    n_mc_final: int
    design: ModelDesign = field(repr=False, default=None)
    diagnostics: dict = field(default_factory=dict)


def mc_schedule(iteration: int, config: FitConfig, start: int | None = None) -> int:
    """Draws used at a 1-based iteration: n_mc, grown by ``mc_growth`` every ``mc_every``."""
    base = config.n_mc if start is None else start
    n = base * config.mc_growth ** ((iteration - 1) // config.mc_every)
    return int(min(config.mc_cap, max(base, math.floor(n + 1e-9))))


def make_design(model: ValidatedModel, dataset, basis: BasisSystem | None = None, J: int = 10,
                kind: str = "bspline") -> ModelDesign:
    """Build the design with covariate ranges taken from the data."""
    if basis is None:
        basis = make_basis(kind, J)
    ranges = {}
    for name, ck in model.spec.covariates.items():
        if ck == "scalar" and any(e.covariate == name and e.effect == "smooth" for e in model.spec.covariate_edges):
            ranges[name] = dataset.covariate_range(name)
    missing = [v for v in model.spec.indicators if v not in dataset.variables]
    if missing:
        raise ValueError(f"dataset lacks indicator variable(s): {', '.join(missing)}")
    extra = [v for v in dataset.variables if v not in model.spec.indicators]
    if extra:
        raise ValueError(f"dataset variable(s) not declared in the model: {', '.join(extra)}")
    return build_design(model, basis, ranges)


# ---------------------------------------------------------------------------
# E-step machinery

class MCEngine:
    """Per-dataset cache of observation patterns and common random numbers."""

    def __init__(self, design: ModelDesign, dataset, seed: int = 0):
        self.design = design
        self.dataset = dataset
        self.seed = seed
        self.N = dataset.N
        d = design.n_latent
        self.d = d
        feats = [subject_features(design, dataset, i) for i in range(self.N)]
        self.features = np.array(feats)
        groups: dict = {}
        for i in range(self.N):
            obs = dataset.observations[i]
            key = tuple((name, obs[name][0].tobytes()) for name in design.model.spec.indicators)
            groups.setdefault(key, []).append(i)
        self.groups = []
        p = design.model.spec.p
        self.n_obs = np.zeros(p)
        for members in groups.values():
            H, _, owner = observation_matrix(design, dataset.observations[members[0]])
            Z = np.array([observation_matrix(design, dataset.observations[i])[1] for i in members])
            Z = Z.reshape(len(members), H.shape[0])
            for j in range(p):
                self.n_obs[j] += len(members) * np.sum(owner == j)
            self.groups.append({"idx": np.array(members), "H": H, "owner": owner, "Z": Z})
        self._xi: dict = {}

    def xi_stats(self, n: int):
        """Per-subject mean and centered second moment of ``n`` standard-normal draws."""
        if n not in self._xi:
            d = self.d
            xbar = np.empty((self.N, d))
            csum = {}
            for g, grp in enumerate(self.groups):
                acc = np.zeros((d, d))
                for i in grp["idx"]:
                    Xi = np.random.default_rng([self.seed, int(i)]).standard_normal((n, d))
                    m = Xi.mean(axis=0)
                    xbar[i] = m
                    acc += Xi.T @ Xi / n - np.outer(m, m)
                csum[g] = acc
            self._xi = {k: v for k, v in self._xi.items() if k == n}  # keep memory bounded
            self._xi[n] = (xbar, csum)
        return self._xi[n]

    def run(self, params: ParamSet, n_mc: int | None, exact: bool = False) -> SufficientStats:
        design = self.design
        d = self.d
        spec = design.model.spec
        Minv, Ax, Sigma_u = _latent_moments(design, params)
        L, _ = psd_sqrt(Sigma_u)
        MU = self.features @ (Minv @ Ax).T
        if not exact:
            xbar, csum = self.xi_stats(n_mc)
        sig2 = np.array([params.sigma2[j] for j in spec.indicators])
        UU = np.zeros((d, d))
        A_all = np.empty((self.N, d))
        rss = np.zeros(spec.p)
        loglik = 0.0
        clipped = 0.0
        for g, grp in enumerate(self.groups):
            idx, H, owner, Z = grp["idx"], grp["H"], grp["owner"], grp["Z"]
            mu = MU[idx]
            if H.shape[0]:
                # square-root form: u = mu + L xi, xi ~ N(0, I); stable as sigma2 -> 0
                sd = np.sqrt(sig2[owner])
                G = (H @ L) / sd[:, None]
                R = np.linalg.qr(np.vstack([np.eye(L.shape[1]), G]), mode="r")
                if np.any(np.abs(np.diag(R)) == 0):
                    raise GPError("posterior precision of the latent coordinates is singular")
                resid = (Z - mu @ H.T) / sd
                xi = sla.cho_solve((R, False), G.T @ resid.T).T
                Ri = sla.solve_triangular(R, np.eye(R.shape[0]))
                LRi = L @ Ri
                V = LRi @ LRi.T
                m = mu + xi @ L.T
                # r' S^-1 r = min_xi |r~ - G xi|^2 + |xi|^2; log|S| via the determinant lemma
                quad = np.sum((resid - xi @ G.T) ** 2) + np.sum(xi * xi)
                logdet = 2.0 * np.log(sd).sum() + 2.0 * np.log(np.abs(np.diag(R))).sum()
                loglik += -0.5 * (quad + len(idx) * (logdet + H.shape[0] * math.log(2 * math.pi)))
            else:
                V = Sigma_u.copy()
                m = mu
            if exact:
                a = m
                C = len(idx) * V
            else:
                root, cl = psd_sqrt(V, tol=1e-6)
                clipped += cl
                a = m + xbar[idx] @ root.T
                C = root @ csum[g] @ root.T
            A_all[idx] = a
            UU += C
            if H.shape[0]:
                R = Z - a @ H.T
                HCH = np.einsum("kd,de,ke->k", H, C, H)
                per_row = np.sum(R * R, axis=0) + HCH
                rss += np.bincount(owner, weights=per_row, minlength=spec.p)
        UU += A_all.T @ A_all
        UX = A_all.T @ self.features
        XX = self.features.T @ self.features
        Mt = np.block([[UU, UX], [UX.T, XX]])
        return SufficientStats(0.5 * (Mt + Mt.T), rss, self.n_obs.copy(), self.N,
                               0 if exact else int(n_mc), loglik, clipped)


def e_step(design: ModelDesign, params: ParamSet, dataset, n_mc: int, seed: int = 0,
           engine: MCEngine | None = None, exact: bool = False) -> SufficientStats:
    """Monte Carlo expectations of the complete-data sufficient statistics.

    ``exact=True`` replaces the sample moments by their infinite-sample limit
    (used for testing).
    """
    if n_mc < 1 and not exact:
        raise ValueError("n_mc must be >= 1")
    engine = engine or MCEngine(design, dataset, seed)
    return engine.run(params, n_mc, exact)


def observed_loglik(design: ModelDesign, params: ParamSet, dataset, features=None) -> float:
    """Gaussian log-likelihood of the observed curves under ``(mu_z, Sigma_z)``."""
    jm = assemble_joint_moments(design, params, dataset, features)
    total = 0.0
    for s in jm.subjects:
        n = s.z.size
        if n == 0:
            continue
        c = sla.cho_factor(s.Sigma_z, lower=True)
        r = s.z - s.mu_z
        total += -0.5 * (r @ sla.cho_solve(c, r) + 2 * np.log(np.diag(c[0])).sum() + n * math.log(2 * math.pi))
    return float(total)


# ---------------------------------------------------------------------------
# M-step

def _alpha_for(alpha, name) -> float:
    if isinstance(alpha, dict):
        return float(alpha.get(name, 0.0))
    return float(alpha)


def _safe_inverse(S):
    S = 0.5 * (S + S.T)
    try:
        c = sla.cho_factor(S, lower=True)
        return sla.cho_solve(c, np.eye(S.shape[0]))
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        floor = 1e-10 * max(w.max(), 1e-300)
        return (V / np.maximum(w, floor)) @ V.T


def _equation_pieces(design: ModelDesign, eq, params: ParamSet):
    """Residual map ``R`` (offsets of fixed terms removed) and stacked free-term tensors."""
    J = design.J
    R = np.zeros((J, design.n_w))
    R[:, eq.target] = np.eye(J)
    for term in eq.terms:
        if not term.free:
            R[:, term.source] -= coefficient_map(term.K, params.get(term.key))
    free = eq.free_terms
    if not free:
        return R, np.zeros(0, dtype=int), np.zeros((0, J, 0)), [], []
    src = []
    for t in free:
        for s in range(t.source.start, t.source.stop):
            if s not in src:
                src.append(s)
    src = np.array(src, dtype=int)
    widths = [t.width for t in free]
    dth = int(sum(widths))
    Kall = np.zeros((src.size, J, dth))
    col = 0
    spans = []
    pos = {s: k for k, s in enumerate(src)}
    for t, wd in zip(free, widths):
        rows = [pos[s] for s in range(t.source.start, t.source.stop)]
        Kall[rows, :, col:col + wd] = t.K
        spans.append(slice(col, col + wd))
        col += wd
    return R, src, Kall, list(free), spans


def _penalty_block(terms, spans, alpha_value, dth):
    P = np.zeros((dth, dth))
    for t, sl in zip(terms, spans):
        a = 0.0 if t.effect == "intercept" else alpha_value
        P[sl, sl] = a * t.penalty
    return P


def _solve_penalized(G, P, rcond: float = 1e-12):
    """Inverse of ``G + P``; pseudo-inverse (minimum-norm solution) if rank deficient.

    Unpenalized historical surfaces are the usual cause: the ``s > t`` half
    of the tensor basis never enters the model.
    """
    A = 0.5 * (G + G.T) + P
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    if not np.all(np.isfinite(w)) or w.max() <= 0:
        raise GPError("penalized normal equations are not positive semidefinite")
    keep = w > rcond * w.max()
    if keep.all():
        return (V / w) @ V.T, False
    return (V[:, keep] / w[keep]) @ V[:, keep].T, True


def _update_equation(design, eq, params, Mt, N, alpha_value, Sigma_old):
    """ECM update of one equation: coefficients given ``Sigma_old``, then ``Sigma``."""
    R, src, Kall, terms, spans = _equation_pieces(design, eq, params)
    theta_parts = {}
    A = R.copy()
    if terms:
        Sinv = _safe_inverse(Sigma_old)
        T1 = np.einsum("sjk,jl->slk", Kall, Sinv)
        X = np.tensordot(Mt[np.ix_(src, src)], Kall, axes=(1, 0))
        G = np.einsum("sjk,sjm->km", T1, X)
        Y = R @ Mt[:, src]
        rhs = np.einsum("sjk,js->k", T1, Y)
        P = _penalty_block(terms, spans, alpha_value, G.shape[0])
        Ginv, _ = _solve_penalized(G, P)
        theta = Ginv @ rhs
        for t, sl in zip(terms, spans):
            theta_parts[t.key] = theta[sl]
        A[:, src] -= np.einsum("sjk,k->js", Kall, theta)
    Sigma = A @ Mt @ A.T / N
    Sigma = 0.5 * (Sigma + Sigma.T)
    return theta_parts, Sigma


def m_step_measurement(design: ModelDesign, stats: SufficientStats, params: ParamSet, indicator: str,
                       alpha_lambda: float):
    """Update ``(beta_j, lambda_j)``, then ``Sigma_eps_j``, then ``sigma2_j``.

    Returns
    -------
    coefs : dict
        Parameter key -> new coefficient vector.
    Sigma_eps : ndarray
    sigma2 : float
    """
    eq = design.equation(indicator)
    coefs, Sigma = _update_equation(design, eq, params, stats.Mt, stats.N, alpha_lambda,
                                    params.Sigma_eps[indicator])
    j = design.model.spec.indicators.index(indicator)
    n = stats.n_obs[j]
    sigma2 = float(stats.rss[j] / n) if n > 0 else float(params.sigma2[indicator])
    return coefs, Sigma, max(sigma2, 0.0)


def m_step_structural(design: ModelDesign, stats: SufficientStats, params: ParamSet, factor: str,
                      alpha_gamma: float):
    """Update ``gamma_m`` given ``Sigma_zeta_m``, then ``Sigma_zeta_m``."""
    eq = design.equation(factor)
    return _update_equation(design, eq, params, stats.Mt, stats.N, alpha_gamma, params.Sigma_zeta[factor])


_SIGMA_FLOOR = 1e-10


def _floor_cov(S):
    w = np.linalg.eigvalsh(S)
    tr = max(np.trace(S), 1e-300)
    if w.min() < _SIGMA_FLOOR * tr / S.shape[0]:
        S = S + (_SIGMA_FLOOR * tr / S.shape[0] - min(w.min(), 0.0)) * np.eye(S.shape[0])
    return S


def m_step(design: ModelDesign, stats: SufficientStats, params: ParamSet, alpha) -> ParamSet:
    """One full M-step over every equation (coefficients, then covariances, then noise)."""
    new = params.copy()
    spec = design.model.spec
    for j in spec.indicators:
        coefs, S, s2 = m_step_measurement(design, stats, params, j, _alpha_for(alpha, j))
        for k, v in coefs.items():
            new.set(k, v)
        new.Sigma_eps[j] = _floor_cov(S)
        new.sigma2[j] = max(s2, 1e-12)
    for m in design.model.factor_order:
        coefs, S = m_step_structural(design, stats, params, m, _alpha_for(alpha, m))
        for k, v in coefs.items():
            new.set(k, v)
        new.Sigma_zeta[m] = _floor_cov(S)
    return new


def penalized_q(design: ModelDesign, params: ParamSet, stats: SufficientStats, alpha) -> float:
    """Penalized expected complete-data log-likelihood (constants dropped).

    ``sum_eq [-N/2 log|Sigma| - tr(Sigma^-1 A Mt A^T)/2 - alpha pen/2]
    - sum_j [n_j/2 log sigma2_j + RSS_j / (2 sigma2_j)]``.
    """
    total = 0.0
    N = stats.N
    spec = design.model.spec
    for eq in design.equations:
        R, src, Kall, terms, spans = _equation_pieces(design, eq, params)
        A = R.copy()
        pen = 0.0
        if terms:
            theta = np.concatenate([np.asarray(params.get(t.key), dtype=float) for t in terms])
            A[:, src] -= np.einsum("sjk,k->js", Kall, theta)
            a = _alpha_for(alpha, eq.name)
            P = _penalty_block(terms, spans, a, theta.size)
            pen = float(theta @ P @ theta)
        S = params.Sigma_eps[eq.name] if eq.kind == "measurement" else params.Sigma_zeta[eq.name]
        sign, logdet = np.linalg.slogdet(S)
        if sign <= 0:
            return -np.inf
        C = A @ stats.Mt @ A.T
        total += -0.5 * N * logdet - 0.5 * np.trace(np.linalg.solve(S, C)) - 0.5 * pen
    for j, name in enumerate(spec.indicators):
        s2 = params.sigma2[name]
        total += -0.5 * stats.n_obs[j] * math.log(s2) - 0.5 * stats.rss[j] / s2
    return float(total)


def _coef_keys(design: ModelDesign):
    keys = []
    for eq in design.equations:
        for t in eq.free_terms:
            keys.append(t.key)
    return keys


def check_convergence(prev: ParamSet, new: ParamSet, tol_coef: float = 1e-3, tol_sigma2: float = 1e-4,
                      keys=None):
    """Largest l2 change of the coefficient vectors and of the noise variances.

    ``keys`` restricts the coefficient comparison (default: every beta,
    loading and gamma present in ``prev``; anchored loadings do not change).
    """
    if keys is None:
        keys = [("beta", k) for k in prev.beta]
        keys += [("loading",) + k for k in prev.loadings]
        keys += [("gamma_eta",) + k for k in prev.gamma_eta]
        keys += [("gamma_x",) + k for k in prev.gamma_x]
    tc = 0.0
    for k in keys:
        a, b = np.asarray(prev.get(k), dtype=float), np.asarray(new.get(k), dtype=float)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {k}: {a.shape} vs {b.shape}")
        tc = max(tc, float(np.linalg.norm(b - a)))
    ts = 0.0
    for k in prev.sigma2:
        ts = max(ts, abs(float(new.sigma2[k]) - float(prev.sigma2[k])))
    return tc, ts, bool(tc < tol_coef and ts < tol_sigma2)


# ---------------------------------------------------------------------------
# initialization

def _pseudo_residual_variance(t, z):
    """Local residual variance from second-order differences (three-point pseudo-residuals)."""
    if t.size < 3:
        return None
    t0, t1, t2 = t[:-2], t[1:-1], t[2:]
    a = (t2 - t1) / (t2 - t0)
    b = (t1 - t0) / (t2 - t0)
    e = a * z[:-2] + b * z[2:] - z[1:-1]
    c2 = a * a + b * b + 1.0
    return e * e / c2


def initialize_params(design: ModelDesign, dataset, smoothing: float = 1e-4) -> ParamSet:
    """Starting values.

    Intercepts come from a pooled penalized mean-curve fit; non-anchored
    loadings are the constant 1 (fixed, concurrent) or 0 (historical);
    structural coefficients are 0; noise variances come from local
    pseudo-residuals; each factor's covariance is the empirical covariance of
    the anchor indicator's smoothed, centered curves (ridged by 0.1 I), and
    residual covariances are 0.1 I.
    """
    from .dataset import smooth_to_coefficients

    spec = design.model.spec
    J = design.J
    basis = design.basis
    beta, sigma2, Seps = {}, {}, {}
    for j in spec.indicators:
        ts = np.concatenate([dataset.observations[i][j][0] for i in range(dataset.N)])
        zs = np.concatenate([dataset.observations[i][j][1] for i in range(dataset.N)])
        if ts.size == 0:
            raise ValueError(f"indicator {j!r} has no observations")
        beta[j] = smooth_to_coefficients(basis, ts, zs, weight=smoothing)
        pr = [_pseudo_residual_variance(*dataset.observations[i][j]) for i in range(dataset.N)]
        pr = [x for x in pr if x is not None and x.size]
        if pr:
            s2 = float(np.mean(np.concatenate(pr)))
        else:
            s2 = float(np.var(zs - basis.evaluate(ts).T @ beta[j])) / 2.0
        sigma2[j] = max(s2, 1e-6 * max(float(np.var(zs)), 1e-12))
        Seps[j] = 0.1 * np.eye(J)
    c1 = design.anchor_coefficient("concurrent")
    loadings = {}
    for ld in spec.loadings:
        if ld.anchored:
            loadings[(ld.indicator, ld.factor)] = design.anchor_coefficient(ld.effect)
        elif ld.effect == "fixed":
            loadings[(ld.indicator, ld.factor)] = np.ones(1)
        elif ld.effect == "concurrent":
            loadings[(ld.indicator, ld.factor)] = c1.copy()
        else:
            loadings[(ld.indicator, ld.factor)] = np.zeros(J * J)
    gamma_eta = {}
    for e in spec.latent_edges:
        gamma_eta[(e.target, e.source)] = np.zeros(J if e.effect == "concurrent" else J * J)
    gamma_x = {}
    for e in spec.covariate_edges:
        width = design.equation(e.factor)
        t = [t for t in width.terms if t.key == ("gamma_x", e.factor, e.covariate)][0]
        gamma_x[(e.factor, e.covariate)] = np.zeros(t.width)
    Szeta = {}
    anchors = design.model.anchors
    for m in spec.factors:
        ind = anchors[m]
        scores = []
        for i in range(dataset.N):
            t, z = dataset.observations[i][ind]
            if t.size >= 2:
                resid = z - basis.evaluate(t).T @ beta[ind]
                scores.append(smooth_to_coefficients(basis, t, resid, weight=1e-2))
        if len(scores) > 1:
            S = np.cov(np.array(scores).T, bias=True)
            Szeta[m] = 0.5 * (S + S.T) + 0.1 * np.eye(J)
        else:
            Szeta[m] = 0.1 * np.eye(J)
    return ParamSet(beta, loadings, gamma_eta, gamma_x, Seps, sigma2, Szeta)


# ---------------------------------------------------------------------------
# driver

def _resolve_alpha(design: ModelDesign, alpha) -> dict:
    names = list(design.model.spec.indicators) + list(design.model.factor_order)
    if isinstance(alpha, dict):
        return {n: float(alpha.get(n, 0.0)) for n in names}
    return {n: float(alpha) for n in names}


def fit_mcem(model: ValidatedModel, dataset, config: FitConfig | None = None, design: ModelDesign | None = None,
             init=None, callback=None) -> FitResult:
    """Fit the model by penalized Monte Carlo EM.

    Parameters
    ----------
    model : ValidatedModel
    dataset : FunctionalDataset
    config : FitConfig
    design : ModelDesign, optional
        Prebuilt design (otherwise built from ``config.basis_kind``/``config.J``).
    init : ParamSet or FitResult, optional
        Warm start. A FitResult also resumes its final Monte Carlo size.
    callback : callable, optional
        ``callback(iteration, params, stats)`` after each M-step.
    """
    config = config or FitConfig()
    design = design or make_design(model, dataset, J=config.J, kind=config.basis_kind)
    if isinstance(config.alpha, str):
        if config.alpha != "cv":
            raise ValueError(f"alpha must be a number, dict or 'cv', got {config.alpha!r}")
        alpha = select_smoothing(model, dataset, config, design=design)
    else:
        alpha = _resolve_alpha(design, config.alpha)
    start_mc = None
    if isinstance(init, FitResult):
        start_mc = init.n_mc_final
        params = init.anchored_params.copy()
    elif isinstance(init, ParamSet):
        params = init.copy()
    else:
        params = initialize_params(design, dataset)
    engine = MCEngine(design, dataset, config.seed)
    keys = _coef_keys(design)
    tcs, tss, lls = [], [], []
    converged = False
    clipped = 0.0
    t0 = time.perf_counter()
    it = 0
    n = mc_schedule(1, config, start_mc)
    for it in range(1, config.max_iter + 1):
        n = mc_schedule(it, config, start_mc)
        stats = engine.run(params, n)
        clipped += stats.clipped
        new = m_step(design, stats, params, alpha)
        tc, ts, converged = check_convergence(params, new, config.tol_coef, config.tol_sigma2, keys)
        tcs.append(tc)
        tss.append(ts)
        lls.append(stats.loglik)
        if callback is not None:
            callback(it, new, stats)
        params = new
        if not np.all(np.isfinite([tc, ts])):
            raise GPError(f"non-finite update at iteration {it}")
        if converged:
            break
    ll = observed_loglik(design, params, dataset, engine.features)
    if config.identification == "unit_variance":
        reported = rescale_unit_variance(design, params, support=observed_time_range(dataset))
    else:
        reported = params
    return FitResult(
        params=reported,
        anchored_params=params,
        alpha=alpha,
        converged=converged,
        iterations=it,
        tol_coef=tcs,
        tol_sigma2=tss,
        loglik_trace=lls,
        loglik=ll,
        n_mc_final=n,
        design=design,
        diagnostics={"clipped_eigen_mass": clipped, "seconds": time.perf_counter() - t0},
    )


def penalized_equations(design: ModelDesign) -> list:
    """Names of equations with at least one free, penalized coefficient."""
    out = []
    for eq in design.equations:
        if any(t.effect != "intercept" and np.any(t.penalty) for t in eq.free_terms):
            out.append(eq.name)
    return out


def _cv_score(model, dataset, config, design, alpha, folds) -> float:
    cfg = FitConfig(**{**config.__dict__, "alpha": alpha, "identification": "anchored"})
    total = 0.0
    for k in range(len(folds)):
        test = np.sort(folds[k])
        train = np.sort(np.concatenate([folds[r] for r in range(len(folds)) if r != k]))
        fr = fit_mcem(model, dataset.subset(train), cfg, design=design)
        total += observed_loglik(design, fr.anchored_params, dataset.subset(test))
    return total


def _argmax_smallest(grid, scores):
    scores = np.asarray(scores)
    best = np.flatnonzero(scores >= scores.max() - 1e-9 * max(1.0, abs(scores.max())))[0]
    return grid[best]


def select_smoothing(model: ValidatedModel, dataset, config: FitConfig, design: ModelDesign | None = None,
                     per_equation: bool = True) -> dict:
    """K-fold cross-validation of the smoothing weights over ``config.alpha_grid``.

    A common weight is chosen first. With ``per_equation`` each penalized
    equation is then re-tuned in turn with the others held at their current
    values (one coordinate sweep). Folds are scored by the held-out
    observed-data log-likelihood at the parameters fitted on the remaining
    subjects; ties go to the smallest weight.

    Returns
    -------
    dict
        Equation name -> smoothing weight.
    """
    grid = sorted(float(a) for a in config.alpha_grid)
    if not grid:
        raise ValueError("alpha grid is empty")
    design = design or make_design(model, dataset, J=config.J, kind=config.basis_kind)
    if len(grid) == 1:
        return _resolve_alpha(design, grid[0])
    K = int(config.cv_folds)
    if K < 2:
        raise ValueError("cv_folds must be >= 2")
    if dataset.N < K:
        raise ValueError(f"cannot form {K} folds from {dataset.N} subjects (a fold would be empty)")
    rng = np.random.default_rng([config.seed, 7919])
    perm = rng.permutation(dataset.N)
    folds = [perm[k::K] for k in range(K)]
    scores = [_cv_score(model, dataset, config, design, a, folds) for a in grid]
    alpha = _resolve_alpha(design, _argmax_smallest(grid, scores))
    if per_equation:
        for name in penalized_equations(design):
            scores = [_cv_score(model, dataset, config, design, {**alpha, name: a}, folds) for a in grid]
            alpha[name] = _argmax_smallest(grid, scores)
            log.info("cv: alpha[%s] = %g", name, alpha[name])
    return alpha


# ---------------------------------------------------------------------------
# identification

def multiplication_operator(basis: BasisSystem, values: np.ndarray) -> np.ndarray:
    """Matrix mapping coefficients of f to the L2 projection of ``f * g``.

    ``values`` are samples of g at the basis quadrature nodes.
    """
    x, w = basis.quadrature()
    V = basis.evaluate(x)
    M = (V * (w * values)) @ V.T
    return np.linalg.solve(basis.gram(), M)


def observed_time_range(dataset) -> tuple:
    """Smallest and largest observation time over all subjects and indicators."""
    times = [t for obs in dataset.observations for t, _ in obs.values() if t.size]
    if not times:
        return tuple(dataset.domain)
    allt = np.concatenate(times)
    return float(allt.min()), float(allt.max())


def rescale_unit_variance(design: ModelDesign, params: ParamSet, support=None) -> ParamSet:
    """Re-express anchored-scale parameters so every ``K_zeta_m(t, t) = 1``.

    Each factor is divided by ``sd_m(t) = sqrt(e(t)^T Sigma_zeta_m e(t))``; all
    coefficient functions are transformed accordingly and projected back on
    the basis. A fixed (scalar) loading is multiplied by the mean of ``sd_m``.

    Parameters
    ----------
    support : (float, float), optional
        Range of the observed times. Outside it ``sd_m`` is an unconstrained
        extrapolation of the basis, so it is held constant at the nearest
        end of the range.
    """
    basis = design.basis
    J = design.J
    x, w = basis.quadrature()
    xs = x if support is None else np.clip(x, support[0], support[1])
    V = basis.evaluate(xs)
    sd, mult, inv = {}, {}, {}
    for m, S in params.Sigma_zeta.items():
        s = np.sqrt(np.maximum(np.einsum("jk,jl,lk->k", V, S, V), 1e-300))
        sd[m] = s
        mult[m] = multiplication_operator(basis, s)
        inv[m] = multiplication_operator(basis, 1.0 / s)
    out = params.copy()
    out.identification = "unit_variance"
    for (j, m), th in params.loadings.items():
        th = np.asarray(th, dtype=float)
        if th.size == 1:
            out.loadings[(j, m)] = th * float(np.sum(w * sd[m]) / np.sum(w))
        elif th.size == J:
            out.loadings[(j, m)] = mult[m] @ th
        else:
            out.loadings[(j, m)] = (th.reshape(J, J) @ mult[m].T).ravel()
    for (m, n), th in params.gamma_eta.items():
        th = np.asarray(th, dtype=float)
        if th.size == J:
            ratio = multiplication_operator(basis, sd[n] / sd[m])
            out.gamma_eta[(m, n)] = ratio @ th
        else:
            out.gamma_eta[(m, n)] = (inv[m] @ th.reshape(J, J) @ mult[n].T).ravel()
    for (m, l), th in params.gamma_x.items():
        th = np.asarray(th, dtype=float)
        out.gamma_x[(m, l)] = (inv[m] @ th.reshape(J, -1)).ravel()
    for m, S in params.Sigma_zeta.items():
        T = inv[m]
        out.Sigma_zeta[m] = 0.5 * (T @ S @ T.T + (T @ S @ T.T).T)
    return out
