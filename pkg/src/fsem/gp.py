"""Gaussian generator distributions of the latent coefficients and observations.

Per subject, the latent vector ``u = (y_1, ..., y_p, eta_1, ..., eta_q)``
satisfies the linear system ``u = B u + A_x xf + noise`` with ``xf`` the
subject's covariate features (plus a constant), ``B`` strictly lower block
triangular after ordering (recursive model), and ``noise`` block-diagonal
with blocks ``Sigma_eps_j`` and ``Sigma_zeta_m``. Observations are
``z = H u + e`` with ``H`` stacking basis evaluations at the observed times.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .modelspec import ModelDesign, coefficient_map

__all__ = [
    "GPError",
    "ParamSet",
    "JointMoments",
    "SubjectMoments",
    "assemble_joint_moments",
    "conditional_moments",
    "sample_conditional",
    "latent_system",
    "observation_matrix",
    "psd_sqrt",
]

log = logging.getLogger(__name__)


class GPError(ArithmeticError):
    """Numerical failure in Gaussian assembly, conditioning or sampling."""


@dataclass(eq=False)
class ParamSet:
    """All model parameters (basis coefficients and covariance factors).

    Attributes
    ----------
    beta : dict
        Indicator -> J-vector.
    loadings : dict
        ``(indicator, factor)`` -> 1-vector (fixed), J-vector (concurrent) or
        J**2-vector (historical, index ``a*J + b`` for ``e_a(t) e_b(s)``).
        Anchored loadings hold the representation of the constant 1.
    gamma_eta : dict
        ``(factor, source factor)`` -> J- or J**2-vector.
    gamma_x : dict
        ``(factor, covariate)`` -> J-vector (linear, concurrent),
        ``J*J_h`` (smooth, index ``a*J_h + r``) or J**2 (historical).
    Sigma_eps, Sigma_zeta : dict
        J x J covariance of the residual process coefficients.
    sigma2 : dict
        Indicator -> measurement-error variance.
    identification : str
        ``'anchored'`` or ``'unit_variance'``.
    """

    beta: dict
    loadings: dict
    gamma_eta: dict
    gamma_x: dict
    Sigma_eps: dict
    sigma2: dict
    Sigma_zeta: dict
    identification: str = "anchored"

    def copy(self) -> "ParamSet":
        return copy.deepcopy(self)

    def get(self, key):
        kind = key[0]
        if kind == "beta":
            return self.beta[key[1]]
        store = {"loading": self.loadings, "gamma_eta": self.gamma_eta, "gamma_x": self.gamma_x}[kind]
        return store[key[1:]]

    def set(self, key, value):
        kind = key[0]
        value = np.asarray(value, dtype=float)
        if kind == "beta":
            self.beta[key[1]] = value
        else:
            {"loading": self.loadings, "gamma_eta": self.gamma_eta, "gamma_x": self.gamma_x}[kind][key[1:]] = value

    def to_dict(self) -> dict:
        """JSON-ready form; tuple keys are joined with ``'|'``."""
        def vec(d):
            return {"|".join(k) if isinstance(k, tuple) else k: np.asarray(v, dtype=float).ravel().tolist()
                    for k, v in sorted(d.items())}

        def mat(d):
            return {k: np.asarray(v, dtype=float).tolist() for k, v in sorted(d.items())}

        return {
            "identification": self.identification,
            "beta": vec(self.beta),
            "loadings": vec(self.loadings),
            "gamma_eta": vec(self.gamma_eta),
            "gamma_x": vec(self.gamma_x),
            "Sigma_eps": mat(self.Sigma_eps),
            "Sigma_zeta": mat(self.Sigma_zeta),
            "sigma2": {k: float(v) for k, v in sorted(self.sigma2.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamSet":
        def vec(d, split):
            return {(tuple(k.split("|")) if split else k): np.asarray(v, dtype=float) for k, v in d.items()}

        def mat(d):
            return {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in d.items()}

        return cls(
            beta=vec(data["beta"], False),
            loadings=vec(data["loadings"], True),
            gamma_eta=vec(data["gamma_eta"], True),
            gamma_x=vec(data["gamma_x"], True),
            Sigma_eps=mat(data["Sigma_eps"]),
            sigma2={k: float(v) for k, v in data["sigma2"].items()},
            Sigma_zeta=mat(data["Sigma_zeta"]),
            identification=data.get("identification", "anchored"),
        )

    def validate(self, tol: float = 1e-8):
        for name, store in (("Sigma_eps", self.Sigma_eps), ("Sigma_zeta", self.Sigma_zeta)):
            for k, S in store.items():
                S = np.asarray(S)
                if not np.allclose(S, S.T, atol=tol * max(1.0, np.abs(S).max())):
                    raise GPError(f"{name}[{k}] not symmetric")
                w = np.linalg.eigvalsh(0.5 * (S + S.T))
                if w.min() < -tol * max(1.0, abs(w).max()):
                    raise GPError(f"{name}[{k}] not positive semidefinite (min eigenvalue {w.min():.3g})")
        for k, s in self.sigma2.items():
            if not s > 0:
                raise GPError(f"sigma2[{k}] must be positive, got {s}")


def latent_system(design: ModelDesign, params: ParamSet):
    """Linear system of the latent coefficients.

    Returns
    -------
    Amap : ndarray, shape (n_latent, n_w)
        ``E[u | parents] = Amap @ w``.
    D : ndarray, shape (n_latent, n_latent)
        Block-diagonal noise covariance.
    """
    d = design.n_latent
    Amap = np.zeros((d, design.n_w))
    D = np.zeros((d, d))
    for eq in design.equations:
        tgt = eq.target
        for term in eq.terms:
            theta = params.get(term.key)
            Amap[tgt, term.source] += coefficient_map(term.K, theta)
        cov = params.Sigma_eps[eq.name] if eq.kind == "measurement" else params.Sigma_zeta[eq.name]
        D[tgt, tgt] = cov
    return Amap, D


def observation_matrix(design: ModelDesign, obs: dict):
    """``H`` (n_obs x n_latent), value vector and per-row indicator index."""
    J = design.J
    rows, vals, owner = [], [], []
    for j, name in enumerate(design.model.spec.indicators):
        t, v = obs[name]
        if t.size == 0:
            continue
        H = np.zeros((t.size, design.n_latent))
        H[:, design.slices[name]] = design.basis.evaluate(t).T
        rows.append(H)
        vals.append(v)
        owner.append(np.full(t.size, j))
    if not rows:
        return np.zeros((0, design.n_latent)), np.zeros(0), np.zeros(0, dtype=int)
    return np.vstack(rows), np.concatenate(vals), np.concatenate(owner)


@dataclass(eq=False)
class SubjectMoments:
    mu_u: np.ndarray
    H: np.ndarray
    owner: np.ndarray
    z: np.ndarray
    mu_z: np.ndarray
    Sigma_z: np.ndarray


@dataclass(eq=False)
class JointMoments:
    """Marginal Gaussian laws of ``(eta, y, z)`` per subject.

    ``Sigma_u`` is shared by all subjects (covariates enter only the mean).
    Index maps: ``slices`` gives each indicator's/factor's block within
    ``u``; ``subjects[i].H`` maps ``u`` onto subject i's observation slots.
    """

    design: ModelDesign
    Sigma_u: np.ndarray
    subjects: list
    slices: dict = field(default_factory=dict)

    def _block(self, names):
        idx = np.concatenate([np.arange(self.slices[n].start, self.slices[n].stop) for n in names])
        return idx

    @property
    def y_index(self):
        return self._block(self.design.model.spec.indicators)

    @property
    def eta_index(self):
        return self._block(self.design.model.factor_order)

    @property
    def Sigma_y(self):
        i = self.y_index
        return self.Sigma_u[np.ix_(i, i)]

    @property
    def Sigma_eta(self):
        i = self.eta_index
        return self.Sigma_u[np.ix_(i, i)]

    @property
    def Cov_eta_y(self):
        return self.Sigma_u[np.ix_(self.eta_index, self.y_index)]

    def mu_y(self, i):
        return self.subjects[i].mu_u[self.y_index]

    def mu_eta(self, i):
        return self.subjects[i].mu_u[self.eta_index]

    def Cov_y_z(self, i):
        s = self.subjects[i]
        return (self.Sigma_u @ s.H.T)[self.y_index]


def _latent_moments(design, params):
    Amap, D = latent_system(design, params)
    d = design.n_latent
    IB = np.eye(d) - Amap[:, :d]
    # recursive model: I - B is block unit-triangular under the factor order, hence invertible
    Minv = np.linalg.solve(IB, np.eye(d))
    Sigma_u = Minv @ D @ Minv.T
    return Minv, Amap[:, d:], 0.5 * (Sigma_u + Sigma_u.T)


def subject_features(design: ModelDesign, dataset, i: int, cache: dict | None = None) -> np.ndarray:
    """Covariate features ``(..., 1)`` of subject i (functional covariates smoothed)."""
    from .dataset import smooth_to_coefficients

    if cache is not None and i in cache:
        return cache[i]
    cov = {}
    for name, val in dataset.covariates[i].items():
        if isinstance(val, tuple):
            cov[name] = smooth_to_coefficients(design.basis, val[0], val[1])
        else:
            cov[name] = val
    out = design.covariate_features(cov)
    if cache is not None:
        cache[i] = out
    return out


def assemble_joint_moments(design: ModelDesign, params: ParamSet, dataset, features=None) -> JointMoments:
    """Assemble ``mu_eta, Sigma_eta, mu_y, Sigma_y, mu_z, Sigma_z`` per subject."""
    params.validate()
    Minv, Ax, Sigma_u = _latent_moments(design, params)
    subjects = []
    for i in range(dataset.N):
        xf = features[i] if features is not None else subject_features(design, dataset, i)
        mu_u = Minv @ (Ax @ xf)
        H, z, owner = observation_matrix(design, dataset.observations[i])
        noise = np.array([params.sigma2[design.model.spec.indicators[j]] for j in owner])
        Sz = H @ Sigma_u @ H.T + np.diag(noise)
        subjects.append(SubjectMoments(mu_u, H, owner, z, H @ mu_u, 0.5 * (Sz + Sz.T)))
    slices = {n: design.slices[n] for n in (*design.model.spec.indicators, *design.model.factor_order)}
    return JointMoments(design, Sigma_u, subjects, slices)


def conditional_moments(mu, Sigma, condition_on, values, ridge_tol: float = 1e-10):
    """Gaussian conditioning of ``N(mu, Sigma)`` on ``x[condition_on] = values``.

    Returns the mean and covariance of the remaining coordinates (in their
    original order). An ill-conditioned conditioning block gets a ridge of
    ``ridge_tol * trace / n``; it raises :class:`GPError` if still singular.
    """
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    n = mu.size
    b = np.asarray(condition_on, dtype=int).ravel()
    a = np.setdiff1d(np.arange(n), b)
    if b.size == 0:
        return mu.copy(), Sigma.copy()
    v = np.asarray(values, dtype=float).ravel()
    Sbb = Sigma[np.ix_(b, b)]
    Sab = Sigma[np.ix_(a, b)]
    try:
        c = sla.cho_factor(Sbb, lower=True)
    except np.linalg.LinAlgError:
        tr = np.trace(Sbb)
        if not tr > 0:
            raise GPError("conditioning block has no positive variance") from None
        eps = ridge_tol * tr / b.size
        try:
            c = sla.cho_factor(Sbb + eps * np.eye(b.size), lower=True)
        except np.linalg.LinAlgError:
            raise GPError("conditioning block singular beyond ridge tolerance") from None
    gain = sla.cho_solve(c, Sab.T).T
    mu_c = mu[a] + gain @ (v - mu[b])
    S_c = Sigma[np.ix_(a, a)] - gain @ Sab.T
    return mu_c, 0.5 * (S_c + S_c.T)


def psd_sqrt(S: np.ndarray, tol: float = 1e-8):
    """Symmetric square root with eigenvalues clipped at zero.

    Returns ``(root, clipped_mass)``; raises if negative eigenvalues exceed
    ``tol * trace``.
    """
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    tr = max(abs(w).sum(), 1e-300)
    if w.min() < -tol * tr:
        raise GPError(f"covariance not PSD (min eigenvalue {w.min():.3g})")
    clipped = float(-w[w < 0].sum())
    if clipped > 0:
        log.debug("clipped %.3g negative eigenvalue mass", clipped)
    return V * np.sqrt(np.clip(w, 0.0, None)), clipped


def sample_conditional(mu, Sigma, n_samples: int, rng) -> np.ndarray:
    """``n_samples`` draws (rows) from ``N(mu, Sigma)``.

    ``rng`` is a :class:`numpy.random.Generator` or a seed.
    """
    if n_samples < 1:
        raise GPError("n_samples must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mu = np.asarray(mu, dtype=float)
    root, _ = psd_sqrt(np.asarray(Sigma, dtype=float))
    xi = rng.standard_normal((n_samples, mu.size))
    return mu + xi @ root.T
