"""Model-implied covariances and pointwise goodness-of-fit indices.

At a time t the observed vector is ``(z_1(t), ..., z_p(t), x_1(t), ..., x_Q(t))``.
Its model-implied covariance across subjects follows from the latent
system in coefficient space:

    Cov(u) = Minv D Minv^T + G Cov(xf) G^T,   G = Minv A_x,

evaluated at t through the basis, plus the measurement-error variances on
the diagonal. Covariate features enter with their empirical covariance.

The sample covariance ``S_t`` is formed cross-sectionally: each subject
contributes the observation of every variable nearest to t within a window
of half-width h (default ``1.5 / M``), weighted by a tricube kernel of the
distance. Values are centred by the fitted population mean at their own
observation time, and the implied covariance compared with ``S_t`` is the
same weighted average of implied covariances at those times.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fit import observed_time_range
from .gp import ParamSet, _latent_moments, subject_features
from .modelspec import ModelDesign

__all__ = [
    "GofReport",
    "implied_covariance_at_t",
    "sample_covariance_at_t",
    "pointwise_indices",
    "parameter_count",
    "fit_indices",
    "TABLE_ORDER",
]

log = logging.getLogger(__name__)

TABLE_ORDER = ("chi2_df", "rmsea", "srmr", "cfi", "ifi", "gfi", "tli")
_TABLE_LABELS = {"chi2_df": "chi2/df", "rmsea": "RMSEA", "srmr": "SRMR", "cfi": "CFI", "ifi": "IFI",
                 "gfi": "GFI", "tli": "TLI"}


def _observed_names(design: ModelDesign, include_covariates: bool):
    names = list(design.model.spec.indicators)
    if include_covariates:
        names += list(design.model.spec.covariates)
    return names


def _feature_matrix(design: ModelDesign, dataset) -> np.ndarray:
    return np.array([subject_features(design, dataset, i) for i in range(dataset.N)])


def _joint_covariance(design: ModelDesign, params: ParamSet, feature_cov):
    """Covariance of ``w = (u, xf)`` across subjects."""
    d = design.n_latent
    Minv, Ax, Sigma_u = _latent_moments(design, params)
    nx = design.n_w - d
    Cxx = np.zeros((nx, nx)) if feature_cov is None else np.asarray(feature_cov, dtype=float)
    Gx = Minv @ Ax
    Cuu = Sigma_u + Gx @ Cxx @ Gx.T
    Cux = Gx @ Cxx
    return np.block([[Cuu, Cux], [Cux.T, Cxx]])


def _observation_rows(design: ModelDesign, times, include_covariates: bool) -> np.ndarray:
    """Rows mapping ``w`` to the observed variables at the given times.

    ``times`` holds one time per indicator followed by one per covariate
    (ignored for scalar covariates).
    """
    spec = design.model.spec
    names = _observed_names(design, include_covariates)
    L = np.zeros((len(names), design.n_w))
    for j, name in enumerate(spec.indicators):
        L[j, design.slices[name]] = design.basis.evaluate([times[j]])[:, 0]
    for r, name in enumerate(names[spec.p:]):
        if spec.covariates[name] == "scalar":
            L[spec.p + r, design.slices[f"x:{name}:raw"]] = 1.0
        else:
            L[spec.p + r, design.slices[f"x:{name}:coef"]] = design.basis.evaluate([times[spec.p + r]])[:, 0]
    return L


def implied_covariance_at_t(design: ModelDesign, params: ParamSet, t: float, feature_cov=None,
                            include_covariates: bool | None = None) -> np.ndarray:
    """Model-implied covariance of the observed variables at time t.

    Parameters
    ----------
    feature_cov : ndarray, optional
        Covariance of the covariate feature vector across subjects (zero
        when omitted).
    include_covariates : bool, optional
        Append the covariates to the observed vector (default: when the
        model has covariates and ``feature_cov`` is given).
    """
    lo, hi = design.basis.domain
    if not lo - 1e-10 <= t <= hi + 1e-10:
        raise ValueError(f"t={t} outside the domain [{lo}, {hi}]")
    spec = design.model.spec
    if include_covariates is None:
        include_covariates = bool(spec.covariates) and feature_cov is not None
    include_covariates = include_covariates and bool(spec.covariates)
    Cww = _joint_covariance(design, params, feature_cov)
    P = len(_observed_names(design, include_covariates))
    L = _observation_rows(design, [t] * P, include_covariates)
    S = L @ Cww @ L.T
    S[np.arange(spec.p), np.arange(spec.p)] += [params.sigma2[n] for n in spec.indicators]
    return 0.5 * (S + S.T)


def _tricube(u):
    u = np.abs(u)
    return np.where(u < 1.0, (1.0 - u ** 3) ** 3, 0.0)


def sample_covariance_at_t(design: ModelDesign, params: ParamSet, dataset, t: float, bandwidth: float,
                           include_covariates: bool = True, features=None):
    """Local cross-sectional covariance of the observed variables at t.

    Returns ``(S, n_eff, n_subjects, Sigma)``; ``S`` is None when fewer
    than ``P + 1`` subjects have every variable within the window. ``Sigma``
    is the model-implied covariance averaged over the contributing
    subjects at their actual observation times with the same weights, so
    that it is directly comparable with ``S``.
    """
    spec = design.model.spec
    Minv, Ax, _ = _latent_moments(design, params)
    F = features if features is not None else _feature_matrix(design, dataset)
    mean_y = (Minv @ Ax @ F.mean(axis=0))
    names = _observed_names(design, include_covariates and bool(spec.covariates))
    rows, weights, when = [], [], []
    for i in range(dataset.N):
        obs = dataset.observations[i]
        vals, w, at = [], 1.0, []
        ok = True
        for name in spec.indicators:
            tt, vv = obs[name]
            if tt.size == 0:
                ok = False
                break
            k = int(np.argmin(np.abs(tt - t)))
            wk = float(_tricube((tt[k] - t) / bandwidth))
            if wk <= 0.0:
                ok = False
                break
            mu = design.basis.evaluate([tt[k]])[:, 0] @ mean_y[design.slices[name]]
            vals.append(vv[k] - mu)
            at.append(tt[k])
            w *= wk
        if not ok:
            continue
        for name in names[spec.p:]:
            val = dataset.covariates[i].get(name)
            if val is None:
                ok = False
                break
            if isinstance(val, tuple):
                tt, vv = val
                k = int(np.argmin(np.abs(tt - t)))
                wk = float(_tricube((tt[k] - t) / bandwidth))
                if wk <= 0.0:
                    ok = False
                    break
                vals.append(vv[k])
                at.append(tt[k])
                w *= wk
            else:
                vals.append(float(val))
                at.append(t)
        if ok:
            rows.append(vals)
            weights.append(w)
            when.append(tuple(at))
    P = len(names)
    if len(rows) < P + 1:
        return None, 0.0, len(rows), None
    R = np.array(rows)
    w = np.array(weights)
    V1, V2 = w.sum(), (w ** 2).sum()
    rbar = w @ R / V1
    C = R - rbar
    S = (C * w[:, None]).T @ C / (V1 - V2 / V1)
    include = len(names) > spec.p
    Cww = _joint_covariance(design, params, np.atleast_2d(np.cov(F, rowvar=False, ddof=1)) if F.shape[0] > 1 else None)
    Sigma = np.zeros((P, P))
    cache: dict = {}
    for at, wi in zip(when, w):
        if at not in cache:
            L = _observation_rows(design, at, include)
            cache[at] = L @ Cww @ L.T
        Sigma += wi * cache[at]
    Sigma /= V1
    Sigma[np.arange(spec.p), np.arange(spec.p)] += [params.sigma2[n] for n in spec.indicators]
    return 0.5 * (S + S.T), V1 ** 2 / V2, len(rows), 0.5 * (Sigma + Sigma.T)


def parameter_count(design: ModelDesign, include_covariates: bool) -> int:
    """Parameters determining the implied covariance at a single time point.

    One per non-anchored loading and per structural edge, one residual
    variance per factor, one unique variance per indicator, and the
    ``Q(Q+1)/2`` covariate (co)variances when covariates are observed.
    """
    spec = design.model.spec
    n_load = sum(1 for ld in spec.loadings if not ld.anchored)
    k = n_load + len(spec.latent_edges) + len(spec.covariate_edges) + spec.q + spec.p
    if include_covariates:
        Q = len(spec.covariates)
        k += Q * (Q + 1) // 2
    return k


def pointwise_indices(S, Sigma, n_eff: float, df_model: int, df_null: int) -> dict:
    """All fit indices for one pair ``(S_t, Sigma_t)``.

    Returns a dict with ``fml, chi2, chi2_null, rmsea, srmr, srmr_raw, gfi,
    cfi, ifi, tli`` and flags ``rmsea_clipped`` and ``tli_outside``. The null
    model is the diagonal (independence) covariance ``diag(S_t)``.
    """
    S = np.asarray(S, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    P = S.shape[0]
    sS, ldS = np.linalg.slogdet(S)
    sM, ldM = np.linalg.slogdet(Sigma)
    if sS <= 0 or sM <= 0:
        raise np.linalg.LinAlgError("sample or implied covariance not positive definite")
    fml = ldM + np.trace(np.linalg.solve(Sigma, S)) - ldS - P
    fml = max(fml, 0.0) if fml > -1e-10 else fml
    n1 = n_eff - 1.0
    chi2 = n1 * fml
    chi2_null = n1 * (np.sum(np.log(np.diag(S))) - ldS)
    iu = np.triu_indices(P)
    resid = S - Sigma
    n_pairs = P * (P + 1) / 2
    scale = np.sqrt(np.outer(np.diag(S), np.diag(S)))
    srmr = math.sqrt(np.sum((resid / scale)[iu] ** 2) / n_pairs)
    srmr_raw = math.sqrt(np.sum(resid ** 2) / n_pairs)
    gfi = 1.0 - np.sum(resid ** 2) / np.sum(S ** 2)
    out = {"fml": float(fml), "chi2": float(chi2), "chi2_null": float(chi2_null), "srmr": srmr,
           "srmr_raw": srmr_raw, "gfi": float(gfi)}
    if df_model > 0:
        rad = (chi2 - df_model) / (df_model * n1)
        out["rmsea_clipped"] = bool(rad < 0)
        out["rmsea"] = math.sqrt(max(rad, 0.0))
        out["chi2_df"] = chi2 / df_model
    else:
        out["rmsea_clipped"] = False
        out["rmsea"] = float("nan")
        out["chi2_df"] = float("nan")
    num = max(chi2 - df_model, 0.0)
    den = max(chi2_null - df_null, chi2 - df_model, 0.0)
    out["cfi"] = 1.0 if den == 0 else float(np.clip(1.0 - num / den, 0.0, 1.0))
    dn = chi2_null - df_null
    out["ifi"] = float((chi2_null - chi2) / dn) if dn != 0 else float("nan")
    if df_model > 0 and df_null > 0 and chi2_null / df_null != 1.0:
        tli = (chi2_null / df_null - chi2 / df_model) / (chi2_null / df_null - 1.0)
    else:
        tli = float("nan")
    out["tli"] = float(tli)
    out["tli_outside"] = bool(np.isfinite(tli) and not 0.0 <= tli <= 1.0)
    return out


@dataclass(eq=False)
class GofReport:
    """Pointwise fit indices on a grid and their averages.

    ``missing[t]`` marks grid points where ``S_t`` could not be formed or
    was singular; they are excluded from the averages.
    """

    grid: np.ndarray
    values: dict
    missing: np.ndarray
    n_eff: np.ndarray
    df_model: int
    df_null: int
    k: int
    variables: list
    bandwidth: float
    flags: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    @property
    def averages(self) -> dict:
        ok = ~self.missing
        out = {}
        for key, v in self.values.items():
            vv = np.asarray(v, dtype=float)[ok]
            vv = vv[np.isfinite(vv)]
            out[key] = float(vv.mean()) if vv.size else float("nan")
        return out

    def to_text(self, header_lines=()) -> str:
        """Pointwise table followed by a summary block in the order
        chi2/df, RMSEA, SRMR, CFI, IFI, GFI, TLI."""
        buf = io.StringIO()
        for h in header_lines:
            buf.write(f"# {h}\n")
        buf.write(f"# df_model={self.df_model} df_null={self.df_null} k={self.k} "
                  f"bandwidth={self.bandwidth:.6g} variables={','.join(self.variables)}\n")
        buf.write("# k = non-anchored loadings + structural edges + factors + indicators "
                  "+ Q(Q+1)/2 observed covariates\n")
        cols = ["chi2", "fml", "chi2_df", "rmsea", "srmr", "srmr_raw", "gfi", "cfi", "ifi", "tli", "chi2_null"]
        buf.write("t,n_eff,missing," + ",".join(cols) + "\n")
        for i, t in enumerate(self.grid):
            vals = ",".join(f"{self.values[c][i]:.6g}" for c in cols)
            buf.write(f"{t:.6g},{self.n_eff[i]:.6g},{int(self.missing[i])},{vals}\n")
        buf.write("\n")
        avg = self.averages
        buf.write(",".join(_TABLE_LABELS[k] for k in TABLE_ORDER) + "\n")
        buf.write(",".join(f"{avg[k]:.3f}" for k in TABLE_ORDER) + "\n")
        return buf.getvalue()


def fit_indices(dataset, design: ModelDesign, params: ParamSet, grid=None, bandwidth: float | None = None,
                include_covariates: bool = True, sample_covariances=None) -> GofReport:
    """Pointwise and averaged fit indices of a fitted model.

    Parameters
    ----------
    grid : array_like, optional
        Evaluation times (default: 101 points over the observed time range).
    bandwidth : float, optional
        Window half-width for ``S_t`` (default ``1.5 / M`` with M the largest
        number of observations of one curve).
    sample_covariances : callable, optional
        ``f(t, Sigma_t) -> (S_t, n_eff)`` overriding the local estimate
        (used to check the indices at a perfect fit).
    """
    spec = design.model.spec
    include = include_covariates and bool(spec.covariates)
    if grid is None:
        lo, hi = observed_time_range(dataset)
        grid = np.linspace(lo, hi, 101)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if bandwidth is None:
        M = max(obs[n][0].size for obs in dataset.observations for n in spec.indicators)
        bandwidth = 1.5 / max(M, 1)
    F = _feature_matrix(design, dataset)
    Cxx = np.cov(F, rowvar=False, ddof=1) if dataset.N > 1 else np.zeros((F.shape[1], F.shape[1]))
    Cxx = np.atleast_2d(Cxx)
    names = _observed_names(design, include)
    P = len(names)
    k = parameter_count(design, include)
    df_model = P * (P + 1) // 2 - k
    df_null = P * (P + 1) // 2 - P
    keys = ("fml", "chi2", "chi2_null", "chi2_df", "rmsea", "srmr", "srmr_raw", "gfi", "cfi", "ifi", "tli")
    values = {key: np.full(grid.size, np.nan) for key in keys}
    missing = np.zeros(grid.size, dtype=bool)
    n_eff = np.zeros(grid.size)
    flags = {"rmsea_clipped": np.zeros(grid.size, dtype=bool), "tli_outside": np.zeros(grid.size, dtype=bool)}
    for g, t in enumerate(grid):
        if sample_covariances is not None:
            Sigma = implied_covariance_at_t(design, params, float(t), Cxx, include_covariates=include)
            S, ne = sample_covariances(float(t), Sigma)
        else:
            S, ne, _, Sigma = sample_covariance_at_t(design, params, dataset, float(t), bandwidth, include, F)
        if S is None:
            missing[g] = True
            continue
        try:
            res = pointwise_indices(S, Sigma, ne, df_model, df_null)
        except np.linalg.LinAlgError:
            missing[g] = True
            continue
        n_eff[g] = ne
        for key in keys:
            values[key][g] = res[key]
        flags["rmsea_clipped"][g] = res["rmsea_clipped"]
        flags["tli_outside"][g] = res["tli_outside"]
    if missing.any():
        log.info("fit indices missing at %d of %d grid points", int(missing.sum()), grid.size)
    return GofReport(grid, values, missing, n_eff, df_model, df_null, k, names, float(bandwidth), flags)
