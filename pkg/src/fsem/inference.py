"""Bootstrap covariances and confidence bands for functional coefficients.

Coefficient functions are linear in their basis coefficients, so every
quantity on an evaluation grid is ``V @ theta`` for an evaluation matrix
``V``. The bootstrap covariance of ``theta`` therefore induces the grid
covariance ``V Sigma V^T`` used by both band constructions.
"""
from __future__ import annotations

import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .basis import BasisSystem
from .fit import FitConfig, FitResult, _coef_keys, fit_mcem, make_design, select_smoothing
from .gp import GPError, psd_sqrt

__all__ = [
    "BootstrapError",
    "CoefCovariance",
    "ConfidenceBand",
    "bootstrap_covariances",
    "pointwise_coefficient_covariance",
    "confidence_band",
    "evaluate_on_grid",
    "evaluation_matrix",
]

log = logging.getLogger(__name__)

EFFECTS = ("fixed", "concurrent", "linear", "historical", "smooth")


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed."""


@dataclass(eq=False)
class CoefCovariance:
    """Bootstrap covariance blocks keyed like :meth:`fsem.gp.ParamSet.get`.

    Attributes
    ----------
    blocks : dict
        Coefficient key -> ``(d, d)`` sample covariance over replicates.
    B : int
        Number of replicates used.
    dropped : int
        Number of replicates discarded (failed or not converged).
    replicates : dict
        Coefficient key -> ``(B, d)`` replicate estimates.
    """

    blocks: dict
    B: int
    dropped: int = 0
    replicates: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.blocks[key]


@dataclass(eq=False)
class ConfidenceBand:
    """Band of one coefficient function on a grid.

    ``center``, ``lower`` and ``upper`` have shape ``(len(grid),)`` or, for a
    surface, ``(len(grid), len(grid_s))`` with rows indexed by t.
    """

    grid: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    construction: str
    grid_s: np.ndarray | None = None

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_csv(self, path=None, header_lines=()) -> str:
        """Write ``grid_t[,grid_s],center,lower,upper`` rows; returns the text."""
        buf = io.StringIO()
        for h in header_lines:
            buf.write(f"# {h}\n")
        if self.grid_s is None:
            buf.write("grid_t,center,lower,upper\n")
            for t, c, lo, hi in zip(self.grid, self.center, self.lower, self.upper):
                buf.write(f"{t:.6g},{c:.10g},{lo:.10g},{hi:.10g}\n")
        else:
            buf.write("grid_t,grid_s,center,lower,upper\n")
            for i, t in enumerate(self.grid):
                for k, s in enumerate(self.grid_s):
                    buf.write(f"{t:.6g},{s:.6g},{self.center[i, k]:.10g},"
                              f"{self.lower[i, k]:.10g},{self.upper[i, k]:.10g}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# evaluation

def _infer_effect(size: int, J: int, effect: str | None) -> str:
    if effect is not None:
        if effect not in EFFECTS:
            raise ValueError(f"unknown effect {effect!r}")
        return effect
    if size == 1:
        return "fixed"
    if size == J:
        return "concurrent"
    if size == J * J:
        return "historical"
    raise ValueError(f"cannot infer the effect of a {size}-coefficient block with J={J}; pass effect=")


def evaluation_matrix(basis: BasisSystem, grid, effect: str, grid_s=None, covariate_basis=None, x=None):
    """Matrix ``V`` with ``V @ theta`` = coefficient function on the grid.

    Rows follow ``grid`` (and, for surfaces, ``grid_s`` fastest).

    Parameters
    ----------
    effect : str
        ``'fixed'``, ``'concurrent'``, ``'linear'``, ``'historical'`` or ``'smooth'``.
    grid_s : array_like, optional
        Second coordinate of a historical surface (defaults to ``grid``).
    covariate_basis : BasisSystem, optional
        Covariate basis ``h`` of a smooth effect.
    x : float, optional
        Covariate value at which a smooth effect ``gamma(t, x)`` is evaluated.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if effect == "fixed":
        return np.ones((grid.size, 1))
    Et = basis.evaluate(grid).T
    if effect in ("concurrent", "linear"):
        return Et
    if effect == "historical":
        gs = grid if grid_s is None else np.atleast_1d(np.asarray(grid_s, dtype=float))
        Es = basis.evaluate(gs).T
        return np.einsum("ta,sb->tsab", Et, Es).reshape(grid.size * gs.size, -1)
    if effect == "smooth":
        if covariate_basis is None or x is None:
            raise ValueError("a smooth effect needs covariate_basis and x")
        h = covariate_basis.evaluate(np.atleast_1d(float(x)))[:, 0]
        return np.einsum("ta,r->tar", Et, h).reshape(grid.size, -1)
    raise ValueError(f"unknown effect {effect!r}")


def _surface_shape(effect, grid, grid_s):
    grid = np.atleast_1d(grid)
    if effect == "historical":
        gs = grid if grid_s is None else np.atleast_1d(grid_s)
        return (grid.size, gs.size)
    return (grid.size,)


def evaluate_on_grid(coef, basis: BasisSystem, grid, effect: str | None = None, grid_s=None,
                     covariate_basis=None, x=None) -> np.ndarray:
    """Coefficient function values on the grid (a surface for historical effects)."""
    coef = np.asarray(coef, dtype=float).ravel()
    effect = _infer_effect(coef.size, basis.n_basis, effect)
    V = evaluation_matrix(basis, grid, effect, grid_s, covariate_basis, x)
    if V.shape[1] != coef.size:
        raise ValueError(f"{coef.size} coefficients do not match a {effect} effect of width {V.shape[1]}")
    return (V @ coef).reshape(_surface_shape(effect, grid, grid_s))


def pointwise_coefficient_covariance(cov, basis: BasisSystem, grid, effect: str | None = None, grid2=None,
                                     s=None, covariate_basis=None, x=None) -> np.ndarray:
    """Covariance function of an estimated coefficient function.

    Returns ``C[a, b] = cov(f(grid[a]), f(grid2[b]))``. For a historical
    effect both points share the second coordinate ``s`` (a scalar); for a
    smooth effect both share the covariate value ``x``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance block must be square")
    effect = _infer_effect(cov.shape[0], basis.n_basis, effect)
    g1 = np.atleast_1d(np.asarray(grid, dtype=float))
    g2 = g1 if grid2 is None else np.atleast_1d(np.asarray(grid2, dtype=float))
    for g in (g1, g2):
        lo, hi = basis.domain
        if np.any(g < lo - 1e-10) or np.any(g > hi + 1e-10):
            raise ValueError("grid outside the basis domain")
    if effect == "historical":
        if s is None:
            raise ValueError("a historical covariance function needs the shared coordinate s")
        V1 = evaluation_matrix(basis, g1, effect, grid_s=[s])
        V2 = evaluation_matrix(basis, g2, effect, grid_s=[s])
    else:
        V1 = evaluation_matrix(basis, g1, effect, covariate_basis=covariate_basis, x=x)
        V2 = evaluation_matrix(basis, g2, effect, covariate_basis=covariate_basis, x=x)
    if V1.shape[1] != cov.shape[0]:
        raise ValueError(f"covariance of size {cov.shape[0]} does not match a {effect} effect "
                         f"of width {V1.shape[1]}")
    return V1 @ cov @ V2.T


def confidence_band(coef, cov, basis: BasisSystem, grid, level: float = 0.95, construction: str = "pointwise",
                    effect: str | None = None, grid_s=None, covariate_basis=None, x=None,
                    truncation: float = 0.999, clip_tol: float = 1e-6) -> ConfidenceBand:
    """Confidence band of a coefficient function on a grid.

    ``pointwise`` gives ``center +- z * sd(t)``. ``ellipsoid`` keeps the
    leading eigen-components of the grid covariance that explain
    ``truncation`` of its trace, takes the chi-square radius with that many
    degrees of freedom, and reports the envelope of the resulting
    hyper-ellipsoid at every grid point (never narrower than the pointwise
    band at the same level).
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if construction not in ("pointwise", "ellipsoid"):
        raise ValueError(f"unknown band construction {construction!r}")
    coef = np.asarray(coef, dtype=float).ravel()
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (coef.size, coef.size):
        raise ValueError(f"covariance shape {cov.shape} does not match {coef.size} coefficients")
    effect = _infer_effect(coef.size, basis.n_basis, effect)
    V = evaluation_matrix(basis, grid, effect, grid_s, covariate_basis, x)
    try:
        root, _ = psd_sqrt(cov, tol=clip_tol)
    except GPError as exc:
        raise GPError(f"band covariance: {exc}") from None
    B = V @ root  # grid covariance = B B^T
    center = V @ coef
    sd = np.sqrt(np.einsum("ij,ij->i", B, B))
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * sd
    if construction == "ellipsoid":
        U, S, _ = np.linalg.svd(B, full_matrices=False)
        ev = S ** 2
        total = ev.sum()
        if total > 0:
            k = int(np.searchsorted(np.cumsum(ev) / total, truncation) + 1)
            k = min(k, ev.size)
            radius = np.sqrt(stats.chi2.ppf(level, k))
            Bk = U[:, :k] * S[:k]
            half = np.maximum(half, radius * np.sqrt(np.einsum("ij,ij->i", Bk, Bk)))
    shape = _surface_shape(effect, grid, grid_s)
    gs = None
    if effect == "historical":
        gs = np.atleast_1d(np.asarray(grid if grid_s is None else grid_s, dtype=float))
    return ConfidenceBand(np.atleast_1d(np.asarray(grid, dtype=float)), center.reshape(shape),
                          (center - half).reshape(shape), (center + half).reshape(shape), float(level),
                          construction, gs)


# ---------------------------------------------------------------------------
# bootstrap

def _seed_list(seed):
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def _replicate_seed(seed, b: int) -> int:
    return int(np.random.SeedSequence([*_seed_list(seed), b, 17]).generate_state(1)[0] % (2 ** 31))


def _one_replicate(args):
    model, dataset, config, design, initial, seed, b, keys, require_convergence = args
    rng = np.random.default_rng([*_seed_list(seed), b])
    idx = rng.integers(0, dataset.N, size=dataset.N)
    cfg = replace(config, seed=_replicate_seed(seed, b))
    try:
        res = fit_mcem(model, dataset.subset(idx), cfg, design=design, init=initial)
    except (GPError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("bootstrap replicate %d failed: %s", b, exc)
        return None
    if require_convergence and not res.converged:
        log.info("bootstrap replicate %d not converged after %d iterations", b, res.iterations)
        return None
    return {k: np.asarray(res.params.get(k), dtype=float).ravel() for k in keys}


def bootstrap_covariances(model, dataset, config: FitConfig, B: int = 200, seed=0, design=None,
                          initial: FitResult | None = None, max_drop_fraction: float = 0.2,
                          require_convergence: bool = True, threads: int = 1) -> CoefCovariance:
    """Nonparametric bootstrap covariance of the free coefficient vectors.

    Subjects are resampled with replacement; replicate b draws its indices
    from the stream ``(seed, b)``. Each resample is refitted (warm-started
    from ``initial`` when given). Replicates that fail, or that do not
    converge when ``require_convergence`` is set, are dropped; more than
    ``max_drop_fraction * B`` drops raise :class:`BootstrapError`.
    Anchored loadings carry no free coefficients and are excluded, except
    under unit-variance identification where they are reported estimates.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    design = design or (initial.design if initial is not None else
                        make_design(model, dataset, J=config.J, kind=config.basis_kind))
    if isinstance(config.alpha, str):
        alpha = initial.alpha if initial is not None else select_smoothing(model, dataset, config, design=design)
        config = replace(config, alpha=dict(alpha))
    keys = _coef_keys(design)
    if config.identification == "unit_variance":
        # rescaled anchored loadings become estimates too
        keys += [("loading", ld.indicator, ld.factor) for ld in design.model.spec.loadings if ld.anchored]
    jobs = [(model, dataset, config, design, initial, seed, b, keys, require_convergence) for b in range(B)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one_replicate, jobs))
    else:
        results = [_one_replicate(j) for j in jobs]
    kept = [r for r in results if r is not None]
    dropped = B - len(kept)
    if dropped > max_drop_fraction * B or len(kept) < 2:
        raise BootstrapError(f"{dropped} of {B} bootstrap replicates dropped "
                             f"(limit {max_drop_fraction:.0%})")
    reps = {k: np.array([r[k] for r in kept]) for k in keys}
    blocks = {k: np.atleast_2d(np.cov(v, rowvar=False, ddof=1)) for k, v in reps.items()}
    return CoefCovariance(blocks, len(kept), dropped, reps)
