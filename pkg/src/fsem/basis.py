"""Function bases on a compact interval.

Evaluation matrices, the grid design blocks used by the truncated models
(``omega``, ``Omega_1``, ``Omega_2``, ``Omega_2*``, ``Delta``), composite
Gauss-Legendre quadrature and roughness penalties.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

__all__ = [
    "BasisError",
    "BasisSystem",
    "DesignBlocks",
    "PenaltyMatrix",
    "make_basis",
    "eval_basis",
    "design_blocks",
    "penalty_matrix",
    "quadrature_grid",
]

NODES_PER_UNIT = 64
_MIN_NODES_PER_PIECE = 8
_DOMAIN_TOL = 1e-10


class BasisError(ValueError):
    """Invalid basis configuration or evaluation request."""


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """A J-dimensional basis on ``domain``.

    Parameters
    ----------
    kind : {'bspline', 'fourier'}
    n_basis : int
        Truncation level J.
    domain : tuple of float
        Closed interval ``(lo, hi)``.
    order : int
        B-spline order (4 = cubic). Ignored for Fourier.
    knots : ndarray, optional
        Full (clamped) knot vector for B-splines.
    """

    kind: str
    n_basis: int
    domain: tuple[float, float] = (0.0, 1.0)
    order: int = 4
    knots: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def J(self) -> int:
        return self.n_basis

    @property
    def length(self) -> float:
        return self.domain[1] - self.domain[0]

    def evaluate(self, times, derivative_order: int = 0) -> np.ndarray:
        """Return the ``(J, M)`` matrix of ``e^(l)(t_k)``."""
        t = np.atleast_1d(np.asarray(times, dtype=float))
        if derivative_order not in (0, 1, 2):
            raise BasisError("derivative order must be 0, 1 or 2")
        lo, hi = self.domain
        if t.size and (t.min() < lo - _DOMAIN_TOL or t.max() > hi + _DOMAIN_TOL):
            raise BasisError(
                f"evaluation time outside domain [{lo}, {hi}]: "
                f"{t[(t < lo - _DOMAIN_TOL) | (t > hi + _DOMAIN_TOL)][:3]}"
            )
        t = np.clip(t, lo, hi)
        if self.kind == "bspline":
            spl = self._cache.get("bspline")
            if spl is None:
                spl = BSpline(self.knots, np.eye(self.n_basis), self.order - 1, extrapolate=True)
                self._cache["bspline"] = spl
            return np.asarray(spl(t, nu=derivative_order)).T
        return self._fourier(t, derivative_order)

    def _fourier(self, t, nu):
        L = self.length
        u = (t - self.domain[0]) / L
        out = np.empty((self.n_basis, t.size))
        out[0] = 1.0 if nu == 0 else 0.0
        for r in range(1, self.n_basis):
            k = (r + 1) // 2
            w = 2.0 * math.pi * k
            arg = w * u
            # d/dt = (w / L) d/du
            scale = (w / L) ** nu
            if r % 2 == 1:
                vals = (np.sin(arg), np.cos(arg), -np.sin(arg))[nu]
            else:
                vals = (np.cos(arg), -np.sin(arg), -np.cos(arg))[nu]
            out[r] = math.sqrt(2.0) * scale * vals
        return out / math.sqrt(L)

    def breakpoints(self) -> np.ndarray:
        """Points where the basis may lose smoothness (piece boundaries for quadrature)."""
        if self.kind == "bspline":
            return np.unique(self.knots)
        lo, hi = self.domain
        n_pieces = max(1, math.ceil(self.n_basis / 2))
        return np.linspace(lo, hi, n_pieces + 1)

    def quadrature(self, lo: float | None = None, hi: float | None = None):
        """Composite Gauss-Legendre nodes and weights on ``[lo, hi]``.

        Pieces are aligned with :meth:`breakpoints`, so products of B-splines
        are integrated exactly.
        """
        a = self.domain[0] if lo is None else float(lo)
        b = self.domain[1] if hi is None else float(hi)
        if b <= a:
            return np.empty(0), np.empty(0)
        bp = self.breakpoints()
        cuts = np.concatenate(([a], bp[(bp > a) & (bp < b)], [b]))
        nodes, weights = [], []
        for left, right in zip(cuts[:-1], cuts[1:]):
            width = right - left
            if width <= 0:
                continue
            n = max(_MIN_NODES_PER_PIECE, math.ceil(NODES_PER_UNIT * width / self.length))
            x, w = _gauss_legendre(n)
            nodes.append(left + 0.5 * width * (x + 1.0))
            weights.append(0.5 * width * w)
        return np.concatenate(nodes), np.concatenate(weights)

    def gram(self, derivative_order: int = 0) -> np.ndarray:
        """``int e^(l) e^(l)T`` over the domain."""
        key = ("gram", derivative_order)
        if key not in self._cache:
            x, w = self.quadrature()
            V = self.evaluate(x, derivative_order)
            G = (V * w) @ V.T
            self._cache[key] = 0.5 * (G + G.T)
        return self._cache[key]

    def project(self, values: np.ndarray, nodes: np.ndarray | None = None) -> np.ndarray:
        """L2-project function samples at the quadrature nodes onto the basis.

        ``values`` has the nodes on its last axis; returns coefficients with
        J on the last axis.
        """
        x, w = self.quadrature()
        if nodes is not None and not np.array_equal(nodes, x):
            raise BasisError("values must be sampled at the basis quadrature nodes")
        V = self.evaluate(x)
        rhs = np.asarray(values) @ (V * w).T
        return np.linalg.solve(self.gram(), rhs.T).T


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    matrix: np.ndarray
    effect_kind: str


@dataclass(frozen=True, eq=False)
class DesignBlocks:
    """Stacked grid blocks for one time grid.

    Attributes follow the stacked shapes of the truncated model: ``omega``
    is ``(M*J, 1)``, ``omega1`` is ``(M*J, J)``, ``omega2`` is ``(M*J, J**2)``,
    ``omega2_star`` is ``(M*J**2, J)`` and ``delta`` is ``(M, J)``. ``E`` is
    the ``(J, M)`` evaluation matrix. ``projector`` maps grid values to basis
    coefficients: ``(E W E^T)^-1 E W`` (``W`` = quadrature weights when given,
    identity otherwise).
    """

    times: np.ndarray
    E: np.ndarray
    omega: np.ndarray
    omega1: np.ndarray
    omega2: np.ndarray
    omega2_star: np.ndarray
    delta: np.ndarray
    projector: np.ndarray
    weights: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.times.size

    @property
    def J(self) -> int:
        return self.E.shape[0]

    def block(self, name: str) -> np.ndarray:
        """Per-time-point view ``(M, rows, cols)`` of a stacked block."""
        M, J = self.M, self.J
        arr = getattr(self, name)
        rows = J * J if name == "omega2_star" else J
        return arr.reshape(M, rows, arr.shape[1])


def _gauss_legendre(n):
    return np.polynomial.legendre.leggauss(n)


def make_basis(kind: str = "bspline", J: int = 10, domain=(0.0, 1.0), order: int = 4,
               interior_knots=None) -> BasisSystem:
    """Construct a basis system.

    Cubic B-splines with equispaced interior knots are the default.
    """
    lo, hi = (float(domain[0]), float(domain[1]))
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        raise BasisError(f"degenerate domain {domain!r}")
    if J < 2:
        raise BasisError(f"truncation level J={J} below minimum 2")
    if kind == "fourier":
        return BasisSystem("fourier", int(J), (lo, hi))
    if kind != "bspline":
        raise BasisError(f"unknown basis kind {kind!r}")
    if order < 2:
        raise BasisError("B-spline order must be >= 2")
    if interior_knots is None:
        n_int = J - order
        if n_int < 0:
            raise BasisError(f"J={J} incompatible with B-spline order {order} (need J >= order)")
        interior = np.linspace(lo, hi, n_int + 2)[1:-1]
    else:
        interior = np.asarray(interior_knots, dtype=float)
        if interior.size != J - order:
            raise BasisError(
                f"{interior.size} interior knots incompatible with J={J}, order={order}"
            )
        if np.any(np.diff(interior) < 0) or np.any(interior <= lo) or np.any(interior >= hi):
            raise BasisError("interior knots must be sorted and strictly inside the domain")
    knots = np.concatenate((np.full(order, lo), interior, np.full(order, hi)))
    return BasisSystem("bspline", int(J), (lo, hi), int(order), knots)


def eval_basis(basis: BasisSystem, times, derivative_order: int = 0) -> np.ndarray:
    return basis.evaluate(times, derivative_order)


def quadrature_grid(basis: BasisSystem):
    """Nodes and weights of the dense grid used for L2 projections."""
    return basis.quadrature()


def _ridge_projector(E, weights=None):
    J, M = E.shape
    EW = E if weights is None else E * weights
    A = EW @ E.T
    tr = np.trace(A)
    if M < J or np.linalg.cond(A) > 1e12:
        A = A + (1e-10 * tr / J) * np.eye(J)
    return np.linalg.solve(A, EW)


def design_blocks(basis: BasisSystem, times, weights=None) -> DesignBlocks:
    """Build all grid blocks for the time grid ``times``.

    Parameters
    ----------
    basis : BasisSystem
    times : array_like
        Sorted time points inside the domain.
    weights : array_like, optional
        Quadrature weights. With weights the projector is the weighted
        least-squares (L2) projection; otherwise it is the ridge-stabilized
        ``(E E^T)^-1 E``.
    """
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        raise BasisError("empty time grid")
    if np.any(np.diff(t) < 0):
        raise BasisError("times must be sorted")
    E = basis.evaluate(t)
    J, M = E.shape
    lo = basis.domain[0]
    # running integrals int_{lo}^{t_k} e(s) ds and int e(s) e(s)^T ds
    delta = np.zeros((M, J))
    inner = np.zeros((M, J, J))
    for k, tk in enumerate(t):
        x, w = basis.quadrature(lo, tk)
        if x.size == 0:
            continue
        V = basis.evaluate(x)
        delta[k] = V @ w
        inner[k] = (V * w) @ V.T
    omega = E.T.reshape(M, J, 1)
    omega1 = np.einsum("km,lm->mkl", E, E)
    # Omega_2 block k: kron(e(t_k)^T, I_k), columns indexed a*J + b (a: t-basis, b: s-basis)
    omega2 = np.einsum("am,mrb->mrab", E, inner).reshape(M, J, J * J)
    omega2_star = np.transpose(omega2, (0, 2, 1))
    w = None if weights is None else np.asarray(weights, dtype=float).ravel()
    return DesignBlocks(
        times=t,
        E=E,
        omega=omega.reshape(M * J, 1),
        omega1=omega1.reshape(M * J, J),
        omega2=omega2.reshape(M * J, J * J),
        omega2_star=np.ascontiguousarray(omega2_star).reshape(M * J * J, J),
        delta=delta,
        projector=_ridge_projector(E, w),
        weights=w,
    )


def penalty_matrix(basis: BasisSystem, effect_kind: str, covariate_basis: BasisSystem | None = None
                   ) -> PenaltyMatrix:
    """Roughness penalty for a coefficient vector of the given effect kind.

    ``concurrent`` (and ``linear``): ``int e'' e''^T``. ``historical``: the
    three-term Kronecker penalty on the ``(t, s)`` surface. ``smooth``:
    second-derivative roughness in time, integrated over the covariate range,
    plus the analogous roughness in the covariate direction. ``fixed``: a
    zero 1x1 matrix (scalar loadings are not penalized).
    """
    if effect_kind == "fixed":
        return PenaltyMatrix(np.zeros((1, 1)), effect_kind)
    if basis.kind == "bspline" and basis.order < 3:
        raise BasisError("basis lacks second derivatives (B-spline order < 3)")
    if effect_kind in ("concurrent", "linear"):
        P = basis.gram(2)
    elif effect_kind == "historical":
        G0, G1, G2 = basis.gram(0), basis.gram(1), basis.gram(2)
        P = np.kron(G1, G1) + np.kron(G0, G2) + np.kron(G2, G0)
    elif effect_kind == "smooth":
        if covariate_basis is None:
            raise BasisError("smooth penalty requires the covariate basis")
        if covariate_basis.kind == "bspline" and covariate_basis.order < 3:
            raise BasisError("covariate basis lacks second derivatives")
        P = np.kron(basis.gram(2), covariate_basis.gram(0)) + np.kron(basis.gram(0), covariate_basis.gram(2))
    else:
        raise BasisError(f"unknown effect kind {effect_kind!r}")
    if covariate_basis is not None and effect_kind != "smooth":
        raise BasisError("covariate basis only applies to smooth effects")
    return PenaltyMatrix(0.5 * (P + P.T), effect_kind)
