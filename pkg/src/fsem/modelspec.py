"""Path-model declaration, validation, and truncated-model design assembly.

A model is a set of indicators (observed curves), latent factors and
covariates joined by typed edges. After validation the model is turned into a
:class:`ModelDesign`: one linear equation per indicator and per factor, each
written in terms of an extended per-subject vector

    w = (y_1, ..., y_p, eta_1, ..., eta_q, covariate features, 1)

where ``y_j`` and ``eta_m`` are J-vectors of basis coefficients. Every term of
an equation is bilinear in ``w`` and in its coefficient vector theta:
``sum_s w_s K[s] @ theta``, with ``K`` a stack of ``J x width`` matrices
obtained from the grid design blocks and the L2 projector.
"""
from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSystem, DesignBlocks, design_blocks, make_basis, penalty_matrix

__all__ = [
    "ModelError",
    "ConfigError",
    "Loading",
    "LatentEdge",
    "CovariateEdge",
    "ModelSpec",
    "ValidatedModel",
    "Term",
    "Equation",
    "ModelDesign",
    "validate_model",
    "parse_model",
    "build_design",
    "build_measurement_design",
    "build_structural_design",
    "build_coefficient_blocks",
    "coefficient_map",
]

LOADING_EFFECTS = ("fixed", "concurrent", "historical")
LATENT_EFFECTS = ("concurrent", "historical")
SCALAR_EFFECTS = ("linear", "smooth")
FUNCTIONAL_EFFECTS = ("concurrent", "historical")


class ModelError(ValueError):
    """The declared path model violates a structural rule."""


class ConfigError(ValueError):
    """Malformed model configuration text; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None and line is not None:
            where = f"{source}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        elif source is not None:
            where = f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class Loading:
    indicator: str
    factor: str
    effect: str = "concurrent"
    anchored: bool = False


@dataclass(frozen=True)
class LatentEdge:
    """``target`` is regressed on ``source`` (both factors)."""

    target: str
    source: str
    effect: str = "concurrent"


@dataclass(frozen=True)
class CovariateEdge:
    factor: str
    covariate: str
    effect: str = "linear"


@dataclass(frozen=True)
class ModelSpec:
    """Declarative path model.

    ``covariates`` maps each covariate name to ``'scalar'`` or ``'functional'``.
    """

    indicators: tuple[str, ...]
    factors: tuple[str, ...]
    loadings: tuple[Loading, ...]
    covariates: dict = field(default_factory=dict)
    latent_edges: tuple[LatentEdge, ...] = ()
    covariate_edges: tuple[CovariateEdge, ...] = ()

    @property
    def p(self) -> int:
        return len(self.indicators)

    @property
    def q(self) -> int:
        return len(self.factors)

    @property
    def Q(self) -> int:
        return len(self.covariates)


@dataclass(frozen=True)
class ValidatedModel:
    spec: ModelSpec
    factor_order: tuple[str, ...]
    anchors: dict

    def __getattr__(self, name):
        # delegate p, q, indicators, ... to the spec
        if name.startswith("_"):
            raise AttributeError(name)
        return getattr(self.spec, name)

    def loadings_of(self, indicator: str):
        return [ld for ld in self.spec.loadings if ld.indicator == indicator]

    def parents_of(self, factor: str):
        lat = [e for e in self.spec.latent_edges if e.target == factor]
        cov = [e for e in self.spec.covariate_edges if e.factor == factor]
        return lat, cov


def _topological_order(factors, edges):
    parents = {f: set() for f in factors}
    for e in edges:
        parents[e.target].add(e.source)
    order, done = [], set()
    remaining = list(factors)
    while remaining:
        ready = [f for f in remaining if parents[f] <= done]
        if not ready:
            raise ModelError(f"latent edges contain a cycle among {sorted(remaining)}")
        for f in ready:
            order.append(f)
            done.add(f)
        remaining = [f for f in remaining if f not in done]
    return tuple(order)


def validate_model(spec: ModelSpec) -> ValidatedModel:
    """Check structural rules and return the model with a topological factor order."""
    names = list(spec.indicators) + list(spec.factors) + list(spec.covariates)
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ModelError(f"duplicate names: {sorted(dup)}")
    if not spec.indicators:
        raise ModelError("model has no indicators")
    for cname, kind in spec.covariates.items():
        if kind not in ("scalar", "functional"):
            raise ModelError(f"covariate {cname!r}: kind must be scalar or functional, got {kind!r}")
    anchors = {}
    seen_pairs = set()
    for ld in spec.loadings:
        if ld.indicator not in spec.indicators:
            raise ModelError(f"loading references unknown indicator {ld.indicator!r}")
        if ld.factor not in spec.factors:
            raise ModelError(f"loading references unknown factor {ld.factor!r}")
        if ld.effect not in LOADING_EFFECTS:
            raise ModelError(f"loading {ld.indicator}<-{ld.factor}: invalid effect {ld.effect!r}")
        if (ld.indicator, ld.factor) in seen_pairs:
            raise ModelError(f"duplicate loading {ld.indicator}<-{ld.factor}")
        seen_pairs.add((ld.indicator, ld.factor))
        if ld.anchored:
            if ld.factor in anchors:
                raise ModelError(
                    f"factor {ld.factor!r} has more than one anchored loading "
                    f"({anchors[ld.factor]!r}, {ld.indicator!r})"
                )
            anchors[ld.factor] = ld.indicator
    for f in spec.factors:
        if not any(ld.factor == f for ld in spec.loadings):
            raise ModelError(f"factor {f!r} has no indicator")
        if f not in anchors:
            raise ModelError(f"factor {f!r} has no anchored loading")
    seen_pairs = set()
    for e in spec.latent_edges:
        if e.target not in spec.factors or e.source not in spec.factors:
            raise ModelError(f"latent edge {e.target}<-{e.source} references an unknown factor")
        if e.target == e.source:
            raise ModelError(f"self-edge on factor {e.target!r}")
        if e.effect not in LATENT_EFFECTS:
            raise ModelError(f"latent edge {e.target}<-{e.source}: invalid effect {e.effect!r}")
        if (e.target, e.source) in seen_pairs:
            raise ModelError(f"duplicate latent edge {e.target}<-{e.source}")
        seen_pairs.add((e.target, e.source))
    seen_pairs = set()
    for e in spec.covariate_edges:
        if e.factor not in spec.factors:
            raise ModelError(f"covariate edge references unknown factor {e.factor!r}")
        if e.covariate not in spec.covariates:
            raise ModelError(f"covariate edge references unknown covariate {e.covariate!r}")
        kind = spec.covariates[e.covariate]
        allowed = SCALAR_EFFECTS if kind == "scalar" else FUNCTIONAL_EFFECTS
        if e.effect not in allowed:
            raise ModelError(
                f"{e.effect} effect not allowed on {kind} covariate {e.covariate!r} "
                f"(allowed: {', '.join(allowed)})"
            )
        if (e.factor, e.covariate) in seen_pairs:
            raise ModelError(f"duplicate covariate edge {e.factor}<-{e.covariate}")
        seen_pairs.add((e.factor, e.covariate))
    order = _topological_order(spec.factors, spec.latent_edges)
    return ValidatedModel(spec, order, anchors)


# ---------------------------------------------------------------------------
# configuration grammar

_SET_RE = re.compile(r"^([A-Za-z_][\w.]*)\s*=\s*(.+)$")


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if "," in value:
        return [_coerce(v.strip()) for v in value.split(",") if v.strip()]
    return value


def parse_model(text: str, source: str | None = None):
    """Parse the declarative model configuration.

    Grammar (one statement per line, ``#`` starts a comment)::

        indicator NAME [NAME ...]
        factor NAME [NAME ...]
        covariate NAME scalar|functional
        load INDICATOR FACTOR fixed|concurrent|historical [anchor]
        path FACTOR SOURCE EFFECT        # SOURCE is a factor or covariate
        basis bspline|fourier J
        set SECTION.KEY = VALUE

    Returns
    -------
    model : ValidatedModel
    settings : dict
        ``{'basis': (kind, J), 'fit': {...}, 'simulate': {...}, ...}`` from
        ``basis`` and ``set`` lines.
    """
    indicators, factors, covariates = [], [], {}
    loadings, latent, cov_edges = [], [], []
    settings: dict = {}
    pending_paths = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ConfigError(str(exc), lineno, source) from None
        kw, args = tokens[0].lower(), tokens[1:]

        def need(n, usage):
            if len(args) < n:
                raise ConfigError(f"'{kw}' expects {usage}", lineno, source)

        if kw == "indicator":
            need(1, "at least one name")
            indicators.extend(args)
        elif kw == "factor":
            need(1, "at least one name")
            factors.extend(args)
        elif kw == "covariate":
            if len(args) != 2 or args[1] not in ("scalar", "functional"):
                raise ConfigError("'covariate' expects NAME scalar|functional", lineno, source)
            if args[0] in covariates:
                raise ConfigError(f"covariate {args[0]!r} declared twice", lineno, source)
            covariates[args[0]] = args[1]
        elif kw == "load":
            need(3, "INDICATOR FACTOR EFFECT [anchor]")
            extra = args[3:]
            if extra not in ([], ["anchor"]):
                raise ConfigError(f"unexpected tokens {extra}", lineno, source)
            if args[2] not in LOADING_EFFECTS:
                raise ConfigError(
                    f"unknown loading effect {args[2]!r} (expected one of {', '.join(LOADING_EFFECTS)})",
                    lineno, source)
            loadings.append((lineno, Loading(args[0], args[1], args[2], bool(extra))))
        elif kw == "path":
            if len(args) != 3:
                raise ConfigError("'path' expects FACTOR SOURCE EFFECT", lineno, source)
            pending_paths.append((lineno, args))
        elif kw == "basis":
            if len(args) != 2 or args[0] not in ("bspline", "fourier"):
                raise ConfigError("'basis' expects bspline|fourier J", lineno, source)
            try:
                settings["basis"] = (args[0], int(args[1]))
            except ValueError:
                raise ConfigError(f"basis size must be an integer, got {args[1]!r}", lineno, source) from None
        elif kw == "set":
            m = _SET_RE.match(line[3:].strip())
            if not m or "." not in m.group(1):
                raise ConfigError("'set' expects SECTION.KEY = VALUE", lineno, source)
            section, key = m.group(1).split(".", 1)
            settings.setdefault(section, {})[key] = _coerce(m.group(2).strip())
        else:
            raise ConfigError(f"unknown statement {tokens[0]!r}", lineno, source)

    for lineno, ld in loadings:
        for name, pool, what in ((ld.indicator, indicators, "indicator"), (ld.factor, factors, "factor")):
            if name not in pool:
                raise ConfigError(f"unknown {what} {name!r}", lineno, source)
    for lineno, (target, src, effect) in pending_paths:
        if target not in factors:
            raise ConfigError(f"unknown factor {target!r}", lineno, source)
        if src in factors:
            latent.append(LatentEdge(target, src, effect))
        elif src in covariates:
            cov_edges.append(CovariateEdge(target, src, effect))
        else:
            raise ConfigError(f"unknown path source {src!r}", lineno, source)
    spec = ModelSpec(
        indicators=tuple(indicators),
        factors=tuple(factors),
        loadings=tuple(ld for _, ld in loadings),
        covariates=dict(covariates),
        latent_edges=tuple(latent),
        covariate_edges=tuple(cov_edges),
    )
    try:
        model = validate_model(spec)
    except ModelError as exc:
        raise ConfigError(str(exc), None, source) from None
    return model, settings


# ---------------------------------------------------------------------------
# design assembly

@dataclass(frozen=True, eq=False)
class Term:
    """One additive term ``sum_s w[source][s] * K[s] @ theta`` of an equation.

    ``key`` addresses the coefficient in a :class:`~fsem.gp.ParamSet`:
    ``('beta', j)``, ``('loading', j, m)``, ``('gamma_eta', m, n)`` or
    ``('gamma_x', m, l)``.
    """

    key: tuple
    effect: str
    source: slice
    K: np.ndarray
    penalty: np.ndarray
    free: bool = True

    @property
    def width(self) -> int:
        return self.K.shape[2]


@dataclass(frozen=True, eq=False)
class Equation:
    name: str
    kind: str  # 'measurement' or 'structural'
    target: slice
    terms: tuple[Term, ...]

    @property
    def free_terms(self):
        return tuple(t for t in self.terms if t.free)


@dataclass(frozen=True, eq=False)
class ModelDesign:
    """Everything needed to map parameters to the per-subject linear model.

    Attributes
    ----------
    model : ValidatedModel
    basis : BasisSystem
    blocks : DesignBlocks
        Dense quadrature-grid blocks used for all L2 projections.
    slices : dict
        Name -> slice into ``w`` for indicators, factors, covariate features
        (``'x:<name>'``) and ``'const'``.
    n_latent : int
        Length of the latent part ``u = w[:n_latent]``.
    n_w : int
        Length of ``w``.
    equations : tuple of Equation
        Indicators in declaration order, then factors in topological order.
    covariate_bases : dict
        Covariate name -> BasisSystem on the covariate range (smooth effects).
    """

    model: ValidatedModel
    basis: BasisSystem
    blocks: DesignBlocks
    slices: dict
    n_latent: int
    n_w: int
    equations: tuple[Equation, ...]
    covariate_bases: dict

    @property
    def J(self) -> int:
        return self.basis.J

    def equation(self, name: str) -> Equation:
        for eq in self.equations:
            if eq.name == name:
                return eq
        raise KeyError(name)

    def covariate_features(self, covariates: dict) -> np.ndarray:
        """Feature vector ``(covariate features, 1)`` for one subject."""
        spec = self.model.spec
        parts = []
        for name, kind in spec.covariates.items():
            for rep in ("raw", "spline", "coef"):
                key = f"x:{name}:{rep}"
                if key not in self.slices:
                    continue
                if name not in covariates:
                    raise ModelError(f"missing covariate {name!r}")
                val = covariates[name]
                if rep == "raw":
                    parts.append(np.atleast_1d(float(val)))
                elif rep == "spline":
                    hb = self.covariate_bases[name]
                    lo, hi = hb.domain
                    parts.append(hb.evaluate(np.clip(float(val), lo, hi))[:, 0])
                else:
                    v = np.asarray(val, dtype=float).ravel()
                    if v.size != self.J:
                        raise ModelError(
                            f"functional covariate {name!r} must be given as {self.J} basis coefficients, got {v.size}"
                        )
                    parts.append(v)
        parts.append(np.ones(1))
        return np.concatenate(parts)

    def anchor_coefficient(self, effect: str) -> np.ndarray:
        """Coefficients representing the constant loading 1."""
        c1 = _constant_coefs(self.basis)
        if effect == "fixed":
            return np.ones(1)
        if effect == "concurrent":
            return c1
        return np.kron(c1, c1)


def _constant_coefs(basis: BasisSystem) -> np.ndarray:
    x, _ = basis.quadrature()
    return basis.project(np.ones(x.size))


def _grid_stack(blocks: DesignBlocks, effect: str) -> np.ndarray:
    """Per-node stack Omega*[k, b, :] with b indexing the source coefficients."""
    M, J = blocks.M, blocks.J
    if effect == "fixed":
        return blocks.E.T.reshape(M, J, 1)
    if effect == "concurrent":
        return blocks.omega1.reshape(M, J, J)
    if effect == "historical":
        return blocks.omega2.reshape(M, J, J * J)
    raise ModelError(f"no grid stack for effect {effect!r}")


def effect_tensor(blocks: DesignBlocks, effect: str) -> np.ndarray:
    """``K[b] = P @ Omega*[:, b, :]``, shape ``(J, J, width)``."""
    stack = _grid_stack(blocks, effect)
    return np.einsum("jk,kbc->bjc", blocks.projector, stack)


def coefficient_map(K: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Matrix ``C`` with ``C @ w_source = sum_s w_s K[s] @ theta``."""
    return np.einsum("sjk,k->js", K, np.asarray(theta, dtype=float))


def build_design(model: ValidatedModel, basis: BasisSystem, covariate_ranges: dict | None = None,
                 covariate_basis_size: int | None = None) -> ModelDesign:
    """Assemble the equations of the truncated model.

    Parameters
    ----------
    model : ValidatedModel
    basis : BasisSystem
    covariate_ranges : dict, optional
        Covariate name -> (lo, hi) observed range; required for smooth effects.
    covariate_basis_size : int, optional
        Dimension J_h of the smooth-effect covariate basis (default J).
    """
    spec = model.spec
    J = basis.J
    x, w = basis.quadrature()
    blocks = design_blocks(basis, x, w)
    slices = {}
    pos = 0
    for name in spec.indicators:
        slices[name] = slice(pos, pos + J)
        pos += J
    for name in model.factor_order:
        slices[name] = slice(pos, pos + J)
        pos += J
    n_latent = pos
    effects_by_cov: dict = {}
    for e in spec.covariate_edges:
        effects_by_cov.setdefault(e.covariate, set()).add(e.effect)
    cov_bases = {}
    J_h = covariate_basis_size or J
    for name, kind in spec.covariates.items():
        used = effects_by_cov.get(name, set())
        reps = []
        if kind == "scalar":
            reps.append("raw")
            if "smooth" in used:
                reps.append("spline")
                rng = (covariate_ranges or {}).get(name)
                if rng is None:
                    raise ModelError(f"smooth effect of {name!r} needs the covariate range")
                lo, hi = float(rng[0]), float(rng[1])
                if hi <= lo:
                    hi = lo + 1.0
                cov_bases[name] = make_basis("bspline", J_h, (lo, hi))
        else:
            reps.append("coef")
        for rep in reps:
            size = {"raw": 1, "spline": J_h, "coef": J}[rep]
            slices[f"x:{name}:{rep}"] = slice(pos, pos + size)
            pos += size
    slices["const"] = slice(pos, pos + 1)
    pos += 1

    tensors = {e: effect_tensor(blocks, e) for e in LOADING_EFFECTS}
    R2 = penalty_matrix(basis, "concurrent").matrix if _has_second_derivative(basis) else np.zeros((J, J))

    def pen(effect, cov=None):
        if effect == "fixed":
            return np.zeros((1, 1))
        if not _has_second_derivative(basis):
            return np.zeros((tensors.get(effect, np.zeros((1, 1, J))).shape[2],) * 2)
        if effect == "smooth":
            return penalty_matrix(basis, "smooth", cov).matrix
        if effect == "linear":
            return R2
        return penalty_matrix(basis, effect).matrix

    eye = np.eye(J)[None, :, :]
    equations = []
    for j in spec.indicators:
        terms = [Term(("beta", j), "intercept", slices["const"], eye, np.zeros((J, J)))]
        for ld in model.loadings_of(j):
            terms.append(Term(("loading", j, ld.factor), ld.effect, slices[ld.factor],
                              tensors[ld.effect], pen(ld.effect), free=not ld.anchored))
        equations.append(Equation(j, "measurement", slices[j], tuple(terms)))
    for m in model.factor_order:
        lat, cov = model.parents_of(m)
        terms = []
        for e in lat:
            terms.append(Term(("gamma_eta", m, e.source), e.effect, slices[e.source],
                              tensors[e.effect], pen(e.effect)))
        for e in cov:
            if e.effect == "linear":
                K = np.eye(J)[None, :, :]
                src = slices[f"x:{e.covariate}:raw"]
                P = pen("linear")
            elif e.effect == "smooth":
                hb = cov_bases[e.covariate]
                Jh = hb.J
                K = np.zeros((Jh, J, J * Jh))
                for r in range(Jh):
                    K[r, np.arange(J), np.arange(J) * Jh + r] = 1.0
                src = slices[f"x:{e.covariate}:spline"]
                P = pen("smooth", hb)
            else:
                K = tensors[e.effect]
                src = slices[f"x:{e.covariate}:coef"]
                P = pen(e.effect)
            terms.append(Term(("gamma_x", m, e.covariate), e.effect, src, K, P))
        equations.append(Equation(m, "structural", slices[m], tuple(terms)))
    return ModelDesign(model, basis, blocks, slices, n_latent, pos, tuple(equations), cov_bases)


def _has_second_derivative(basis: BasisSystem) -> bool:
    return basis.kind == "fourier" or basis.order >= 3


# ---------------------------------------------------------------------------
# block-matrix forms on an arbitrary subject grid

def _subject_factor_blocks(model: ValidatedModel, eta_coefs, blocks: DesignBlocks, effects_for):
    eta = np.atleast_2d(np.asarray(eta_coefs, dtype=float))
    order = list(model.spec.factors)
    cols, index = [], {}
    start = 0
    for m_idx, m in enumerate(order):
        for effect in effects_for(m):
            stack = _grid_stack(blocks, effect)
            # P (I_M kron eta)^T Omega*
            block = blocks.projector @ np.einsum("b,kbc->kc", eta[m_idx], stack)
            cols.append(block)
            index[(m, effect)] = slice(start, start + block.shape[1])
            start += block.shape[1]
    return cols, index, start


def build_measurement_design(model: ValidatedModel, eta_coefs_i, blocks: DesignBlocks):
    """Per-subject measurement block matrix and selectors.

    Parameters
    ----------
    model : ValidatedModel
    eta_coefs_i : array_like, shape (q, J)
        Factor coefficients in declaration order.
    blocks : DesignBlocks
        Blocks for the subject's time grid.

    Returns
    -------
    F : ndarray
        ``[I_J | P (I_M kron eta_1)^T Omega* | ...]`` with one block per
        (factor, effect type) pair used by any indicator.
    A : dict
        Indicator -> diagonal 0/1 selector over the columns of ``F``
        (non-anchored loadings only).
    f_anchor : dict
        ``(indicator, factor)`` -> grid vector ``f'`` for anchored loadings
        (``E^T eta`` for fixed/concurrent, ``Delta eta`` for historical).
    """
    spec = model.spec
    J = blocks.J
    eta = np.atleast_2d(np.asarray(eta_coefs_i, dtype=float))
    if eta.shape != (spec.q, J):
        raise ModelError(f"eta coefficients must have shape {(spec.q, J)}, got {eta.shape}")

    def effects_for(m):
        return sorted({ld.effect for ld in spec.loadings if ld.factor == m and not ld.anchored})

    cols, index, width = _subject_factor_blocks(model, eta, blocks, effects_for)
    F = np.hstack([np.eye(J)] + cols) if cols else np.eye(J)
    A, f_anchor = {}, {}
    m_pos = {m: k for k, m in enumerate(spec.factors)}
    for j in spec.indicators:
        diag = np.zeros(J + width)
        diag[:J] = 1.0
        for ld in model.loadings_of(j):
            if ld.anchored:
                e = eta[m_pos[ld.factor]]
                f_anchor[(j, ld.factor)] = blocks.delta @ e if ld.effect == "historical" else blocks.E.T @ e
            else:
                sl = index[(ld.factor, ld.effect)]
                diag[J + sl.start:J + sl.stop] = 1.0
        A[j] = np.diag(diag)
    return F, A, f_anchor


def build_structural_design(model: ValidatedModel, eta_coefs_i, covariates_i: dict, blocks: DesignBlocks,
                            covariate_bases: dict | None = None):
    """Per-subject structural block matrix ``S_i`` and selectors ``B_m``.

    Column blocks: one per (factor, effect) used as a latent regressor, then
    one per covariate edge (linear: ``x I_J``; smooth: ``I_J kron h(x)^T``;
    functional: ``P (I_M kron x)^T Omega*``).
    """
    spec = model.spec
    J = blocks.J
    eta = np.atleast_2d(np.asarray(eta_coefs_i, dtype=float))

    def effects_for(m):
        return sorted({e.effect for e in spec.latent_edges if e.source == m})

    cols, index, width = _subject_factor_blocks(model, eta, blocks, effects_for)
    cov_index = {}
    for e in spec.covariate_edges:
        if e.covariate not in covariates_i:
            raise ModelError(f"missing covariate {e.covariate!r}")
        val = covariates_i[e.covariate]
        if e.effect == "linear":
            block = float(val) * np.eye(J)
        elif e.effect == "smooth":
            hb = (covariate_bases or {}).get(e.covariate)
            if hb is None:
                raise ModelError(f"smooth effect of {e.covariate!r} needs its covariate basis")
            h = hb.evaluate(np.clip(float(val), *hb.domain))[:, 0]
            block = np.kron(np.eye(J), h[None, :])
        else:
            x = np.asarray(val, dtype=float).ravel()
            if x.size != J:
                raise ModelError(f"functional covariate {e.covariate!r}: expected {J} coefficients, got {x.size}")
            stack = _grid_stack(blocks, e.effect)
            block = blocks.projector @ np.einsum("b,kbc->kc", x, stack)
        key = (e.factor, e.covariate)
        cov_index[key] = slice(width, width + block.shape[1])
        width += block.shape[1]
        cols.append(block)
    S = np.hstack(cols) if cols else np.zeros((J, 0))
    B = {}
    for m in spec.factors:
        diag = np.zeros(width)
        for e in spec.latent_edges:
            if e.target == m:
                sl = index[(e.source, e.effect)]
                diag[sl] = 1.0
        for e in spec.covariate_edges:
            if e.factor == m:
                diag[cov_index[(m, e.covariate)]] = 1.0
        B[m] = np.diag(diag)
    return S, B


def build_coefficient_blocks(model: ValidatedModel, params, blocks: DesignBlocks):
    """Coefficient maps acting on stacked factor coefficients.

    Returns a dict with ``'Lambda'``: indicator -> ``(J, q*J)`` map of the free
    loadings, ``'Lambda_anchor'``: indicator -> ``(J, q*J)`` map of the
    anchored ones, ``'Gamma_eta'``: factor -> ``(J, q*J)``, and
    ``'Gamma_x'``: factor -> {covariate: ``(J, width)``} maps from covariate
    features. Factors are stacked in declaration order. The maps are
    ``P (I_M kron theta^T) Omega*`` in the notation of the truncated model.
    """
    spec = model.spec
    J = blocks.J
    q = spec.q
    m_pos = {m: k for k, m in enumerate(spec.factors)}
    out = {"Lambda": {}, "Lambda_anchor": {}, "Gamma_eta": {}, "Gamma_x": {}}

    def theta_map(effect, theta):
        stack = _grid_stack(blocks, effect)
        th = np.asarray(theta, dtype=float).ravel()
        if th.size != stack.shape[2]:
            raise ModelError(f"{effect} coefficient must have {stack.shape[2]} entries, got {th.size}")
        return blocks.projector @ np.einsum("kbc,c->kb", stack, th)

    for j in spec.indicators:
        L = np.zeros((J, q * J))
        La = np.zeros((J, q * J))
        for ld in model.loadings_of(j):
            sl = slice(m_pos[ld.factor] * J, (m_pos[ld.factor] + 1) * J)
            if ld.anchored:
                La[:, sl] = blocks.projector @ (blocks.delta if ld.effect == "historical" else blocks.E.T)
            else:
                try:
                    theta = params.loadings[(j, ld.factor)]
                except KeyError:
                    raise ModelError(f"missing coefficient for loading {j}<-{ld.factor}") from None
                L[:, sl] = theta_map(ld.effect, theta)
        out["Lambda"][j] = L
        out["Lambda_anchor"][j] = La
    for m in spec.factors:
        G = np.zeros((J, q * J))
        gx = {}
        for e in spec.latent_edges:
            if e.target != m:
                continue
            try:
                theta = params.gamma_eta[(m, e.source)]
            except KeyError:
                raise ModelError(f"missing coefficient for latent edge {m}<-{e.source}") from None
            sl = slice(m_pos[e.source] * J, (m_pos[e.source] + 1) * J)
            G[:, sl] = theta_map(e.effect, theta)
        for e in spec.covariate_edges:
            if e.factor != m:
                continue
            try:
                theta = np.asarray(params.gamma_x[(m, e.covariate)], dtype=float)
            except KeyError:
                raise ModelError(f"missing coefficient for covariate edge {m}<-{e.covariate}") from None
            if e.effect == "linear":
                gx[e.covariate] = theta.reshape(J, 1)
            elif e.effect == "smooth":
                gx[e.covariate] = theta.reshape(J, -1)
            else:
                gx[e.covariate] = theta_map(e.effect, theta)
        out["Gamma_eta"][m] = G
        out["Gamma_x"][m] = gx
    return out
