"""Observed functional data: per-subject indicator series and covariates.

Includes long-format ingestion/export and the sampling designs used in the
simulation studies.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataError",
    "FunctionalDataset",
    "ingest_long_format",
    "read_long_csv",
    "read_covariate_csv",
    "write_long_csv",
    "write_covariate_csv",
    "generate_sampling_design",
    "irregular_count_probabilities",
    "smooth_to_coefficients",
]


class DataError(ValueError):
    """Malformed or inconsistent data."""


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """Per-subject observations of p indicators plus covariates.

    Attributes
    ----------
    subjects : tuple of str
        Subject identifiers in order.
    variables : tuple of str
        Indicator names.
    observations : list of dict
        ``observations[i][name] = (times, values)`` with strictly increasing
        times on the internal [0, 1] scale. Missing indicators have empty arrays.
    covariates : list of dict
        ``covariates[i][name]`` is a float (scalar covariate) or a
        ``(times, values)`` pair (functional covariate, internal scale).
    domain : tuple of float
        Original time range mapped affinely onto [0, 1].
    """

    subjects: tuple
    variables: tuple
    observations: list
    covariates: list = field(default_factory=list)
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        if len(self.observations) != len(self.subjects):
            raise DataError("observations and subjects differ in length")
        if not self.covariates:
            object.__setattr__(self, "covariates", [dict() for _ in self.subjects])
        for i, obs in enumerate(self.observations):
            for name in self.variables:
                t, v = obs.get(name, (np.empty(0), np.empty(0)))
                t = np.asarray(t, dtype=float)
                v = np.asarray(v, dtype=float)
                if t.shape != v.shape or t.ndim != 1:
                    raise DataError(f"subject {self.subjects[i]}: {name} times/values mismatch")
                if t.size and np.any(np.diff(t) <= 0):
                    raise DataError(f"subject {self.subjects[i]}: {name} times not strictly increasing")
                if not np.all(np.isfinite(v)) or not np.all(np.isfinite(t)):
                    raise DataError(f"subject {self.subjects[i]}: non-finite value in {name}")
                obs[name] = (t, v)

    @property
    def N(self) -> int:
        return len(self.subjects)

    def counts(self) -> np.ndarray:
        """``(N, p)`` matrix of observation counts M_ij."""
        return np.array([[self.observations[i][v][0].size for v in self.variables] for i in range(self.N)])

    def to_internal(self, t):
        lo, hi = self.domain
        return (np.asarray(t, dtype=float) - lo) / (hi - lo)

    def to_external(self, t):
        lo, hi = self.domain
        return lo + np.asarray(t, dtype=float) * (hi - lo)

    def subset(self, index) -> "FunctionalDataset":
        """Dataset of the given subjects (repeats allowed, relabelled on repeat)."""
        idx = [int(k) for k in index]
        seen: dict = {}
        names = []
        for k in idx:
            base = str(self.subjects[k])
            c = seen.get(base, 0)
            names.append(base if c == 0 else f"{base}#{c}")
            seen[base] = c + 1
        return FunctionalDataset(
            tuple(names), self.variables,
            [dict(self.observations[k]) for k in idx],
            [dict(self.covariates[k]) for k in idx],
            self.domain,
        )

    def covariate_range(self, name) -> tuple[float, float]:
        vals = [float(c[name]) for c in self.covariates if name in c and np.isscalar(c[name])]
        if not vals:
            raise DataError(f"no scalar values for covariate {name!r}")
        return min(vals), max(vals)


def _as_float(value, what):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise DataError(f"non-numeric {what}: {value!r}") from None
    if not math.isfinite(out):
        raise DataError(f"non-finite {what}: {value!r}")
    return out


def ingest_long_format(records, covariate_records=(), variables=None, domain=(0.0, 1.0),
                       covariate_kinds=None) -> FunctionalDataset:
    """Build a dataset from long-format records.

    Parameters
    ----------
    records : iterable of (subject, variable, time, value)
    covariate_records : iterable of (subject, name, value) or (subject, name, value, time)
        Records with a time are functional covariates.
    variables : sequence of str, optional
        Expected indicator names (an unknown name raises). Defaults to the
        names in order of first appearance.
    domain : (lo, hi)
        Time range mapped onto [0, 1]. Times outside it raise.
    covariate_kinds : dict, optional
        Declared kinds; a functional covariate given without times raises.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise DataError(f"degenerate domain {domain!r}")
    tol = 1e-9 * (hi - lo)
    subjects: list = []
    sub_pos: dict = {}
    seen_vars: list = []
    raw: dict = {}

    def subject_index(sid):
        sid = str(sid)
        if sid not in sub_pos:
            sub_pos[sid] = len(subjects)
            subjects.append(sid)
        return sub_pos[sid]

    for rec in records:
        if len(rec) != 4:
            raise DataError(f"expected (subject, variable, time, value), got {rec!r}")
        sid, var, t, v = rec
        var = str(var)
        if variables is not None and var not in variables:
            raise DataError(f"unknown variable {var!r}")
        if var not in seen_vars:
            seen_vars.append(var)
        t = _as_float(t, "time")
        v = _as_float(v, "value")
        if t < lo - tol or t > hi + tol:
            raise DataError(f"time {t} of subject {sid}, variable {var} outside domain [{lo}, {hi}]")
        i = subject_index(sid)
        cell = raw.setdefault((i, var), {})
        u = min(max((t - lo) / (hi - lo), 0.0), 1.0)
        if u in cell:
            raise DataError(f"duplicate time point ({sid}, {var}, {t})")
        cell[u] = v
    cov_raw: dict = {}
    for rec in covariate_records:
        if len(rec) not in (3, 4):
            raise DataError(f"expected (subject, name, value[, time]), got {rec!r}")
        sid, name, v = rec[0], str(rec[1]), _as_float(rec[2], "covariate value")
        i = subject_index(sid)
        if len(rec) == 4 and rec[3] not in (None, ""):
            t = _as_float(rec[3], "covariate time")
            if t < lo - tol or t > hi + tol:
                raise DataError(f"covariate time {t} of subject {sid} outside domain")
            cell = cov_raw.setdefault((i, name), {})
            if not isinstance(cell, dict):
                raise DataError(f"covariate {name!r} of subject {sid} mixes scalar and functional records")
            u = min(max((t - lo) / (hi - lo), 0.0), 1.0)
            if u in cell:
                raise DataError(f"duplicate covariate time point ({sid}, {name}, {t})")
            cell[u] = v
        else:
            if (i, name) in cov_raw:
                raise DataError(f"duplicate scalar covariate ({sid}, {name})")
            cov_raw[(i, name)] = v
    var_names = tuple(variables) if variables is not None else tuple(seen_vars)
    observations = []
    empty = (np.empty(0), np.empty(0))
    for i in range(len(subjects)):
        obs = {}
        for var in var_names:
            cell = raw.get((i, var))
            if not cell:
                obs[var] = empty
                continue
            ts = np.array(sorted(cell))
            obs[var] = (ts, np.array([cell[t] for t in ts]))
        observations.append(obs)
    covs = [dict() for _ in subjects]
    for (i, name), cell in cov_raw.items():
        if isinstance(cell, dict):
            ts = np.array(sorted(cell))
            covs[i][name] = (ts, np.array([cell[t] for t in ts]))
        else:
            if covariate_kinds and covariate_kinds.get(name) == "functional":
                raise DataError(f"functional covariate {name!r} given without a time column")
            covs[i][name] = cell
    return FunctionalDataset(tuple(subjects), var_names, observations, covs, (lo, hi))


def _read_csv(path_or_text, required):
    if hasattr(path_or_text, "read"):
        text = path_or_text.read()
    elif "\n" in str(path_or_text):
        text = str(path_or_text)
    else:
        with open(path_or_text, encoding="utf-8", newline="") as fh:
            text = fh.read()
    numbered = [(k + 1, ln) for k, ln in enumerate(text.splitlines()) if not ln.startswith("#")]
    reader = csv.DictReader([ln for _, ln in numbered])
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"missing column(s) {missing}; header is {header}")
    rows = list(reader)
    # physical line of each record (header is the first non-comment line)
    for row, (lineno, _) in zip(rows, numbered[1:]):
        row["__line__"] = lineno
    return rows


def _source_name(path_or_text) -> str:
    if hasattr(path_or_text, "name"):
        return str(path_or_text.name)
    if "\n" in str(path_or_text):
        return "<text>"
    return str(path_or_text)


def _check_rows(rows, source, variables, columns):
    for r in rows:
        where = f"{source}:{r['__line__']}"
        for c in columns:
            if r.get(c) in (None, ""):
                raise DataError(f"{where}: empty {c!r}")
            _as_float(r[c], f"{c} at {where}")
        if variables is not None and "variable" in r and r["variable"] not in variables:
            raise DataError(f"{where}: unknown variable {r['variable']!r} (model declares {', '.join(variables)})")


def read_long_csv(path, covariate_path=None, variables=None, domain=(0.0, 1.0), covariate_kinds=None):
    """Read ``subject,variable,time,value`` (and optional covariate) files."""
    rows = _read_csv(path, ("subject", "variable", "time", "value"))
    _check_rows(rows, _source_name(path), variables, ("time", "value"))
    recs = [(r["subject"], r["variable"], r["time"], r["value"]) for r in rows]
    crecs = []
    if covariate_path is not None:
        crecs = read_covariate_csv(covariate_path)
    return ingest_long_format(recs, crecs, variables=variables, domain=domain, covariate_kinds=covariate_kinds)


def read_covariate_csv(path):
    rows = _read_csv(path, ("subject", "name", "value"))
    _check_rows(rows, _source_name(path), None, ("value",))
    return [(r["subject"], r["name"], r["value"], r.get("time")) for r in rows]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_long_csv(dataset: FunctionalDataset, fh=None, header_lines=()) -> str:
    """Export indicator observations in long format (external time scale)."""
    buf = io.StringIO()
    for h in header_lines:
        buf.write(f"# {h}\n")
    buf.write("subject,variable,time,value\n")
    for i, sid in enumerate(dataset.subjects):
        for var in dataset.variables:
            t, v = dataset.observations[i][var]
            for tk, vk in zip(dataset.to_external(t), v):
                buf.write(f"{sid},{var},{_fmt(tk)},{_fmt(vk)}\n")
    out = buf.getvalue()
    if fh is not None:
        fh.write(out)
    return out


def write_covariate_csv(dataset: FunctionalDataset, fh=None, header_lines=()) -> str:
    buf = io.StringIO()
    for h in header_lines:
        buf.write(f"# {h}\n")
    buf.write("subject,name,value,time\n")
    for i, sid in enumerate(dataset.subjects):
        for name, val in dataset.covariates[i].items():
            if isinstance(val, tuple):
                for tk, vk in zip(dataset.to_external(val[0]), val[1]):
                    buf.write(f"{sid},{name},{_fmt(vk)},{_fmt(tk)}\n")
            else:
                buf.write(f"{sid},{name},{_fmt(val)},\n")
    out = buf.getvalue()
    if fh is not None:
        fh.write(out)
    return out


def irregular_count_probabilities(M: int) -> np.ndarray:
    """P(M_ij = k), k = 1..M, for the irregular design: ``a * 2**-(M-k+1)``."""
    k = np.arange(1, M + 1)
    a = 2.0 ** M / (2.0 ** M - 1.0)
    return a * 0.5 ** (M - k + 1)


def generate_sampling_design(kind: str, N: int, M: int, seed=None, p_miss: float = 0.12, p: int = 1,
                             rng: np.random.Generator | None = None):
    """Per-subject, per-indicator time grids.

    Parameters
    ----------
    kind : {'regular', 'irregular', 'mcar'}
    N, M : int
        Subjects and nominal points per curve.
    seed : int, optional
        Used when ``rng`` is not given.
    p_miss : float
        Deletion probability for ``'mcar'``.
    p : int
        Number of indicators (one grid each).

    Returns
    -------
    list of list of ndarray
        ``grids[i][j]`` sorted times in [0, 1].
    """
    if M < 1:
        raise DataError("M must be >= 1")
    if N < 1:
        raise DataError("N must be >= 1")
    if kind.startswith("mcar") and not (0.0 <= p_miss < 1.0):
        raise DataError(f"invalid p_miss {p_miss}")
    rng = np.random.default_rng(seed) if rng is None else rng
    regular = np.arange(1, M + 1) / M
    grids = []
    for _ in range(N):
        row = []
        for _ in range(p):
            if kind == "regular":
                row.append(regular.copy())
            elif kind == "irregular":
                probs = irregular_count_probabilities(M)
                n = int(rng.choice(np.arange(1, M + 1), p=probs))
                t = np.sort(rng.uniform(0.0, 1.0, size=n))
                row.append(t)
            elif kind.startswith("mcar"):
                keep = rng.uniform(size=M) >= p_miss
                row.append(regular[keep])
            else:
                raise DataError(f"unknown design kind {kind!r}")
        grids.append(row)
    return grids


def smooth_to_coefficients(basis, times, values, weight: float = 1e-6) -> np.ndarray:
    """Penalized least-squares basis coefficients of one sampled curve.

    The roughness weight is ``weight`` times ``tr(E E^T) / tr(R2)`` so it is
    invariant to the basis scale.
    """
    from .basis import penalty_matrix

    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    E = basis.evaluate(t)
    A = E @ E.T
    R2 = penalty_matrix(basis, "concurrent").matrix
    scale = np.trace(A) / max(np.trace(R2), 1e-300)
    A = A + weight * scale * R2 + 1e-12 * np.trace(A) / basis.J * np.eye(basis.J)
    return np.linalg.solve(A, E @ v)
