import numpy as np
import pytest

from fsem.basis import make_basis
from fsem.gp import ParamSet
from fsem.modelspec import CovariateEdge, LatentEdge, Loading, ModelSpec, build_design, validate_model


def two_factor_model():
    """Two factors with a historical latent path and every covariate effect."""
    spec = ModelSpec(
        indicators=("z1", "z2", "z3", "z4"),
        factors=("f1", "f2"),
        loadings=(
            Loading("z1", "f1", "concurrent", anchored=True),
            Loading("z2", "f1", "fixed"),
            Loading("z3", "f2", "historical", anchored=True),
            Loading("z4", "f2", "concurrent"),
        ),
        covariates={"a": "scalar", "b": "scalar", "c": "functional"},
        latent_edges=(LatentEdge("f2", "f1", "historical"),),
        covariate_edges=(
            CovariateEdge("f1", "a", "linear"),
            CovariateEdge("f2", "b", "smooth"),
            CovariateEdge("f1", "c", "concurrent"),
        ),
    )
    return validate_model(spec)


def one_factor_model(effect_z2="concurrent", covariate=True):
    covs = {"x": "scalar"} if covariate else {}
    edges = (CovariateEdge("eta", "x", "linear"),) if covariate else ()
    spec = ModelSpec(
        indicators=("z1", "z2"),
        factors=("eta",),
        loadings=(Loading("z1", "eta", "concurrent", anchored=True), Loading("z2", "eta", effect_z2)),
        covariates=covs,
        covariate_edges=edges,
    )
    return validate_model(spec)


def random_params(design, seed=0, scale=0.3):
    """Random but valid parameters for every term of ``design``."""
    rng = np.random.default_rng(seed)
    J = design.J
    beta, loadings, gamma_eta, gamma_x = {}, {}, {}, {}
    eps, zeta, sigma2 = {}, {}, {}
    for eq in design.equations:
        for t in eq.terms:
            if t.key[0] == "loading" and not t.free:
                value = design.anchor_coefficient(t.effect)
            elif t.key[0] == "loading":
                value = (1.0 if t.width == 1 else design.anchor_coefficient(t.effect)) + scale * rng.normal(size=t.width)
            else:
                value = scale * rng.normal(size=t.width)
            {"beta": beta, "loading": loadings, "gamma_eta": gamma_eta, "gamma_x": gamma_x}[t.key[0]][
                t.key[1] if t.key[0] == "beta" else t.key[1:]] = value
        A = rng.normal(size=(J, J)) / np.sqrt(J)
        S = 0.3 * A @ A.T + 0.05 * np.eye(J)
        if eq.kind == "measurement":
            eps[eq.name] = S
            sigma2[eq.name] = float(rng.uniform(0.1, 0.5))
        else:
            zeta[eq.name] = S + 0.5 * np.eye(J)
    return ParamSet(beta, loadings, gamma_eta, gamma_x, eps, sigma2, zeta)


@pytest.fixture
def basis6():
    return make_basis("bspline", 6)


@pytest.fixture
def toy_design(basis6):
    model = one_factor_model()
    return build_design(model, basis6)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
