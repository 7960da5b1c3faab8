import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import simpson
from scipy.stats import multivariate_normal, norm

from lossep.gauss import (
    DimensionMismatch,
    GaussianMeanParams,
    GaussianMoment,
    GaussianNatural,
    ImproperDensity,
    NonPosteriorizableMoments,
    convert,
    factor_combine,
    gaussian_product,
    moment_match,
    natural_grad,
    natural_increment,
    tilted_moments,
)


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T + d * np.eye(d))


@st.composite
def moment_forms(draw, max_dim=4):
    d = draw(st.integers(1, max_dim))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    return GaussianMoment(rng.normal(0, 3, d), random_spd(rng, d, draw(st.floats(0.05, 20.0))))


def test_scalar_conversions():
    n = GaussianMoment.scalar(0.0, 1.0).to_natural()
    assert n.theta1[0] == pytest.approx(0.0)
    assert n.theta2[0, 0] == pytest.approx(-0.5)
    n = GaussianMoment.scalar(2.0, 4.0).to_natural()
    assert n.theta1[0] == pytest.approx(0.5, abs=1e-15)
    assert n.theta2[0, 0] == pytest.approx(-0.125, abs=1e-15)


def test_three_dim_round_trip():
    rng = np.random.default_rng(7)
    g = GaussianMoment(rng.normal(size=3), random_spd(rng, 3))
    back = g.to_natural().to_mean_params().to_moment()
    assert np.max(np.abs(back.mean - g.mean)) < 1e-12
    assert np.max(np.abs(back.cov - g.cov)) < 1e-12


@given(moment_forms())
def test_round_trip_every_pair(g):
    for a in (GaussianNatural, GaussianMeanParams):
        back = convert(convert(g, a), GaussianMoment)
        scale = max(1.0, np.max(np.abs(g.cov)), np.max(np.abs(g.mean)))
        assert np.max(np.abs(back.mean - g.mean)) / scale < 1e-9
        assert np.max(np.abs(back.cov - g.cov)) / scale < 1e-9


def test_convert_rejects_unknown_target():
    with pytest.raises(TypeError):
        convert(GaussianMoment.scalar(0, 1), dict)


def test_improper_natural_to_moment():
    bad = GaussianNatural.scalar(1.0, 0.25)
    assert not bad.is_proper
    with pytest.raises(ImproperDensity):
        bad.to_moment()


def test_moment_form_must_be_pd():
    with pytest.raises(ImproperDensity):
        GaussianMoment(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_mean_params_validity():
    with pytest.raises(NonPosteriorizableMoments):
        GaussianMeanParams(np.array([2.0]), np.array([[3.0]])).to_moment()


def test_factor_combine_examples():
    a = GaussianNatural.scalar(1.0, -0.5)
    out = factor_combine(a, GaussianNatural.scalar(0.0, 0.0), +1)
    assert out.theta1[0] == 1.0 and out.theta2[0, 0] == -0.5
    out = factor_combine(a, a, -1)
    assert out.theta1[0] == 0.0 and out.theta2[0, 0] == 0.0
    out = a + GaussianNatural.scalar(0.0, 0.25)
    assert out.theta2[0, 0] == pytest.approx(-0.25)
    assert out.is_proper
    assert np.all(np.linalg.eigvalsh(-2 * out.theta2) > 0)


def test_factor_combine_errors():
    with pytest.raises(DimensionMismatch):
        factor_combine(GaussianNatural.zeros(1), GaussianNatural.zeros(2), 1)
    with pytest.raises(ValueError):
        factor_combine(GaussianNatural.zeros(1), GaussianNatural.zeros(1), 2)


@given(moment_forms(3), st.integers(0, 2**31 - 1))
def test_factor_combine_is_invertible(g, seed):
    rng = np.random.default_rng(seed)
    d = g.dim
    s = GaussianNatural(rng.normal(size=d), 0.5 * (lambda A: A + A.T)(rng.normal(size=(d, d))))
    n = g.to_natural()
    back = (n + s) - s
    assert np.allclose(back.theta1, n.theta1, atol=1e-12)
    assert np.allclose(back.theta2, n.theta2, atol=1e-12)


def test_gaussian_product_symmetric_cases():
    le, post = gaussian_product(GaussianMoment.scalar(0, 1), GaussianMoment.scalar(0, 1))
    assert post.m == pytest.approx(0.0) and post.v == pytest.approx(0.5)
    assert le == pytest.approx(norm.logpdf(0, 0, np.sqrt(2)))
    _, post = gaussian_product(GaussianMoment.scalar(1, 1), GaussianMoment.scalar(3, 1))
    assert post.m == pytest.approx(2.0) and post.v == pytest.approx(0.5)


def test_gaussian_product_matches_grid():
    rng = np.random.default_rng(11)
    for _ in range(5):
        a = GaussianMoment.scalar(rng.normal(0, 2), rng.uniform(0.3, 4))
        b = GaussianMoment.scalar(rng.normal(0, 2), rng.uniform(0.3, 4))
        le, post = gaussian_product(a, b)
        x = np.linspace(-30, 30, 200001)
        lhs = norm.pdf(x, a.m, np.sqrt(a.v)) * norm.pdf(x, b.m, np.sqrt(b.v))
        rhs = np.exp(le) * norm.pdf(x, post.m, np.sqrt(post.v))
        assert np.max(np.abs(lhs - rhs)) < 1e-10
        assert simpson(lhs, x=x) == pytest.approx(np.exp(le), abs=1e-10)


@given(moment_forms(3), st.integers(0, 2**31 - 1))
def test_gaussian_product_pointwise(a, seed):
    rng = np.random.default_rng(seed)
    b = GaussianMoment(rng.normal(0, 3, a.dim), random_spd(rng, a.dim))
    le, post = gaussian_product(a, b)
    x = rng.normal(0, 3, (5, a.dim))
    lhs = a.logpdf(x) + b.logpdf(x)
    rhs = le + post.logpdf(x)
    assert np.allclose(lhs, rhs, atol=1e-8)
    assert le == pytest.approx(multivariate_normal(b.mean, a.cov + b.cov).logpdf(a.mean), abs=1e-8)


def test_gaussian_product_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        gaussian_product(GaussianMoment.scalar(0, 1), GaussianMoment(np.zeros(2), np.eye(2)))


def test_moment_match_scalar_forms():
    # a Gaussian "likelihood" N(y; f, s) gives closed-form tilted moments
    cav = GaussianMoment.scalar(0.5, 2.0)
    y, s = 1.7, 0.8
    g = (y - cav.m) / (cav.v + s)
    G = 0.5 * ((y - cav.m) ** 2 / (cav.v + s) ** 2 - 1 / (cav.v + s))
    eta = moment_match(cav.to_natural(), natural_grad(cav, [g], [[G]]))
    m = eta.to_moment()
    _, post = gaussian_product(cav, GaussianMoment.scalar(y, s))
    assert m.m == pytest.approx(post.m, abs=1e-12)
    assert m.v == pytest.approx(post.v, abs=1e-12)
    assert m.m == pytest.approx(cav.m + cav.v * g)


def test_moment_match_with_zero_gradient_is_identity():
    cav = GaussianMoment.scalar(-1.0, 3.0)
    eta = moment_match(cav.to_natural(), (np.zeros(1), np.zeros((1, 1))))
    assert eta.to_moment().m == pytest.approx(-1.0)
    assert eta.to_moment().v == pytest.approx(3.0)


def test_moment_match_nonposteriorizable():
    cav = GaussianMoment.scalar(0.0, 1.0)
    with pytest.raises(NonPosteriorizableMoments):
        moment_match(cav.to_natural(), (np.zeros(1), np.array([[-2.0]])))


@given(moment_forms(3), st.integers(0, 2**31 - 1))
def test_increment_routes_agree(cav, seed):
    # a Gaussian site: the increment must equal the site's natural parameters
    rng = np.random.default_rng(seed)
    site = GaussianMoment(rng.normal(0, 2, cav.dim), random_spd(rng, cav.dim))
    S = cav.cov + site.cov
    Si = np.linalg.inv(S)
    d = site.mean - cav.mean
    g = Si @ d
    G = 0.5 * (np.outer(g, g) - Si)
    inc = natural_increment(cav, g, G)
    want = site.to_natural()
    assert np.allclose(inc.theta1, want.theta1, atol=1e-7 * (1 + np.abs(want.theta1).max()))
    assert np.allclose(inc.theta2, want.theta2, atol=1e-7 * (1 + np.abs(want.theta2).max()))
    tm = tilted_moments(cav, g, G)
    _, post = gaussian_product(cav, site)
    assert np.allclose(tm.mean, post.mean, atol=1e-7 * (1 + np.abs(post.mean).max()))
    assert np.allclose(tm.cov, post.cov, atol=1e-7 * (1 + np.abs(post.cov).max()))
