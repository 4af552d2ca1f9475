import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import gammaln

import oracle
from nestlap.datasets import PC_LIKE, ar1_replicates, simulate_ar1
from nestlap.inner import LatentPosterior, fit_gaussian_approx, log_posterior_theta
from nestlap.latent import LatentComponent, RankDeficientConstraint
from nestlap.likelihoods import Likelihood
from nestlap.model import Effect, FixedEffect, ModelSpec

FIXED_UNIT = {"prec": {"fixed": True, "initial": 0.0}}


def ar1_gaussian(n=50, seed=5):
    rng = np.random.default_rng(seed)
    z = simulate_ar1(rng, n, 0.5, 1.0)
    y = z + rng.normal(size=n) * 0.5
    comp = LatentComponent("x", "ar1", n, hyper={"prec": PC_LIKE, "rho": {"prior": "gaussian", "param": (0, 0.3)}})
    return ModelSpec((Likelihood("gaussian", hyper={"prec": PC_LIKE}),), y[:, None],
                     effects=(Effect(comp, np.arange(n)),))


def poisson_scalar(y):
    """Counts ``y`` all driven by one latent value ``x ~ N(0, 1/tau)``."""
    y = np.asarray(y, dtype=float)
    comp = LatentComponent("x", "iid", 1, hyper={"prec": PC_LIKE})
    return ModelSpec((Likelihood("poisson"),), y[:, None], effects=(Effect(comp, np.zeros(y.size, int)),))


def test_gaussian_one_step_exact_mean():
    spec = ar1_gaussian()
    theta = np.array([0.3, -0.2, 0.8])
    ga = fit_gaussian_approx(spec, theta)
    mu, C = oracle.exact_gaussian_posterior(spec, theta)
    assert ga.converged and ga.iterations <= 1
    np.testing.assert_allclose(ga.x_star, mu, atol=1e-8)
    np.testing.assert_allclose(ga.variances(), np.diag(C), atol=1e-8)


def test_poisson_scalar_mode():
    comp = LatentComponent("x", "iid", 1, hyper=FIXED_UNIT)
    spec = ModelSpec((Likelihood("poisson"),), np.array([[2.0]]), effects=(Effect(comp, np.array([0])),))
    post = LatentPosterior(spec)
    ga = post.fit()
    root = brentq(lambda x: x - (2.0 - math.exp(x)), -5, 5, xtol=1e-14)
    # the predictor is tied to the effect by a link of precision exp(15), an O(1e-7) offset
    assert ga.x_star[post.layout.index_map["x"][0]] == pytest.approx(root, abs=1e-6)
    assert ga.x_star[0] == pytest.approx(root, abs=1e-6)


def test_ar1_replicates_converge():
    spec, truth = ar1_replicates()
    post = LatentPosterior(spec)
    names = post.hyper.names
    nat = {"gaussian.prec": truth["gaussian.prec"], "i.prec": truth["i.prec"], "i.rho": truth["i.rho"]}
    theta = [math.log(nat[k]) if k.endswith("prec") else math.log((1 + nat[k]) / (1 - nat[k])) for k in names]
    ga = post.fit(theta)
    assert ga.converged
    assert ga.iterations <= 15


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=6, max_size=6))
def test_gaussian_evidence_exact_differences(vals):
    spec = ar1_gaussian(n=30)
    post = LatentPosterior(spec)
    t1, t2 = np.array(vals[:3]), np.array(vals[3:])
    got = post.log_posterior(t1) - post.log_posterior(t2)
    ref = oracle.exact_log_posterior(spec, t1) - oracle.exact_log_posterior(spec, t2)
    assert got == pytest.approx(ref, abs=1e-8)


def test_evidence_outside_support():
    spec = ar1_gaussian(n=10)
    assert log_posterior_theta(spec, np.array([math.inf, 0.0, 0.0])) == -math.inf
    assert log_posterior_theta(spec, np.array([math.nan, 0.0, 0.0])) == -math.inf


def test_poisson_evidence_matches_quadrature():
    y = np.array([2.0, 0.0, 3.0, 1.0, 2.0])
    spec = poisson_scalar(y)
    post = LatentPosterior(spec)
    for t in (-1.0, 0.0, 1.5):
        tau = math.exp(t)

        def integrand(x):
            ll = np.sum(y * x - math.exp(x) - gammaln(y + 1))
            return math.exp(ll + 0.5 * math.log(tau / (2 * math.pi)) - 0.5 * tau * x * x)

        ref = math.log(quad(integrand, -10, 10, epsabs=0, epsrel=1e-12, limit=200)[0])
        ref += oracle.log_prior_theta(spec, np.array([t]))
        assert post.log_posterior([t]) == pytest.approx(ref, abs=0.01)


def test_evidence_invariant_to_component_order():
    rng = np.random.default_rng(3)
    n = 25
    y = rng.poisson(2.0, size=n).astype(float)
    a = Effect(LatentComponent("a", "ar1", n), np.arange(n))
    b = Effect(LatentComponent("b", "iid", 5), np.arange(n) % 5)
    fx = (FixedEffect("intercept", prec=1.0),)
    s1 = ModelSpec((Likelihood("poisson"),), y[:, None], effects=(a, b), fixed_effects=fx)
    s2 = ModelSpec((Likelihood("poisson"),), y[:, None], effects=(b, a), fixed_effects=fx)
    p1, p2 = LatentPosterior(s1), LatentPosterior(s2)
    # hyperparameters follow component order
    t1 = np.array([0.2, 0.4, -0.3])
    t2 = np.array([-0.3, 0.2, 0.4])
    assert p1.log_posterior(t1) == pytest.approx(p2.log_posterior(t2), abs=1e-9)


def test_duplicated_constraint_rejected():
    spec = ar1_gaussian(n=10)
    post = LatentPosterior(spec)
    with pytest.raises(RankDeficientConstraint):
        post.fit(np.zeros(3), extra=([12, 12], [0.0, 0.0]))


def test_constrained_rw1_posterior():
    rng = np.random.default_rng(8)
    n = 20
    y = np.sin(np.arange(n) / 3) + rng.normal(size=n) * 0.3
    comp = LatentComponent("t", "rw1", n)
    spec = ModelSpec((Likelihood("gaussian"),), y[:, None], effects=(Effect(comp, np.arange(n)),),
                     fixed_effects=(FixedEffect("intercept"),))
    post = LatentPosterior(spec)
    ga = post.fit(np.array([1.0, 2.0]))
    sl = post.layout.slice("t")
    assert abs(ga.x_star[sl].sum()) < 1e-8
    Q = ga.Q_star.to_dense()
    C = np.linalg.inv(Q)
    A = ga.constraints.A
    W = C @ A.T
    Cc = C - W @ np.linalg.solve(A @ W, W.T)
    np.testing.assert_allclose(ga.variances(), np.diag(Cc), rtol=1e-6, atol=1e-10)


def test_warm_start_does_not_change_evidence():
    spec, _ = ar1_replicates(n=40)
    post = LatentPosterior(spec)
    t = np.array([1.0, 0.3, 0.8])
    cold = post.fit(t)
    warm = post.fit(t + 0.05)
    again = post.fit(t, x0=warm.x_star)
    assert again.log_evidence == pytest.approx(cold.log_evidence, abs=1e-9)


def test_eliminated_layer_matches_full_factorization():
    spec, _ = ar1_replicates(n=30)
    post = LatentPosterior(spec)
    t = np.array([1.0, 0.3, 0.8])
    joint = post.joint(t)
    assert joint.reduced is not None
    red = post.fit(t, joint=joint)
    full = post.fit(t, joint=dataclasses.replace(joint, reduced=None))
    np.testing.assert_allclose(red.x_star, full.x_star, atol=1e-7)
    assert red.log_evidence == pytest.approx(full.log_evidence, abs=1e-6)
    np.testing.assert_allclose(red.variances(), full.variances(), rtol=1e-6, atol=1e-9)
    idx = [0, 5, 31, 70]
    np.testing.assert_allclose(red.covariance_columns(idx), full.covariance_columns(idx), rtol=1e-6, atol=1e-9)


def test_eliminated_layer_with_A_matrix():
    from nestlap.datasets import varying_slope

    spec, _ = varying_slope(n=40, variant="A")
    post = LatentPosterior(spec)
    t = np.zeros(post.m)
    joint = post.joint(t)
    red = post.fit(t, joint=joint)
    full = post.fit(t, joint=dataclasses.replace(joint, reduced=None))
    np.testing.assert_allclose(red.x_star, full.x_star, atol=1e-6)
    np.testing.assert_allclose(red.variances(), full.variances(), rtol=1e-5, atol=1e-8)
    assert red.log_evidence == pytest.approx(full.log_evidence, abs=1e-5)


def _rw1_model(n=20):
    rng = np.random.default_rng(8)
    y = np.sin(np.arange(n) / 3) + rng.normal(size=n) * 0.3
    comp = LatentComponent("t", "rw1", n)
    spec = ModelSpec((Likelihood("gaussian"),), y[:, None], effects=(Effect(comp, np.arange(n)),),
                     fixed_effects=(FixedEffect("intercept", prec=0.01),))
    return spec, y


def _rw1_dense_evidence(y, theta, lift):
    """Marginal likelihood of y with the field restricted to sum zero, by dense algebra."""
    from scipy.linalg import null_space

    n = y.size
    D = np.diff(np.eye(n), axis=0)
    Q = math.exp(theta[1]) * D.T @ D
    Q = Q + np.eye(n) * lift * np.mean(np.diag(Q))
    Bz = null_space(np.ones((1, n)))
    Sx = Bz @ np.linalg.inv(Bz.T @ Q @ Bz) @ Bz.T
    Sy = Sx + np.ones((n, n)) / 0.01 + np.eye(n) * (math.exp(-theta[0]) + math.exp(-15))
    return -0.5 * np.linalg.slogdet(Sy)[1] - 0.5 * y @ np.linalg.solve(Sy, y)


def test_constrained_evidence_against_dense():
    from nestlap.latent import INTRINSIC_JITTER

    spec, y = _rw1_model()
    post = LatentPosterior(spec)
    thetas = [np.array(t) for t in ((1.0, 2.0), (2.0, 0.5), (0.0, 3.0))]
    got = [post.log_posterior(t) - oracle.log_prior_theta(spec, t) for t in thetas]
    # exact for the lifted prior that is factorized
    ref = [_rw1_dense_evidence(y, t, INTRINSIC_JITTER) for t in thetas]
    np.testing.assert_allclose(np.diff(got), np.diff(ref), atol=1e-8)
    # the lift moves the intrinsic evidence by O(lift / smallest eigenvalue)
    ref0 = [_rw1_dense_evidence(y, t, 0.0) for t in thetas]
    np.testing.assert_allclose(np.diff(got), np.diff(ref0), atol=2e-3)
