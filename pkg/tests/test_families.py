"""Distribution layer: closed-form densities, derivatives, quantiles, mixtures.

Log-densities and moments are cross-checked against scipy.stats; the
theta-derivatives against central finite differences; quantiles against
the cdf (generalized inverse for the discrete families).
"""

import numpy as np
import pytest
from scipy import integrate, stats

from sddr.errors import ConfigError, DataError
from sddr.families import (
    CLAMPED_EXP,
    FittedDistribution,
    MixtureDistribution,
    ResponseFn,
    custom_family,
    make_family,
)


def dist_for(name, theta):
    fam = make_family(name)
    return FittedDistribution(fam, np.asarray(theta, float))


def fd_dlogprob(impl, theta, y, eps=1e-6):
    out = np.zeros_like(theta)
    for k in range(theta.shape[1]):
        hi, lo = theta.copy(), theta.copy()
        hi[:, k] += eps
        lo[:, k] -= eps
        out[:, k] = (impl.log_prob(hi, y) - impl.log_prob(lo, y)) / (2 * eps)
    return out


CASES = {
    # name -> (theta rows, in-support y, scipy frozen dist per row)
    "normal": (
        np.array([[0.0, 1.0], [1.5, 0.4], [-2.0, 3.0]]),
        np.array([0.3, 1.2, -1.0]),
        lambda t: stats.norm(t[0], t[1]),
    ),
    "bernoulli": (
        np.array([[0.0], [1.3], [-2.2]]),
        np.array([1.0, 0.0, 1.0]),
        lambda t: stats.bernoulli(1.0 / (1.0 + np.exp(-t[0]))),
    ),
    "poisson": (
        np.array([[0.5], [3.0], [11.0]]),
        np.array([0.0, 4.0, 9.0]),
        lambda t: stats.poisson(t[0]),
    ),
    "gamma": (
        np.array([[1.0, 1.0], [3.0, 0.5], [0.7, 2.0]]),
        np.array([0.8, 5.0, 0.2]),
        lambda t: stats.gamma(t[0], scale=1.0 / t[1]),
    ),
    "beta": (
        np.array([[2.0, 2.0], [0.5, 0.5], [5.0, 1.5]]),
        np.array([0.5, 0.1, 0.9]),
        lambda t: stats.beta(t[0], t[1]),
    ),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_log_prob_matches_scipy(name):
    theta, y, frozen = CASES[name]
    d = dist_for(name, theta)
    want = np.array(
        [
            frozen(t).logpmf(v) if d.family.impl.discrete else frozen(t).logpdf(v)
            for t, v in zip(theta, y)
        ]
    )
    assert np.allclose(d.log_prob(y), want, atol=1e-10)


@pytest.mark.parametrize("name", sorted(CASES))
def test_moments_match_scipy(name):
    theta, _, frozen = CASES[name]
    d = dist_for(name, theta)
    want_mean = np.array([frozen(t).mean() for t in theta])
    want_sd = np.array([frozen(t).std() for t in theta])
    assert np.allclose(d.mean(), want_mean, atol=1e-10)
    assert np.allclose(d.stddev(), want_sd, atol=1e-10)


@pytest.mark.parametrize("name", ["normal", "gamma", "beta"])
def test_dlogprob_matches_finite_differences(name):
    theta, y, _ = CASES[name]
    impl = make_family(name).impl
    got = impl.dlogprob(theta, y)
    want = fd_dlogprob(impl, theta, y)
    assert np.max(np.abs(got - want)) <= 1e-5 * max(1.0, np.max(np.abs(want)))


def test_dlogprob_bernoulli_poisson():
    # discrete in y but smooth in theta: FD still applies
    for name in ("bernoulli", "poisson"):
        theta, y, _ = CASES[name]
        impl = make_family(name).impl
        got = impl.dlogprob(theta, y)
        want = fd_dlogprob(impl, theta, y)
        assert np.max(np.abs(got - want)) <= 1e-5 * max(1.0, np.max(np.abs(want)))


@pytest.mark.parametrize("name", ["normal", "gamma", "beta"])
def test_continuous_quantile_roundtrip(name):
    theta, _, _ = CASES[name]
    d = dist_for(name, theta)
    for p in (0.05, 0.3, 0.5, 0.9, 0.99):
        q = d.quantile(p)
        assert np.max(np.abs(d.cdf(q) - p)) <= 1e-7


@pytest.mark.parametrize("name", ["poisson", "bernoulli"])
def test_discrete_quantile_is_generalized_inverse(name):
    theta, _, _ = CASES[name]
    d = dist_for(name, theta)
    for p in (0.05, 0.3, 0.5, 0.9, 0.99):
        q = d.quantile(p)
        assert np.all(d.cdf(q) >= p - 1e-12)
        assert np.all(d.cdf(q - 1.0) < p)


@pytest.mark.parametrize("name", ["normal", "gamma", "beta"])
def test_continuous_density_normalizes(name):
    theta, _, _ = CASES[name]
    d = dist_for(name, theta)
    for i, row in enumerate(theta):
        one = FittedDistribution(d.family, row[None, :])
        lo = float(one.quantile(1e-12)[0]) if name != "beta" else 0.0
        hi = float(one.quantile(1.0 - 1e-12)[0]) if name != "beta" else 1.0
        mass, _ = integrate.quad(
            lambda v: float(np.exp(one.log_prob(np.array([v]))[0])), lo, hi, limit=200
        )
        assert abs(mass - 1.0) <= 1e-6


def test_discrete_mass_normalizes():
    theta = CASES["poisson"][0]
    d = dist_for("poisson", theta)
    ks = np.arange(0, 200, dtype=float)
    for i, row in enumerate(theta):
        one = FittedDistribution(d.family, row[None, :])
        mass = sum(float(np.exp(one.log_prob(np.array([k]))[0])) for k in ks)
        assert abs(mass - 1.0) <= 1e-6
    b = dist_for("bernoulli", CASES["bernoulli"][0])
    total = np.exp(b.log_prob(np.zeros(3))) + np.exp(b.log_prob(np.ones(3)))
    assert np.allclose(total, 1.0, atol=1e-12)


@pytest.mark.parametrize("name", sorted(CASES))
def test_sampling_moments(name):
    theta, _, _ = CASES[name]
    d = dist_for(name, theta)
    n = 200_000
    draws = d.sample(n, seed=7)
    assert draws.shape == (n, theta.shape[0])
    se = d.stddev() / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - d.mean()) <= 3.0 * se + 1e-12)


def test_sampling_deterministic():
    d = dist_for("normal", CASES["normal"][0])
    assert np.array_equal(d.sample(50, seed=3), d.sample(50, seed=3))
    assert not np.array_equal(d.sample(50, seed=3), d.sample(50, seed=4))


SUPPORT_VIOLATIONS = {
    "normal": np.array([0.0, np.nan, 1.0]),
    "bernoulli": np.array([0.0, 0.5, 1.0]),
    "poisson": np.array([1.0, -2.0, 3.0]),
    "gamma": np.array([1.0, 0.0, 2.0]),
    "beta": np.array([0.5, 1.0, 0.25]),
}


@pytest.mark.parametrize("name", sorted(SUPPORT_VIOLATIONS))
def test_support_violation_names_the_row(name):
    theta, _, _ = CASES[name]
    d = dist_for(name, theta)
    with pytest.raises(DataError, match="row 1"):
        d.log_prob(SUPPORT_VIOLATIONS[name])


def test_response_functions():
    fam = make_family("normal")
    eta = np.array([[0.7, -1.2]])
    theta = fam.apply_response(eta)
    assert theta[0, 0] == 0.7
    assert np.isclose(theta[0, 1], np.exp(-1.2) + 1e-12)
    # clamp keeps the positive parameter finite for huge predictors
    big = fam.apply_response(np.array([[0.0, 500.0]]))
    assert np.isfinite(big[0, 1])
    assert big[0, 1] == np.exp(30.0) + 1e-12
    assert fam.response_deriv(np.array([[0.0, 500.0]]))[0, 1] == 0.0
    floor = fam.apply_response(np.array([[0.0, -800.0]]))
    assert floor[0, 1] >= 1e-12


def test_apply_response_checks_width():
    fam = make_family("normal")
    with pytest.raises(ConfigError):
        fam.apply_response(np.zeros((4, 3)))


def test_make_family_unknown():
    with pytest.raises(ConfigError, match="unknown family"):
        make_family("cauchy")


def test_custom_family_replaces_selected_responses():
    soft = ResponseFn("softplus", lambda e: np.logaddexp(0.0, e), lambda e: 1 / (1 + np.exp(-e)))
    fam = custom_family("normal", [None, soft])
    assert fam.response_fns[0].name == "identity"
    assert fam.response_fns[1].name == "softplus"
    eta = np.array([[1.0, 0.3]])
    assert np.isclose(fam.apply_response(eta)[0, 1], np.logaddexp(0.0, 0.3))


def test_custom_family_accepts_bare_pairs():
    fam = custom_family("poisson", [(lambda e: e**2 + 1.0, lambda e: 2.0 * e)])
    eta = np.array([[2.0]])
    assert fam.apply_response(eta)[0, 0] == 5.0
    assert fam.response_deriv(eta)[0, 0] == 4.0


def test_custom_family_length_checked():
    with pytest.raises(ConfigError, match="2 response function"):
        custom_family("gamma", [None])


# -- mixtures ----------------------------------------------------------------------


def make_mixture(seed=0, n=6, m=3):
    rng = np.random.default_rng(seed)
    comps = tuple(
        dist_for("normal", np.column_stack([rng.normal(size=n), rng.uniform(0.5, 2.0, n)]))
        for _ in range(m)
    )
    w = rng.uniform(0.2, 1.0, m)
    return MixtureDistribution(comps, w / w.sum())


def test_mixture_log_prob_is_log_weighted_sum():
    mix = make_mixture()
    y = np.linspace(-2, 2, 6)
    direct = np.log(
        sum(w * np.exp(c.log_prob(y)) for w, c in zip(mix.weights, mix.components))
    )
    assert np.max(np.abs(mix.log_prob(y) - direct)) <= 1e-12


def test_mixture_moments_against_sampling():
    mix = make_mixture(seed=1)
    draws = mix.sample(400_000, seed=5)
    se = mix.stddev() / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mix.mean()) <= 4.0 * se)
    assert np.all(np.abs(draws.std(axis=0) - mix.stddev()) <= 0.01)


def test_mixture_quantile_inverts_cdf():
    mix = make_mixture(seed=2)
    for p in (0.1, 0.5, 0.9):
        q = mix.quantile(p)
        assert np.max(np.abs(mix.cdf(q) - p)) <= 1e-7


def test_mixture_weight_validation():
    d = dist_for("normal", CASES["normal"][0])
    with pytest.raises(ConfigError):
        MixtureDistribution((d, d), np.array([0.7, 0.7]))
    with pytest.raises(ConfigError):
        MixtureDistribution((d, d), np.array([0.5]))


def test_quantile_level_bounds():
    d = dist_for("normal", CASES["normal"][0])
    with pytest.raises(ConfigError):
        d.quantile(0.0)
    with pytest.raises(ConfigError):
        d.quantile(1.5)


def test_log_prob_length_mismatch():
    d = dist_for("normal", CASES["normal"][0])
    with pytest.raises(DataError):
        d.log_prob(np.zeros(5))
