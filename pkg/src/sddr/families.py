"""Response distributions, response functions, and mixtures.

A family maps K predictor columns eta_k through response functions h_k to
the distribution parameters theta_k and provides the log-density together
with its closed-form derivative in theta; the chain rule with h_k' is what
the trainer needs, so no numeric differentiation happens anywhere.

Positivity-constrained parameters use a clamped exponential
exp(min(eta, 30)) + 1e-12, which keeps h_k finite and inside the parameter
space even for |eta| around 1e3.  Quantiles of gamma/beta/poisson are
computed by bisection on the cdf (regularized incomplete gamma/beta
functions); the normal quantile uses the rational inverse-CDF
approximation behind ``scipy.special.ndtri``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import ConfigError, DataError

_LOG_2PI = float(np.log(2.0 * np.pi))
_EXP_CLAMP = 30.0
_EXP_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# response functions


@dataclass(frozen=True)
class ResponseFn:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]


def _clamped_exp(eta: np.ndarray) -> np.ndarray:
    return np.exp(np.minimum(eta, _EXP_CLAMP)) + _EXP_FLOOR


def _clamped_exp_deriv(eta: np.ndarray) -> np.ndarray:
    return np.where(eta <= _EXP_CLAMP, np.exp(np.minimum(eta, _EXP_CLAMP)), 0.0)


IDENTITY = ResponseFn("identity", lambda eta: eta, lambda eta: np.ones_like(eta))
CLAMPED_EXP = ResponseFn("exp", _clamped_exp, _clamped_exp_deriv)


# ---------------------------------------------------------------------------
# family implementations: log_prob and its theta-derivative are closed form


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class _Normal:
    name = "normal"
    param_names = ("loc", "scale")
    responses = (IDENTITY, CLAMPED_EXP)
    discrete = False

    def check_support(self, y):
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise DataError(f"non-finite response at row {bad}")

    def log_prob(self, theta, y):
        loc, scale = theta[:, 0], theta[:, 1]
        z = (y - loc) / scale
        return -0.5 * _LOG_2PI - np.log(scale) - 0.5 * z * z

    def dlogprob(self, theta, y):
        loc, scale = theta[:, 0], theta[:, 1]
        r = y - loc
        dloc = r / scale**2
        dscale = r * r / scale**3 - 1.0 / scale
        return np.column_stack([dloc, dscale])

    def mean(self, theta):
        return theta[:, 0]

    def stddev(self, theta):
        return theta[:, 1]

    def cdf(self, theta, y):
        return special.ndtr((y - theta[:, 0]) / theta[:, 1])

    def quantile(self, theta, p):
        return theta[:, 0] + theta[:, 1] * special.ndtri(p)

    def sample(self, theta, n_draws, rng):
        return rng.normal(theta[:, 0], theta[:, 1], size=(n_draws, theta.shape[0]))


class _Bernoulli:
    name = "bernoulli"
    param_names = ("logits",)
    responses = (IDENTITY,)
    discrete = True

    def check_support(self, y):
        ok = np.isfinite(y) & ((y == 0.0) | (y == 1.0))
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise DataError(f"bernoulli response must be 0/1; row {bad} is {y[bad]!r}")

    def log_prob(self, theta, y):
        logits = theta[:, 0]
        return y * logits - _softplus(logits)

    def dlogprob(self, theta, y):
        return (y - _sigmoid(theta[:, 0]))[:, None]

    def mean(self, theta):
        return _sigmoid(theta[:, 0])

    def stddev(self, theta):
        prob = _sigmoid(theta[:, 0])
        return np.sqrt(prob * (1.0 - prob))

    def cdf(self, theta, y):
        prob = _sigmoid(theta[:, 0])
        y = np.asarray(y, float)
        return np.where(y < 0.0, 0.0, np.where(y < 1.0, 1.0 - prob, 1.0))

    def quantile(self, theta, p):
        prob = _sigmoid(theta[:, 0])
        return (p > 1.0 - prob).astype(np.float64)

    def sample(self, theta, n_draws, rng):
        prob = _sigmoid(theta[:, 0])
        return (rng.random(size=(n_draws, theta.shape[0])) < prob).astype(np.float64)


class _Poisson:
    name = "poisson"
    param_names = ("rate",)
    responses = (CLAMPED_EXP,)
    discrete = True

    def check_support(self, y):
        ok = np.isfinite(y) & (y >= 0.0) & (y == np.floor(y))
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise DataError(
                f"poisson response must be a nonnegative integer; row {bad} is {y[bad]!r}"
            )

    def log_prob(self, theta, y):
        rate = theta[:, 0]
        return y * np.log(rate) - rate - special.gammaln(y + 1.0)

    def dlogprob(self, theta, y):
        rate = theta[:, 0]
        return (y / rate - 1.0)[:, None]

    def mean(self, theta):
        return theta[:, 0]

    def stddev(self, theta):
        return np.sqrt(theta[:, 0])

    def cdf(self, theta, y):
        rate = theta[:, 0]
        y = np.asarray(y, float)
        k = np.floor(y)
        out = special.gammaincc(k + 1.0, rate)
        return np.where(y < 0.0, 0.0, out)

    def quantile(self, theta, p):
        rate = theta[:, 0]
        hi = np.maximum(np.ceil(rate + 20.0 * np.sqrt(rate) + 20.0), 1.0)
        while True:
            need = self.cdf(theta, hi) < p
            if not np.any(need):
                break
            hi = np.where(need, hi * 2.0, hi)
        lo = np.full_like(rate, -1.0)  # cdf(-1) = 0 < p for p > 0
        while np.any(hi - lo > 1.0):
            mid = np.floor((lo + hi) / 2.0)
            c = self.cdf(theta, mid)
            lo = np.where(c < p, mid, lo)
            hi = np.where(c >= p, mid, hi)
        return hi

    def sample(self, theta, n_draws, rng):
        return rng.poisson(theta[:, 0], size=(n_draws, theta.shape[0])).astype(np.float64)


class _Gamma:
    name = "gamma"
    param_names = ("concentration", "rate")
    responses = (CLAMPED_EXP, CLAMPED_EXP)
    discrete = False

    def check_support(self, y):
        ok = np.isfinite(y) & (y > 0.0)
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise DataError(f"gamma response must be positive; row {bad} is {y[bad]!r}")

    def log_prob(self, theta, y):
        conc, rate = theta[:, 0], theta[:, 1]
        return conc * np.log(rate) - special.gammaln(conc) + (conc - 1.0) * np.log(y) - rate * y

    def dlogprob(self, theta, y):
        conc, rate = theta[:, 0], theta[:, 1]
        dconc = np.log(rate) - special.digamma(conc) + np.log(y)
        drate = conc / rate - y
        return np.column_stack([dconc, drate])

    def mean(self, theta):
        return theta[:, 0] / theta[:, 1]

    def stddev(self, theta):
        return np.sqrt(theta[:, 0]) / theta[:, 1]

    def cdf(self, theta, y):
        out = special.gammainc(theta[:, 0], theta[:, 1] * np.maximum(y, 0.0))
        return np.where(np.asarray(y, float) <= 0.0, 0.0, out)

    def quantile(self, theta, p):
        mean, sd = self.mean(theta), self.stddev(theta)
        hi = mean + 20.0 * sd + 1.0
        while True:
            need = self.cdf(theta, hi) < p
            if not np.any(need):
                break
            hi = np.where(need, hi * 2.0, hi)
        lo = np.zeros_like(hi)
        return _bisect_cdf(lambda v: self.cdf(theta, v), p, lo, hi)

    def sample(self, theta, n_draws, rng):
        return rng.gamma(theta[:, 0], 1.0 / theta[:, 1], size=(n_draws, theta.shape[0]))


class _Beta:
    name = "beta"
    param_names = ("alpha", "beta")
    responses = (CLAMPED_EXP, CLAMPED_EXP)
    discrete = False

    def check_support(self, y):
        ok = np.isfinite(y) & (y > 0.0) & (y < 1.0)
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise DataError(f"beta response must lie in (0, 1); row {bad} is {y[bad]!r}")

    def log_prob(self, theta, y):
        a, b = theta[:, 0], theta[:, 1]
        lognorm = special.gammaln(a) + special.gammaln(b) - special.gammaln(a + b)
        return (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y) - lognorm

    def dlogprob(self, theta, y):
        a, b = theta[:, 0], theta[:, 1]
        dab = special.digamma(a + b)
        da = np.log(y) - special.digamma(a) + dab
        db = np.log1p(-y) - special.digamma(b) + dab
        return np.column_stack([da, db])

    def mean(self, theta):
        a, b = theta[:, 0], theta[:, 1]
        return a / (a + b)

    def stddev(self, theta):
        a, b = theta[:, 0], theta[:, 1]
        total = a + b
        return np.sqrt(a * b / (total**2 * (total + 1.0)))

    def cdf(self, theta, y):
        y = np.clip(np.asarray(y, float), 0.0, 1.0)
        return special.betainc(theta[:, 0], theta[:, 1], y)

    def quantile(self, theta, p):
        lo = np.zeros(theta.shape[0])
        hi = np.ones(theta.shape[0])
        return _bisect_cdf(lambda v: self.cdf(theta, v), p, lo, hi)

    def sample(self, theta, n_draws, rng):
        return rng.beta(theta[:, 0], theta[:, 1], size=(n_draws, theta.shape[0]))


def _bisect_cdf(cdf, p, lo, hi, iters: int = 120) -> np.ndarray:
    """Vectorized bisection for continuous quantiles; runs to fp precision."""
    p = np.broadcast_to(np.asarray(p, float), lo.shape)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) <= 1e-13 * max(1.0, np.max(np.abs(hi))):
            break
    return 0.5 * (lo + hi)


_IMPLS = {cls.name: cls() for cls in (_Normal, _Bernoulli, _Poisson, _Gamma, _Beta)}


# ---------------------------------------------------------------------------
# public family objects


@dataclass(frozen=True)
class FamilySpec:
    name: str
    param_names: tuple[str, ...]
    response_fns: tuple[ResponseFn, ...]
    impl: object

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def apply_response(self, eta: np.ndarray) -> np.ndarray:
        eta = np.atleast_2d(np.asarray(eta, float))
        if eta.shape[1] != self.n_params:
            raise ConfigError(
                f"family {self.name!r} expects {self.n_params} predictor column(s), got {eta.shape[1]}"
            )
        return np.column_stack([fn.fn(eta[:, k]) for k, fn in enumerate(self.response_fns)])

    def response_deriv(self, eta: np.ndarray) -> np.ndarray:
        eta = np.atleast_2d(np.asarray(eta, float))
        return np.column_stack([fn.deriv(eta[:, k]) for k, fn in enumerate(self.response_fns)])

    def distribution(self, eta: np.ndarray) -> "FittedDistribution":
        return FittedDistribution(self, self.apply_response(eta))


def make_family(name: str) -> FamilySpec:
    """One of normal, bernoulli, poisson, gamma, beta."""
    if name not in _IMPLS:
        raise ConfigError(f"unknown family {name!r}; known: {sorted(_IMPLS)}")
    impl = _IMPLS[name]
    return FamilySpec(impl.name, impl.param_names, impl.responses, impl)


def custom_family(base: str | FamilySpec, trafo_list) -> FamilySpec:
    """Replace the response functions of a base family.

    ``trafo_list`` holds one ResponseFn (or an (fn, deriv) pair) per
    distribution parameter; entries set to None keep the default.
    """
    fam = make_family(base) if isinstance(base, str) else base
    if len(trafo_list) != fam.n_params:
        raise ConfigError(
            f"family {fam.name!r} needs {fam.n_params} response function(s), got {len(trafo_list)}"
        )
    fns = []
    for k, item in enumerate(trafo_list):
        if item is None:
            fns.append(fam.response_fns[k])
        elif isinstance(item, ResponseFn):
            fns.append(item)
        else:
            fn, deriv = item
            fns.append(ResponseFn(f"custom{k}", fn, deriv))
    return FamilySpec(fam.name, fam.param_names, tuple(fns), fam.impl)


# ---------------------------------------------------------------------------
# fitted distributions


@dataclass(frozen=True)
class FittedDistribution:
    """A family with one parameter row per observation."""

    family: FamilySpec
    params: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.params.shape[0]

    def _check(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, float)
        if y.shape[0] != self.n_obs:
            raise DataError(f"response length {y.shape[0]} != {self.n_obs} parameter rows")
        self.family.impl.check_support(y)
        return y

    def log_prob(self, y) -> np.ndarray:
        return self.family.impl.log_prob(self.params, self._check(y))

    def mean(self) -> np.ndarray:
        return self.family.impl.mean(self.params)

    def stddev(self) -> np.ndarray:
        return self.family.impl.stddev(self.params)

    def cdf(self, y) -> np.ndarray:
        return self.family.impl.cdf(self.params, np.asarray(y, float))

    def quantile(self, p) -> np.ndarray:
        p = float(p)
        if not 0.0 < p < 1.0:
            raise ConfigError(f"quantile level must be in (0, 1), got {p}")
        return self.family.impl.quantile(self.params, p)

    def sample(self, n_draws: int, seed=None) -> np.ndarray:
        """(n_draws, n_obs) array; deterministic given the seed."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self.family.impl.sample(self.params, n_draws, rng)


@dataclass(frozen=True)
class MixtureDistribution:
    """Finite mixture of fitted distributions over the same observations."""

    components: tuple[FittedDistribution, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if len(self.components) != w.shape[0]:
            raise ConfigError("one weight per mixture component required")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigError("mixture weights must be nonnegative and sum to 1")

    def log_prob(self, y) -> np.ndarray:
        lps = np.stack([c.log_prob(y) for c in self.components])
        logw = np.log(np.asarray(self.weights, float))[:, None]
        return special.logsumexp(lps + logw, axis=0)

    def mean(self) -> np.ndarray:
        means = np.stack([c.mean() for c in self.components])
        return np.asarray(self.weights, float) @ means

    def stddev(self) -> np.ndarray:
        w = np.asarray(self.weights, float)
        means = np.stack([c.mean() for c in self.components])
        sds = np.stack([c.stddev() for c in self.components])
        mix_mean = w @ means
        second = w @ (sds**2 + means**2)
        return np.sqrt(np.maximum(second - mix_mean**2, 0.0))

    def cdf(self, y) -> np.ndarray:
        cdfs = np.stack([c.cdf(y) for c in self.components])
        return np.asarray(self.weights, float) @ cdfs

    def quantile(self, p) -> np.ndarray:
        p = float(p)
        qs = np.stack([c.quantile(p) for c in self.components])
        lo, hi = qs.min(axis=0), qs.max(axis=0)
        span = np.maximum(hi - lo, 1.0)
        return _bisect_cdf(lambda v: self.cdf(v), p, lo - 1e-9 * span, hi + 1e-9 * span)

    def sample(self, n_draws: int, seed=None) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n_obs = self.components[0].n_obs
        picks = rng.choice(len(self.components), size=n_draws, p=np.asarray(self.weights, float))
        draws = np.empty((n_draws, n_obs))
        for j, comp in enumerate(self.components):
            rows = picks == j
            if np.any(rows):
                draws[rows] = comp.sample(int(rows.sum()), rng)
        return draws


def mixture_log_prob(mix: MixtureDistribution, y) -> np.ndarray:
    return mix.log_prob(y)
