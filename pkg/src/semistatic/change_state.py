"""Per-object Gaussian-Beta change state and its moment-matched Bayesian update.

Each tracked object carries a factored belief ``N(l | mu, sigma2) * Beta(v | alpha, beta)``
over its geometric change ``l`` and stationarity score ``v``. A measurement
``z = (delta, s)`` combines a TSDF change measure with the binary stationarity class
of the observed semantic label. The exact posterior is a two-component mixture of
Gaussian-Beta densities; :func:`bayesian_update` projects it back onto a single
Gaussian-Beta by matching first and second moments in ``l`` and ``v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DegeneratePosterior(ValueError):
    """Moment matching produced non-positive Beta parameters."""


class MeasurementImpossible(ValueError):
    """Both mixture branches assign zero probability to the measurement."""


@dataclass(frozen=True)
class GaussianBetaState:
    mu: float
    sigma2: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.alpha > 0 and self.beta > 0):
            raise ValueError(f"invalid Gaussian-Beta state {self}")
        if not all(math.isfinite(x) for x in (self.mu, self.sigma2, self.alpha, self.beta)):
            raise ValueError(f"non-finite Gaussian-Beta state {self}")

    @property
    def mean_v(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @classmethod
    def initial(cls, v_class: float, sigma2: float, strength: float = 2.0) -> "GaussianBetaState":
        """Weak prior with ``E[l] = 0`` and ``E[v] = v_class``; ``alpha + beta = strength``."""
        if not 0.0 < v_class < 1.0:
            raise ValueError("v_class must lie in (0, 1)")
        return cls(0.0, sigma2, v_class * strength, (1.0 - v_class) * strength)


@dataclass(frozen=True)
class MeasurementFeature:
    delta: float
    s: int


@dataclass(frozen=True)
class LikelihoodConfig:
    """Measurement model and decision thresholds, in the units of the change measure.

    ``k_change`` weights static-class semantic evidence when a large geometric
    change is measured; without it the Beta mean of a static object under
    sustained outliers converges to ``k / (k + 1)`` and never reaches ``theta_stat``.
    """

    tau: float = 2.0
    delta_max: float = 20.0
    k_static: float = 1.0
    k_dynamic: float = 3.0
    k_change: float = 0.1
    sigma_meas: float | None = None
    v_max: float = 0.97
    theta_stat: float = 0.3
    initial_sigma2: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.delta_max < 10.0 * self.tau:
            raise ValueError("delta_max must be at least 10 * tau")
        if min(self.k_static, self.k_dynamic, self.k_change) <= 0:
            raise ValueError("adaptive factors must be positive")
        if not 0.0 < self.theta_stat < self.v_max < 1.0:
            raise ValueError("require 0 < theta_stat < v_max < 1")
        if self.sigma_meas is not None and self.sigma_meas <= 0:
            raise ValueError("sigma_meas must be positive")
        if self.initial_sigma2 <= 0:
            raise ValueError("initial_sigma2 must be positive")

    @property
    def verification_std(self) -> float:
        return self.tau if self.sigma_meas is None else self.sigma_meas


def _log_normal(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var - 0.5 * np.log(var) - _LOG_SQRT_2PI


def mixture_likelihood(delta, l, v, cfg: LikelihoodConfig):
    """Gaussian-uniform mixture ``v N(delta | l, tau^2) + (1 - v) U(delta | -dmax, dmax)``.

    Broadcasts over array arguments.
    """
    delta = np.asarray(delta, dtype=float)
    gauss = np.exp(_log_normal(delta, l, cfg.tau**2))
    unif = np.where(np.abs(delta) <= cfg.delta_max, 1.0 / (2.0 * cfg.delta_max), 0.0)
    out = v * gauss + (1.0 - v) * unif
    return out if np.ndim(out) else float(out)


def adaptive_factor(s: int, delta: float, cfg: LikelihoodConfig) -> float:
    if abs(delta) > 2.0 * cfg.tau:
        return cfg.k_dynamic if s == 0 else cfg.k_change
    return cfg.k_static


def true_posterior_density(l, v, z: MeasurementFeature, prior: GaussianBetaState,
                           cfg: LikelihoodConfig, k: float | None = None):
    """Unnormalized exact posterior over ``(l, v)``; broadcasts over ``l`` and ``v``."""
    if k is None:
        k = adaptive_factor(z.s, z.delta, cfg)
    l = np.asarray(l, dtype=float)
    v = np.asarray(v, dtype=float)
    geo = mixture_likelihood(z.delta, l, v, cfg)
    log_sem = k * (z.s * np.log(v) + (1 - z.s) * np.log1p(-v))
    log_prior = (_log_normal(l, prior.mu, prior.sigma2)
                 + (prior.alpha - 1.0) * np.log(v) + (prior.beta - 1.0) * np.log1p(-v)
                 - betaln(prior.alpha, prior.beta))
    return geo * np.exp(log_sem + log_prior)


def _branch_params(prior: GaussianBetaState, s: int, k: float):
    a1 = prior.alpha + k * s + 1.0
    b1 = prior.beta + k * (1 - s)
    a2 = prior.alpha + k * s
    b2 = prior.beta + k * (1 - s) + 1.0
    return (a1, b1), (a2, b2)


def _log_branch_masses(prior, z, cfg, k):
    (a1, b1), (a2, b2) = _branch_params(prior, z.s, k)
    log_b0 = betaln(prior.alpha, prior.beta)
    with np.errstate(over="ignore"):
        log_gauss = _log_normal(np.float64(z.delta), prior.mu, prior.sigma2 + cfg.tau**2)
    log_c1 = log_gauss + betaln(a1, b1) - log_b0
    if abs(z.delta) <= cfg.delta_max:
        log_c2 = -math.log(2.0 * cfg.delta_max) + betaln(a2, b2) - log_b0
    else:
        log_c2 = -math.inf
    return float(log_c1), float(log_c2)


def mixture_weights(prior: GaussianBetaState, z: MeasurementFeature, cfg: LikelihoodConfig,
                    k: float | None = None) -> tuple[float, float]:
    """Posterior probabilities that ``z`` is an inlier (C1) or outlier (C2)."""
    if k is None:
        k = adaptive_factor(z.s, z.delta, cfg)
    log_c1, log_c2 = _log_branch_masses(prior, z, cfg, k)
    top = max(log_c1, log_c2)
    if not math.isfinite(top):
        raise MeasurementImpossible("measurement impossible")
    w1 = math.exp(log_c1 - top)
    w2 = math.exp(log_c2 - top)
    total = w1 + w2
    return w1 / total, w2 / total


def _beta_moments(a, b):
    n = a + b
    return a / n, a * (a + 1.0) / (n * (n + 1.0))


def match_moments(c1: float, c2: float, prior: GaussianBetaState, z: MeasurementFeature,
                  cfg: LikelihoodConfig, k: float) -> GaussianBetaState:
    """Single Gaussian-Beta with the moments of the weighted two-branch mixture."""
    tau2 = cfg.tau**2
    gamma2 = 1.0 / (1.0 / prior.sigma2 + 1.0 / tau2)
    m = gamma2 * (prior.mu / prior.sigma2 + z.delta / tau2)

    mean_l = c1 * m + c2 * prior.mu
    # central form avoids cancellation when |mean| >> spread
    var_l = c1 * (gamma2 + (m - mean_l) ** 2) + c2 * (prior.sigma2 + (prior.mu - mean_l) ** 2)

    (a1, b1), (a2, b2) = _branch_params(prior, z.s, k)
    e1, f1 = _beta_moments(a1, b1)
    e2, f2 = _beta_moments(a2, b2)
    mean_v = c1 * e1 + c2 * e2
    second_v = c1 * f1 + c2 * f2
    var_v = c1 * (f1 - e1 * e1 + (e1 - mean_v) ** 2) + c2 * (f2 - e2 * e2 + (e2 - mean_v) ** 2)
    if not var_v > 0:
        raise DegeneratePosterior("degenerate posterior")
    total = (mean_v - second_v) / var_v
    alpha = mean_v * total
    beta = (1.0 - mean_v) * total
    if not (alpha > 0 and beta > 0 and var_l > 0):
        raise DegeneratePosterior("degenerate posterior")
    return GaussianBetaState(float(mean_l), float(var_l), float(alpha), float(beta))


def bayesian_update(prior: GaussianBetaState, z: MeasurementFeature, cfg: LikelihoodConfig,
                    k: float | None = None) -> GaussianBetaState:
    if k is None:
        k = adaptive_factor(z.s, z.delta, cfg)
    if abs(z.delta) > cfg.delta_max:
        raise ValueError(f"|delta| = {abs(z.delta)} exceeds delta_max = {cfg.delta_max}")
    c1, c2 = mixture_weights(prior, z, cfg, k)
    return match_moments(c1, c2, prior, z, cfg, k)


def apply_clamp(prior: GaussianBetaState, candidate: GaussianBetaState,
                cfg: LikelihoodConfig) -> GaussianBetaState:
    """Skip updates that would raise the stationarity mean past ``v_max``."""
    if candidate.mean_v > cfg.v_max and candidate.mean_v > prior.mean_v:
        return prior
    return candidate


def geometric_verification(delta: float, cfg: LikelihoodConfig) -> bool:
    return abs(delta) <= 0.5 * cfg.verification_std


def should_prune(state: GaussianBetaState, cfg: LikelihoodConfig) -> bool:
    return state.mean_v < cfg.theta_stat
