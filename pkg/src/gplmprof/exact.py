"""Exact tests for provider effects.

For a provider with subjects ``j = 1..n_i`` the outcome total ``O_i`` is, given
the covariates and a hypothesised effect ``gamma``, Gaussian, Poisson-binomial
or Poisson. The mid-p value uses the sub-CDF ``G(o) = F(o) - Pr(O = o) / 2``
and confidence limits for ``gamma`` invert ``G`` in ``gamma``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.special import expit
from scipy.stats import norm, poisson

from .model import OutcomeFamily

FLAGS = ("better", "expected", "worse")


class DegenerateTestError(ValueError):
    """Raised when a test statistic has a zero variance denominator."""


# ---------------------------------------------------------------------------
# Poisson-binomial distribution
# ---------------------------------------------------------------------------


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float).ravel()
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("Poisson-binomial probabilities must lie strictly inside (0, 1)")
    return p


def _pb_pmf(p: np.ndarray) -> np.ndarray:
    # add one Bernoulli at a time; pmf[k] = Pr(sum = k)
    n = p.shape[0]
    pmf = np.zeros(n + 1)
    pmf[0] = 1.0
    for k in range(n):
        pk = p[k]
        pmf[1:k + 2] = pmf[1:k + 2] * (1.0 - pk) + pmf[:k + 1] * pk
        pmf[0] *= 1.0 - pk
    return pmf


def poisson_binomial_pmf(probs) -> np.ndarray:
    """Full pmf ``[Pr(O=0), ..., Pr(O=n)]`` by the O(n^2) convolution recurrence."""
    return _pb_pmf(_check_probs(probs))


def poisson_binomial_cdf(probs, o: int) -> float:
    p = _check_probs(probs)
    if not 0 <= o <= p.shape[0]:
        raise ValueError(f"o={o} outside the support 0..{p.shape[0]}")
    return float(min(1.0, _pb_pmf(p)[: int(o) + 1].sum()))


def poisson_binomial_enumerate(probs) -> np.ndarray:
    """Pmf by summing over all 2^n outcome subsets (reference only, n <= 20)."""
    p = np.asarray(probs, dtype=float)
    n = p.shape[0]
    if n > 20:
        raise ValueError("enumeration limited to n <= 20")
    pmf = np.zeros(n + 1)
    for bits in itertools.product((0, 1), repeat=n):
        b = np.array(bits, dtype=bool)
        pmf[b.sum()] += np.prod(p[b]) * np.prod(1.0 - p[~b])
    return pmf


# ---------------------------------------------------------------------------
# Null model of one provider
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderNullModel:
    """Outcome-total distribution of one provider under a hypothesised effect.

    ``g_values`` are the fitted network outputs for the provider's subjects,
    so the subject means are ``tau * h'(gamma + g_values)``.
    """

    g_values: np.ndarray
    gamma: float
    family: OutcomeFamily
    tau: float = 1.0
    provider_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "g_values", np.asarray(self.g_values, dtype=float).ravel())
        if self.tau <= 0:
            raise ValueError("target tau must be positive")
        if self.family.kind == "gaussian" and self.family.sigma2_hat is None:
            raise ValueError("gaussian null model needs sigma2_hat")

    @property
    def n(self) -> int:
        return self.g_values.shape[0]

    def at(self, gamma: float) -> "ProviderNullModel":
        return replace(self, gamma=float(gamma))

    def with_tau(self, tau: float) -> "ProviderNullModel":
        return replace(self, tau=float(tau))

    def base_means(self) -> np.ndarray:
        """Subject means at ``tau = 1``."""
        return self.family.mean(self.gamma + self.g_values)

    def means(self, strict: bool = True) -> np.ndarray:
        mu = self.tau * self.base_means()
        # at tau = 1 a mean of exactly 1.0 is only expit rounding
        if self.family.kind == "bernoulli" and strict and self.tau != 1.0:
            bad = np.flatnonzero(mu >= 1.0)
            if bad.size:
                raise ValueError(
                    f"target-scaled probability {mu[bad[0]]:.4g} >= 1 for subject {bad[0]}"
                    + ("" if self.provider_index is None else f" of provider {self.provider_index}"))
        return mu

    @property
    def expected(self) -> float:
        """``E_i``: expected total at ``tau = 1``."""
        return float(np.sum(self.base_means()))

    def null_variance(self) -> float:
        """``V_i(tau)``: variance of the outcome total under the target."""
        kind = self.family.kind
        if kind == "gaussian":
            return self.n * float(self.family.sigma2_hat)
        mu = self.means()
        if kind == "bernoulli":
            return float(np.sum(mu * (1.0 - mu)))
        return float(np.sum(mu))

    def pmf_table(self) -> np.ndarray:
        """Pmf over ``0..K`` (discrete families); K covers the full mass in practice."""
        kind = self.family.kind
        if kind == "bernoulli":
            return _pb_pmf(np.clip(self.means(strict=False), 0.0, 1.0))
        if kind == "poisson":
            lam = float(np.sum(self.means()))
            top = int(poisson.isf(1e-15, lam)) + 2 if lam > 0 else 1
            return poisson.pmf(np.arange(top + 1), lam)
        raise ValueError("gaussian outcome totals are continuous")


def conditional_cdf(model: ProviderNullModel, o: float) -> float:
    kind = model.family.kind
    if kind == "gaussian":
        mean = float(np.sum(model.means()))
        return float(norm.cdf(o, loc=mean, scale=math.sqrt(model.null_variance())))
    if kind == "bernoulli":
        mu = np.clip(model.means(), 0.0, 1.0)
        if o < 0:
            return 0.0
        k = min(int(math.floor(o)), model.n)
        return float(min(1.0, _pb_pmf(mu)[: k + 1].sum()))
    lam = float(np.sum(model.means()))
    return float(poisson.cdf(math.floor(o), lam)) if o >= 0 else 0.0


def point_mass(model: ProviderNullModel, o: float) -> float:
    kind = model.family.kind
    if kind == "gaussian" or o != math.floor(o) or o < 0:
        return 0.0
    if kind == "bernoulli":
        if o > model.n:
            return 0.0
        return float(_pb_pmf(np.clip(model.means(), 0.0, 1.0))[int(o)])
    return float(poisson.pmf(int(o), float(np.sum(model.means()))))


def sub_cdf(model: ProviderNullModel, o: float) -> float:
    """``G(o) = F(o) - Pr(O = o) / 2``; equals ``F`` for Gaussian totals."""
    kind = model.family.kind
    if kind == "bernoulli" and 0 <= o <= model.n and o == math.floor(o):
        pmf = _pb_pmf(np.clip(model.means(), 0.0, 1.0))
        k = int(o)
        return float(min(1.0, pmf[:k].sum() + 0.5 * pmf[k]))
    return conditional_cdf(model, o) - 0.5 * point_mass(model, o)


def exact_mid_p(model_at_null: ProviderNullModel, observed: float) -> float:
    g = sub_cdf(model_at_null, observed)
    return float(min(1.0, 2.0 * min(g, 1.0 - g)))


def _bracket(fun, start: float, direction: int, max_span: float):
    """Walk from ``start`` in ``direction`` doubling the step until ``fun`` changes sign."""
    f0 = fun(start)
    step = 1.0
    while step <= max_span:
        x = start + direction * step
        fx = fun(x)
        if np.sign(fx) != np.sign(f0) and fx != 0.0:
            return x, fx
        if fx == 0.0:
            return x, fx
        step *= 2.0
    return None


def _solve_gamma(builder, observed, target, start, tol, max_span):
    """Root of ``G(observed; gamma) = target``; G decreases in gamma."""

    def fun(gamma):
        return sub_cdf(builder(gamma), observed) - target

    f_start = fun(start)
    if f_start == 0.0:
        return start
    # G above target means the root lies at larger gamma
    direction = 1 if f_start > 0 else -1
    found = _bracket(fun, start, direction, max_span)
    if found is None:
        return direction * math.inf
    x, fx = found
    if fx == 0.0:
        return x
    lo, hi = sorted((start, x))
    return optimize.brentq(fun, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)


def exact_confidence_interval(model_builder, observed: float, alpha1: float, alpha2: float,
                              gamma_start: float = 0.0, tol: float = 1e-8,
                              max_span: float | None = None) -> tuple[float, float]:
    """Limits solving ``G(O; lower) = 1 - alpha1`` and ``G(O; upper) = alpha2``.

    ``model_builder`` maps a provider effect to a :class:`ProviderNullModel`.
    An endpoint that does not exist (e.g. ``O = 0`` for binary outcomes) is
    returned as an infinity.
    """
    if not (0.0 <= alpha1 < 1.0 and 0.0 <= alpha2 < 1.0 and 0.0 < alpha1 + alpha2 < 1.0):
        raise ValueError("need alpha1, alpha2 in [0, 1) with 0 < alpha1 + alpha2 < 1")
    if max_span is None:
        max_span = 1e8 if model_builder(gamma_start).family.kind == "gaussian" else 128.0
    lower = _solve_gamma(model_builder, observed, 1.0 - alpha1, gamma_start, tol, max_span)
    upper = _solve_gamma(model_builder, observed, alpha2, gamma_start, tol, max_span)
    if lower > 0 and math.isinf(lower):
        lower = -math.inf
    if upper < 0 and math.isinf(upper):
        upper = math.inf
    return float(lower), float(upper)


# ---------------------------------------------------------------------------
# Asymptotic comparators (binary outcomes)
# ---------------------------------------------------------------------------


def _two_sided(z: float) -> float:
    return float(min(1.0, 2.0 * norm.sf(abs(z))))


def score_statistic(model_at_null: ProviderNullModel, outcomes) -> tuple[float, float]:
    """Standardised sum of residuals at the population norm; returns ``(z, p)``."""
    if model_at_null.family.kind != "bernoulli":
        raise ValueError("score statistic is defined for binary outcomes only")
    p = expit(model_at_null.gamma + model_at_null.g_values)
    var = float(np.sum(p * (1.0 - p)))
    if not var > 0:
        raise DegenerateTestError("all fitted probabilities are 0 or 1")
    z = float(np.sum(np.asarray(outcomes, dtype=float) - p)) / math.sqrt(var)
    return z, _two_sided(z)


def wald_statistic(gamma_hat: float, model_at_own_estimate: ProviderNullModel,
                   norm_value: float) -> tuple[float, float]:
    """``(gamma_hat - norm) * sqrt(information at gamma_hat)``; returns ``(z, p)``."""
    if model_at_own_estimate.family.kind != "bernoulli":
        raise ValueError("Wald statistic is defined for binary outcomes only")
    p = expit(gamma_hat + model_at_own_estimate.g_values)
    info = float(np.sum(p * (1.0 - p)))
    if not info > 0:
        raise DegenerateTestError("all fitted probabilities are 0 or 1")
    z = (gamma_hat - norm_value) * math.sqrt(info)
    return z, _two_sided(z)


# ---------------------------------------------------------------------------
# Decisions
# ---------------------------------------------------------------------------


@dataclass
class TestResult:
    provider_id: str
    n: int
    observed: float
    expected: float
    srr: float
    mid_p: float
    ci: tuple[float, float]
    flag: str
    test_kind: str = "exact"
    score_p: float = float("nan")
    wald_p: float = float("nan")
    flag_score: str = "expected"

    __test__ = False  # not a pytest class


def flag_provider(p_value: float, srr: float, alpha: float) -> str:
    if p_value < alpha and srr > 1.0:
        return "worse"
    if p_value < alpha and srr < 1.0:
        return "better"
    return "expected"


def population_norm(gamma_hat, rule: str | float = "median") -> float:
    """Benchmark provider effect: the median (default), the mean, or a constant."""
    if isinstance(rule, (int, float)):
        return float(rule)
    if rule == "median":
        return float(np.median(gamma_hat))
    if rule == "mean":
        return float(np.mean(gamma_hat))
    raise ValueError("norm must be 'median', 'mean' or a number")
