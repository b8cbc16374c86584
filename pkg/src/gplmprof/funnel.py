"""Standardized ratios, funnel-plot control limits and overdispersion adjustment."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .exact import ProviderNullModel, flag_provider, sub_cdf


class DegenerateExpectationError(ValueError):
    """Raised when an expected outcome total is not positive."""


def standardized_ratio(observed: float, expected: float) -> float:
    if not expected > 0:
        raise DegenerateExpectationError(f"expected total must be positive, got {expected}")
    return float(observed) / float(expected)


def null_variance(model: ProviderNullModel, tau: float | None = None) -> float:
    if tau is not None:
        model = model.with_tau(tau)
    return model.null_variance()


def precision(model: ProviderNullModel, tau: float | None = None) -> float:
    """``E_i^2 / V_i(tau)`` with ``E_i`` taken at ``tau = 1``."""
    return model.expected ** 2 / null_variance(model, tau)


def _interpolated_quantile(G: np.ndarray, alpha: float) -> float:
    """``O(alpha) = O~ - lambda`` where ``O~`` is the first support point with ``G >= alpha``.

    ``lambda`` interpolates linearly between ``G`` at the previous support
    point and ``G(O~)``. The result is clamped to ``[0, K]`` for support ``0..K``.
    """
    k = int(np.searchsorted(G, alpha, side="left"))
    if k >= G.shape[0]:
        return float(G.shape[0] - 1)
    g_hi = G[k]
    g_lo = G[k - 1] if k > 0 else 0.0
    lam = (g_hi - alpha) / (g_hi - g_lo) if g_hi > g_lo else 0.0
    return max(0.0, k - lam)


def interpolated_control_limits(model: ProviderNullModel, alpha1: float, alpha2: float,
                                tau: float | None = None) -> tuple[float, float]:
    """Funnel limits ``[O(alpha1)/E, O(1 - alpha2)/E]`` for the ratio ``O/E``.

    Discrete totals use the interpolated sub-CDF quantiles; Gaussian totals
    use exact normal quantiles.
    """
    for a in (alpha1, alpha2):
        if not 0.0 < a < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
    if tau is not None:
        model = model.with_tau(tau)
    expected = model.expected
    if model.family.kind == "gaussian":
        centre = float(np.sum(model.means()))
        sd = math.sqrt(model.null_variance())
        return ((centre + norm.ppf(alpha1) * sd) / expected,
                (centre + norm.ppf(1.0 - alpha2) * sd) / expected)
    pmf = model.pmf_table()
    G = np.minimum(np.cumsum(pmf) - 0.5 * pmf, 1.0)
    lower = _interpolated_quantile(G, alpha1)
    upper = _interpolated_quantile(G, 1.0 - alpha2)
    return lower / expected, upper / expected


def z_scores(models: Sequence[ProviderNullModel], observed) -> np.ndarray:
    """``X_i = Phi^-1(G_i(O_i))`` under each provider's null model."""
    G = np.array([sub_cdf(md, float(o)) for md, o in zip(models, observed)])
    return norm.ppf(np.clip(G, 1e-16, 1.0 - 1e-16))


# ---------------------------------------------------------------------------
# Individualized empirical null
# ---------------------------------------------------------------------------


@dataclass
class OverdispersionFit:
    """Null-component fit ``X_i ~ N(0, chi_i^2)`` with ``chi_i^2 = 1 + sigma2_phi V_i``."""

    kappa0: float
    sigma2_phi: float
    z_scores: np.ndarray
    chi2: np.ndarray
    converged: bool = True
    log_likelihood: float = float("nan")
    window: tuple[float, float] = (float("nan"), float("nan"))

    @property
    def chi(self) -> np.ndarray:
        return np.sqrt(self.chi2)


def _window_loglik(kappa: np.ndarray, sigma2: np.ndarray, x, V, inside, a, b) -> np.ndarray:
    """Log-likelihood on a (kappa, sigma2) grid; returns shape ``(len(kappa), len(sigma2))``."""
    chi = np.sqrt(1.0 + sigma2[:, None] * V[None, :])
    P = norm.cdf(b / chi) - norm.cdf(a / chi)
    dens = norm.logpdf(x[None, :] / chi) - np.log(chi)
    in_term = np.sum(np.where(inside, dens, 0.0), axis=1)
    n_in = inside.sum()
    out_P = P[:, ~inside]
    with np.errstate(divide="ignore"):
        out_term = np.sum(np.log1p(-kappa[:, None, None] * out_P[None, :, :]), axis=2)
    return n_in * np.log(kappa)[:, None] + in_term[None, :] + out_term


def fit_empirical_null(z, null_variances, q: float = 0.25, grid: int = 41,
                       refinements: int = 2) -> OverdispersionFit:
    """Estimate ``(kappa0, sigma2_phi)`` from z-scores by maximum likelihood.

    Scores inside the central ``[q, 1 - q]`` empirical quantile window are
    modelled as null with density ``kappa0 N(0, chi_i^2)``; those outside only
    contribute the probability ``1 - kappa0 P_i(window)``, so the non-null
    component never needs to be specified. The maximum is located on a grid
    over ``kappa0 in [0.5, 1)`` and ``sigma2 in [0, 10 / median V]`` that is
    refined twice around the best point.
    """
    x = np.asarray(z, dtype=float)
    V = np.asarray(null_variances, dtype=float)
    if x.shape != V.shape:
        raise ValueError("z-scores and null variances must have the same length")
    if x.size < 50:
        raise ValueError("the empirical null needs at least 50 providers")
    if np.any(V <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("null variances must be positive and z-scores finite")
    a, b = np.quantile(x, [q, 1.0 - q])
    inside = (x >= a) & (x <= b)
    s_max = 10.0 / float(np.median(V))
    k_lo, k_hi = 0.5, 0.999
    s_lo, s_hi = 0.0, s_max
    best = (np.nan, np.nan, -np.inf)
    for _ in range(refinements + 1):
        kappa = np.linspace(k_lo, k_hi, grid)
        sigma2 = np.linspace(s_lo, s_hi, grid)
        ll = _window_loglik(kappa, sigma2, x, V, inside, a, b)
        ik, js = np.unravel_index(np.argmax(ll), ll.shape)
        best = (kappa[ik], sigma2[js], ll[ik, js])
        dk, ds = kappa[1] - kappa[0], sigma2[1] - sigma2[0]
        k_lo, k_hi = max(0.5, kappa[ik] - 2 * dk), min(0.999, kappa[ik] + 2 * dk)
        s_lo, s_hi = max(0.0, sigma2[js] - 2 * ds), min(s_max, sigma2[js] + 2 * ds)
    kappa0, sigma2_phi, loglik = best
    converged = bool(np.isfinite(loglik)) and sigma2_phi < s_max * (1 - 1e-9)
    if not converged:
        warnings.warn("empirical null fit did not converge; using sigma2_phi = 0", RuntimeWarning)
        sigma2_phi = 0.0
    return OverdispersionFit(float(kappa0), float(sigma2_phi), x, 1.0 + sigma2_phi * V, converged,
                             float(loglik), (float(a), float(b)))


def adjusted_control_limits(model: ProviderNullModel, alpha: float, chi: float,
                            tau: float | None = None) -> tuple[float, float]:
    """Normal limits ``tau -/+ chi z_{1-alpha/2} sqrt(V) / E`` widened by ``chi``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if tau is not None:
        model = model.with_tau(tau)
    half = chi * norm.ppf(1.0 - alpha / 2) * math.sqrt(model.null_variance()) / model.expected
    return model.tau - half, model.tau + half


# ---------------------------------------------------------------------------
# Funnel series
# ---------------------------------------------------------------------------


@dataclass
class FunnelPoint:
    provider_id: str
    srr: float
    precision: float
    expected: float
    observed: float
    limits: list[tuple[float, float, str, float, float]] = field(default_factory=list)
    flag: str = "expected"

    def flag_for(self, tau: float, alpha: float, mode: str = "exact") -> str:
        for t, a, md, lo, hi in self.limits:
            if t == tau and a == alpha and md == mode:
                if self.srr > hi:
                    return "worse"
                if self.srr < lo:
                    return "better"
                return "expected"
        raise KeyError((tau, alpha, mode))


def funnel_points(models: Sequence[ProviderNullModel], observed, provider_ids: Sequence[str],
                  taus: Sequence[float] = (1.0,), alphas: Sequence[float] = (0.05,),
                  overdispersion: OverdispersionFit | None = None) -> list[FunnelPoint]:
    """Ratios, precisions and control limits for every provider.

    Limits are listed per ``(tau, alpha)`` as ``(tau, alpha, mode, lower, upper)``
    with mode ``exact`` (interpolated) and, given a fit, ``adjusted``. The
    point's flag uses the first ``(tau, alpha)`` pair and the adjusted limits
    when available.
    """
    points = []
    for i, (md, o, pid) in enumerate(zip(models, observed, provider_ids)):
        srr = standardized_ratio(o, md.expected)
        pt = FunnelPoint(str(pid), srr, precision(md, taus[0]), md.expected, float(o))
        for tau in taus:
            for alpha in alphas:
                lo, hi = interpolated_control_limits(md, alpha / 2, alpha / 2, tau)
                pt.limits.append((float(tau), float(alpha), "exact", lo, hi))
                if overdispersion is not None:
                    lo, hi = adjusted_control_limits(md, alpha, float(overdispersion.chi[i]), tau)
                    pt.limits.append((float(tau), float(alpha), "adjusted", lo, hi))
        mode = "adjusted" if overdispersion is not None else "exact"
        pt.flag = pt.flag_for(float(taus[0]), float(alphas[0]), mode)
        points.append(pt)
    return points


def flag_rate(points: Sequence[FunnelPoint], tau: float, alpha: float, mode: str) -> float:
    return float(np.mean([p.flag_for(tau, alpha, mode) != "expected" for p in points]))


__all__ = [
    "DegenerateExpectationError", "FunnelPoint", "OverdispersionFit", "adjusted_control_limits",
    "fit_empirical_null", "flag_provider", "flag_rate", "funnel_points", "interpolated_control_limits",
    "null_variance", "precision", "standardized_ratio", "z_scores",
]
