"""Per-provider profiling from a fitted model: exact tests, intervals and comparators."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .exact import (DegenerateTestError, ProviderNullModel, TestResult, exact_confidence_interval,
                    exact_mid_p, flag_provider, population_norm, score_statistic, wald_statistic)
from .model import NetworkParams, NetworkTopology, OutcomeFamily, ProviderPanel, forward_batch


def estimate_sigma2(panel: ProviderPanel, params: NetworkParams, topology: NetworkTopology) -> float:
    """Residual variance of a Gaussian fit with ``n - m - p0`` degrees of freedom."""
    dof = panel.n - panel.m - panel.p0
    if dof <= 0:
        raise ValueError(f"cannot estimate sigma^2: n - m - p0 = {dof} <= 0 "
                         f"(n={panel.n}, m={panel.m}, p0={panel.p0})")
    g = forward_batch(params, topology, panel.covariates)
    resid = panel.outcomes - params.gamma[panel.provider_index] - g
    return float(np.sum(resid ** 2) / dof)


def null_models(panel: ProviderPanel, params: NetworkParams, topology: NetworkTopology,
                family: OutcomeFamily, norm: str | float = "median", tau: float = 1.0,
                retention: float = 1.0) -> list[ProviderNullModel]:
    """One null model per provider, all at the population norm of the fitted effects."""
    if family.kind == "gaussian" and family.sigma2_hat is None:
        family = family.with_sigma2(estimate_sigma2(panel, params, topology))
    gamma0 = population_norm(params.gamma, norm)
    g = forward_batch(params, topology, panel.covariates, retention=retention)
    return [ProviderNullModel(g[panel.rows(i)], gamma0, family, tau, i) for i in range(panel.m)]


def profile_providers(panel: ProviderPanel, params: NetworkParams, topology: NetworkTopology,
                      family: OutcomeFamily, alpha: float = 0.05, alpha1: float | None = None,
                      norm: str | float = "median", min_size: int = 0, with_ci: bool = True,
                      retention: float = 1.0) -> list[TestResult]:
    """Exact mid-p test of ``gamma_i = norm`` for every provider with at least ``min_size`` rows.

    ``alpha1`` is the lower-tail share of ``alpha`` used for the interval
    (default ``alpha / 2``). For binary outcomes the score and Wald p-values
    are filled in as well.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    a1 = alpha / 2 if alpha1 is None else alpha1
    a2 = alpha - a1
    models = null_models(panel, params, topology, family, norm, retention=retention)
    gamma0 = models[0].gamma if models else math.nan
    out = []
    for i, model in enumerate(models):
        if panel.sizes[i] < min_size:
            continue
        y = panel.outcomes[panel.rows(i)]
        observed = float(y.sum())
        expected = model.expected
        srr = observed / expected if expected > 0 else math.nan
        p = exact_mid_p(model, observed)
        ci = (math.nan, math.nan)
        if with_ci:
            ci = exact_confidence_interval(model.at, observed, a1, a2, gamma_start=float(params.gamma[i]))
        res = TestResult(panel.provider_ids[i], int(panel.sizes[i]), observed, expected, srr, p, ci,
                         flag_provider(p, srr, alpha))
        if model.family.kind == "bernoulli":
            try:
                _, res.score_p = score_statistic(model, y)
                _, res.wald_p = wald_statistic(float(params.gamma[i]), model.at(params.gamma[i]), gamma0)
            except DegenerateTestError:
                pass
            if not math.isnan(res.score_p):
                res.flag_score = flag_provider(res.score_p, srr, alpha)
        out.append(res)
    return out


REPORT_COLUMNS = ("provider_id", "n_i", "O_i", "E_i", "SRR", "mid_p", "score_p", "wald_p",
                  "ci_lower", "ci_upper", "flag_exact", "flag_score")


def report_rows(results: Sequence[TestResult]) -> list[list]:
    return [[r.provider_id, r.n, r.observed, r.expected, r.srr, r.mid_p, r.score_p, r.wald_p,
             r.ci[0], r.ci[1], r.flag, r.flag_score] for r in results]
