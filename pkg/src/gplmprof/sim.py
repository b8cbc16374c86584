"""Simulated provider panels, predictive metrics and experiment drivers."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .exact import ProviderNullModel, exact_mid_p, score_statistic, sub_cdf, wald_statistic
from .model import (NetworkTopology, OutcomeFamily, ProviderPanel, forward_batch, init_params,
                    per_observation_gradients)
from .optim import BatchSampler, TrainConfig, fit, gradient_variance_from_rows, split_train_validation

EFFECT_MEAN = math.log(4 / 11)
EFFECT_SD = 0.4
BERNOULLI = OutcomeFamily("bernoulli")


def g_linear(Z: np.ndarray) -> np.ndarray:
    return Z[:, 0] + 0.5 * Z[:, 1] - Z[:, 2]


def g_nonlinear(Z: np.ndarray) -> np.ndarray:
    return (g_linear(Z) + 0.2 * Z[:, 0] * Z[:, 1] + 0.8 * Z[:, 1] ** 2
            + 0.4 * np.cos(Z[:, 0]) * np.sin(Z[:, 2]))


def g_weak_nonlinear(Z: np.ndarray) -> np.ndarray:
    return (g_linear(Z) + 0.01 * Z[:, 0] * Z[:, 1] + 0.01 * Z[:, 1] ** 2
            + 0.1 * np.cos(Z[:, 0]) * np.sin(Z[:, 2]))


TRUTHS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "linear": g_linear,
    "nonlinear": g_nonlinear,
    "weak-nonlinear": g_weak_nonlinear,
}


@dataclass(frozen=True)
class SimScenario:
    m: int = 100
    mean_size: float = 50
    min_size: int = 20
    effect_mean: float = EFFECT_MEAN
    effect_sd: float = EFFECT_SD
    rho: float = 0.0
    truth: str = "nonlinear"
    focal_size: int | None = None
    focal_delta: float | None = None
    replicates: int = 50
    seed: int = 2024

    def __post_init__(self):
        if self.truth not in TRUTHS:
            raise ValueError(f"truth must be one of {sorted(TRUTHS)}")
        if not 0.0 <= self.rho <= 0.9:
            raise ValueError("rho must lie in [0, 0.9]")
        if self.m < 1 or self.mean_size <= 0:
            raise ValueError("m and mean_size must be positive")
        np.linalg.cholesky(self.covariance + 1e-12 * np.eye(3))

    @property
    def covariance(self) -> np.ndarray:
        """Conditional covariance of the covariates given the provider effect."""
        omega = np.full((3, 3), self.rho) + (1 - self.rho) * np.eye(3)
        return omega - self.rho ** 2 * np.ones((3, 3))

    def true_gamma(self) -> np.ndarray:
        """Provider effects: drawn once from the scenario seed, shared by all replicates."""
        rng = np.random.default_rng([self.seed, 0])
        gamma = rng.normal(self.effect_mean, self.effect_sd, size=self.m)
        if self.focal_delta is not None:
            gamma[0] = self.effect_mean + self.focal_delta * self.effect_sd
        return gamma


@dataclass
class SimPanel:
    panel: ProviderPanel
    true_gamma: np.ndarray
    true_g: np.ndarray
    true_prob: np.ndarray


def generate_panel(scenario: SimScenario, replicate_index: int) -> SimPanel:
    gamma = scenario.true_gamma()
    rng = np.random.default_rng([scenario.seed, 1, replicate_index])
    sizes = np.maximum(rng.poisson(scenario.mean_size, size=scenario.m), scenario.min_size)
    if scenario.focal_size is not None:
        sizes[0] = scenario.focal_size
    pidx = np.repeat(np.arange(scenario.m), sizes)
    cov = scenario.covariance
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    shift = (scenario.rho / scenario.effect_sd) * (gamma - scenario.effect_mean)
    Z = shift[pidx, None] + rng.standard_normal((pidx.size, 3)) @ chol.T
    g = TRUTHS[scenario.truth](Z)
    prob = expit(gamma[pidx] + g)
    y = (rng.random(pidx.size) < prob).astype(float)
    ids = [f"P{i + 1:04d}" for i in range(scenario.m)]
    return SimPanel(ProviderPanel(ids, y, Z, pidx), gamma, g, prob)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

METRICS = ("accuracy", "sensitivity", "specificity", "precision", "f1", "auc")


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with mid-ranks for ties; NaN for a single-class vector."""
    labels = np.asarray(labels) > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(predicted_probs, outcomes, threshold: float = 0.5) -> dict[str, float]:
    p = np.asarray(predicted_probs, dtype=float)
    y = np.asarray(outcomes) > 0.5
    pred = p >= threshold
    tp = np.sum(pred & y)
    tn = np.sum(~pred & ~y)
    fp = np.sum(pred & ~y)
    fn = np.sum(~pred & y)

    def ratio(a, b):
        return float(a / b) if b else float("nan")

    sens = ratio(tp, tp + fn)
    prec = ratio(tp, tp + fp)
    f1 = 2 * sens * prec / (sens + prec) if sens + prec > 0 else float("nan")
    return {
        "accuracy": ratio(tp + tn, y.size),
        "sensitivity": sens,
        "specificity": ratio(tn, tn + fp),
        "precision": prec,
        "f1": float(f1),
        "auc": auc_score(p, y),
    }


def fitted_probabilities(result, panel: ProviderPanel, topology: NetworkTopology) -> np.ndarray:
    g = forward_batch(result.params, topology, panel.covariates)
    return expit(result.params.gamma[panel.provider_index] + g)


@dataclass
class MetricReport:
    """Mean and standard deviation of each metric over replicates."""

    mean: dict[str, float]
    sd: dict[str, float]
    replicates: int
    failures: int = 0


def summarize_metrics(rows: Sequence[dict[str, float]], failures: int = 0) -> MetricReport:
    table = np.array([[r[k] for k in METRICS] for r in rows], dtype=float).reshape(-1, len(METRICS))
    with np.errstate(all="ignore"):
        mean = np.nanmean(table, axis=0) if len(rows) else np.full(len(METRICS), np.nan)
        sd = np.nanstd(table, axis=0, ddof=1) if len(rows) > 1 else np.full(len(METRICS), np.nan)
    return MetricReport(dict(zip(METRICS, map(float, mean))), dict(zip(METRICS, map(float, sd))),
                        len(rows), failures)


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

# Training settings used by the simulation studies. The step size is larger
# and the batches bigger than the library defaults so that a desk-scale run
# of thousands of fits finishes in minutes.
SIM_CONFIG = TrainConfig(learning_rate=0.02, batch_fraction=0.5, patience=20)


def _replicate_seed(config: TrainConfig, replicate: int, fit_index: int = 0) -> int:
    return config.seed + 1000 * replicate + fit_index


def run_model_comparison(scenario: SimScenario, topologies: dict[str, NetworkTopology] | None = None,
                         config: TrainConfig = SIM_CONFIG) -> dict[str, MetricReport]:
    """Fit each topology to every replicate panel and summarise the predictive metrics.

    Defaults to the GPLM (3-32-16-1) against the GLM (no hidden layer).
    """
    if topologies is None:
        topologies = {"GPLM": NetworkTopology.mlp(3), "GLM": NetworkTopology.linear(3)}
    rows: dict[str, list] = {name: [] for name in topologies}
    failures = dict.fromkeys(topologies, 0)
    for rep in range(scenario.replicates):
        sim = generate_panel(scenario, rep)
        for name, topo in topologies.items():
            try:
                res = fit(sim.panel, topo, BERNOULLI, replace(config, seed=_replicate_seed(config, rep)))
            except FloatingPointError:
                failures[name] += 1
                continue
            probs = fitted_probabilities(res, sim.panel, topo)
            rows[name].append(classification_metrics(probs, sim.panel.outcomes))
    return {name: summarize_metrics(rows[name], failures[name]) for name in topologies}


@dataclass
class OptimizerComparison:
    """Per-panel iteration counts and metrics for each (algorithm, sampling) pair."""

    iterations: dict[tuple[str, str], list[float]]
    wall_time: dict[tuple[str, str], list[float]]
    metrics: dict[tuple[str, str], MetricReport]
    reference: str = "amsgrad"

    def speedup(self, algorithm: str, sampling: str = "stratified") -> float:
        """Mean over panels of the iteration ratio ``algorithm / reference``."""
        num = np.asarray(self.iterations[(algorithm, sampling)])
        den = np.asarray(self.iterations[(self.reference, sampling)])
        return float(np.mean(num / den))

    def sampling_speedup(self, algorithm: str) -> float:
        """Mean over panels of the iteration ratio ``simple / stratified``."""
        num = np.asarray(self.iterations[(algorithm, "simple")])
        den = np.asarray(self.iterations[(algorithm, "stratified")])
        return float(np.mean(num / den))


def run_optimizer_comparison(scenario: SimScenario, topology: NetworkTopology | None = None,
                             algorithms: Sequence[str] = ("amsgrad", "adam", "rmsprop"),
                             sampling_schemes: Sequence[str] = ("stratified",),
                             fits_per_panel: int = 5,
                             config: TrainConfig = SIM_CONFIG) -> OptimizerComparison:
    """Time to convergence of several optimizers on the same panels.

    Each panel is fitted ``fits_per_panel`` times per optimizer with different
    seeds. Time to convergence is counted in iterations so that the results
    do not depend on the machine; wall time is kept alongside.
    """
    topology = topology or NetworkTopology.mlp(3)
    keys = [(a, s) for a in algorithms for s in sampling_schemes]
    iters = {k: [] for k in keys}
    times = {k: [] for k in keys}
    rows = {k: [] for k in keys}
    for rep in range(scenario.replicates):
        sim = generate_panel(scenario, rep)
        for alg, scheme in keys:
            it, wt = [], []
            for k in range(fits_per_panel):
                cfg = replace(config, algorithm=alg, sampling=scheme, seed=_replicate_seed(config, rep, k))
                res = fit(sim.panel, topology, BERNOULLI, cfg)
                it.append(res.iterations)
                wt.append(res.wall_time)
                rows[(alg, scheme)].append(
                    classification_metrics(fitted_probabilities(res, sim.panel, topology), sim.panel.outcomes))
            iters[(alg, scheme)].append(float(np.mean(it)))
            times[(alg, scheme)].append(float(np.mean(wt)))
    ref = "amsgrad" if "amsgrad" in algorithms else algorithms[0]
    return OptimizerComparison(iters, times, {k: summarize_metrics(v) for k, v in rows.items()}, ref)


def run_variance_comparison(scenario: SimScenario, topology: NetworkTopology | None = None,
                            config: TrainConfig = SIM_CONFIG, iteration: int = 1) -> list[dict[str, float]]:
    """Stratified and simple mini-batch gradient variances, one row per replicate.

    Both variances are evaluated at the same parameters, the initial values
    of a fit (the iterate entering ``iteration``).
    """
    topology = topology or NetworkTopology.mlp(3)
    out = []
    for rep in range(scenario.replicates):
        sim = generate_panel(scenario, rep)
        panel = sim.panel
        seed = _replicate_seed(config, rep)
        params = init_params(topology, panel.m, seed)
        train = np.sort(split_train_validation(panel, config.train_fraction, seed).train)
        pidx = panel.provider_index[train]
        grads = per_observation_gradients(params, topology, BERNOULLI, panel.outcomes[train],
                                          panel.covariates[train], pidx)
        row = {"replicate": rep}
        for scheme in ("stratified", "simple"):
            batch = np.sort(BatchSampler(panel, train, config.batch_fraction, scheme, seed)(iteration))
            rows_in_train = np.searchsorted(train, batch)
            values = gradient_variance_from_rows(grads, pidx, panel.provider_index[batch], panel.m, scheme,
                                                 rows_in_train if scheme == "simple" else None)
            row.update({f"{scheme}_{block}": v for block, v in values.items()})
        out.append(row)
    return out


@dataclass
class CalibrationRow:
    test: str
    focal_size: int
    rho: float
    delta: float
    reject: float
    left: float
    right: float
    replicates: int


def focal_tests(result, panel: ProviderPanel, topology: NetworkTopology, provider: int = 0,
                alpha: float = 0.05) -> dict[str, tuple[bool, int]]:
    """Exact, score and Wald decisions for one provider against the median effect.

    Each entry is ``(rejected, side)`` with side -1 for fewer outcomes than
    expected and +1 for more.
    """
    gamma = result.params.gamma
    rows = panel.rows(provider)
    g = forward_batch(result.params, topology, panel.covariates[rows])
    y = panel.outcomes[rows]
    null_gamma = float(np.median(gamma))
    model = ProviderNullModel(g, null_gamma, BERNOULLI, provider_index=provider)
    observed = float(y.sum())
    G = sub_cdf(model, observed)
    p_exact = exact_mid_p(model, observed)
    z_score, p_score = score_statistic(model, y)
    z_wald, p_wald = wald_statistic(float(gamma[provider]), model.at(gamma[provider]), null_gamma)
    return {
        "exact": (p_exact < alpha, -1 if G < 0.5 else 1),
        "score": (p_score < alpha, -1 if z_score < 0 else 1),
        "wald": (p_wald < alpha, -1 if z_wald < 0 else 1),
    }


def run_test_calibration(scenario: SimScenario, deltas: Sequence[float] = (0.0,),
                         tests: Sequence[str] = ("exact", "score", "wald"), alpha: float = 0.05,
                         topology: NetworkTopology | None = None,
                         config: TrainConfig = SIM_CONFIG) -> list[CalibrationRow]:
    """Rejection rates of the focal provider (index 0) across replicates.

    ``delta = 0`` gives the two-sided type I error rate, other values give
    power. ``left`` and ``right`` split the rejections by direction.
    """
    if scenario.focal_size is None:
        raise ValueError("calibration needs a focal provider size")
    topology = topology or NetworkTopology.mlp(3)
    out = []
    for delta in deltas:
        scen = replace(scenario, focal_delta=float(delta))
        counts = {t: np.zeros(3) for t in tests}
        for rep in range(scen.replicates):
            sim = generate_panel(scen, rep)
            res = fit(sim.panel, topology, BERNOULLI, replace(config, seed=_replicate_seed(config, rep)))
            decisions = focal_tests(res, sim.panel, topology, 0, alpha)
            for t in tests:
                rejected, side = decisions[t]
                counts[t] += [rejected, rejected and side < 0, rejected and side > 0]
        for t in tests:
            rate = counts[t] / scen.replicates
            out.append(CalibrationRow(t, scen.focal_size, scen.rho, float(delta), *map(float, rate),
                                      scen.replicates))
    return out


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


def model_comparison_table(reports: dict[str, MetricReport]) -> tuple[list[str], list[list]]:
    header = ["model", "replicates", "failures"] + [f"{k}_{s}" for k in METRICS for s in ("mean", "sd")]
    rows = [[name, r.replicates, r.failures] + [v for k in METRICS for v in (r.mean[k], r.sd[k])]
            for name, r in reports.items()]
    return header, rows


def optimizer_table(cmp: OptimizerComparison) -> tuple[list[str], list[list]]:
    header = ["algorithm", "sampling", "mean_iterations", "speedup"] + [f"{k}_mean" for k in METRICS]
    rows = []
    for (alg, scheme), its in cmp.iterations.items():
        rows.append([alg, scheme, float(np.mean(its)), cmp.speedup(alg, scheme)]
                    + [cmp.metrics[(alg, scheme)].mean[k] for k in METRICS])
    return header, rows


def variance_table(rows: Sequence[dict[str, float]]) -> tuple[list[str], list[list]]:
    header = ["replicate"] + [f"{s}_{b}" for s in ("stratified", "simple") for b in ("w", "b", "gamma")]
    return header, [[r[h] for h in header] for r in rows]


def calibration_table(rows: Sequence[CalibrationRow]) -> tuple[list[str], list[list]]:
    header = ["test", "focal_size", "rho", "delta", "reject", "left", "right", "replicates"]
    return header, [[getattr(r, h) for h in header] for r in rows]
