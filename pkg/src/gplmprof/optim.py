"""Stratified-sampling stochastic optimizers for the partially linear model.

Four update rules share one driver (:func:`fit`): AMSGrad (no bias
correction, non-decreasing second-moment normalizer), Adam (bias corrected),
RMSProp and plain SGD. Every rule uses the decayed step ``eta / sqrt(s)`` and
stops early once the validation loss has failed to improve on its running
minimum for ``patience`` consecutive evaluations.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import (
    DropoutSpec,
    NetworkParams,
    NetworkTopology,
    OutcomeFamily,
    ProviderPanel,
    batch_loss_and_grad,
    init_params,
    mean_loss,
    per_observation_gradients,
    sample_dropout_masks,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("amsgrad", "adam", "rmsprop", "sgd")
SAMPLING = ("stratified", "simple")


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "amsgrad"
    sampling: str = "stratified"
    train_fraction: float = 0.8
    batch_fraction: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    rmsprop_beta: float = 0.9
    eps: float = 1e-8
    patience: int = 5
    dropout: DropoutSpec | None = None
    seed: int = 0
    max_iter: int = 10_000
    eval_every: int = 1
    check_monotone: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.sampling not in SAMPLING:
            raise ValueError(f"sampling must be one of {SAMPLING}")
        if not 0.5 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0.5, 1)")
        if not 0.0 < self.batch_fraction < 1.0:
            raise ValueError("batch_fraction must lie in (0, 1)")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive")
        for name in ("beta1", "beta2", "rmsprop_beta"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.patience < 1 or self.max_iter < 1 or self.eval_every < 1:
            raise ValueError("patience, max_iter and eval_every must be positive")


@dataclass
class TrainState:
    iteration: int
    r: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    psi: float = np.inf
    worse_count: int = 0


@dataclass
class Split:
    train: np.ndarray
    validation: np.ndarray


@dataclass
class FitResult:
    params: NetworkParams
    validation_loss: float
    train_loss: float
    iterations: int
    best_iteration: int
    wall_time: float
    split: Split
    loss_trace: list[float] = field(default_factory=list)
    variance_trace: list[dict] = field(default_factory=list)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *stream])


def split_train_validation(panel: ProviderPanel, train_fraction: float, seed: int) -> Split:
    """Per-provider split: ``max(1, floor(delta * n_i))`` rows of each provider go to training."""
    if not 0.5 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0.5, 1)")
    rng = _rng(seed, 1)
    keys = rng.random(panel.n)
    # rows are contiguous by provider, so sorting (provider, key) permutes within providers
    order = np.lexsort((keys, panel.provider_index))
    rank = np.arange(panel.n) - np.repeat(panel.offsets[:-1], panel.sizes)
    n_train = np.maximum(1, np.floor(train_fraction * panel.sizes).astype(np.intp))
    in_train = rank < np.repeat(n_train, panel.sizes)
    return Split(np.sort(order[in_train]), np.sort(order[~in_train]))


class BatchSampler:
    """Draws ``T_(s)`` from a training index set, reproducibly from ``(seed, s)``."""

    def __init__(self, panel: ProviderPanel, train: np.ndarray, batch_fraction: float,
                 sampling: str, seed: int):
        if sampling not in SAMPLING:
            raise ValueError(f"sampling must be one of {SAMPLING}")
        self.train = np.asarray(train, dtype=np.intp)
        self.sampling = sampling
        self.seed = seed
        pidx = panel.provider_index[self.train]
        order = np.argsort(pidx, kind="stable")
        self.train = self.train[order]
        self.pidx = pidx[order]
        self.sizes = np.bincount(self.pidx, minlength=panel.m)
        starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.rank_base = np.repeat(starts, self.sizes)
        present = self.sizes > 0
        self.batch_sizes = np.where(present, np.maximum(1, np.floor(batch_fraction * self.sizes)), 0).astype(np.intp)
        self.quota = np.repeat(self.batch_sizes, self.sizes)
        self.total = max(1, int(np.floor(batch_fraction * self.train.size)))

    def __call__(self, iteration: int) -> np.ndarray:
        rng = _rng(self.seed, 2, iteration)
        if self.sampling == "simple":
            return np.sort(rng.choice(self.train, size=self.total, replace=False))
        keys = rng.random(self.train.size)
        order = np.lexsort((keys, self.pidx))
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size) - self.rank_base
        return self.train[rank < self.quota]


def sample_batch(panel: ProviderPanel, train: np.ndarray, batch_fraction: float, sampling: str,
                 seed: int, iteration: int) -> np.ndarray:
    return BatchSampler(panel, train, batch_fraction, sampling, seed)(iteration)


def _update(state: TrainState, theta: np.ndarray, grad: np.ndarray, config: TrainConfig) -> None:
    s = state.iteration
    eta = config.learning_rate / np.sqrt(s)
    alg = config.algorithm
    if alg == "amsgrad":
        state.r *= config.beta1
        state.r += (1 - config.beta1) * grad
        state.v *= config.beta2
        state.v += (1 - config.beta2) * grad * grad
        if config.check_monotone:
            previous = state.v_hat.copy()
        np.maximum(state.v, state.v_hat, out=state.v_hat)
        if config.check_monotone:
            assert np.all(state.v_hat >= previous)
        theta -= eta * state.r / (np.sqrt(state.v_hat) + config.eps)
    elif alg == "adam":
        state.r *= config.beta1
        state.r += (1 - config.beta1) * grad
        state.v *= config.beta2
        state.v += (1 - config.beta2) * grad * grad
        r_hat = state.r / (1 - config.beta1 ** s)
        v_hat = state.v / (1 - config.beta2 ** s)
        theta -= eta * r_hat / (np.sqrt(v_hat) + config.eps)
    elif alg == "rmsprop":
        state.v *= config.rmsprop_beta
        state.v += (1 - config.rmsprop_beta) * grad * grad
        theta -= eta * grad / (np.sqrt(state.v) + config.eps)
    else:
        theta -= eta * grad


def fit(panel: ProviderPanel, topology: NetworkTopology, family: OutcomeFamily,
        config: TrainConfig, init: NetworkParams | None = None,
        variance_at: tuple[int, ...] = ()) -> FitResult:
    """Train the model and return the iterate with the lowest validation loss.

    ``variance_at`` lists iterations at which the stratified and simple
    gradient variances are recorded (iteration ``s`` uses ``theta_(s-1)``).
    """
    if panel.n == 0:
        raise ValueError("empty panel")
    if topology.layer_sizes[0] != panel.p0:
        raise ValueError(f"topology expects {topology.layer_sizes[0]} covariates, panel has {panel.p0}")
    panel.validate(family)
    start = time.perf_counter()
    params = init.copy(topology) if init is not None else init_params(topology, panel.m, config.seed)
    theta = params.flat
    split = split_train_validation(panel, config.train_fraction, config.seed)
    sampler = BatchSampler(panel, split.train, config.batch_fraction, config.sampling, config.seed)
    y, Z, pidx = panel.outcomes, panel.covariates, panel.provider_index

    monitor = split.validation
    if monitor.size == 0:
        warnings.warn("validation set is empty; early stopping uses the training loss", RuntimeWarning)
        monitor = split.train
    yv, Zv, pv = y[monitor], Z[monitor], pidx[monitor]
    retention = config.dropout.retention_prob if config.dropout is not None else 1.0
    mask_rng = _rng(config.seed, 3)

    state = TrainState(0, np.zeros_like(theta), np.zeros_like(theta), np.zeros_like(theta))
    best = theta.copy()
    best_iter = 0
    trace: list[float] = []
    variances: list[dict] = []
    while state.iteration < config.max_iter:
        state.iteration += 1
        s = state.iteration
        batch = sampler(s)
        if s in variance_at:
            variances.append({"iteration": s, **_variance_pair(panel, params, topology, family, split.train,
                                                                config, s)})
        masks = sample_dropout_masks(topology, config.dropout, mask_rng)
        _, grad = batch_loss_and_grad(params, topology, family, y[batch], Z[batch], pidx[batch], masks)
        _update(state, theta, grad, config)
        if s % config.eval_every and s != config.max_iter:
            continue
        loss = mean_loss(params, topology, family, yv, Zv, pv, retention)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite validation loss at iteration {s}; the learning rate is likely too high")
        trace.append(loss)
        if loss < state.psi:
            state.psi = loss
            state.worse_count = 0
            best[:] = theta
            best_iter = s
        else:
            state.worse_count += 1
            if state.worse_count >= config.patience:
                break
    best_params = NetworkParams.from_flat(topology, panel.m, best)
    train_loss = mean_loss(best_params, topology, family, y[split.train], Z[split.train],
                           pidx[split.train], retention)
    log.debug("fit stopped after %d iterations (best %d, loss %.6f)", state.iteration, best_iter, state.psi)
    return FitResult(best_params, float(state.psi), train_loss, state.iteration, best_iter,
                     time.perf_counter() - start, split, trace, variances)


def _variance_pair(panel, params, topology, family, train, config, iteration):
    out = {}
    for scheme in SAMPLING:
        batch = BatchSampler(panel, train, config.batch_fraction, scheme, config.seed + 7919)(iteration)
        for block, value in gradient_variance(panel, train, params, topology, family, batch, scheme).items():
            out[f"{scheme}_{block}"] = value
    return out


def gradient_variance(panel: ProviderPanel, train: np.ndarray, params: NetworkParams,
                      topology: NetworkTopology, family: OutcomeFamily, batch: np.ndarray,
                      sampling: str) -> dict[str, float]:
    """Variance of the mini-batch gradient, separately for the w, b and gamma blocks.

    Stratified: ``|T|^-2 sum_i |T_i|/|T_i(s)| sum_{j in T_i} ||grad_ij - mean_i||^2``.
    Simple: ``|T_(s)|^-2 sum_{(i,j) in T_(s)} ||grad_ij - mean_T||^2``, the plug-in
    variance of a simple-sample mean, on the same scale as the stratified value.
    """
    train = np.sort(np.asarray(train, dtype=np.intp))
    pidx = panel.provider_index[train]
    grads = per_observation_gradients(params, topology, family, panel.outcomes[train],
                                      panel.covariates[train], pidx)
    return gradient_variance_from_rows(grads, pidx, panel.provider_index[batch], panel.m,
                                       sampling, np.searchsorted(train, batch) if sampling == "simple" else None)


def gradient_variance_from_rows(grads: dict[str, np.ndarray], pidx: np.ndarray, batch_pidx: np.ndarray,
                                m: int, sampling: str, batch_rows: np.ndarray | None = None) -> dict[str, float]:
    """Same as :func:`gradient_variance` but from precomputed per-row gradients.

    ``grads`` follows :func:`per_observation_gradients`; ``pidx`` gives the
    provider of each row of the training set; ``batch_rows`` indexes the rows
    of the simple-sampling batch within the training set.
    """
    n_train = pidx.shape[0]
    sizes = np.bincount(pidx, minlength=m).astype(float)
    # the gamma gradient of row k is -resid[k] * e_{pidx[k]}
    g_gamma = -grads["resid"]
    out = {}
    if sampling == "stratified":
        batch_sizes = np.bincount(batch_pidx, minlength=m).astype(float)
        present = sizes > 0
        weight = np.zeros(m)
        weight[present] = sizes[present] / batch_sizes[present]
        for block in ("w", "b"):
            G = grads[block]
            means = np.zeros((m, G.shape[1]))
            np.add.at(means, pidx, G)
            means[present] /= sizes[present, None]
            ss = np.bincount(pidx, weights=np.sum((G - means[pidx]) ** 2, axis=1), minlength=m)
            out[block] = float(np.sum(weight * ss) / n_train ** 2)
        mean_g = np.bincount(pidx, weights=g_gamma, minlength=m)
        mean_g[present] /= sizes[present]
        ss = np.bincount(pidx, weights=(g_gamma - mean_g[pidx]) ** 2, minlength=m)
        out["gamma"] = float(np.sum(weight * ss) / n_train ** 2)
    elif sampling == "simple":
        if batch_rows is None:
            raise ValueError("simple sampling needs the batch rows")
        nb = batch_rows.shape[0]
        for block in ("w", "b"):
            G = grads[block]
            dev = G[batch_rows] - G.mean(axis=0)
            out[block] = float(np.sum(dev ** 2) / nb ** 2)
        # overall mean of the gamma block: entry i is sum_{k in T_i} g_gamma[k] / |T|
        mean_vec = np.bincount(pidx, weights=g_gamma, minlength=m) / n_train
        total_sq = float(np.sum(mean_vec ** 2))
        rows_p = pidx[batch_rows]
        g = g_gamma[batch_rows]
        # ||g e_i - mean||^2 = (g - mean_i)^2 + sum_{i' != i} mean_i'^2
        sq = (g - mean_vec[rows_p]) ** 2 + total_sq - mean_vec[rows_p] ** 2
        out["gamma"] = float(np.sum(sq) / nb ** 2)
    else:
        raise ValueError(f"sampling must be one of {SAMPLING}")
    return out
