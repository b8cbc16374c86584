"""Generalized partially linear model: provider effects plus a feedforward network.

The linear predictor for subject ``j`` of provider ``i`` is
``omega_ij = gamma_i + g(z_ij; w, b)`` where ``g`` is a fully connected network
with ReLU or identity activations. Everything here works on numpy arrays; the
single-observation functions (:func:`forward`, :func:`backward`) are thin
wrappers around the batched kernels used by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "identity")
FAMILIES = ("gaussian", "bernoulli", "poisson")


class ShapeError(ValueError):
    """Raised when array dimensions disagree with the network topology."""


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass
class ProviderBlock:
    provider_id: str
    outcomes: np.ndarray
    covariates: np.ndarray


@dataclass
class ProviderPanel:
    """Clustered data set with subject rows stored contiguously by provider.

    ``provider_index[k]`` is the dense provider index of row ``k``; the dense
    index follows the order of ``provider_ids``.
    """

    provider_ids: list[str]
    outcomes: np.ndarray
    covariates: np.ndarray
    provider_index: np.ndarray

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        self.provider_index = np.asarray(self.provider_index, dtype=np.intp)
        n = self.outcomes.shape[0]
        if self.covariates.shape[0] != n or self.provider_index.shape[0] != n:
            raise ShapeError("outcomes, covariates and provider_index must share the row count")
        if n and np.any(np.diff(self.provider_index) < 0):
            order = np.argsort(self.provider_index, kind="stable")
            self.outcomes = self.outcomes[order]
            self.covariates = self.covariates[order]
            self.provider_index = self.provider_index[order]
        counts = np.bincount(self.provider_index, minlength=len(self.provider_ids))
        if counts.shape[0] != len(self.provider_ids):
            raise ShapeError("provider_index refers to unknown providers")
        if np.any(counts < 1):
            empty = [self.provider_ids[i] for i in np.flatnonzero(counts < 1)]
            raise ValueError(f"providers without observations: {empty[:5]}")
        if not np.all(np.isfinite(self.covariates)):
            raise ValueError("covariates must be finite")
        self.sizes = counts
        self.offsets = np.concatenate([[0], np.cumsum(counts)])

    @classmethod
    def from_blocks(cls, blocks: Sequence[ProviderBlock]) -> "ProviderPanel":
        ids = [b.provider_id for b in blocks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate provider ids")
        y = np.concatenate([np.asarray(b.outcomes, dtype=float).ravel() for b in blocks])
        z = np.vstack([np.atleast_2d(np.asarray(b.covariates, dtype=float)) for b in blocks])
        idx = np.repeat(np.arange(len(blocks)), [len(np.ravel(b.outcomes)) for b in blocks])
        return cls(ids, y, z, idx)

    @property
    def m(self) -> int:
        return len(self.provider_ids)

    @property
    def n(self) -> int:
        return int(self.outcomes.shape[0])

    @property
    def p0(self) -> int:
        return int(self.covariates.shape[1])

    def rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def block(self, i: int) -> ProviderBlock:
        s = self.rows(i)
        return ProviderBlock(self.provider_ids[i], self.outcomes[s], self.covariates[s])

    def blocks(self) -> Iterator[ProviderBlock]:
        for i in range(self.m):
            yield self.block(i)

    def subset(self, providers: Sequence[int]) -> "ProviderPanel":
        """Panel restricted to the given dense provider indices (re-indexed)."""
        return ProviderPanel.from_blocks([self.block(i) for i in providers])

    def validate(self, family: "OutcomeFamily | str") -> None:
        kind = family.kind if isinstance(family, OutcomeFamily) else family
        y = self.outcomes
        if not np.all(np.isfinite(y)):
            raise ValueError("outcomes must be finite")
        if kind == "bernoulli":
            bad = np.flatnonzero((y != 0) & (y != 1))
            if bad.size:
                raise ValueError(f"bernoulli outcome not in {{0,1}} at row {bad[0]}")
        elif kind == "poisson":
            bad = np.flatnonzero((y < 0) | (y != np.floor(y)))
            if bad.size:
                raise ValueError(f"poisson outcome not a nonnegative integer at row {bad[0]}")


@dataclass(frozen=True)
class NetworkTopology:
    """Layer sizes ``[p_0, ..., p_L, 1]`` and one activation per non-input layer."""

    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(p) for p in self.layer_sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        sizes, acts = self.layer_sizes, self.activations
        if len(sizes) < 2 or any(p < 1 for p in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        if sizes[-1] != 1:
            raise ValueError("output layer must have a single node")
        if len(acts) != len(sizes) - 1:
            raise ValueError("need one activation per non-input layer")
        if any(a not in ACTIVATIONS for a in acts):
            raise ValueError(f"activations must be in {ACTIVATIONS}")
        if acts[-1] != "identity":
            raise ValueError("output activation must be identity")

    @classmethod
    def mlp(cls, p0: int, hidden: Sequence[int] = (32, 16)) -> "NetworkTopology":
        """ReLU hidden layers followed by an identity output node."""
        return cls((p0, *hidden, 1), ("relu",) * len(hidden) + ("identity",))

    @classmethod
    def linear(cls, p0: int) -> "NetworkTopology":
        return cls((p0, 1), ("identity",))

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def n_weights(self) -> int:
        s = self.layer_sizes
        return sum(s[l] * s[l + 1] for l in range(len(s) - 1))

    @property
    def n_biases(self) -> int:
        return sum(self.layer_sizes[1:])


@dataclass(frozen=True)
class OutcomeFamily:
    kind: str
    sigma2_hat: float | None = None

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.sigma2_hat is not None and not self.sigma2_hat > 0:
            raise ValueError("sigma2_hat must be positive")

    def h(self, omega):
        if self.kind == "gaussian":
            return 0.5 * np.square(omega)
        if self.kind == "bernoulli":
            # log(1 + e^w) evaluated as w + log1p(e^-w) for w > 0
            return np.logaddexp(0.0, omega)
        return np.exp(omega)

    def mean(self, omega):
        """First derivative of ``h``: the conditional mean."""
        if self.kind == "gaussian":
            return np.asarray(omega, dtype=float)
        if self.kind == "bernoulli":
            return expit(omega)
        return np.exp(omega)

    def variance(self, omega):
        """Second derivative of ``h`` (variance up to the dispersion factor)."""
        if self.kind == "gaussian":
            return np.ones_like(np.asarray(omega, dtype=float))
        if self.kind == "bernoulli":
            p = expit(omega)
            return p * expit(-np.asarray(omega))
        return np.exp(omega)

    def residual(self, y, omega):
        if self.kind == "bernoulli":
            # y - expit(w) written so that y=1 keeps expit(-w) instead of rounding to 0
            y = np.asarray(y, dtype=float)
            return np.where(y > 0.5, expit(-np.asarray(omega)), 0.0) - (1.0 - y) * expit(omega)
        return np.asarray(y, dtype=float) - self.mean(omega)

    def with_sigma2(self, sigma2: float) -> "OutcomeFamily":
        return OutcomeFamily(self.kind, float(sigma2))


@dataclass(frozen=True)
class DropoutSpec:
    retention_prob: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.retention_prob <= 1.0:
            raise ValueError("retention probability must lie in (0, 1]")


@dataclass
class NetworkParams:
    """Provider effects, layer weights and biases.

    When built through :meth:`from_flat` every array is a view into a single
    parameter vector ordered ``[gamma, w^(1), ..., w^(L+1), b^(1), ..., b^(L+1)]``.
    """

    gamma: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    flat: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_flat(cls, topology: NetworkTopology, m: int, flat: np.ndarray) -> "NetworkParams":
        flat = np.asarray(flat, dtype=float)
        s = topology.layer_sizes
        expected = m + topology.n_weights + topology.n_biases
        if flat.shape != (expected,):
            raise ShapeError(f"parameter vector has length {flat.shape}, expected {expected}")
        pos = m
        weights, biases = [], []
        for l in range(len(s) - 1):
            k = s[l + 1] * s[l]
            weights.append(flat[pos:pos + k].reshape(s[l + 1], s[l]))
            pos += k
        for l in range(len(s) - 1):
            biases.append(flat[pos:pos + s[l + 1]])
            pos += s[l + 1]
        return cls(flat[:m], weights, biases, flat)

    def to_flat(self) -> np.ndarray:
        parts = [self.gamma.ravel()] + [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    def copy(self, topology: NetworkTopology) -> "NetworkParams":
        return NetworkParams.from_flat(topology, self.gamma.shape[0], self.to_flat().copy())

    def block_slices(self) -> dict[str, slice]:
        """Slices of the flat vector holding the gamma, weight and bias blocks."""
        m = self.gamma.shape[0]
        nw = sum(w.size for w in self.weights)
        nb = sum(b.size for b in self.biases)
        return {"gamma": slice(0, m), "w": slice(m, m + nw), "b": slice(m + nw, m + nw + nb)}

    def check(self, topology: NetworkTopology) -> None:
        s = topology.layer_sizes
        if len(self.weights) != len(s) - 1 or len(self.biases) != len(s) - 1:
            raise ShapeError("parameter layers do not match topology")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (s[l + 1], s[l]) or b.shape != (s[l + 1],):
                raise ShapeError(f"layer {l + 1} has shapes {w.shape}, {b.shape}")
        if not all(np.all(np.isfinite(a)) for a in [self.gamma, *self.weights, *self.biases]):
            raise ValueError("parameters must be finite")


def init_params(topology: NetworkTopology, m: int, rng_seed: int) -> NetworkParams:
    """Glorot-uniform weights; zero biases and zero provider effects."""
    rng = np.random.default_rng(rng_seed)
    flat = np.zeros(m + topology.n_weights + topology.n_biases)
    params = NetworkParams.from_flat(topology, m, flat)
    s = topology.layer_sizes
    for l, w in enumerate(params.weights):
        bound = np.sqrt(6.0) / np.sqrt(s[l] + s[l + 1])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


# ---------------------------------------------------------------------------
# Batched kernels
# ---------------------------------------------------------------------------


def _activate(kind: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if kind == "relu" else x


def forward_batch(params: NetworkParams, topology: NetworkTopology, Z: np.ndarray,
                  masks: Sequence[np.ndarray] | None = None,
                  retention: float = 1.0, keep_cache: bool = False):
    """Network output for every row of ``Z``.

    ``masks[l]`` (boolean, length ``p_l``) drops nodes of layer ``l`` for
    ``l = 0..L``. Without masks and with ``retention < 1`` the outgoing weights
    of every input/hidden layer are multiplied by the retention probability.
    Returns ``g`` or ``(g, cache)`` where ``cache`` holds the (masked)
    activations and the pre-activations of each layer.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != topology.layer_sizes[0]:
        raise ShapeError(f"covariates have shape {Z.shape}, expected (n, {topology.layer_sizes[0]})")
    if masks is not None and len(masks) != len(topology.layer_sizes) - 1:
        raise ShapeError("need one dropout mask per input/hidden layer")
    a = Z
    acts, pres = [], []
    n_layers = len(params.weights)
    for l in range(n_layers):
        if masks is not None:
            mask = np.asarray(masks[l], dtype=bool)
            if mask.shape != (a.shape[1],):
                raise ShapeError(f"mask {l} has shape {mask.shape}, expected ({a.shape[1]},)")
            a = a * mask
        acts.append(a)
        w = params.weights[l]
        if masks is None and retention != 1.0:
            w = w * retention
        pre = a @ w.T + params.biases[l]
        pres.append(pre)
        a = _activate(topology.activations[l], pre)
    g = a[:, 0]
    if keep_cache:
        return g, {"activations": acts + [a], "preactivations": pres}
    return g


def backward_batch(params: NetworkParams, topology: NetworkTopology, Z: np.ndarray,
                   dloss_dg: np.ndarray, masks: Sequence[np.ndarray] | None = None,
                   cache=None, out: np.ndarray | None = None) -> np.ndarray:
    """Accumulate ``sum_k dloss_dg[k] * d g(Z_k) / d(w, b)`` into a flat gradient.

    The returned vector has the layout of ``NetworkParams.flat`` with the
    gamma block left untouched (zero unless ``out`` already holds values).
    """
    if cache is None:
        _, cache = forward_batch(params, topology, Z, masks, keep_cache=True)
    m = params.gamma.shape[0]
    if out is None:
        out = np.zeros(m + topology.n_weights + topology.n_biases)
    grad = NetworkParams.from_flat(topology, m, out)
    acts, pres = cache["activations"], cache["preactivations"]
    delta = np.asarray(dloss_dg, dtype=float)[:, None]
    for l in range(len(params.weights) - 1, -1, -1):
        if topology.activations[l] == "relu":
            delta = delta * (pres[l] > 0.0)
        grad.weights[l] += delta.T @ acts[l]
        grad.biases[l] += delta.sum(axis=0)
        if l > 0:
            delta = delta @ params.weights[l]
            if masks is not None:
                delta = delta * np.asarray(masks[l], dtype=bool)
    return out


def batch_loss_and_grad(params: NetworkParams, topology: NetworkTopology, family: OutcomeFamily,
                        y: np.ndarray, Z: np.ndarray, pidx: np.ndarray,
                        masks: Sequence[np.ndarray] | None = None, retention: float = 1.0):
    """Mean negative log-likelihood of a batch and its gradient (flat layout)."""
    g, cache = forward_batch(params, topology, Z, masks, retention, keep_cache=True)
    omega = params.gamma[pidx] + g
    n = y.shape[0]
    loss = float(np.sum(family.h(omega) - y * omega)) / n
    resid = family.residual(y, omega)
    m = params.gamma.shape[0]
    grad = np.zeros(m + topology.n_weights + topology.n_biases)
    grad[:m] = -np.bincount(pidx, weights=resid, minlength=m) / n
    backward_batch(params, topology, Z, -resid / n, masks, cache, out=grad)
    return loss, grad


def mean_loss(params: NetworkParams, topology: NetworkTopology, family: OutcomeFamily,
              y: np.ndarray, Z: np.ndarray, pidx: np.ndarray, retention: float = 1.0) -> float:
    """Mean negative log-likelihood in inference mode."""
    omega = params.gamma[pidx] + forward_batch(params, topology, Z, retention=retention)
    return float(np.mean(family.h(omega) - y * omega))


def per_observation_gradients(params: NetworkParams, topology: NetworkTopology, family: OutcomeFamily,
                              y: np.ndarray, Z: np.ndarray, pidx: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of each row's negative log-likelihood term, split by block.

    Returns ``{"w": (n, n_weights), "b": (n, n_biases), "resid": (n,)}``; the
    gamma block of row ``k`` is ``-resid[k]`` at position ``pidx[k]`` and zero
    elsewhere, so it is kept implicit.
    """
    g, cache = forward_batch(params, topology, Z, keep_cache=True)
    omega = params.gamma[pidx] + g
    resid = family.residual(y, omega)
    acts, pres = cache["activations"], cache["preactivations"]
    n = y.shape[0]
    w_parts, b_parts = [], []
    delta = -resid[:, None]
    for l in range(len(params.weights) - 1, -1, -1):
        if topology.activations[l] == "relu":
            delta = delta * (pres[l] > 0.0)
        w_parts.append((delta[:, :, None] * acts[l][:, None, :]).reshape(n, -1))
        b_parts.append(delta)
        if l > 0:
            delta = delta @ params.weights[l]
    return {"w": np.hstack(w_parts[::-1]), "b": np.hstack(b_parts[::-1]), "resid": resid}


# ---------------------------------------------------------------------------
# Single-observation interface
# ---------------------------------------------------------------------------


def forward(params: NetworkParams, topology: NetworkTopology, z, dropout_mask=None,
            retention: float = 1.0):
    """Evaluate ``g(z)``; returns ``(g_value, activations)``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (topology.layer_sizes[0],):
        raise ShapeError(f"covariate vector has shape {z.shape}, expected ({topology.layer_sizes[0]},)")
    g, cache = forward_batch(params, topology, z[None, :], dropout_mask, retention, keep_cache=True)
    return float(g[0]), [a[0] for a in cache["activations"]]


def predictor(params: NetworkParams, topology: NetworkTopology, provider_index: int, z,
              retention: float = 1.0) -> float:
    """``omega = gamma_i + g(z)``."""
    if not 0 <= provider_index < params.gamma.shape[0]:
        raise IndexError(f"provider index {provider_index} out of range")
    g, _ = forward(params, topology, z, retention=retention)
    return float(params.gamma[provider_index]) + g


def loss_and_residual(family: OutcomeFamily, y: float, omega: float) -> tuple[float, float]:
    """Negative log-likelihood term ``h(omega) - y*omega`` and residual ``y - h'(omega)``."""
    if not (np.isfinite(y) and np.isfinite(omega)):
        raise FloatingPointError("non-finite outcome or linear predictor")
    loss = float(family.h(omega) - y * omega)
    return loss, float(family.residual(y, omega))


def backward(params: NetworkParams, topology: NetworkTopology, provider_index: int, z, y: float,
             family: OutcomeFamily, dropout_mask=None) -> NetworkParams:
    """Gradient of one observation's negative log-likelihood term.

    The result mirrors the layout of ``params``; provider effects other than
    ``provider_index`` get exactly zero.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (topology.layer_sizes[0],):
        raise ShapeError(f"covariate vector has shape {z.shape}, expected ({topology.layer_sizes[0]},)")
    if not 0 <= provider_index < params.gamma.shape[0]:
        raise IndexError(f"provider index {provider_index} out of range")
    g, cache = forward_batch(params, topology, z[None, :], dropout_mask, keep_cache=True)
    omega = params.gamma[provider_index] + g[0]
    resid = float(family.residual(y, omega))
    m = params.gamma.shape[0]
    flat = np.zeros(m + topology.n_weights + topology.n_biases)
    flat[provider_index] = -resid
    backward_batch(params, topology, z[None, :], np.array([-resid]), dropout_mask, cache, out=flat)
    return NetworkParams.from_flat(topology, m, flat)


def sample_dropout_masks(topology: NetworkTopology, spec: DropoutSpec | None, rng: np.random.Generator):
    """One boolean mask per input/hidden layer, or ``None`` when dropout is off."""
    if spec is None or spec.retention_prob >= 1.0:
        return None
    return [rng.random(p) < spec.retention_prob for p in topology.layer_sizes[:-1]]
