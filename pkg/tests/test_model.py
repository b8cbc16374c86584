import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from gplmprof.model import (DropoutSpec, NetworkParams, NetworkTopology, OutcomeFamily, ProviderBlock,
                            ProviderPanel, ShapeError, backward, batch_loss_and_grad, forward,
                            forward_batch, init_params, loss_and_residual, per_observation_gradients,
                            predictor, sample_dropout_masks)

from oracles import central_difference, reference_loss, reference_network

FAMILIES = ["gaussian", "bernoulli", "poisson"]


def random_params(topology, m, rng, scale=0.5):
    p = init_params(topology, m, int(rng.integers(1 << 30)))
    p.flat[:] = rng.normal(0.0, scale, p.flat.size)
    return p


def random_outcome(kind, rng):
    if kind == "gaussian":
        return float(rng.normal())
    if kind == "bernoulli":
        return float(rng.integers(2))
    return float(rng.poisson(2.0))


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


def test_panel_groups_rows_by_provider():
    panel = ProviderPanel(["a", "b"], [1, 0, 1], [[0.1], [0.2], [0.3]], [1, 0, 1])
    np.testing.assert_array_equal(panel.provider_index, [0, 1, 1])
    np.testing.assert_array_equal(panel.outcomes, [0, 1, 1])
    np.testing.assert_array_equal(panel.sizes, [1, 2])
    assert panel.m == 2 and panel.n == 3 and panel.p0 == 1
    assert panel.block(1).provider_id == "b"


def test_panel_rejects_bad_input():
    with pytest.raises(ValueError):
        ProviderPanel(["a", "b"], [1.0], [[0.0]], [0])
    with pytest.raises(ValueError):
        ProviderPanel(["a"], [1.0], [[np.inf]], [0])
    with pytest.raises(ShapeError):
        ProviderPanel(["a"], [1.0, 0.0], [[0.0]], [0, 0])
    panel = ProviderPanel(["a"], [2.0], [[0.0]], [0])
    with pytest.raises(ValueError, match="row 0"):
        panel.validate("bernoulli")
    with pytest.raises(ValueError):
        ProviderPanel(["a"], [1.5], [[0.0]], [0]).validate("poisson")


def test_from_blocks_roundtrip():
    blocks = [ProviderBlock("x", np.array([1.0, 0.0]), np.ones((2, 2))),
              ProviderBlock("y", np.array([0.0]), np.zeros((1, 2)))]
    panel = ProviderPanel.from_blocks(blocks)
    assert [b.provider_id for b in panel.blocks()] == ["x", "y"]
    np.testing.assert_array_equal(panel.subset([1]).covariates, np.zeros((1, 2)))


def test_topology_validation():
    with pytest.raises(ValueError):
        NetworkTopology((3, 4, 2), ("relu", "identity"))
    with pytest.raises(ValueError):
        NetworkTopology((3, 4, 1), ("relu", "relu"))
    with pytest.raises(ValueError):
        NetworkTopology((3, 1), ("tanh",))
    topo = NetworkTopology.mlp(3)
    assert topo.layer_sizes == (3, 32, 16, 1)
    assert topo.n_biases == 49 and topo.n_weights == 3 * 32 + 32 * 16 + 16


# ---------------------------------------------------------------------------
# initialization and forward pass
# ---------------------------------------------------------------------------


def test_init_params_rule():
    topo = NetworkTopology.mlp(3)
    p = init_params(topo, 7, 11)
    assert np.all(p.gamma == 0.0)
    assert all(np.all(b == 0.0) for b in p.biases)
    bound = math.sqrt(6 / 35)
    assert bound == pytest.approx(0.414039, abs=1e-6)
    assert np.max(np.abs(p.weights[0])) <= bound
    # same seed, bit-identical parameters
    np.testing.assert_array_equal(p.flat, init_params(topo, 7, 11).flat)
    assert not np.array_equal(p.flat, init_params(topo, 7, 12).flat)


def test_zero_network_and_linear_case():
    topo = NetworkTopology.mlp(3)
    p = init_params(topo, 2, 0)
    p.flat[:] = 0.0
    assert forward(p, topo, [1.0, -2.0, 3.0])[0] == 0.0
    p.gamma[1] = -1.0116
    assert predictor(p, topo, 1, [0.3, 0.2, 0.1]) == pytest.approx(-1.0116)

    lin = NetworkTopology.linear(3)
    q = init_params(lin, 1, 0)
    q.weights[0][:] = [[1.0, 0.5, -1.0]]
    assert forward(q, lin, [1.0, 1.0, 1.0])[0] == pytest.approx(0.5)
    with pytest.raises(IndexError):
        predictor(q, lin, 1, [0.0, 0.0, 0.0])
    with pytest.raises(ShapeError):
        forward(q, lin, [1.0, 2.0])


def test_forward_matches_reference_evaluator():
    rng = np.random.default_rng(1)
    topo = NetworkTopology.mlp(3, (5, 4))
    for _ in range(20):
        p = random_params(topo, 1, rng)
        z = rng.normal(size=3)
        ref = reference_network(p.weights, p.biases, topo.activations, z)
        assert forward(p, topo, z)[0] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_glm_degeneracy_matches_logistic_evaluator():
    rng = np.random.default_rng(2)
    topo = NetworkTopology.linear(3)
    p = random_params(topo, 4, rng)
    Z = rng.normal(size=(50, 3))
    pidx = rng.integers(0, 4, 50)
    probs = expit(p.gamma[pidx] + forward_batch(p, topo, Z))
    direct = 1 / (1 + np.exp(-(p.gamma[pidx] + Z @ p.weights[0][0] + p.biases[0][0])))
    np.testing.assert_allclose(probs, direct, atol=1e-12)


def test_inference_scaling_equals_mask_expectation_linear():
    # for L = 0 the expected masked output is exactly the retention-scaled output
    topo = NetworkTopology.linear(3)
    p = random_params(topo, 1, np.random.default_rng(3))
    z = np.array([0.4, -1.2, 2.0])
    upsilon = 0.7
    expected = 0.0
    for bits in np.ndindex(2, 2, 2):
        mask = np.array(bits, dtype=bool)
        weight = np.prod(np.where(mask, upsilon, 1 - upsilon))
        expected += weight * forward(p, topo, z, [mask])[0]
    assert forward(p, topo, z, retention=upsilon)[0] == pytest.approx(expected, abs=1e-12)


def test_dropout_masks_sampled_per_layer():
    topo = NetworkTopology.mlp(3)
    assert sample_dropout_masks(topo, None, np.random.default_rng(0)) is None
    masks = sample_dropout_masks(topo, DropoutSpec(0.8), np.random.default_rng(0))
    assert [m.shape for m in masks] == [(3,), (32,), (16,)]
    with pytest.raises(ValueError):
        DropoutSpec(0.0)


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------


def test_loss_and_residual_values():
    loss, resid = loss_and_residual(OutcomeFamily("bernoulli"), 1.0, 0.0)
    assert loss == pytest.approx(math.log(2))
    assert resid == pytest.approx(0.5)
    loss, resid = loss_and_residual(OutcomeFamily("poisson"), 0.0, 0.0)
    assert (loss, resid) == (pytest.approx(1.0), pytest.approx(-1.0))
    loss, resid = loss_and_residual(OutcomeFamily("gaussian"), 2.0, 0.5)
    assert (loss, resid) == (pytest.approx(0.125 - 1.0), pytest.approx(1.5))
    with pytest.raises(FloatingPointError):
        loss_and_residual(OutcomeFamily("poisson"), 0.0, np.nan)


def test_bernoulli_loss_stable_at_large_predictor():
    fam = OutcomeFamily("bernoulli")
    loss, resid = loss_and_residual(fam, 1.0, 40.0)
    # log(1 + e^-40) evaluated through log1p
    assert loss == pytest.approx(math.log1p(math.exp(-40.0)), rel=1e-12)
    assert resid == pytest.approx(math.exp(-40.0) / (1 + math.exp(-40.0)), rel=1e-12)
    assert resid > 0.0
    loss0, resid0 = loss_and_residual(fam, 0.0, 800.0)
    assert math.isfinite(loss0) and loss0 == pytest.approx(800.0)
    assert resid0 == pytest.approx(-1.0)


@pytest.mark.parametrize("kind", FAMILIES)
def test_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 1000)
    topo = NetworkTopology.mlp(3, (6, 4))
    fam = OutcomeFamily(kind)
    for _ in range(5):
        p = random_params(topo, 3, rng, 0.4)
        z = rng.normal(size=3)
        y = random_outcome(kind, rng)
        i = int(rng.integers(3))
        grad = backward(p, topo, i, z, y, fam).flat

        def loss(theta):
            q = NetworkParams.from_flat(topo, 3, theta)
            return reference_loss(kind, y, q.gamma[i] + reference_network(q.weights, q.biases,
                                                                         topo.activations, z))

        fd = central_difference(loss, p.flat)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)


def test_backward_locality_and_masked_path():
    topo = NetworkTopology.mlp(3, (5, 4))
    p = random_params(topo, 4, np.random.default_rng(5))
    grad = backward(p, topo, 2, [0.1, 0.2, 0.3], 1.0, OutcomeFamily("bernoulli"))
    assert np.all(grad.gamma[[0, 1, 3]] == 0.0) and grad.gamma[2] != 0.0

    masks = [np.ones(3, bool), np.ones(5, bool), np.ones(4, bool)]
    masks[1][2] = False
    grad = backward(p, topo, 0, [0.1, 0.2, 0.3], 1.0, OutcomeFamily("bernoulli"), masks)
    # a dropped hidden node passes no gradient back to its incoming weights
    assert np.all(grad.weights[0][2] == 0.0) and grad.biases[0][2] == 0.0
    assert np.all(grad.weights[1][:, 2] == 0.0)


def test_zero_network_gamma_gradient():
    topo = NetworkTopology.mlp(3)
    p = init_params(topo, 1, 0)
    p.flat[:] = 0.0
    grad = backward(p, topo, 0, [0.0, 0.0, 0.0], 1.0, OutcomeFamily("bernoulli"))
    assert grad.gamma[0] == pytest.approx(-0.5)


def test_batch_gradient_is_mean_of_rows():
    rng = np.random.default_rng(6)
    topo = NetworkTopology.mlp(3, (5, 3))
    fam = OutcomeFamily("bernoulli")
    p = random_params(topo, 3, rng)
    Z = rng.normal(size=(12, 3))
    y = rng.integers(0, 2, 12).astype(float)
    pidx = np.sort(rng.integers(0, 3, 12))
    loss, grad = batch_loss_and_grad(p, topo, fam, y, Z, pidx)
    rows = [backward(p, topo, int(pidx[k]), Z[k], y[k], fam).flat for k in range(12)]
    np.testing.assert_allclose(grad, np.mean(rows, axis=0), atol=1e-14)
    per = per_observation_gradients(p, topo, fam, y, Z, pidx)
    sl = p.block_slices()
    np.testing.assert_allclose(per["w"], np.array(rows)[:, sl["w"]], atol=1e-14)
    np.testing.assert_allclose(per["b"], np.array(rows)[:, sl["b"]], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(omega=st.floats(-700, 700), y=st.sampled_from([0.0, 1.0]))
def test_bernoulli_loss_finite_and_nonnegative(omega, y):
    loss, resid = loss_and_residual(OutcomeFamily("bernoulli"), y, omega)
    assert math.isfinite(loss) and loss >= 0.0
    assert -1.0 <= resid <= 1.0
