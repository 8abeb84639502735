"""
Test cases for the action head

Test cases can be run with:
    nosetests tests/test_head.py
"""
import logging
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from vote import app
from vote.head import (
    Diverged,
    HeadParams,
    InvalidDims,
    LossWeights,
    NonFiniteInput,
    ShapeMismatch,
    TokenTarget,
    ToyTrainConfig,
    finite_difference_check,
    forward_batch,
    head_backward,
    head_forward,
    head_param_count,
    init_params,
    l1_action_grad,
    l1_action_loss,
    oft_first_layer_count,
    oft_head_param_count,
    output_width_delta,
    token_ce_grad,
    token_ce_loss,
    total_loss,
    train_toy,
)
from vote.models import DataValidationError
from tests.factories import ActionChunkFactory


def random_params(rng, hidden, chunk, action=7, activation="relu", dtype=np.float32):
    """Head with random layer-norm parameters and biases"""
    params = init_params(hidden, chunk, action, seed=int(rng.integers(1 << 30)),
                         output_activation=activation, dtype=dtype)
    for group in (params.biases, params.offsets):
        for tensor in group:
            tensor[:] = rng.normal(0.0, 0.1, size=tensor.shape)
    for tensor in params.gains:
        tensor[:] = rng.uniform(0.5, 1.5, size=tensor.shape)
    return params


def loop_forward(h, params: HeadParams) -> list:
    """Naive per-scalar forward pass"""
    x = [float(v) for v in h]
    hidden = len(x)
    out = []
    for stage in range(4):
        mean = sum(x) / hidden
        var = sum((v - mean) ** 2 for v in x) / hidden
        inv = 1.0 / math.sqrt(var + params.eps)
        normed = [
            (x[j] - mean) * inv * float(params.gains[stage][j]) + float(params.offsets[stage][j])
            for j in range(hidden)
        ]
        weight = params.weights[stage]
        width = weight.shape[1]
        pre = []
        for k in range(width):
            total = float(params.biases[stage][k])
            for j in range(hidden):
                total += normed[j] * float(weight[j, k])
            pre.append(total)
        if stage == 0:
            x = [max(v, 0.0) for v in pre]
        elif stage < 3:
            x = [x[k] + max(pre[k], 0.0) for k in range(hidden)]
        else:
            out = pre if params.output_activation == "linear" else [max(v, 0.0) for v in pre]
    return out


######################################################################
#  F O R W A R D   T E S T   C A S E S
######################################################################
class TestHeadForward(unittest.TestCase):
    """Test Cases for the head forward pass"""

    @classmethod
    def setUpClass(cls):
        """This runs once before the entire test suite"""
        app.config["TESTING"] = True
        app.logger.setLevel(logging.CRITICAL)

    def test_output_shape(self):
        """It should turn one hidden vector into an N x A chunk"""
        params = init_params(32, 8, 7, seed=0)
        out = head_forward(np.ones(32), params)
        self.assertEqual(out.shape, (8, 7))
        self.assertEqual(out.dtype, np.float32)
        self.assertTrue(np.all(out >= 0))

    def test_matches_loop_oracle(self):
        """It should match the naive loop oracle on 100 random 32-bit instances"""
        rng = np.random.default_rng(0)
        for _ in range(100):
            hidden = int(rng.integers(2, 65))
            chunk = int(rng.integers(1, 17))
            activation = "relu" if rng.random() < 0.5 else "linear"
            params = random_params(rng, hidden, chunk, activation=activation)
            h = rng.normal(size=hidden).astype(np.float32)
            expected = np.array(loop_forward(h, params)).reshape(chunk, 7)
            out = head_forward(h, params)
            self.assertEqual(out.dtype, np.float32)
            np.testing.assert_allclose(out, expected, atol=1e-6, rtol=0)

    def test_nonnegative_under_relu(self):
        """It should never emit a negative entry with the ReLU output"""
        rng = np.random.default_rng(5)
        for _ in range(50):
            params = random_params(rng, int(rng.integers(2, 33)), int(rng.integers(1, 9)))
            out = forward_batch(rng.normal(0.0, 3.0, size=(4, params.hidden)), params)
            self.assertTrue(np.all(out >= 0))

    def test_residual_identity(self):
        """It should pass x1 through unchanged when stages 2 and 3 are zero"""
        rng = np.random.default_rng(6)
        params = random_params(rng, 16, 4)
        for i in (1, 2):
            params.weights[i][:] = 0.0
            params.biases[i][:] = 0.0
        _, cache = forward_batch(rng.normal(size=16), params, with_cache=True)
        # cache[i].inputs is the input to stage i + 1, so x1 is cache[1] and x3 is cache[3]
        np.testing.assert_array_equal(cache[3].inputs, cache[1].inputs)
        np.testing.assert_array_equal(cache[2].inputs, cache[1].inputs)

    def test_zero_output_layer(self):
        """It should emit all zeros when W4 and b4 are zero"""
        rng = np.random.default_rng(7)
        for activation in ("relu", "linear"):
            params = random_params(rng, 12, 3, activation=activation)
            params.weights[3][:] = 0.0
            params.biases[3][:] = 0.0
            np.testing.assert_array_equal(head_forward(rng.normal(size=12), params), np.zeros((3, 7)))

    def test_constant_input(self):
        """It should give x1 = ReLU(b1) for a constant input vector"""
        params = init_params(8, 2, 7, seed=3)
        params.biases[0][:] = np.random.default_rng(8).normal(size=8)
        outputs = []
        for c in (0.0, 2.5, -7.0):
            out, cache = forward_batch(np.full(8, c), params, with_cache=True)
            np.testing.assert_array_equal(cache[1].inputs[0], np.maximum(params.biases[0].astype(np.float64), 0.0))
            outputs.append(out)
        np.testing.assert_array_equal(outputs[0], outputs[1])
        np.testing.assert_array_equal(outputs[0], outputs[2])

    def test_init_weight_mean(self):
        """It should draw W1 with a mean within three standard errors of zero"""
        params = init_params(256, 8, 7, seed=0)
        w1 = params.weights[0].astype(np.float64)
        stderr = np.sqrt(2.0 / 256) / np.sqrt(w1.size)
        self.assertLess(abs(w1.mean()), 3 * stderr)
        self.assertAlmostEqual(w1.std(), np.sqrt(2.0 / 256), delta=0.01 * np.sqrt(2.0 / 256))

    def test_float32_tracks_float64(self):
        """It should agree with 64-bit arithmetic to 32-bit precision"""
        rng = np.random.default_rng(1)
        for _ in range(20):
            params = random_params(rng, 64, 16)
            h = rng.normal(size=64).astype(np.float32)
            low = head_forward(h, params)
            high = head_forward(h.astype(np.float64), params.astype(np.float64))
            np.testing.assert_allclose(low, high, rtol=1e-4, atol=1e-4)

    def test_batch_matches_single(self):
        """It should give the same rows for a batch as one by one"""
        rng = np.random.default_rng(2)
        params = random_params(rng, 16, 4, dtype=np.float64)
        batch = rng.normal(size=(5, 16))
        out = forward_batch(batch, params)
        for row, h in zip(out, batch):
            np.testing.assert_allclose(row, head_forward(h, params).reshape(-1), atol=1e-12)

    def test_input_errors(self):
        """It should reject inputs of the wrong width or with NaN"""
        params = init_params(8, 2, 7, seed=0)
        self.assertRaises(ShapeMismatch, head_forward, np.ones(9), params)
        self.assertRaises(ShapeMismatch, head_forward, np.ones((2, 8)), params)
        bad = np.ones(8)
        bad[3] = np.nan
        self.assertRaises(NonFiniteInput, head_forward, bad, params)

    def test_invalid_dims(self):
        """It should reject non-positive sizes"""
        self.assertRaises(InvalidDims, init_params, 0, 8, 7, seed=0)
        self.assertRaises(InvalidDims, init_params, 8, -1, 7, seed=0)
        self.assertRaises(InvalidDims, head_param_count, 8, 8, 0)

    def test_param_validation(self):
        """It should reject mis-shaped or non-finite parameters"""
        params = init_params(8, 2, 7, seed=0)
        weights = list(params.weights)
        weights[3] = np.zeros((8, 13), dtype=np.float32)
        self.assertRaises(ShapeMismatch, HeadParams, weights, params.biases, params.gains, params.offsets, 2, 7)
        gains = [g.copy() for g in params.gains]
        gains[0][0] = np.inf
        self.assertRaises(NonFiniteInput, HeadParams, params.weights, params.biases, gains, params.offsets, 2, 7)
        self.assertRaises(DataValidationError, HeadParams, params.weights, params.biases, params.gains,
                          params.offsets, 2, 7, output_activation="tanh")

    def test_deterministic_init(self):
        """It should draw the same parameters for the same seed"""
        first = init_params(16, 4, 7, seed=5)
        second = init_params(16, 4, 7, seed=5)
        for a, b in zip(first.arrays(), second.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_save_and_load(self):
        """It should write a weights file that reads back losslessly"""
        params = random_params(np.random.default_rng(4), 16, 8, activation="linear")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "head.bin"
            params.save(path)
            loaded = HeadParams.load(path)
        self.assertEqual(loaded.output_activation, "linear")
        self.assertEqual((loaded.hidden, loaded.chunk_size, loaded.action_dim), (16, 8, 7))
        for a, b in zip(params.arrays(), loaded.arrays()):
            np.testing.assert_array_equal(a, b)


######################################################################
#  G R A D I E N T   T E S T   C A S E S
######################################################################
class TestHeadGradients(unittest.TestCase):
    """Test Cases for the hand-written backward pass"""

    def test_finite_differences(self):
        """It should match central differences on every parameter and the input"""
        rng = np.random.default_rng(10)
        for trial in range(10):
            hidden = int(rng.integers(3, 13))
            chunk = int(rng.integers(1, 4))
            activation = "linear" if trial % 2 else "relu"
            params = random_params(rng, hidden, chunk, activation=activation, dtype=np.float64)
            h = rng.normal(size=hidden)
            grad_output = rng.normal(size=(chunk, 7))
            self.assertLess(finite_difference_check(params, h, grad_output, step=1e-5), 1e-4)

    def test_batched_gradients(self):
        """It should sum parameter gradients over a batch"""
        rng = np.random.default_rng(11)
        params = random_params(rng, 6, 2, dtype=np.float64)
        batch = rng.normal(size=(3, 6))
        grad_output = rng.normal(size=(3, 14))
        total = head_backward(batch, params, grad_output)
        parts = [head_backward(h, params, g.reshape(2, 7)) for h, g in zip(batch, grad_output)]
        for i, tensor in enumerate(total.arrays()):
            np.testing.assert_allclose(tensor, sum(p.arrays()[i] for p in parts), atol=1e-12)
        self.assertEqual(total.inputs.shape, (3, 6))
        self.assertEqual(parts[0].inputs.shape, (6,))

    def test_zero_output_gradient(self):
        """It should return all-zero gradients for a zero output gradient"""
        rng = np.random.default_rng(13)
        params = random_params(rng, 8, 2)
        grads = head_backward(rng.normal(size=8), params, np.zeros((2, 7)))
        for tensor in grads.arrays() + [grads.inputs]:
            self.assertFalse(np.any(tensor))

    def test_inactive_unit(self):
        """It should give an inactive first-stage unit no incoming-weight gradient"""
        rng = np.random.default_rng(14)
        params = random_params(rng, 8, 2, dtype=np.float64)
        params.biases[0][3] = -100.0
        h = rng.normal(size=8)
        _, cache = forward_batch(h, params, with_cache=True)
        self.assertLess(cache[0].pre[0, 3], 0.0)
        grads = head_backward(h, params, rng.normal(size=(2, 7)))
        self.assertFalse(np.any(grads.weights[0][:, 3]))
        self.assertEqual(grads.biases[0][3], 0.0)
        self.assertTrue(np.any(grads.weights[0]))

    def test_gradient_shape_errors(self):
        """It should reject output gradients of the wrong size"""
        params = init_params(6, 2, 7, seed=0)
        self.assertRaises(ShapeMismatch, head_backward, np.ones(6), params, np.ones((2, 6)))


######################################################################
#  L O S S   T E S T   C A S E S
######################################################################
class TestLosses(unittest.TestCase):
    """Test Cases for the training losses"""

    def test_l1_loss(self):
        """It should average absolute errors over chunks"""
        pred = np.zeros((2, 3, 7))
        target = np.full((2, 3, 7), 0.5)
        self.assertEqual(l1_action_loss(pred, target), 0.5)
        chunks = [ActionChunkFactory(), ActionChunkFactory()]
        self.assertEqual(l1_action_loss(chunks, chunks), 0.0)
        self.assertRaises(ShapeMismatch, l1_action_loss, np.zeros((2, 7)), np.zeros((3, 7)))

    def test_l1_grad(self):
        """It should be sign(pred - target) / size"""
        pred = np.array([[0.2, 0.8]])
        target = np.array([[0.5, 0.5]])
        np.testing.assert_array_equal(l1_action_grad(pred, target), [[-0.5, 0.5]])

    def test_uniform_cross_entropy(self):
        """It should give log(V) for uniform logits"""
        target = TokenTarget([1, 2, 3], np.zeros((3, 8)), act_id=7)
        self.assertAlmostEqual(token_ce_loss(target), math.log(8), places=12)

    def test_cross_entropy_gradient(self):
        """It should match central differences of the token loss"""
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(4, 6))
        target = TokenTarget([0, 5, 2, 5], logits, act_id=5)
        analytic = token_ce_grad(target)
        step = 1e-6
        for i in range(4):
            for j in range(6):
                plus = logits.copy()
                plus[i, j] += step
                minus = logits.copy()
                minus[i, j] -= step
                numeric = (token_ce_loss(TokenTarget([0, 5, 2, 5], plus, 5))
                           - token_ce_loss(TokenTarget([0, 5, 2, 5], minus, 5))) / (2 * step)
                self.assertAlmostEqual(analytic[i, j], numeric, places=7)

    def test_token_target_validation(self):
        """It should reject ids outside the vocabulary"""
        self.assertRaises(ShapeMismatch, TokenTarget, [9], np.zeros((1, 8)), 7)
        self.assertRaises(ShapeMismatch, TokenTarget, [1], np.zeros((1, 8)), 8)
        self.assertRaises(ShapeMismatch, TokenTarget, [1, 2], np.zeros((1, 8)), 7)

    def test_total_loss(self):
        """It should weight the token and action terms"""
        tokens = TokenTarget([1], np.zeros((1, 4)), act_id=3)
        pred = np.zeros((1, 2, 7))
        target = np.ones((1, 2, 7))
        self.assertAlmostEqual(total_loss(tokens, pred, target), 0.01 * math.log(4) + 0.99, places=12)
        weights = LossWeights(0.5, 0.5)
        self.assertAlmostEqual(total_loss(tokens, pred, target, weights), 0.5 * math.log(4) + 0.5, places=12)
        self.assertRaises(DataValidationError, LossWeights, -0.1, 1.0)
        self.assertRaises(DataValidationError, LossWeights, 0.0, 0.0)

    def test_total_loss_reference_value(self):
        """It should give 0.05346 for CE = ln 4 and L1 = 0.04"""
        tokens = TokenTarget([0, 3], np.zeros((2, 4)), act_id=3)
        pred = np.zeros((1, 8, 7))
        target = np.full((1, 8, 7), 0.04)
        self.assertAlmostEqual(token_ce_loss(tokens), math.log(4), places=12)
        self.assertAlmostEqual(total_loss(tokens, pred, target), 0.05346, places=5)

    def test_action_only_ignores_logits(self):
        """It should not depend on the logits when lambda_token is 0"""
        rng = np.random.default_rng(15)
        pred = rng.uniform(size=(2, 4, 7))
        target = rng.uniform(size=(2, 4, 7))
        weights = LossWeights(0.0, 1.0)
        values = {
            total_loss(TokenTarget([1, 2, 0], rng.normal(0.0, 5.0, size=(3, 5)), act_id=4), pred, target, weights)
            for _ in range(5)
        }
        self.assertEqual(len(values), 1)
        self.assertEqual(values.pop(), l1_action_loss(pred, target))


######################################################################
#  P A R A M E T E R   C O U N T   T E S T   C A S E S
######################################################################
class TestParameterCounts(unittest.TestCase):
    """Test Cases for the computation-saving arithmetic"""

    def test_concatenated_first_layer(self):
        """It should count 117,440,512 first-layer weights at H=4096, D=7"""
        self.assertEqual(oft_first_layer_count(4096, 7), 117_440_512)

    def test_output_width_delta(self):
        """It should count 200,704 extra weights going from 7 to 56 outputs"""
        self.assertEqual(output_width_delta(4096, 8, 7), 200_704)

    def test_head_param_count(self):
        """It should equal the number of scalars in HeadParams"""
        for hidden, chunk, action in ((4, 1, 1), (16, 8, 7), (64, 16, 7)):
            params = init_params(hidden, chunk, action, seed=0)
            self.assertEqual(head_param_count(hidden, chunk, action), sum(a.size for a in params.arrays()))

    def test_concatenated_head_count(self):
        """It should count the concatenated-input head stage by stage"""
        # H=2, D=3: (12 + 2 + 12) + 2 * (4 + 2 + 4) + (6 + 3 + 4)
        self.assertEqual(oft_head_param_count(2, 3), 59)
        self.assertGreater(oft_head_param_count(4096, 7), head_param_count(4096, 8, 7))


######################################################################
#  T R A I N I N G   T E S T   C A S E S
######################################################################
class TestToyTraining(unittest.TestCase):
    """Test Cases for the toy trainer"""

    def test_default_config_converges(self):
        """It should reach action L1 below 0.04 with the default config"""
        result = train_toy(ToyTrainConfig())
        self.assertTrue(result.converged)
        self.assertLess(result.final_l1, 0.04)
        self.assertLessEqual(len(result.trace), ToyTrainConfig().steps)

    def test_single_step_does_not_converge(self):
        """It should stop after one step without converging"""
        result = train_toy(ToyTrainConfig(steps=1, samples=200))
        self.assertFalse(result.converged)
        self.assertEqual(len(result.trace), 1)

    def test_zero_learning_rate(self):
        """It should keep every loss constant when lr is 0"""
        result = train_toy(ToyTrainConfig(steps=5, samples=200, lr=0.0))
        totals = {row.total for row in result.trace}
        self.assertEqual(len(totals), 1)
        self.assertFalse(result.converged)

    def test_deterministic(self):
        """It should produce the same trace twice under one seed"""
        config = ToyTrainConfig(steps=20, samples=300, seed=3)
        self.assertEqual(train_toy(config).trace, train_toy(config).trace)

    def test_minibatches_and_decay(self):
        """It should train on minibatches with a decayed learning rate"""
        config = ToyTrainConfig(steps=30, samples=300, batch_size=64, lr_decay_step=10)
        result = train_toy(config)
        self.assertEqual(len(result.trace), 30)
        self.assertTrue(all(math.isfinite(row.total) for row in result.trace))
        self.assertFalse(result.converged)

    def test_divergence(self):
        """It should raise Diverged when the loss stops being finite"""
        with np.errstate(all="ignore"):
            self.assertRaises(Diverged, train_toy, ToyTrainConfig(steps=5, samples=200, lr=1e38))

    def test_config_round_trip(self):
        """It should Serialize and Deserialize the trainer config"""
        config = ToyTrainConfig(steps=7, lr=0.01)
        self.assertEqual(ToyTrainConfig.deserialize(config.serialize()), config)
        self.assertRaises(DataValidationError, ToyTrainConfig.deserialize, {"learning_rate": 1.0})
        self.assertRaises(InvalidDims, ToyTrainConfig, steps=0)
