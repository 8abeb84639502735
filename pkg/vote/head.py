"""
Action head

A four-stage residual MLP that decodes the hidden state of one <ACT>
token into a whole chunk of normalized actions:

    x1 = ReLU(LN1(x0) W1 + b1)
    x2 = x1 + ReLU(LN2(x1) W2 + b2)
    x3 = x2 + ReLU(LN3(x2) W3 + b3)
    a  = act(LN4(x3) W4 + b4)          act is ReLU, or identity for "linear"

Gradients are written out by hand and checked against central finite
differences. The module also holds the training losses and a toy trainer
that fits the head on a synthetic latent-task dataset.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import List, NamedTuple, Optional

import numpy as np

from vote import tensor_file
from vote.models import DataValidationError

logger = logging.getLogger(__name__)

STAGES = 4
DEFAULT_EPS = 1e-5
OUTPUT_ACTIVATIONS = ("relu", "linear")
FD_MAGNITUDE_FLOOR = 1e-3


class InvalidDims(DataValidationError):
    """A layer dimension is not a positive integer"""


class NonFiniteInput(DataValidationError):
    """An input contains NaN or Inf"""


class ShapeMismatch(DataValidationError):
    """Arrays that must agree in shape do not"""


class Diverged(DataValidationError):
    """Training produced a NaN or Inf loss"""


def _check_dims(**dims):
    for name, value in dims.items():
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
            raise InvalidDims(f"{name} must be a positive integer, got {value!r}")


def _check_finite(name: str, values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput(f"{name} contains NaN or Inf")


######################################################################
#  H E A D   P A R A M E T E R S
######################################################################
@dataclass
class HeadParams:
    """
    Weights, biases and layer-norm parameters of the four stages

    W1..W3 are H x H, W4 is H x (N * A). Every layer norm acts on width H.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    gains: List[np.ndarray]
    offsets: List[np.ndarray]
    chunk_size: int
    action_dim: int
    eps: float = DEFAULT_EPS
    output_activation: str = "relu"

    def __post_init__(self):
        self.validate()

    def __repr__(self):
        return (
            f"<HeadParams H=[{self.hidden}] N=[{self.chunk_size}] A=[{self.action_dim}] "
            f"act=[{self.output_activation}]>"
        )

    @property
    def hidden(self) -> int:
        """Hidden width H"""
        return int(self.weights[0].shape[0])

    @property
    def output_width(self) -> int:
        """N * A"""
        return self.chunk_size * self.action_dim

    @property
    def dtype(self):
        """Arithmetic type of the parameters"""
        return self.weights[0].dtype

    def validate(self):
        """Checks the stage shapes and that every tensor is finite"""
        _check_dims(N=self.chunk_size, A=self.action_dim)
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise DataValidationError(
                f"output_activation must be one of {OUTPUT_ACTIVATIONS}, got {self.output_activation!r}"
            )
        groups = (self.weights, self.biases, self.gains, self.offsets)
        if any(len(group) != STAGES for group in groups):
            raise ShapeMismatch(f"HeadParams needs {STAGES} tensors of each kind")
        hidden = self.weights[0].shape[0]
        widths = [hidden] * (STAGES - 1) + [self.output_width]
        for i, width in enumerate(widths):
            if self.weights[i].shape != (hidden, width):
                raise ShapeMismatch(f"W{i + 1} must be {hidden} x {width}, got {self.weights[i].shape}")
            if self.biases[i].shape != (width,):
                raise ShapeMismatch(f"b{i + 1} must have width {width}")
            if self.gains[i].shape != (hidden,) or self.offsets[i].shape != (hidden,):
                raise ShapeMismatch(f"LN{i + 1} parameters must have width {hidden}")
        for name, tensor in self.named_tensors().items():
            _check_finite(name, tensor)

    def arrays(self) -> list:
        """All parameter tensors in a fixed order (weights, biases, gains, offsets)"""
        return [*self.weights, *self.biases, *self.gains, *self.offsets]

    def named_tensors(self) -> dict:
        """Returns {name: tensor} in the order they are stored on disk"""
        named = {}
        for i in range(STAGES):
            named[f"W{i + 1}"] = self.weights[i]
            named[f"b{i + 1}"] = self.biases[i]
            named[f"ln{i + 1}.gain"] = self.gains[i]
            named[f"ln{i + 1}.offset"] = self.offsets[i]
        return named

    def astype(self, dtype) -> "HeadParams":
        """Returns a copy with every tensor cast to dtype"""
        def cast(group):
            return [np.array(t, dtype=dtype, copy=True) for t in group]

        return replace(
            self,
            weights=cast(self.weights),
            biases=cast(self.biases),
            gains=cast(self.gains),
            offsets=cast(self.offsets),
        )

    def copy(self) -> "HeadParams":
        """Returns a deep copy"""
        return self.astype(self.dtype)

    def manifest(self) -> dict:
        """Metadata written next to the tensors"""
        return {
            "H": self.hidden,
            "N": self.chunk_size,
            "A": self.action_dim,
            "eps": self.eps,
            "output_activation": self.output_activation,
        }

    def save(self, path):
        """Writes the parameters as a weights file"""
        return tensor_file.write_tensors(path, self.named_tensors(), self.manifest())

    @classmethod
    def load(cls, path) -> "HeadParams":
        """Reads a weights file"""
        manifest, tensors = tensor_file.read_tensors(path)
        try:
            params = cls(
                weights=[tensors[f"W{i + 1}"] for i in range(STAGES)],
                biases=[tensors[f"b{i + 1}"] for i in range(STAGES)],
                gains=[tensors[f"ln{i + 1}.gain"] for i in range(STAGES)],
                offsets=[tensors[f"ln{i + 1}.offset"] for i in range(STAGES)],
                chunk_size=int(manifest["N"]),
                action_dim=int(manifest["A"]),
                eps=float(manifest["eps"]),
                output_activation=manifest["output_activation"],
            )
        except KeyError as error:
            raise tensor_file.TensorFileError(
                "Invalid weights file: missing " + error.args[0]
            ) from error
        if params.hidden != int(manifest.get("H", params.hidden)):
            raise ShapeMismatch("Weights file H does not match W1")
        logger.info("Loaded %s from %s", params, path)
        return params


@dataclass
class HeadGradients:
    """Gradients of every HeadParams field and of the head input"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    gains: List[np.ndarray]
    offsets: List[np.ndarray]
    inputs: np.ndarray

    def arrays(self) -> list:
        """Parameter gradients in the same order as HeadParams.arrays()"""
        return [*self.weights, *self.biases, *self.gains, *self.offsets]


def init_params(
    hidden: int,
    chunk_size: int,
    action_dim: int,
    seed: int,
    eps: float = DEFAULT_EPS,
    output_activation: str = "relu",
    dtype=np.float32,
) -> HeadParams:
    """He-style initialisation: W ~ N(0, 2 / fan_in), b = 0, gain = 1, offset = 0"""
    _check_dims(H=hidden, N=chunk_size, A=action_dim)
    rng = np.random.default_rng(seed)
    scale = np.sqrt(2.0 / hidden)
    widths = [hidden] * (STAGES - 1) + [chunk_size * action_dim]
    weights = [rng.normal(0.0, scale, size=(hidden, width)).astype(dtype) for width in widths]
    return HeadParams(
        weights=weights,
        biases=[np.zeros(width, dtype=dtype) for width in widths],
        gains=[np.ones(hidden, dtype=dtype) for _ in range(STAGES)],
        offsets=[np.zeros(hidden, dtype=dtype) for _ in range(STAGES)],
        chunk_size=chunk_size,
        action_dim=action_dim,
        eps=eps,
        output_activation=output_activation,
    )


######################################################################
#  F O R W A R D   /   B A C K W A R D
######################################################################
def _layer_norm(x, gain, offset, eps):
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    return x_hat * gain + offset, x_hat, inv_std


def _layer_norm_backward(grad, x_hat, inv_std, gain):
    d_gain = np.sum(grad * x_hat, axis=0)
    d_offset = np.sum(grad, axis=0)
    g = grad * gain
    d_x = inv_std * (
        g - g.mean(axis=-1, keepdims=True) - x_hat * np.mean(g * x_hat, axis=-1, keepdims=True)
    )
    return d_x, d_gain, d_offset


class _Stage(NamedTuple):
    inputs: np.ndarray
    normed: np.ndarray
    x_hat: np.ndarray
    inv_std: np.ndarray
    pre: np.ndarray


def _as_batch(h_act, params: HeadParams) -> np.ndarray:
    x = np.asarray(h_act)
    if x.ndim not in (1, 2) or x.shape[-1] != params.hidden:
        raise ShapeMismatch(f"Head input must have width {params.hidden}, got shape {x.shape}")
    _check_finite("h_act", x)
    return np.atleast_2d(x).astype(params.dtype, copy=False)


def forward_batch(h_act, params: HeadParams, with_cache: bool = False):
    """
    Runs the head on a B x H batch and returns a B x (N * A) matrix

    Statistics and products accumulate in float64; the output has the
    parameter dtype. The cache keeps the float64 intermediates.
    """
    x = _as_batch(h_act, params).astype(np.float64)
    cache = []
    for i in range(STAGES):
        gain, offset, weight, bias = (
            t.astype(np.float64, copy=False)
            for t in (params.gains[i], params.offsets[i], params.weights[i], params.biases[i])
        )
        normed, x_hat, inv_std = _layer_norm(x, gain, offset, params.eps)
        pre = normed @ weight + bias
        cache.append(_Stage(x, normed, x_hat, inv_std, pre))
        if i == STAGES - 1:
            out = pre if params.output_activation == "linear" else np.maximum(pre, 0)
        elif i == 0:
            x = np.maximum(pre, 0)
        else:
            x = x + np.maximum(pre, 0)
    out = out.astype(params.dtype, copy=False)
    return (out, cache) if with_cache else out


def head_forward(h_act, params: HeadParams) -> np.ndarray:
    """Decodes one <ACT> hidden vector into an N x A normalized chunk"""
    if np.ndim(h_act) != 1:
        raise ShapeMismatch("head_forward takes a single hidden vector; use forward_batch")
    out = forward_batch(h_act, params)
    return out.reshape(params.chunk_size, params.action_dim)


def _backward(cache: list, params: HeadParams, grad_out: np.ndarray) -> HeadGradients:
    d_weights = [None] * STAGES
    d_biases = [None] * STAGES
    d_gains = [None] * STAGES
    d_offsets = [None] * STAGES
    d_x = None
    for i in reversed(range(STAGES)):
        stage = cache[i]
        if i == STAGES - 1:
            d_pre = grad_out if params.output_activation == "linear" else grad_out * (stage.pre > 0)
        else:
            d_pre = d_x * (stage.pre > 0)
        d_weights[i] = stage.normed.T @ d_pre
        d_biases[i] = np.sum(d_pre, axis=0)
        d_normed = d_pre @ params.weights[i].T
        d_in, d_gains[i], d_offsets[i] = _layer_norm_backward(
            d_normed, stage.x_hat, stage.inv_std, params.gains[i]
        )
        # stages 2 and 3 also pass the gradient through the skip connection
        d_x = d_in if i in (0, STAGES - 1) else d_x + d_in

    def cast(group):
        return [g.astype(params.dtype, copy=False) for g in group]

    return HeadGradients(cast(d_weights), cast(d_biases), cast(d_gains), cast(d_offsets),
                         d_x.astype(params.dtype, copy=False))


def head_backward(h_act, params: HeadParams, grad_output) -> HeadGradients:
    """
    Analytic gradients of sum(forward(h_act) * grad_output)

    h_act may be a single H-vector or a B x H batch; grad_output must have
    the shape of the forward output (N x A, or B x N x A / B x N*A).
    """
    x = _as_batch(h_act, params)
    grad = np.asarray(grad_output, dtype=params.dtype)
    _check_finite("grad_output", grad)
    if grad.size != x.shape[0] * params.output_width:
        raise ShapeMismatch(
            f"grad_output has {grad.size} entries, expected {x.shape[0] * params.output_width}"
        )
    _, cache = forward_batch(x, params, with_cache=True)
    grads = _backward(cache, params, grad.reshape(x.shape[0], params.output_width))
    if np.ndim(h_act) == 1:
        grads.inputs = grads.inputs[0]
    return grads


def finite_difference_check(params: HeadParams, h_act, grad_output, step: float = 1e-5) -> float:
    """
    Largest relative error between analytic and central-difference gradients

    Runs in 64-bit arithmetic over every parameter entry and every input
    entry. Gradients smaller than FD_MAGNITUDE_FLOOR are compared against
    the floor instead of their own magnitude.
    """
    params = params.astype(np.float64)
    h = np.array(h_act, dtype=np.float64, copy=True)
    grad_output = np.asarray(grad_output, dtype=np.float64)
    analytic = head_backward(h, params, grad_output)

    def objective():
        return float(np.sum(forward_batch(h, params).reshape(grad_output.shape) * grad_output))

    worst = 0.0
    targets = list(zip(params.arrays(), analytic.arrays())) + [(h, analytic.inputs)]
    for tensor, exact in targets:
        flat = tensor.reshape(-1)
        exact = exact.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + step
            plus = objective()
            flat[j] = saved - step
            minus = objective()
            flat[j] = saved
            numeric = (plus - minus) / (2.0 * step)
            scale = max(abs(exact[j]), abs(numeric), FD_MAGNITUDE_FLOOR)
            worst = max(worst, abs(exact[j] - numeric) / scale)
    return worst


######################################################################
#  L O S S E S
######################################################################
def _chunk_batch(values) -> np.ndarray:
    if isinstance(values, (list, tuple)) and values and hasattr(values[0], "as_array"):
        return np.stack([chunk.as_array() for chunk in values])
    return np.asarray(values, dtype=np.float64)


def l1_action_loss(pred, target) -> float:
    """Mean absolute error over all B * N * A entries"""
    pred = _chunk_batch(pred)
    target = _chunk_batch(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} and target {target.shape} differ")
    return float(np.mean(np.abs(pred - target)))


def l1_action_grad(pred, target) -> np.ndarray:
    """Gradient of l1_action_loss with respect to pred"""
    pred = np.asarray(pred)
    return np.sign(pred - target) / pred.size


@dataclass
class TokenTarget:
    """
    Supervised token positions for the token loss

    targets: L token ids (instruction tokens then the <ACT> id)
    logits: L x V predicted logits
    """

    targets: np.ndarray
    logits: np.ndarray
    act_id: int

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.logits.shape[0] != self.targets.shape[0]:
            raise ShapeMismatch(
                f"logits {self.logits.shape} must have one row per target ({self.targets.shape[0]})"
            )
        vocab = self.logits.shape[1]
        if not 0 <= self.act_id < vocab:
            raise ShapeMismatch(f"<ACT> id {self.act_id} is outside a vocabulary of {vocab}")
        if np.any(self.targets < 0) or np.any(self.targets >= vocab):
            raise ShapeMismatch("target ids must lie inside the vocabulary")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def token_ce_loss(t: TokenTarget) -> float:
    """Mean cross-entropy over all supervised positions"""
    log_probs = _log_softmax(t.logits)
    return float(-np.mean(log_probs[np.arange(t.targets.size), t.targets]))


def token_ce_grad(t: TokenTarget) -> np.ndarray:
    """Gradient of token_ce_loss with respect to the logits"""
    probs = np.exp(_log_softmax(t.logits))
    probs[np.arange(t.targets.size), t.targets] -= 1.0
    return probs / t.targets.size


@dataclass(frozen=True)
class LossWeights:
    """Weights of the token and action terms of the total loss"""

    lambda_token: float = 0.01
    lambda_action: float = 0.99

    def __post_init__(self):
        if self.lambda_token < 0 or self.lambda_action < 0:
            raise DataValidationError("Loss weights must be non-negative")
        if self.lambda_token + self.lambda_action <= 0:
            raise DataValidationError("Loss weights must not both be zero")


def total_loss(t: TokenTarget, pred, target, w: LossWeights = LossWeights()) -> float:
    """lambda_token * CE + lambda_action * L1"""
    return w.lambda_token * token_ce_loss(t) + w.lambda_action * l1_action_loss(pred, target)


######################################################################
#  P A R A M E T E R   C O U N T S
######################################################################
def head_param_count(hidden: int, chunk_size: int, action_dim: int) -> int:
    """Exact number of scalars in HeadParams"""
    _check_dims(H=hidden, N=chunk_size, A=action_dim)
    width = chunk_size * action_dim
    linear = (STAGES - 1) * (hidden * hidden + hidden) + hidden * width + width
    return linear + STAGES * 2 * hidden


def oft_first_layer_count(hidden: int, action_dim: int) -> int:
    """First-layer weights of a head fed the concatenation of D token states"""
    _check_dims(H=hidden, D=action_dim)
    return (hidden * action_dim) * hidden


def oft_head_param_count(hidden: int, action_dim: int) -> int:
    """Concatenated-input head: (H*D) -> H first layer, same body, D outputs"""
    _check_dims(H=hidden, D=action_dim)
    wide = hidden * action_dim
    first = wide * hidden + hidden + 2 * wide
    body = (STAGES - 2) * (hidden * hidden + hidden + 2 * hidden)
    last = hidden * action_dim + action_dim + 2 * hidden
    return first + body + last


def output_width_delta(hidden: int, chunk_size: int, action_dim: int) -> int:
    """Extra final-layer weights for N * A outputs instead of A"""
    _check_dims(H=hidden, N=chunk_size, A=action_dim)
    return hidden * (chunk_size * action_dim - action_dim)


######################################################################
#  T O Y   T R A I N I N G
######################################################################
@dataclass
class ToyTrainConfig:
    """Settings of the synthetic-task trainer"""

    hidden: int = 64
    chunk_size: int = 8
    action_dim: int = 7
    samples: int = 5000
    latent_dim: int = 6
    vocab: int = 16
    instruction_len: int = 4
    seed: int = 0
    steps: int = 20000
    batch_size: int = 0
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_step: int = 0
    lr_decay_factor: float = 0.1
    l1_threshold: float = 0.04
    lambda_token: float = 0.01
    lambda_action: float = 0.99
    output_activation: str = "relu"
    eps: float = DEFAULT_EPS
    init_output_bias: bool = True
    log_every: int = 500

    def __post_init__(self):
        _check_dims(
            H=self.hidden, N=self.chunk_size, A=self.action_dim, samples=self.samples,
            latent_dim=self.latent_dim, instruction_len=self.instruction_len, steps=self.steps,
        )
        if self.vocab < 2:
            raise InvalidDims("vocab needs at least one instruction token and <ACT>")
        if self.batch_size < 0 or self.lr < 0 or self.lr_decay_step < 0:
            raise DataValidationError("batch_size, lr and lr_decay_step must be non-negative")

    @property
    def weights(self) -> LossWeights:
        """Loss weights as a LossWeights value"""
        return LossWeights(self.lambda_token, self.lambda_action)

    def serialize(self) -> dict:
        """Serializes the config into a dictionary"""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def deserialize(cls, data: dict) -> "ToyTrainConfig":
        """Builds a config from a dictionary, rejecting unknown keys"""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise DataValidationError(f"Invalid train config: unknown keys {unknown}")
        try:
            return cls(**data)
        except TypeError as error:
            raise DataValidationError("Invalid train config: " + str(error)) from error


class TraceRow(NamedTuple):
    """One row of the loss trace"""

    step: int
    l1: float
    ce: float
    total: float


@dataclass
class ToyTask:
    """
    Synthetic dataset

    Hidden states are a fixed random linear map of latent task vectors on the
    unit sphere; targets are a smooth function of the latent inside (0, 1);
    instruction tokens are read off the latent and followed by <ACT>.
    """

    hidden_states: np.ndarray
    targets: np.ndarray
    token_targets: np.ndarray
    token_inputs: np.ndarray
    act_id: int

    @classmethod
    def build(cls, config: ToyTrainConfig, rng: np.random.Generator) -> "ToyTask":
        """Samples the dataset for a config"""
        width = config.chunk_size * config.action_dim
        latent = rng.normal(size=(config.samples, config.latent_dim))
        latent /= np.linalg.norm(latent, axis=1, keepdims=True)
        mixing = rng.normal(0.0, 1.0 / np.sqrt(config.latent_dim), size=(config.latent_dim, config.hidden))
        readout = rng.normal(size=(config.latent_dim, width))
        shift = rng.normal(0.0, 0.5, size=width)
        targets = 0.5 + 0.3 * np.tanh(latent @ readout + shift)
        act_id = config.vocab - 1
        projections = rng.normal(size=(config.instruction_len, config.latent_dim, act_id))
        words = np.argmax(np.einsum("sd,ldv->slv", latent, projections), axis=-1)
        token_targets = np.concatenate([words, np.full((config.samples, 1), act_id)], axis=1)
        bos = np.full((config.samples, 1), config.vocab)
        token_inputs = np.concatenate([bos, words], axis=1)
        return cls(
            hidden_states=(latent @ mixing).astype(np.float32),
            targets=targets.reshape(config.samples, config.chunk_size, config.action_dim),
            token_targets=token_targets,
            token_inputs=token_inputs,
            act_id=act_id,
        )


@dataclass
class TokenClassifier:
    """Linear next-token classifier over token and position embeddings"""

    embeddings: np.ndarray
    positions: np.ndarray
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, config: ToyTrainConfig, rng: np.random.Generator) -> "TokenClassifier":
        """Fixed random embeddings (with a BOS row) and a zero classifier"""
        positions = config.instruction_len + 1
        return cls(
            embeddings=rng.normal(size=(config.vocab + 1, config.hidden)),
            positions=rng.normal(size=(positions, config.hidden)),
            weight=np.zeros((config.hidden, config.vocab)),
            bias=np.zeros(config.vocab),
        )

    def features(self, token_inputs: np.ndarray) -> np.ndarray:
        """B x L x H inputs for each supervised position"""
        return self.embeddings[token_inputs] + self.positions[np.arange(token_inputs.shape[1])]

    def logits(self, features: np.ndarray) -> np.ndarray:
        """B x L x V logits"""
        return features @ self.weight + self.bias

    def arrays(self) -> list:
        """Trainable tensors"""
        return [self.weight, self.bias]


class Adam:
    """Adam first/second-moment updates applied in place"""

    def __init__(self, arrays: list, beta1: float, beta2: float, eps: float):
        self.arrays = arrays
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.count = 0
        self.first = [np.zeros_like(a) for a in arrays]
        self.second = [np.zeros_like(a) for a in arrays]

    def step(self, grads: list, lr: float):
        """Applies one update with learning rate lr"""
        self.count += 1
        correction1 = 1.0 - self.beta1 ** self.count
        correction2 = 1.0 - self.beta2 ** self.count
        for array, grad, first, second in zip(self.arrays, grads, self.first, self.second):
            first *= self.beta1
            first += (1.0 - self.beta1) * grad
            second *= self.beta2
            second += (1.0 - self.beta2) * grad * grad
            update = lr * (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            array -= update.astype(array.dtype, copy=False)


@dataclass
class TrainResult:
    """Outcome of train_toy"""

    params: HeadParams
    classifier: TokenClassifier
    trace: List[TraceRow] = field(default_factory=list)
    converged: bool = False

    @property
    def final_l1(self) -> Optional[float]:
        """Action L1 of the last recorded step"""
        return self.trace[-1].l1 if self.trace else None


def _learning_rate(config: ToyTrainConfig, step: int) -> float:
    if config.lr_decay_step and step >= config.lr_decay_step:
        return config.lr * config.lr_decay_factor
    return config.lr


def train_toy(config: ToyTrainConfig) -> TrainResult:
    """
    Fits the head and a token classifier on the synthetic task

    batch_size 0 trains on the full dataset every step. Stops as soon as
    the action L1 of a step drops below l1_threshold, or when the step
    budget is exhausted.
    """
    head_seed, task_seed, token_seed, batch_seed = np.random.SeedSequence(config.seed).spawn(4)
    params = init_params(
        config.hidden, config.chunk_size, config.action_dim,
        seed=head_seed, eps=config.eps, output_activation=config.output_activation,
    )
    task = ToyTask.build(config, np.random.default_rng(task_seed))
    classifier = TokenClassifier.init(config, np.random.default_rng(token_seed))
    batches = np.random.default_rng(batch_seed)
    if config.init_output_bias:
        params.biases[-1][:] = task.targets.reshape(config.samples, -1).mean(axis=0)
    weights = config.weights
    head_opt = Adam(params.arrays(), config.beta1, config.beta2, config.adam_eps)
    token_opt = Adam(classifier.arrays(), config.beta1, config.beta2, config.adam_eps)
    result = TrainResult(params, classifier)
    logger.info("Training toy head %s for up to %d steps", params, config.steps)

    for step in range(1, config.steps + 1):
        if config.batch_size and config.batch_size < config.samples:
            index = batches.choice(config.samples, size=config.batch_size, replace=False)
        else:
            index = slice(None)
        out, cache = forward_batch(task.hidden_states[index], params, with_cache=True)
        pred = out.reshape(-1, config.chunk_size, config.action_dim)
        target = task.targets[index]
        features = classifier.features(task.token_inputs[index])
        logits = classifier.logits(features)
        tokens = TokenTarget(
            task.token_targets[index].reshape(-1), logits.reshape(-1, config.vocab), task.act_id
        )
        l1 = l1_action_loss(pred, target)
        ce = token_ce_loss(tokens)
        total = weights.lambda_token * ce + weights.lambda_action * l1
        result.trace.append(TraceRow(step, l1, ce, total))
        if not np.isfinite(total):
            raise Diverged(f"Loss became {total} at step {step}")
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d: l1=%.5f ce=%.5f total=%.5f", step, l1, ce, total)
        if l1 < config.l1_threshold:
            result.converged = True
            logger.info("Converged at step %d with l1=%.5f", step, l1)
            break

        d_out = weights.lambda_action * l1_action_grad(pred, target)
        head_grads = _backward(cache, params, d_out.reshape(out.shape).astype(params.dtype))
        d_logits = weights.lambda_token * token_ce_grad(tokens)
        flat_features = features.reshape(-1, config.hidden)
        token_grads = [flat_features.T @ d_logits, np.sum(d_logits, axis=0)]
        lr = _learning_rate(config, step)
        head_opt.step(head_grads.arrays(), lr)
        token_opt.step(token_grads, lr)

    if not result.converged:
        logger.warning("No convergence after %d steps (l1=%.5f)", config.steps, result.final_l1)
    return result
