"""
Policy

The contract between a backbone and the action head: the backbone turns
(observation, instruction) into a hidden-state sequence whose tail holds
one or more <ACT> positions; the head decodes each <ACT> state into N
actions. Decoder forward passes are counted so the single-token scheme can
be compared with per-dimension autoregressive decoding.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Protocol

import numpy as np

from vote import tensor_file
from vote.head import HeadParams, InvalidDims, ShapeMismatch, _check_dims, _check_finite, head_forward
from vote.models import (
    ACTION_DIM,
    CONTINUOUS_DIMS,
    ActionChunk,
    DataValidationError,
    NormalizationStats,
    denormalize_array,
)

logger = logging.getLogger(__name__)

MAX_ACT_TOKENS = 64
REPLAY_PREFIX = "h_act/"


class NoActToken(DataValidationError):
    """The hidden sequence has no <ACT> position"""


@dataclass
class PassCounter:
    """Number of sequential decoder forward passes in one episode"""

    decoder_forward_passes: int = 0

    def increment(self, passes: int = 1):
        """Adds passes; the count never decreases"""
        if passes < 0:
            raise DataValidationError("A pass counter can only move forward")
        self.decoder_forward_passes += passes


@dataclass
class HiddenSequence:
    """L x H hidden states and the mask of <ACT> positions"""

    states: np.ndarray
    act_mask: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states)
        self.act_mask = np.asarray(self.act_mask, dtype=bool).reshape(-1)
        if self.states.ndim != 2:
            raise ShapeMismatch(f"Hidden states must be L x H, got {self.states.shape}")
        if self.act_mask.shape[0] != self.states.shape[0]:
            raise ShapeMismatch(
                f"Mask length {self.act_mask.shape[0]} differs from sequence length {self.states.shape[0]}"
            )

    def __len__(self):
        return self.states.shape[0]

    @property
    def hidden(self) -> int:
        """Hidden width H"""
        return self.states.shape[1]


def extract_act_hidden(seq: HiddenSequence) -> List[np.ndarray]:
    """Returns the hidden vectors at <ACT> positions, in sequence order"""
    positions = np.flatnonzero(seq.act_mask)
    if positions.size == 0:
        raise NoActToken("The hidden sequence contains no <ACT> token")
    return [seq.states[i] for i in positions]


class Backbone(Protocol):
    """Anything that can produce a hidden sequence with <ACT> positions"""

    hidden: int

    def encode(self, obs, instr, tokens: int, counter: PassCounter, step: int = 0) -> HiddenSequence:
        """Encodes the prompt and generates `tokens` <ACT> positions"""

    def prefill(self):
        """Charges the one-off prompt encoding cost"""

    def decode_pass(self, counter: PassCounter):
        """Runs one sequential decoder pass"""


def _hash_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _busy_matrix(params: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    if params <= 0:
        return None
    side = max(1, math.isqrt(params))
    return rng.uniform(-1.0, 1.0, size=(side, side)).astype(np.float32) / side


######################################################################
#  P S E U D O   B A C K B O N E
######################################################################
@dataclass
class PseudoBackbone:
    """
    Deterministic stand-in for a VLM backbone

    Maps (obs, instr) through a hash-seeded affine map to hidden states and
    appends the requested <ACT> positions at the tail. prefill_params and
    pass_params set the synthetic parameter count whose busy-work is charged
    once per prompt and once per generated token.
    """

    hidden: int = 64
    vocab: int = 32
    seed: int = 0
    prefill_params: int = 0
    pass_params: int = 0
    _projections: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        _check_dims(H=self.hidden, vocab=self.vocab)
        rng = np.random.default_rng(_hash_seed("backbone", self.seed, self.hidden))
        # row `vocab` is the <ACT> embedding
        self.embeddings = rng.normal(size=(self.vocab + 1, self.hidden))
        self.act_positions = rng.normal(size=(MAX_ACT_TOKENS, self.hidden))
        self._prefill = _busy_matrix(self.prefill_params, rng)
        self._pass = _busy_matrix(self.pass_params, rng)

    def _projection(self, obs_dim: int) -> tuple:
        if obs_dim not in self._projections:
            rng = np.random.default_rng(_hash_seed("obs", self.seed, self.hidden, obs_dim))
            weight = rng.normal(0.0, 1.0 / np.sqrt(max(obs_dim, 1)), size=(obs_dim, self.hidden))
            self._projections[obs_dim] = (weight, rng.normal(size=self.hidden))
        return self._projections[obs_dim]

    @staticmethod
    def _burn(matrix: Optional[np.ndarray]):
        if matrix is not None:
            vector = np.ones(matrix.shape[1], dtype=np.float32)
            np.tanh(matrix @ vector)

    def prefill(self):
        """Prompt encoding busy-work"""
        self._burn(self._prefill)

    def decode_pass(self, counter: PassCounter):
        """One sequential generation step"""
        self._burn(self._pass)
        counter.increment()

    def encode(self, obs, instr, tokens: int, counter: PassCounter, step: int = 0) -> HiddenSequence:
        """Prompt rows for each instruction token, then `tokens` generated <ACT> rows"""
        _check_dims(tokens=tokens)
        if tokens > MAX_ACT_TOKENS:
            raise InvalidDims(f"At most {MAX_ACT_TOKENS} <ACT> tokens are supported")
        obs = np.asarray(obs, dtype=np.float64).reshape(-1)
        instr = np.asarray(instr, dtype=np.int64).reshape(-1)
        _check_finite("obs", obs)
        weight, bias = self._projection(obs.size)
        context = obs @ weight + bias
        prompt = self.embeddings[instr % self.vocab] + context
        self.prefill()
        generated = []
        for k in range(tokens):
            self.decode_pass(counter)
            generated.append(self.embeddings[self.vocab] + self.act_positions[k] + context)
        states = np.vstack([prompt.reshape(-1, self.hidden), np.stack(generated)])
        mask = np.concatenate([np.zeros(instr.size, dtype=bool), np.ones(tokens, dtype=bool)])
        return HiddenSequence(states.astype(np.float32), mask)


def pseudo_backbone(obs, instr, seed: int, tokens: int = 1, counter: Optional[PassCounter] = None,
                    hidden: int = 64) -> HiddenSequence:
    """Functional form of PseudoBackbone.encode"""
    counter = counter if counter is not None else PassCounter()
    return PseudoBackbone(hidden=hidden, seed=seed).encode(obs, instr, tokens, counter)


######################################################################
#  R E P L A Y   B A C K B O N E
######################################################################
class ReplayBackbone:
    """Serves <ACT> hidden states captured elsewhere, keyed by step"""

    def __init__(self, path):
        manifest, tensors = tensor_file.read_tensors(path)
        self.states = {
            int(name[len(REPLAY_PREFIX):]): tensor
            for name, tensor in tensors.items()
            if name.startswith(REPLAY_PREFIX)
        }
        if not self.states:
            raise tensor_file.TensorFileError(f"{path} holds no {REPLAY_PREFIX}<step> tensors")
        widths = {tensor.shape[-1] for tensor in self.states.values()}
        if len(widths) != 1 or any(t.ndim != 2 for t in self.states.values()):
            raise ShapeMismatch("Replay tensors must all be tokens x H with one H")
        self.hidden = int(manifest.get("H", widths.pop()))
        logger.info("Loaded %d replay steps from %s", len(self.states), path)

    @staticmethod
    def save(path, states: dict):
        """Writes {step: tokens x H} as a replay file"""
        tensors = {f"{REPLAY_PREFIX}{step}": np.atleast_2d(v) for step, v in sorted(states.items())}
        hidden = next(iter(tensors.values())).shape[-1]
        return tensor_file.write_tensors(path, tensors, {"H": int(hidden)})

    def prefill(self):
        """Replayed states were encoded elsewhere"""

    def decode_pass(self, counter: PassCounter):
        """Replayed states cost no compute; only the count moves"""
        counter.increment()

    def encode(self, obs, instr, tokens: int, counter: PassCounter, step: int = 0) -> HiddenSequence:
        """Returns the first `tokens` recorded <ACT> states of `step`"""
        _check_dims(tokens=tokens)
        if step not in self.states:
            raise NoActToken(f"No recorded <ACT> states for step {step}")
        rows = self.states[step]
        if rows.shape[0] < tokens:
            raise NoActToken(f"Step {step} holds {rows.shape[0]} <ACT> states, {tokens} requested")
        for _ in range(tokens):
            self.decode_pass(counter)
        return HiddenSequence(rows[:tokens], np.ones(tokens, dtype=bool))


######################################################################
#  C H U N K   P R E D I C T I O N
######################################################################
def predict_chunk(
    obs,
    instr,
    head: HeadParams,
    tokens: int,
    backbone: Backbone,
    stats: NormalizationStats,
    counter: Optional[PassCounter] = None,
    origin_step: int = 0,
) -> ActionChunk:
    """
    Runs the backbone, decodes every <ACT> state and denormalizes

    The result holds tokens * N actions. Head outputs are clipped to the
    normalized range before denormalizing.
    """
    _check_dims(tokens=tokens)
    if head.action_dim != ACTION_DIM:
        raise ShapeMismatch(f"An executable chunk needs A = {ACTION_DIM}, head has {head.action_dim}")
    if backbone.hidden != head.hidden:
        raise ShapeMismatch(f"Backbone width {backbone.hidden} differs from head width {head.hidden}")
    counter = counter if counter is not None else PassCounter()
    seq = backbone.encode(obs, instr, tokens, counter, step=origin_step)
    vectors = extract_act_hidden(seq)
    if len(vectors) != tokens:
        raise ShapeMismatch(f"Expected {tokens} <ACT> states, found {len(vectors)}")
    normalized = np.concatenate([head_forward(v, head) for v in vectors]).astype(np.float64)
    low, high = stats.range.bounds
    normalized[:, :CONTINUOUS_DIMS] = np.clip(normalized[:, :CONTINUOUS_DIMS], low, high)
    return ActionChunk.from_array(denormalize_array(normalized, stats), origin_step)


def serial_decode_baseline(obs, instr,  # pylint: disable=unused-argument
                           chunk_size: int, action_dim: int, backbone: Backbone,
                           counter: Optional[PassCounter] = None) -> int:
    """
    Emulates one-token-per-dimension autoregressive decoding

    Only the pass accounting (and its cost) is modelled. Returns the number
    of decoder passes added, N * A.
    """
    _check_dims(N=chunk_size, A=action_dim)
    counter = counter if counter is not None else PassCounter()
    before = counter.decoder_forward_passes
    backbone.prefill()
    for _ in range(chunk_size * action_dim):
        backbone.decode_pass(counter)
    return counter.decoder_forward_passes - before
