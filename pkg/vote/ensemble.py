"""
Action ensemble

Combines the predictions that earlier chunks made for the current step.
The vote strategy keeps the larger of two camps: candidates whose cosine
similarity to the newest prediction exceeds tau, and the rest. Naive and
exponentially weighted averages, and no ensembling at all, are provided as
baselines.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from vote.models import (
    Action,
    ActionChunk,
    DataValidationError,
    binarize_gripper,
    cosine_similarity,
)

logger = logging.getLogger(__name__)


class NonMonotonicStep(DataValidationError):
    """A chunk was pushed out of step order"""


class MissingCurrent(DataValidationError):
    """The chunk predicted at the queried step is not in the buffer"""


class EmptyCandidates(DataValidationError):
    """An aggregation was asked to combine nothing"""


class InvalidEnsembleConfig(DataValidationError):
    """The ensemble settings are out of range"""


class Strategy(Enum):
    """Ways of combining the candidate list"""

    VOTE = "vote"
    NAIVE_AVERAGE = "naive_average"
    STATIC_WEIGHTED = "static_weighted"
    NONE = "none"


class TieBreak(Enum):
    """Camp chosen when both camps are the same size"""

    LOW_SET = "low_set"
    HIGH_SET = "high_set"


######################################################################
#  C O N F I G
######################################################################
@dataclass
class EnsembleConfig:
    """Horizon, threshold and strategy of the ensemble"""

    K: int = 4  # pylint: disable=invalid-name
    tau: float = 0.5
    strategy: Strategy = Strategy.VOTE
    static_weight_decay: float = 0.5
    tie_break: TieBreak = TieBreak.LOW_SET

    def __post_init__(self):
        try:
            self.strategy = Strategy(getattr(self.strategy, "value", self.strategy))
            self.tie_break = TieBreak(getattr(self.tie_break, "value", self.tie_break))
        except ValueError as error:
            raise InvalidEnsembleConfig(str(error)) from error
        if isinstance(self.K, bool) or not isinstance(self.K, int) or self.K < 0:
            raise InvalidEnsembleConfig(f"K must be a non-negative integer, got {self.K!r}")
        _check_tau(self.tau)
        if self.static_weight_decay < 0:
            raise InvalidEnsembleConfig("static_weight_decay must be non-negative")

    def check_committee(self, chunk_size: int):
        """A vote over a full committee needs K + 1 <= N"""
        if self.strategy is Strategy.VOTE and self.K + 1 > chunk_size:
            raise InvalidEnsembleConfig(
                f"K + 1 = {self.K + 1} exceeds chunk size {chunk_size}"
            )

    def serialize(self) -> dict:
        """Serializes the config into a plain dictionary"""
        data = asdict(self)
        data["strategy"] = self.strategy.value
        data["tie_break"] = self.tie_break.value
        return data

    @classmethod
    def deserialize(cls, data: dict) -> "EnsembleConfig":
        """Builds a config from a dictionary, rejecting unknown keys"""
        unknown = set(data) - set(cls.__dataclass_fields__)  # pylint: disable=no-member
        if unknown:
            raise InvalidEnsembleConfig(f"Unknown ensemble settings: {sorted(unknown)}")
        return cls(**data)


def _check_tau(tau: float):
    if not -1.0 < tau < 1.0:
        raise InvalidEnsembleConfig(f"tau must lie in (-1, 1), got {tau}")


######################################################################
#  H I S T O R Y   B U F F E R
######################################################################
class HistoryBuffer:
    """The K + 1 most recent chunks, oldest first"""

    def __init__(self, K: int):  # pylint: disable=invalid-name
        if K < 0:
            raise InvalidEnsembleConfig("K must be non-negative")
        self.capacity = K + 1
        self._chunks = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._chunks)

    def __repr__(self):
        return f"<HistoryBuffer steps={self.steps}>"

    @property
    def steps(self) -> List[int]:
        """Origin steps of the retained chunks"""
        return [chunk.origin_step for chunk in self._chunks]

    def get(self, step: int) -> Optional[ActionChunk]:
        """Returns the chunk predicted at `step`, if retained"""
        for chunk in self._chunks:
            if chunk.origin_step == step:
                return chunk
        return None

    def push(self, chunk: ActionChunk):
        """Appends a chunk; the oldest one falls out when full"""
        if self._chunks and chunk.origin_step <= self._chunks[-1].origin_step:
            raise NonMonotonicStep(
                f"Step {chunk.origin_step} does not follow step {self._chunks[-1].origin_step}"
            )
        self._chunks.append(chunk)


def push_prediction(buf: HistoryBuffer, chunk: ActionChunk):
    """Stores a new chunk in the history"""
    buf.push(chunk)


def collect_candidates(buf: HistoryBuffer, t: int, K: int) -> tuple:  # pylint: disable=invalid-name
    """
    Gathers every retained prediction for step t

    Returns (actions, ages) ordered oldest to current, where the age of
    chunk(t - k).actions[k] is k. The current prediction is always last.
    """
    if buf.get(t) is None:
        raise MissingCurrent(f"No chunk was predicted at step {t}")
    actions = []
    ages = []
    for k in range(K, -1, -1):
        chunk = buf.get(t - k)
        if chunk is not None and k < len(chunk):
            actions.append(chunk[k])
            ages.append(k)
    return actions, ages


def candidates_for(buf: HistoryBuffer, t: int, K: int) -> List[Action]:  # pylint: disable=invalid-name
    """Predictions for step t, oldest to current"""
    return collect_candidates(buf, t, K)[0]


######################################################################
#  A G G R E G A T I O N
######################################################################
@dataclass(frozen=True)
class VoteResult:
    """Outcome of one aggregation step"""

    action: Action
    high: tuple
    low: tuple
    similarities: tuple

    @property
    def size(self) -> int:
        """Number of candidates that took part"""
        return len(self.similarities)


def _rows(cands: Sequence) -> np.ndarray:
    if len(cands) == 0:
        raise EmptyCandidates("Cannot aggregate an empty candidate list")
    return np.stack([c.as_array() if isinstance(c, Action) else np.asarray(c, dtype=np.float64)
                     for c in cands])


def _mean(rows: np.ndarray) -> Action:
    return Action.from_array(binarize_gripper(rows.mean(axis=0)))


def _partition(rows: np.ndarray, tau: float) -> tuple:
    current = rows[-1]
    similarities = tuple(cosine_similarity(current, row) for row in rows)
    high = tuple(i for i, s in enumerate(similarities) if s > tau)
    low = tuple(i for i, s in enumerate(similarities) if s <= tau)
    return similarities, high, low


def vote_ensemble(cands: Sequence, tau: float, tie_break=TieBreak.LOW_SET) -> VoteResult:
    """
    Averages whichever similarity camp holds more candidates

    The last candidate is the current prediction. On a tie the low camp
    wins unless tie_break selects the high camp.
    """
    _check_tau(tau)
    tie_break = TieBreak(getattr(tie_break, "value", tie_break))
    rows = _rows(cands)
    similarities, high, low = _partition(rows, tau)
    if len(high) > len(low) or (len(high) == len(low) and tie_break is TieBreak.HIGH_SET):
        chosen = high
    else:
        chosen = low
    return VoteResult(_mean(rows[list(chosen)]), high, low, similarities)


def naive_average(cands: Sequence) -> Action:
    """Elementwise mean of every candidate"""
    return _mean(_rows(cands))


def static_weighted(cands: Sequence, decay: float, ages: Optional[Sequence[int]] = None) -> Action:
    """
    Weighted mean with weights proportional to exp(-decay * age)

    Candidates are ordered oldest to current; without explicit ages the
    current one has age 0 and each earlier one is a step older.
    """
    rows = _rows(cands)
    if decay < 0:
        raise InvalidEnsembleConfig("decay must be non-negative")
    ages = np.arange(len(rows) - 1, -1, -1) if ages is None else np.asarray(ages, dtype=np.float64)
    if ages.shape[0] != rows.shape[0]:
        raise InvalidEnsembleConfig("Every candidate needs an age")
    if math.isinf(decay):
        return _mean(rows[ages == ages.min()])
    weights = np.exp(-decay * (ages - ages.min()))
    weights = weights / weights.sum()
    return Action.from_array(binarize_gripper(weights @ rows))


def aggregate(cands: Sequence, config: EnsembleConfig, ages: Optional[Sequence[int]] = None) -> VoteResult:
    """
    Applies the configured strategy

    Similarities and camps are reported for every strategy; only vote uses
    them to pick the action.
    """
    if config.strategy is Strategy.VOTE:
        return vote_ensemble(cands, config.tau, config.tie_break)
    rows = _rows(cands)
    similarities, high, low = _partition(rows, config.tau)
    if config.strategy is Strategy.NAIVE_AVERAGE:
        action = _mean(rows)
    elif config.strategy is Strategy.STATIC_WEIGHTED:
        action = static_weighted(rows, config.static_weight_decay, ages)
    else:
        action = _mean(rows[-1:])
    return VoteResult(action, high, low, similarities)


def trace_record(t: int, result: VoteResult, strategy) -> dict:
    """One JSONL record of the ensemble trace"""
    return {
        "t": int(t),
        "similarities": [float(s) for s in result.similarities],
        "high": list(result.high),
        "low": list(result.low),
        "strategy": Strategy(getattr(strategy, "value", strategy)).value,
        "action": result.action.serialize(),
    }


def replay_trace(chunks: Iterable[ActionChunk], config: EnsembleConfig) -> Iterator[dict]:
    """Pushes chunks in order and yields a trace record at each origin step"""
    buf = HistoryBuffer(config.K)
    for chunk in chunks:
        push_prediction(buf, chunk)
        actions, ages = collect_candidates(buf, chunk.origin_step, config.K)
        result = aggregate(actions, config, ages)
        logger.debug("Step %d: %d candidates, %d high", chunk.origin_step, result.size, len(result.high))
        yield trace_record(chunk.origin_step, result, config.strategy)
