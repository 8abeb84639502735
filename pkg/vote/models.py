# Copyright 2016, 2023 John Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the 'License');
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an 'AS IS' BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Models for the action runtime

All of the action-space types live in this module

Models
------
Action - one 7-DoF end-effector command
ActionChunk - N consecutive Actions predicted from one observation
NormalizationStats - per-dimension bounds used to scale actions

Attributes:
-----------
dx, dy, dz (float) - relative translation offsets
dphi, dtheta, dpsi (float) - rotation deltas
g (float) - gripper state, 0 (open) or 1 (closed) once executable

"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ACTION_DIM = 7
CONTINUOUS_DIMS = 6
GRIPPER_INDEX = 6
FIELD_NAMES = ("dx", "dy", "dz", "dphi", "dtheta", "dpsi", "g")

LOW_PERCENTILE = 1.0
HIGH_PERCENTILE = 99.0
RANGE_TOLERANCE = 1e-9
ZERO_NORM = 1e-12


class DataValidationError(Exception):
    """Used for any data contract violation in the runtime"""


class EmptyDataset(DataValidationError):
    """Statistics were requested over no actions"""


class DegenerateDimension(DataValidationError):
    """A continuous dimension has no spread (q_low == q_high)"""


class OutOfRange(DataValidationError):
    """A normalized value lies outside the normalized range"""


class LengthMismatch(DataValidationError):
    """Two vectors that must be compared have different lengths"""


class NormRange(Enum):
    """Enumeration of valid normalization target ranges"""

    UNIT = "unit"
    SYMMETRIC = "symmetric"

    @property
    def bounds(self) -> tuple:
        """Returns the (low, high) target interval"""
        return (0.0, 1.0) if self is NormRange.UNIT else (-1.0, 1.0)


######################################################################
#  A C T I O N
######################################################################
@dataclass(frozen=True)
class Action:
    """
    Class that represents a single end-effector command

    The canonical ordering is (dx, dy, dz, dphi, dtheta, dpsi, g).
    """

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dphi: float = 0.0
    dtheta: float = 0.0
    dpsi: float = 0.0
    g: float = 0.0

    def __repr__(self):
        values = ", ".join(f"{v:.4f}" for v in self.as_array())
        return f"<Action ({values})>"

    @property
    def executable(self) -> bool:
        """True when the gripper command is binary"""
        return self.g in (0.0, 1.0)

    @property
    def translation(self) -> np.ndarray:
        """Returns the (dx, dy, dz) part"""
        return self.as_array()[:3]

    @property
    def rotation(self) -> np.ndarray:
        """Returns the (dphi, dtheta, dpsi) part"""
        return self.as_array()[3:6]

    def as_array(self) -> np.ndarray:
        """Returns the action as a float64 vector of length 7"""
        return np.array([getattr(self, name) for name in FIELD_NAMES], dtype=np.float64)

    def with_binary_gripper(self) -> "Action":
        """Returns a copy with the gripper rounded at 0.5"""
        return Action.from_array(binarize_gripper(self.as_array()))

    def serialize(self) -> list:
        """Serializes an Action into a list of 7 numbers"""
        return [float(v) for v in self.as_array()]

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Action":
        """Creates an Action from any sequence of 7 numbers"""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != ACTION_DIM:
            raise LengthMismatch(
                f"Action needs {ACTION_DIM} values, got {values.shape[0]}"
            )
        return cls(*(float(v) for v in values))

    @classmethod
    def deserialize(cls, data) -> "Action":
        """
        Deserializes an Action from a list or a dictionary
        Args:
            data: 7 numbers, or a dict keyed by the field names
        """
        try:
            if isinstance(data, dict):
                return cls(**{name: float(data[name]) for name in FIELD_NAMES})
            return cls.from_array([float(v) for v in data])
        except KeyError as error:
            raise DataValidationError("Invalid action: missing " + error.args[0]) from error
        except (TypeError, ValueError) as error:
            raise DataValidationError(
                "Invalid action: body contained bad or no data " + str(error)
            ) from error


def binarize_gripper(values: np.ndarray) -> np.ndarray:
    """Rounds the gripper entry of one or more action vectors at 0.5"""
    out = np.array(values, dtype=np.float64, copy=True)
    out[..., GRIPPER_INDEX] = np.where(out[..., GRIPPER_INDEX] >= 0.5, 1.0, 0.0)
    return out


######################################################################
#  A C T I O N   C H U N K
######################################################################
@dataclass(frozen=True)
class ActionChunk:
    """
    N consecutive Actions predicted from the observation at origin_step

    actions[k] is the prediction for absolute timestep origin_step + k.
    """

    actions: tuple
    origin_step: int = 0

    def __post_init__(self):
        if len(self.actions) == 0:
            raise DataValidationError("ActionChunk needs at least one action")
        object.__setattr__(self, "actions", tuple(self.actions))

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, index: int) -> Action:
        return self.actions[index]

    def __repr__(self):
        return f"<ActionChunk origin_step=[{self.origin_step}] N=[{len(self)}]>"

    def action_for(self, step: int) -> Action:
        """Returns the prediction for an absolute timestep"""
        offset = step - self.origin_step
        if not 0 <= offset < len(self.actions):
            raise OutOfRange(
                f"Chunk from step {self.origin_step} has no prediction for step {step}"
            )
        return self.actions[offset]

    def as_array(self) -> np.ndarray:
        """Returns the chunk as an N x 7 float64 matrix"""
        return np.stack([action.as_array() for action in self.actions])

    def serialize(self) -> dict:
        """Serializes a chunk into a dictionary"""
        return {
            "origin_step": self.origin_step,
            "actions": [action.serialize() for action in self.actions],
        }

    @classmethod
    def from_array(cls, values: np.ndarray, origin_step: int = 0) -> "ActionChunk":
        """Creates a chunk from an N x 7 matrix"""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != ACTION_DIM:
            raise LengthMismatch(f"Chunk matrix must be N x {ACTION_DIM}, got {values.shape}")
        return cls(tuple(Action.from_array(row) for row in values), int(origin_step))

    @classmethod
    def deserialize(cls, data: dict) -> "ActionChunk":
        """
        Deserializes a chunk from a dictionary
        Args:
            data (dict): {"origin_step": int, "actions": [[7 numbers], ...]}
        """
        try:
            step = data["origin_step"]
            if isinstance(step, bool) or not isinstance(step, int):
                raise DataValidationError(
                    "Invalid type for integer [origin_step]: " + str(type(step))
                )
            actions = tuple(Action.deserialize(row) for row in data["actions"])
            return cls(actions, step)
        except KeyError as error:
            raise DataValidationError("Invalid chunk: missing " + error.args[0]) from error
        except TypeError as error:
            raise DataValidationError(
                "Invalid chunk: body contained bad or no data " + str(error)
            ) from error


######################################################################
#  N O R M A L I Z A T I O N   S T A T I S T I C S
######################################################################
@dataclass(frozen=True)
class NormalizationStats:
    """
    Per-dimension bounds for the 6 continuous dimensions

    The gripper is never scaled.
    """

    q_low: np.ndarray
    q_high: np.ndarray
    range: NormRange = NormRange.UNIT

    def __post_init__(self):
        low = np.asarray(self.q_low, dtype=np.float64).reshape(-1)
        high = np.asarray(self.q_high, dtype=np.float64).reshape(-1)
        if low.shape != (CONTINUOUS_DIMS,) or high.shape != (CONTINUOUS_DIMS,):
            raise LengthMismatch(
                f"Stats need {CONTINUOUS_DIMS} bounds per side, got {low.shape} and {high.shape}"
            )
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
            raise DataValidationError("Stats bounds must be finite")
        degenerate = np.flatnonzero(low >= high)
        if degenerate.size:
            raise DegenerateDimension(
                f"q_low >= q_high for dimensions {[FIELD_NAMES[d] for d in degenerate]}"
            )
        object.__setattr__(self, "q_low", low)
        object.__setattr__(self, "q_high", high)
        object.__setattr__(self, "range", NormRange(self.range))

    @classmethod
    def symmetric_bounds(cls, bounds: Sequence[float], norm_range=NormRange.SYMMETRIC):
        """Creates stats for the interval [-bounds, bounds] per dimension"""
        bounds = np.asarray(bounds, dtype=np.float64)
        return cls(-bounds, bounds, norm_range)

    def serialize(self) -> dict:
        """Serializes the stats into a dictionary"""
        return {
            "q_low": [float(v) for v in self.q_low],
            "q_high": [float(v) for v in self.q_high],
            "range": self.range.value,
        }

    @classmethod
    def deserialize(cls, data: dict) -> "NormalizationStats":
        """
        Deserializes stats from a dictionary
        Args:
            data (dict): {"q_low": [6], "q_high": [6], "range": "unit" | "symmetric"}
        """
        try:
            return cls(
                [float(v) for v in data["q_low"]],
                [float(v) for v in data["q_high"]],
                NormRange(data.get("range", NormRange.UNIT.value)),
            )
        except KeyError as error:
            raise DataValidationError("Invalid stats: missing " + error.args[0]) from error
        except (TypeError, ValueError) as error:
            raise DataValidationError("Invalid stats: " + str(error)) from error


def compute_stats(dataset: Iterable[Action], norm_range=NormRange.UNIT) -> NormalizationStats:
    """Computes 1st/99th percentile bounds of each continuous dimension"""
    rows = [action.as_array() for action in dataset]
    if not rows:
        raise EmptyDataset("Cannot compute statistics over an empty dataset")
    matrix = np.stack(rows)[:, :CONTINUOUS_DIMS]
    q_low = np.percentile(matrix, LOW_PERCENTILE, axis=0)
    q_high = np.percentile(matrix, HIGH_PERCENTILE, axis=0)
    logger.info("Computed action statistics over %d actions", len(rows))
    return NormalizationStats(q_low, q_high, norm_range)


def normalize_array(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Maps the continuous dims of one or more action vectors into the target range"""
    low, high = stats.range.bounds
    out = np.array(values, dtype=np.float64, copy=True)
    unit = (out[..., :CONTINUOUS_DIMS] - stats.q_low) / (stats.q_high - stats.q_low)
    out[..., :CONTINUOUS_DIMS] = np.clip(low + unit * (high - low), low, high)
    return out


def denormalize_array(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of normalize_array; the gripper is rounded at 0.5"""
    low, high = stats.range.bounds
    out = np.array(values, dtype=np.float64, copy=True)
    scaled = out[..., :CONTINUOUS_DIMS]
    if np.any(scaled < low - RANGE_TOLERANCE) or np.any(scaled > high + RANGE_TOLERANCE):
        raise OutOfRange(f"Normalized values must lie in [{low}, {high}]")
    unit = (np.clip(scaled, low, high) - low) / (high - low)
    out[..., :CONTINUOUS_DIMS] = stats.q_low + unit * (stats.q_high - stats.q_low)
    return binarize_gripper(out)


def normalize_action(action: Action, stats: NormalizationStats) -> Action:
    """Maps each continuous dimension affinely into the target range, clipped"""
    return Action.from_array(normalize_array(action.as_array(), stats))


def denormalize_action(action: Action, stats: NormalizationStats) -> Action:
    """Maps a normalized action back to raw units"""
    return Action.from_array(denormalize_array(action.as_array(), stats))


def cosine_similarity(u, v) -> float:
    """
    Cosine similarity of two action vectors

    Near-zero vectors (norm < 1e-12) compare as 1 when both are near zero
    and as 0 otherwise.
    """
    u = u.as_array() if isinstance(u, Action) else np.asarray(u, dtype=np.float64).reshape(-1)
    v = v.as_array() if isinstance(v, Action) else np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise LengthMismatch(f"Cannot compare vectors of length {u.shape[0]} and {v.shape[0]}")
    norm_u = float(np.linalg.norm(u))
    norm_v = float(np.linalg.norm(v))
    if norm_u < ZERO_NORM or norm_v < ZERO_NORM:
        return 1.0 if norm_u < ZERO_NORM and norm_v < ZERO_NORM else 0.0
    similarity = float(np.dot(u, v)) / (norm_u * norm_v)
    return min(1.0, max(-1.0, similarity))
