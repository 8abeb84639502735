"""
Closed-loop simulator

A point-mass end effector with additive-delta dynamics, a scripted
proportional expert standing in for the policy, a corruption model for its
predictions, and a Monte-Carlo evaluation of ensemble strategies across
noise levels.

Task "pick_place" (default): reach the object, close the gripper on it and
carry it to the goal. Opening the gripper while carrying drops the object,
which fails the episode. Task "reach" only asks the end effector to reach
the goal.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from vote.ensemble import (
    EnsembleConfig,
    HistoryBuffer,
    Strategy,
    aggregate,
    collect_candidates,
    push_prediction,
)
from vote.models import (
    CONTINUOUS_DIMS,
    GRIPPER_INDEX,
    ActionChunk,
    DataValidationError,
    NormalizationStats,
    denormalize_array,
    normalize_array,
)

logger = logging.getLogger(__name__)

TASKS = ("pick_place", "reach")
CSV_COLUMNS = ("strategy", "noise_p", "sigma", "success_rate", "mean_traj_error", "episodes")


class EpisodeOver(DataValidationError):
    """The episode has already ended"""


class InvalidSuite(DataValidationError):
    """Simulator, noise or suite settings are out of range"""


class EpisodeStatus(Enum):
    """Lifecycle of an episode"""

    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"


class ExecutionMode(Enum):
    """Re-predict every step, or run each chunk to completion"""

    PER_STEP = "per_step"
    OPEN_LOOP_CHUNK = "open_loop_chunk"


def _from_dict(cls, data: dict, what: str):
    """Builds a dataclass from a dictionary, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise InvalidSuite(f"Invalid {what}: expected an object, got {type(data).__name__}")
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise InvalidSuite(f"Invalid {what}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as error:
        raise InvalidSuite(f"Invalid {what}: {error}") from error


######################################################################
#  E N V I R O N M E N T
######################################################################
@dataclass(frozen=True)
class EnvConfig:
    """Task, thresholds and per-step limits of the environment"""

    task: str = "pick_place"
    eps_pos: float = 0.05
    budget: int = 120
    max_translation: float = 0.1
    max_rotation: float = 0.1
    gain: float = 0.8
    grasp_radius: float = 0.05
    drop_is_failure: bool = True
    workspace: float = 0.5
    rotation_range: float = 0.3

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidSuite(f"Unknown task {self.task!r}, expected one of {TASKS}")
        for name in ("eps_pos", "max_translation", "max_rotation", "gain", "grasp_radius", "workspace"):
            if getattr(self, name) <= 0:
                raise InvalidSuite(f"{name} must be positive")
        if self.budget < 1:
            raise InvalidSuite("budget must be at least 1")

    @property
    def stats(self) -> NormalizationStats:
        """Symmetric normalization over the per-step action limits"""
        bounds = [self.max_translation] * 3 + [self.max_rotation] * 3
        return NormalizationStats.symmetric_bounds(bounds)


@dataclass(frozen=True, eq=False)
class EnvState:
    """
    Pose is (x, y, z, phi, theta, psi); goal uses the same layout

    The object follows the end effector while it is held.
    """

    pose: np.ndarray
    goal: np.ndarray
    object: np.ndarray
    gripper: float = 0.0
    holding: bool = False
    step: int = 0
    status: EpisodeStatus = EpisodeStatus.RUNNING

    @property
    def position(self) -> np.ndarray:
        """End-effector (x, y, z)"""
        return self.pose[:3]

    @property
    def running(self) -> bool:
        """True until success or failure"""
        return self.status is EpisodeStatus.RUNNING


def initial_state(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    """Draws end-effector, object and goal uniformly inside the workspace"""
    w, r = config.workspace, config.rotation_range
    pose = np.concatenate([rng.uniform(-w, w, 3), rng.uniform(-r, r, 3)])
    obj = rng.uniform(-w, w, 3)
    goal = np.concatenate([rng.uniform(-w, w, 3), rng.uniform(-r, r, 3)])
    return EnvState(pose=pose, goal=goal, object=obj)


def _succeeded(state: EnvState, config: EnvConfig) -> bool:
    close = np.linalg.norm(state.position - state.goal[:3]) <= config.eps_pos
    if config.task == "pick_place":
        return close and state.holding
    return close


def advance(state: EnvState, action, config: EnvConfig) -> EnvState:
    """
    Pure dynamics: applies one action's deltas and gripper command

    Terminal states keep their status; used both by the environment and by
    the expert to roll its own plan forward.
    """
    action = np.asarray(action, dtype=np.float64)
    pose = state.pose + action[:CONTINUOUS_DIMS]
    gripper = 1.0 if action[GRIPPER_INDEX] >= 0.5 else 0.0
    holding = state.holding
    status = state.status
    obj = state.object
    if config.task == "pick_place":
        if holding and gripper == 0.0:
            holding = False
            if config.drop_is_failure and status is EpisodeStatus.RUNNING:
                status = EpisodeStatus.FAILURE
        elif not holding and gripper == 1.0 and np.linalg.norm(pose[:3] - obj) <= config.grasp_radius:
            holding = True
        if holding:
            obj = pose[:3].copy()
    moved = replace(state, pose=pose, gripper=gripper, holding=holding, object=obj,
                    step=state.step + 1, status=status)
    if moved.running and _succeeded(moved, config):
        moved = replace(moved, status=EpisodeStatus.SUCCESS)
    return moved


def execute(state: EnvState, action, config: EnvConfig) -> EnvState:
    """Environment step: advance plus the step budget"""
    if not state.running:
        raise EpisodeOver(f"Episode ended with {state.status.value} at step {state.step}")
    moved = advance(state, action, config)
    if moved.running and moved.step >= config.budget:
        moved = replace(moved, status=EpisodeStatus.FAILURE)
    return moved


######################################################################
#  E X P E R T
######################################################################
def _capped(delta: np.ndarray, cap: float) -> np.ndarray:
    norm = np.linalg.norm(delta)
    return delta * (cap / norm) if norm > cap else delta


def phase_target(state: EnvState, config: EnvConfig) -> tuple:
    """
    Position the expert is heading for and the radius that ends the phase

    pick_place heads for the object until it is held, then for the goal;
    reach always heads for the goal.
    """
    if config.task == "pick_place" and not state.holding:
        return state.object, config.grasp_radius
    return state.goal[:3], config.eps_pos


def expert_action(state: EnvState, config: EnvConfig) -> np.ndarray:
    """One proportional-control step with capped magnitude"""
    rotation = _capped(config.gain * (state.goal[3:] - state.pose[3:]), config.max_rotation)
    target, radius = phase_target(state, config)
    offset = target - state.position
    if config.task == "pick_place" and not state.holding:
        # grasp step: hold position and close
        if np.linalg.norm(offset) <= radius:
            return np.concatenate([np.zeros(3), rotation, [1.0]])
        return np.concatenate([_capped(config.gain * offset, config.max_translation), rotation, [0.0]])
    gripper = 1.0 if config.task == "pick_place" else 0.0
    return np.concatenate([_capped(config.gain * offset, config.max_translation), rotation, [gripper]])


def _expert_plan(state: EnvState, chunk_size: int, config: EnvConfig) -> np.ndarray:
    rows = []
    for _ in range(chunk_size):
        action = expert_action(state, config)
        rows.append(action)
        state = advance(state, action, config)
    return np.stack(rows)


def expert_chunk(state: EnvState, N: int,  # pylint: disable=invalid-name
                 config: Optional[EnvConfig] = None) -> ActionChunk:
    """N expert actions from `state`, each planned on the rolled-forward state"""
    if not state.running:
        raise EpisodeOver(f"Episode ended with {state.status.value} at step {state.step}")
    if N < 1:
        raise InvalidSuite("Chunk size must be at least 1")
    config = config or EnvConfig()
    return ActionChunk.from_array(_expert_plan(state, N, config), state.step)


######################################################################
#  N O I S E
######################################################################
@dataclass
class NoiseModel:
    """
    Gaussian jitter on the continuous dims plus whole-chunk outliers

    An outlier reverses and scales every continuous delta and flips the
    gripper. Each corrupted chunk draws one uniform and one N x 6 normal
    block, in that order, whatever the settings.
    """

    gaussian_sigma: float = 0.0
    outlier_prob: float = 0.0
    outlier_scale: float = 2.0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sigma = np.asarray(self.gaussian_sigma, dtype=np.float64)
        if sigma.ndim > 1 or (sigma.ndim == 1 and sigma.shape[0] != CONTINUOUS_DIMS):
            raise InvalidSuite(f"gaussian_sigma must be a scalar or {CONTINUOUS_DIMS} values")
        if np.any(sigma < 0):
            raise InvalidSuite("gaussian_sigma must be non-negative")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise InvalidSuite(f"outlier_prob must lie in [0, 1], got {self.outlier_prob}")
        if self.outlier_scale <= 0:
            raise InvalidSuite("outlier_scale must be positive")
        self.rng = np.random.default_rng(self.seed)

    def reseeded(self, seed) -> "NoiseModel":
        """Same settings, fresh stream"""
        return NoiseModel(self.gaussian_sigma, self.outlier_prob, self.outlier_scale, seed)

    def corrupt_array(self, values: np.ndarray) -> tuple:
        """Returns (corrupted copy, whether it is an outlier)"""
        u = self.rng.random()
        jitter = self.rng.normal(size=(values.shape[0], CONTINUOUS_DIMS))
        out = np.array(values, dtype=np.float64, copy=True)
        outlier = u < self.outlier_prob
        if outlier:
            out[:, :CONTINUOUS_DIMS] = -self.outlier_scale * values[:, :CONTINUOUS_DIMS]
            out[:, GRIPPER_INDEX] = 1.0 - values[:, GRIPPER_INDEX]
        else:
            out[:, :CONTINUOUS_DIMS] += np.asarray(self.gaussian_sigma) * jitter
        return out, outlier


def corrupt(chunk: ActionChunk, nm: NoiseModel) -> ActionChunk:
    """Applies the noise model to one predicted chunk"""
    values, _ = nm.corrupt_array(chunk.as_array())
    return ActionChunk.from_array(values, chunk.origin_step)


######################################################################
#  E P I S O D E S
######################################################################
@dataclass
class EpisodeLog:
    """Everything executed during one episode"""

    seed: int
    strategy: str
    execution_mode: str
    status: EpisodeStatus = EpisodeStatus.RUNNING
    actions: List[list] = field(default_factory=list)
    positions: List[list] = field(default_factory=list)
    candidates: List[list] = field(default_factory=list)
    outliers: int = 0
    traj_error: float = 0.0

    def __len__(self):
        return len(self.actions)

    @property
    def success(self) -> bool:
        """True when the episode ended in success"""
        return self.status is EpisodeStatus.SUCCESS

    def serialize(self) -> dict:
        """Serializes the log into a dictionary"""
        data = asdict(self)
        data["status"] = self.status.value
        data["steps"] = len(self)
        return data


def write_episode_logs(path, logs: Sequence[EpisodeLog]) -> Path:
    """Writes one JSON line per episode"""
    path = Path(path)
    with path.open("w", encoding="utf-8") as stream:
        for log in logs:
            stream.write(json.dumps(log.serialize()) + "\n")
    return path


def _episode_streams(seed: int) -> tuple:
    init_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), noise_seq


def run_episode(
    env_config: EnvConfig,
    strategy: EnsembleConfig,
    execution_mode,
    nm: NoiseModel,
    seed: int,
    chunk_size: int = 8,
    reference: Optional[np.ndarray] = None,
) -> EpisodeLog:
    """
    Runs one episode with the expert as the (corrupted) policy

    per_step: predict a chunk every step, push it to the history, aggregate
    and execute one action. open_loop_chunk: execute each chunk in full
    before predicting again; no ensemble is involved. Trajectory error is
    the mean distance to `reference` positions, or to the uncorrupted
    expert's own path from the same initial state.
    """
    mode = ExecutionMode(getattr(execution_mode, "value", execution_mode))
    if mode is ExecutionMode.PER_STEP:
        strategy.check_committee(chunk_size)
    init_rng, noise_seq = _episode_streams(seed)
    state = initial_state(env_config, init_rng)
    noise = nm.reseeded(noise_seq)
    stats = env_config.stats
    log = EpisodeLog(seed=seed, strategy=strategy.strategy.value, execution_mode=mode.value)
    buf = HistoryBuffer(strategy.K)
    plan = []
    while state.running:
        if mode is ExecutionMode.PER_STEP or not plan:
            raw, outlier = noise.corrupt_array(_expert_plan(state, chunk_size, env_config))
            log.outliers += int(outlier)
            predicted = normalize_array(raw, stats)
            plan = list(predicted)
        if mode is ExecutionMode.PER_STEP:
            push_prediction(buf, ActionChunk.from_array(predicted, state.step))
            actions, ages = collect_candidates(buf, state.step, strategy.K)
            result = aggregate(actions, strategy, ages)
            normalized = result.action.as_array()
            log.candidates.append([a.serialize() for a in actions])
        else:
            normalized = plan.pop(0)
        executed = denormalize_array(normalized, stats)
        state = execute(state, executed, env_config)
        log.actions.append([float(v) for v in executed])
        log.positions.append([float(v) for v in state.position])
    log.status = state.status
    if reference is None:
        reference = expert_positions(env_config, seed)
    log.traj_error = trajectory_error(np.asarray(log.positions), reference)
    logger.debug("Episode %d (%s) ended with %s after %d steps",
                 seed, log.strategy, log.status.value, len(log))
    return log


def expert_positions(env_config: EnvConfig, seed: int) -> np.ndarray:
    """Positions visited by the uncorrupted expert from the episode's initial state"""
    init_rng, _ = _episode_streams(seed)
    state = initial_state(env_config, init_rng)
    positions = []
    while state.running:
        state = execute(state, expert_action(state, env_config), env_config)
        positions.append(state.position.copy())
    return np.asarray(positions)


def trajectory_error(positions: np.ndarray, reference: np.ndarray) -> float:
    """Mean distance to the reference path, holding its last point"""
    if len(positions) == 0 or len(reference) == 0:
        return 0.0
    index = np.minimum(np.arange(len(positions)), len(reference) - 1)
    return float(np.mean(np.linalg.norm(positions - reference[index], axis=1)))


######################################################################
#  S U I T E
######################################################################
@dataclass
class SuiteConfig:
    """Monte-Carlo evaluation grid: strategies x outlier probabilities x sigmas"""

    episodes: int = 200
    seed: int = 0
    seeds: List[int] = field(default_factory=list)
    noise_p: List[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3])
    sigmas: List[float] = field(default_factory=lambda: [0.0])
    outlier_scale: float = 2.0
    strategies: List[str] = field(
        default_factory=lambda: [s.value for s in (Strategy.VOTE, Strategy.NAIVE_AVERAGE,
                                                   Strategy.STATIC_WEIGHTED, Strategy.NONE)]
    )
    execution_mode: str = ExecutionMode.PER_STEP.value
    chunk_size: int = 8
    K: int = 4  # pylint: disable=invalid-name
    tau: float = 0.5
    static_weight_decay: float = 0.5
    tie_break: str = "low_set"
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = _from_dict(EnvConfig, self.env, "env settings")
        if self.episodes < 1 and not self.seeds:
            raise InvalidSuite("A suite needs at least one episode")
        if not self.strategies or not self.noise_p or not self.sigmas:
            raise InvalidSuite("A suite needs at least one strategy, outlier probability and sigma")
        for name in ("strategies", "noise_p", "sigmas"):
            values = getattr(self, name)
            if len(set(values)) != len(values):
                raise InvalidSuite(f"{name} lists a value more than once: {values}")
        try:
            mode = ExecutionMode(self.execution_mode)
        except ValueError as error:
            raise InvalidSuite(str(error)) from error
        for strategy in self.strategies:
            ensemble = self.ensemble(strategy)
            if mode is ExecutionMode.PER_STEP:
                ensemble.check_committee(self.chunk_size)
        for p in self.noise_p:
            self.noise(p, self.sigmas[0])
        for sigma in self.sigmas:
            self.noise(self.noise_p[0], sigma)

    @property
    def episode_seeds(self) -> List[int]:
        """Explicit seeds, or `episodes` consecutive seeds from `seed`"""
        return list(self.seeds) if self.seeds else [self.seed + i for i in range(self.episodes)]

    def ensemble(self, strategy: str) -> EnsembleConfig:
        """The ensemble settings for one strategy"""
        return EnsembleConfig(self.K, self.tau, strategy, self.static_weight_decay, self.tie_break)

    def noise(self, p: float, sigma: float) -> NoiseModel:
        """The noise model for one grid cell"""
        return NoiseModel(sigma, p, self.outlier_scale)

    def serialize(self) -> dict:
        """Serializes the suite into a dictionary"""
        data = asdict(self)
        data["seeds"] = self.episode_seeds
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SuiteConfig":
        """Builds a suite from its JSON form"""
        return _from_dict(cls, data, "suite")


@dataclass(frozen=True)
class EvalRow:
    """One line of the success-rate table"""

    strategy: str
    noise_p: float
    sigma: float
    success_rate: float
    mean_traj_error: float
    episodes: int

    def serialize(self) -> dict:
        """Serializes the row into a dictionary"""
        return asdict(self)


def _run_seed(suite: SuiteConfig, seed: int, keep_logs: bool) -> list:
    """All grid cells for one episode seed"""
    reference = expert_positions(suite.env, seed)
    results = []
    for strategy in suite.strategies:
        for p in suite.noise_p:
            for sigma in suite.sigmas:
                log = run_episode(suite.env, suite.ensemble(strategy), suite.execution_mode,
                                  suite.noise(p, sigma), seed, suite.chunk_size, reference)
                results.append(((strategy, p, sigma), log if keep_logs else (log.success, log.traj_error)))
    return results


def evaluate(suite: SuiteConfig, workers: int = 1, keep_logs: bool = False) -> tuple:
    """
    Runs the suite and returns (rows, logs)

    Episodes fan out over `workers` processes; results are reduced in seed
    order so the table does not depend on the worker count.
    """
    seeds = suite.episode_seeds
    logger.info("Evaluating %d strategies x %d noise levels over %d episodes",
                len(suite.strategies), len(suite.noise_p) * len(suite.sigmas), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed, [suite] * len(seeds), seeds, [keep_logs] * len(seeds)))
    else:
        per_seed = [_run_seed(suite, seed, keep_logs) for seed in seeds]

    outcomes = {}
    logs = []
    for results in per_seed:
        for key, outcome in results:
            if keep_logs:
                logs.append(outcome)
                outcome = (outcome.success, outcome.traj_error)
            outcomes.setdefault(key, []).append(outcome)

    rows = []
    for strategy in suite.strategies:
        for p in suite.noise_p:
            for sigma in suite.sigmas:
                cell = outcomes[(strategy, p, sigma)]
                rows.append(EvalRow(
                    strategy=strategy,
                    noise_p=float(p),
                    sigma=float(sigma),
                    success_rate=sum(success for success, _ in cell) / len(cell),
                    mean_traj_error=float(np.mean([error for _, error in cell])),
                    episodes=len(cell),
                ))
                logger.info("%s p=%.2f sigma=%.3f: success %.3f", strategy, p, sigma, rows[-1].success_rate)
    return rows, logs


def write_csv(rows: Sequence[EvalRow], path) -> Path:
    """Writes the success-rate table"""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as stream:
        writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.serialize())
    return path
