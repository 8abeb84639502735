"""
Latency benchmark

Times chunk prediction end to end (pseudo-backbone or a hidden-state
replay file, plus a fresh or trained head) and the serial per-dimension
decoding baseline, then reports latency percentiles,
throughput in actions per second and speedup over a baseline row.
Warmup queries are never part of the recorded samples.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from vote.head import HeadParams, init_params
from vote.models import ACTION_DIM, DataValidationError, NormalizationStats, NormRange
from vote.policy import PassCounter, PseudoBackbone, ReplayBackbone, predict_chunk, serial_decode_baseline

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "config_name",
    "chunk_size",
    "tokens",
    "mean_ms",
    "p50_ms",
    "p95_ms",
    "throughput_hz",
    "speedup",
    "decoder_passes",
)
DEFAULT_WARMUP = 10
DEFAULT_QUERIES = 100
OBS_DIM = 16
INSTRUCTION = (3, 1, 4, 1, 5)


class InvalidInput(DataValidationError):
    """Benchmark inputs are out of range"""


class MissingBaseline(DataValidationError):
    """The report has no baseline row to compare against"""


class DecodeMode(Enum):
    """What a bench row times"""

    ACT_TOKEN = "act_token"
    SERIAL = "serial"


@dataclass
class BenchConfig:  # pylint: disable=too-many-instance-attributes
    """One benchmark row"""

    name: str = "ours"
    H: int = 64  # pylint: disable=invalid-name
    N: int = 8  # pylint: disable=invalid-name
    A: int = ACTION_DIM  # pylint: disable=invalid-name
    tokens: int = 1
    queries: int = DEFAULT_QUERIES
    warmup: int = DEFAULT_WARMUP
    mode: str = DecodeMode.ACT_TOKEN.value
    prefill_params: int = 4_000_000
    pass_params: int = 1_000_000
    seed: int = 0
    workers: int = 0
    weights: Optional[str] = None
    replay: Optional[str] = None
    stats: Optional[str] = None

    def __post_init__(self):
        try:
            self.mode = DecodeMode(getattr(self.mode, "value", self.mode)).value
        except ValueError as error:
            raise InvalidInput(str(error)) from error
        for name in ("H", "N", "A", "tokens", "queries"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise InvalidInput(f"{name} must be a positive integer, got {value!r}")
        if self.warmup < 0 or self.prefill_params < 0 or self.pass_params < 0:
            raise InvalidInput("warmup and synthetic parameter counts must be non-negative")
        if self.mode == DecodeMode.ACT_TOKEN.value and self.A != ACTION_DIM:
            raise InvalidInput(f"<ACT> decoding produces executable actions, so A must be {ACTION_DIM}")
        if self.mode == DecodeMode.SERIAL.value and (self.weights or self.replay or self.stats):
            raise InvalidInput("weights, replay and stats only apply to <ACT> rows")

    @property
    def chunk_size(self) -> int:
        """Actions produced per query"""
        return self.N * self.tokens if self.mode == DecodeMode.ACT_TOKEN.value else self.N

    @classmethod
    def deserialize(cls, data: dict) -> "BenchConfig":
        """Builds a row from its JSON form, rejecting unknown keys"""
        unknown = set(data) - set(cls.__dataclass_fields__)  # pylint: disable=no-member
        if unknown:
            raise InvalidInput(f"Unknown bench settings: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as error:
            raise InvalidInput(str(error)) from error


@dataclass
class LatencyStats:
    """Per-query wall-clock samples of one row"""

    config_name: str
    chunk_size: int
    tokens: int
    decoder_passes: int
    samples_ms: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.samples_ms:
            raise InvalidInput("LatencyStats needs at least one sample")

    @property
    def mean_ms(self) -> float:
        """Mean latency"""
        return float(np.mean(self.samples_ms))

    @property
    def p50_ms(self) -> float:
        """Median latency"""
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p95_ms(self) -> float:
        """95th percentile latency"""
        return float(np.percentile(self.samples_ms, 95))

    @property
    def throughput_hz(self) -> float:
        """Actions per second"""
        return throughput(self.chunk_size, self.mean_ms)

    @property
    def per_action_ms(self) -> float:
        """Mean latency amortized over the chunk"""
        return self.mean_ms / self.chunk_size


def throughput(chunk_size: int, mean_latency_ms: float) -> float:
    """Actions per second for a chunk produced in mean_latency_ms"""
    if chunk_size <= 0 or mean_latency_ms <= 0:
        raise InvalidInput(f"Throughput needs positive inputs, got ({chunk_size}, {mean_latency_ms})")
    return chunk_size / (mean_latency_ms / 1000.0)


def bench_stats(head: HeadParams, path: Optional[str] = None) -> NormalizationStats:
    """
    Stats read from `path`, or unit-interval limits on every continuous dim

    Without a file the normalized range follows the head's output
    activation: [0, 1] under ReLU, [-1, 1] for a linear output.
    """
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as error:
            raise InvalidInput(f"{path} is not valid JSON: {error}") from error
        return NormalizationStats.deserialize(data)
    norm_range = NormRange.UNIT if head.output_activation == "relu" else NormRange.SYMMETRIC
    return NormalizationStats.symmetric_bounds([1.0] * 6, norm_range)


def bench_forward(config: BenchConfig, clock: Callable[[], int] = time.perf_counter_ns) -> LatencyStats:
    """
    Runs `warmup` untimed queries, then times `queries` more

    Each query is one full chunk prediction (or one serial decode of N * A
    passes) with its own pass counter. <ACT> rows use the head in
    `weights` when given (its N replaces the row's) and read hidden states
    from `replay` when given, cycling over its recorded steps.
    """
    if config.workers != 0:
        raise InvalidInput("The benchmark runs single-threaded; set workers to 0")
    rng = np.random.default_rng(config.seed)
    obs = rng.normal(size=OBS_DIM)
    serial = config.mode == DecodeMode.SERIAL.value
    head = HeadParams.load(config.weights) if config.weights else None
    if config.replay:
        backbone = ReplayBackbone(config.replay)
        steps = sorted(backbone.states)
    else:
        backbone = PseudoBackbone(
            hidden=head.hidden if head is not None else config.H,
            seed=config.seed,
            prefill_params=config.prefill_params,
            pass_params=config.pass_params,
        )
        steps = [0]
    if serial:
        chunk_size = config.chunk_size

        def query(counter, _):
            serial_decode_baseline(obs, INSTRUCTION, config.N, config.A, backbone, counter)
    else:
        if head is None:
            head = init_params(backbone.hidden, config.N, config.A, seed=config.seed)
        chunk_size = head.chunk_size * config.tokens
        stats = bench_stats(head, config.stats)

        def query(counter, index):
            step = steps[index % len(steps)]
            predict_chunk(obs, INSTRUCTION, head, config.tokens, backbone, stats, counter, origin_step=step)

    for index in range(config.warmup):
        query(PassCounter(), index)
    samples = []
    passes = 0
    for index in range(config.queries):
        counter = PassCounter()
        start = clock()
        query(counter, config.warmup + index)
        samples.append((clock() - start) / 1e6)
        passes = counter.decoder_forward_passes
    result = LatencyStats(
        config_name=config.name,
        chunk_size=chunk_size,
        tokens=config.N * config.A if serial else config.tokens,
        decoder_passes=passes,
        samples_ms=samples,
    )
    logger.info("%s: mean %.3f ms, %.1f Hz, %d passes",
                config.name, result.mean_ms, result.throughput_hz, passes)
    return result


@dataclass
class BenchReport:
    """Rows of the latency table plus the warmup setting they were taken with"""

    rows: List[dict]
    warmup: int = DEFAULT_WARMUP

    def to_json(self) -> dict:
        """JSON mirror of the CSV"""
        return {"warmup_excluded": True, "warmup": self.warmup, "rows": self.rows}

    def write(self, out_dir, stem: str = "bench") -> tuple:
        """Writes <stem>.csv and <stem>.json into out_dir"""
        out_dir = Path(out_dir)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}.json"
        with csv_path.open("w", newline="", encoding="utf-8") as stream:
            writer = csv.DictWriter(stream, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)
        json_path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return csv_path, json_path


def report(stats: Sequence[LatencyStats], baseline_index: int, warmup: int = DEFAULT_WARMUP) -> BenchReport:
    """Adds speedup against stats[baseline_index] to every row"""
    if not stats or not 0 <= baseline_index < len(stats):
        raise MissingBaseline(f"No baseline row at index {baseline_index}")
    base = stats[baseline_index].throughput_hz
    rows = []
    for entry in stats:
        row = asdict(entry)
        del row["samples_ms"]
        row.update(
            mean_ms=entry.mean_ms,
            p50_ms=entry.p50_ms,
            p95_ms=entry.p95_ms,
            throughput_hz=entry.throughput_hz,
            speedup=entry.throughput_hz / base,
        )
        rows.append({column: row[column] for column in REPORT_COLUMNS})
    return BenchReport(rows, warmup)


def default_rows(queries: int = DEFAULT_QUERIES, warmup: int = DEFAULT_WARMUP) -> List[BenchConfig]:
    """Autoregressive baseline, one-token chunk of 8, two-token chunk of 16"""
    return [
        BenchConfig(name="autoregressive", N=1, mode=DecodeMode.SERIAL.value, queries=queries, warmup=warmup),
        BenchConfig(name="ours-8", N=8, tokens=1, queries=queries, warmup=warmup),
        BenchConfig(name="ours-16", N=8, tokens=2, queries=queries, warmup=warmup),
    ]
