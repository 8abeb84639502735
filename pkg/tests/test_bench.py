"""
Test cases for the latency benchmark

Test cases can be run with:
    nosetests tests/test_bench.py
"""
import csv
import json
import logging
import tempfile
import unittest
from itertools import count
from pathlib import Path

import numpy as np

from vote import app
from vote.bench import (
    REPORT_COLUMNS,
    BenchConfig,
    InvalidInput,
    LatencyStats,
    MissingBaseline,
    bench_forward,
    bench_stats,
    default_rows,
    report,
    throughput,
)
from vote.head import init_params
from vote.models import NormRange, denormalize_array
from vote.policy import NoActToken, ReplayBackbone


def fake_clock(step_ns=1_000_000):
    """Clock that advances a fixed amount on every reading"""
    ticks = count(0, step_ns)
    return lambda: next(ticks)


######################################################################
#  T H R O U G H P U T   T E S T   C A S E S
######################################################################
class TestThroughput(unittest.TestCase):
    """Test Cases for throughput and speedup arithmetic"""

    def test_reference_rows(self):
        """It should give 145.5, 102.6 and 4.2 actions per second"""
        self.assertAlmostEqual(throughput(16, 110), 145.5, delta=0.1)
        self.assertAlmostEqual(throughput(8, 78), 102.6, delta=0.1)
        self.assertAlmostEqual(throughput(1, 240), 4.2, delta=0.1)

    def test_invalid(self):
        """It should reject non-positive inputs"""
        self.assertRaises(InvalidInput, throughput, 0, 10.0)
        self.assertRaises(InvalidInput, throughput, 8, 0.0)
        self.assertRaises(InvalidInput, throughput, 8, -1.0)

    def test_speedup(self):
        """It should report 34.6x for 145.5 Hz against 4.2 Hz"""
        ours = LatencyStats("ours-16", 16, 2, 2, [16 / 145.5 * 1000.0])
        baseline = LatencyStats("autoregressive", 1, 7, 7, [1 / 4.2 * 1000.0])
        rows = report([baseline, ours], baseline_index=0).rows
        self.assertEqual(rows[0]["speedup"], 1.0)
        self.assertAlmostEqual(rows[1]["speedup"], 34.6, delta=0.05)

    def test_missing_baseline(self):
        """It should raise MissingBaseline without a baseline row"""
        self.assertRaises(MissingBaseline, report, [], 0)
        stats = [LatencyStats("ours", 8, 1, 1, [10.0])]
        self.assertRaises(MissingBaseline, report, stats, 1)

    def test_percentiles(self):
        """It should summarise the samples"""
        stats = LatencyStats("ours", 8, 1, 1, [float(v) for v in range(1, 101)])
        self.assertEqual(stats.mean_ms, 50.5)
        self.assertEqual(stats.p50_ms, 50.5)
        self.assertAlmostEqual(stats.p95_ms, 95.05)
        self.assertAlmostEqual(stats.per_action_ms, 50.5 / 8)
        self.assertRaises(InvalidInput, LatencyStats, "empty", 8, 1, 1, [])


######################################################################
#  C O N F I G   T E S T   C A S E S
######################################################################
class TestBenchConfig(unittest.TestCase):
    """Test Cases for benchmark rows"""

    def test_chunk_size(self):
        """It should produce N per <ACT> token, or N for serial decoding"""
        self.assertEqual(BenchConfig(N=8, tokens=2).chunk_size, 16)
        self.assertEqual(BenchConfig(N=4, mode="serial").chunk_size, 4)

    def test_invalid(self):
        """It should reject bad sizes and modes"""
        self.assertRaises(InvalidInput, BenchConfig, N=0)
        self.assertRaises(InvalidInput, BenchConfig, queries=0)
        self.assertRaises(InvalidInput, BenchConfig, warmup=-1)
        self.assertRaises(InvalidInput, BenchConfig, mode="beam")
        self.assertRaises(InvalidInput, BenchConfig, A=6)
        BenchConfig(A=6, mode="serial")

    def test_deserialize(self):
        """It should build a row from JSON and reject unknown keys"""
        config = BenchConfig.deserialize({"name": "x", "N": 16, "queries": 5})
        self.assertEqual((config.name, config.N, config.queries), ("x", 16, 5))
        self.assertRaises(InvalidInput, BenchConfig.deserialize, {"chunk": 16})

    def test_default_rows(self):
        """It should list the autoregressive baseline and two chunked rows"""
        rows = default_rows(queries=5, warmup=1)
        self.assertEqual([r.name for r in rows], ["autoregressive", "ours-8", "ours-16"])
        self.assertEqual([r.chunk_size for r in rows], [1, 8, 16])


######################################################################
#  M E A S U R E M E N T   T E S T   C A S E S
######################################################################
class TestBenchForward(unittest.TestCase):
    """Test Cases for timed chunk prediction"""

    @classmethod
    def setUpClass(cls):
        """This runs once before the entire test suite"""
        app.config["TESTING"] = True
        app.logger.setLevel(logging.CRITICAL)

    def test_sample_count(self):
        """It should record exactly `queries` samples after the warmup"""
        config = BenchConfig(queries=100, warmup=10, prefill_params=0, pass_params=0)
        stats = bench_forward(config, clock=fake_clock())
        self.assertEqual(len(stats.samples_ms), 100)
        self.assertEqual(stats.samples_ms[0], 1.0)
        self.assertAlmostEqual(stats.throughput_hz, 8000.0)

    def test_decoder_passes(self):
        """It should take one pass per <ACT> token and N * A passes serially"""
        quick = {"queries": 2, "warmup": 0, "prefill_params": 0, "pass_params": 0}
        self.assertEqual(bench_forward(BenchConfig(N=8, tokens=1, **quick)).decoder_passes, 1)
        self.assertEqual(bench_forward(BenchConfig(N=8, tokens=2, **quick)).decoder_passes, 2)
        serial = bench_forward(BenchConfig(N=8, mode="serial", **quick))
        self.assertEqual(serial.decoder_passes, 56)
        self.assertEqual(serial.tokens, 56)

    def test_throughput_identity(self):
        """It should satisfy Hz * mean seconds = chunk size on every row"""
        for config in default_rows(queries=5, warmup=1):
            stats = bench_forward(config)
            product = stats.throughput_hz * stats.mean_ms / 1000.0
            self.assertAlmostEqual(product / stats.chunk_size, 1.0, delta=0.001)

    def test_amortization(self):
        """It should lower per-action latency from chunk 1 to 8 to 16"""
        common = {"queries": 20, "warmup": 3}
        per_action = [
            bench_forward(BenchConfig(N=n, tokens=t, **common)).per_action_ms
            for n, t in ((1, 1), (8, 1), (8, 2))
        ]
        self.assertGreater(per_action[0], per_action[1])
        self.assertGreater(per_action[1], per_action[2])

    def test_refuses_workers(self):
        """It should refuse to measure with worker parallelism"""
        self.assertRaises(InvalidInput, bench_forward, BenchConfig(workers=2))

    def test_report_files(self):
        """It should write a CSV and a JSON mirror with the warmup note"""
        stats = [bench_forward(c, clock=fake_clock()) for c in default_rows(queries=3, warmup=0)]
        bench_report = report(stats, baseline_index=0, warmup=0)
        with tempfile.TemporaryDirectory() as tmp:
            csv_path, json_path = bench_report.write(tmp)
            with csv_path.open(encoding="utf-8") as stream:
                table = list(csv.DictReader(stream))
            data = json.loads(Path(json_path).read_text(encoding="utf-8"))
        self.assertEqual(tuple(table[0]), REPORT_COLUMNS)
        self.assertEqual([row["config_name"] for row in table], ["autoregressive", "ours-8", "ours-16"])
        self.assertEqual([int(row["decoder_passes"]) for row in table], [7, 1, 2])
        self.assertTrue(data["warmup_excluded"])
        self.assertEqual(len(data["rows"]), 3)
        self.assertEqual(data["rows"][0]["speedup"], 1.0)


######################################################################
#  I N P U T   F I L E   T E S T   C A S E S
######################################################################
class TestBenchInputs(unittest.TestCase):
    """Test Cases for trained heads, replay files and stats"""

    @classmethod
    def setUpClass(cls):
        """This runs once before the entire test suite"""
        app.config["TESTING"] = True
        app.logger.setLevel(logging.CRITICAL)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_stats_follow_output_activation(self):
        """It should span the full action range with a ReLU or a linear head"""
        relu = bench_stats(init_params(8, 2, 7, seed=0))
        linear = bench_stats(init_params(8, 2, 7, seed=0, output_activation="linear"))
        self.assertIs(relu.range, NormRange.UNIT)
        self.assertIs(linear.range, NormRange.SYMMETRIC)
        bottom = denormalize_array(np.zeros((1, 7)), relu)
        np.testing.assert_array_equal(bottom[0, :6], -np.ones(6))

    def test_stats_file(self):
        """It should read stats from a JSON file"""
        path = self.dir / "stats.json"
        path.write_text(json.dumps({"q_low": [-0.5] * 6, "q_high": [0.5] * 6, "range": "symmetric"}),
                        encoding="utf-8")
        stats = bench_stats(init_params(8, 2, 7, seed=0), str(path))
        np.testing.assert_array_equal(stats.q_high, [0.5] * 6)
        path.write_text("{", encoding="utf-8")
        self.assertRaises(InvalidInput, bench_stats, init_params(8, 2, 7, seed=0), str(path))

    def test_replay_with_saved_head(self):
        """It should decode recorded hidden states with a head read from disk"""
        rng = np.random.default_rng(3)
        weights = init_params(12, 4, 7, seed=2).save(self.dir / "head.bin")
        replay = ReplayBackbone.save(self.dir / "h_act.bin", {s: rng.normal(size=(2, 12)) for s in range(4)})
        config = BenchConfig(N=16, tokens=2, queries=6, warmup=2, weights=str(weights), replay=str(replay))
        stats = bench_forward(config, clock=fake_clock())
        self.assertEqual(stats.chunk_size, 8)
        self.assertEqual(stats.decoder_passes, 2)
        self.assertEqual(len(stats.samples_ms), 6)

    def test_replay_needs_enough_tokens(self):
        """It should fail when a recorded step holds fewer <ACT> states than requested"""
        replay = ReplayBackbone.save(self.dir / "h_act.bin", {0: np.ones((1, 8))})
        config = BenchConfig(N=4, tokens=2, queries=1, warmup=0, replay=str(replay))
        self.assertRaises(NoActToken, bench_forward, config)

    def test_serial_rows_reject_inputs(self):
        """It should keep weights and replay files off serial rows"""
        self.assertRaises(InvalidInput, BenchConfig, mode="serial", weights="head.bin")
        self.assertRaises(InvalidInput, BenchConfig, mode="serial", replay="h_act.bin")
