"""
CLI Command Extensions for Flask

Usage:
    python -m vote [--seed N] [--out DIR] [--config FILE] COMMAND [OPTIONS]
    flask --app vote COMMAND [OPTIONS]

Commands: train-toy, eval, bench, ensemble-trace, inspect-weights.
Settings resolve as command flags, then the matching section of the
--config JSON file, then VOTE_* environment variables, then defaults.
"""
import csv
import json
from dataclasses import replace
from pathlib import Path

import click
from flask.cli import FlaskGroup

from vote import app, bench, ensemble, head, sim, tensor_file
from vote.models import ActionChunk, DataValidationError, NormalizationStats, denormalize_array, normalize_array
from vote.common import status
from vote.common.error_handlers import exits_with_status

CONFIG_SECTIONS = ("train", "suite", "bench", "ensemble")
TRACE_COLUMNS = ("step", "l1", "ce", "total")


class TraceFormatError(DataValidationError):
    """A line of a chunk trace could not be parsed"""


######################################################################
# Shared helpers
######################################################################
def _csv_list(kind):
    """Click callback that splits a comma separated value"""

    def convert(ctx, param, value):  # pylint: disable=unused-argument
        if value is None:
            return None
        try:
            return [kind(item.strip()) for item in value.split(",") if item.strip()]
        except ValueError as error:
            raise click.BadParameter(str(error)) from error

    return convert


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise DataValidationError(f"{path} is not valid JSON: {error}") from error
    if not isinstance(data, dict):
        raise DataValidationError(f"{path} must hold a JSON object")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise DataValidationError(f"{path} has unknown sections {unknown}")
    return data


def _section(ctx, name: str):
    return ctx.meta.get("vote.config", {}).get(name, {})


def _seed(ctx, section: dict) -> int:
    """--seed, then the section's seed, then VOTE_SEED"""
    seed = ctx.meta.get("vote.seed")
    if seed is not None:
        return seed
    return section.get("seed", app.config["SEED"])


def _out_dir(ctx) -> Path:
    out = Path(ctx.meta.get("vote.out") or app.config["OUT_DIR"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _merge(*layers) -> dict:
    merged = {}
    for layer in layers:
        merged.update({key: value for key, value in layer.items() if value is not None})
    return merged


######################################################################
# Root command
######################################################################
class VoteGroup(FlaskGroup):
    """Root command; usage errors exit with 1 like every other failure"""

    def parse_args(self, ctx, args):
        try:
            return super().parse_args(ctx, args)
        except click.UsageError as error:
            error.exit_code = status.EXIT_1_ERROR
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as error:
            error.exit_code = status.EXIT_1_ERROR
            raise


@click.pass_context
@exits_with_status
def _root(ctx, seed, out, config_file):
    ctx.meta["vote.seed"] = seed
    ctx.meta["vote.out"] = out
    ctx.meta["vote.config"] = _load_config(config_file)


cli = VoteGroup(  # pylint: disable=invalid-name
    name="vote",
    help="Chunked action decoding, vote ensembling and latency benchmarks.",
    create_app=lambda: app,
    add_default_commands=False,
    add_version_option=False,
    load_dotenv=True,
    callback=_root,
    params=[
        click.Option(["--seed"], type=int, default=None, help="Root seed for every random stream."),
        click.Option(["--out"], type=click.Path(file_okay=False), default=None, help="Output directory."),
        click.Option(
            ["--config", "config_file"],
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="JSON file with train, suite, bench and ensemble sections.",
        ),
    ],
)


def main():
    """Console entry point"""
    cli.main(prog_name="vote")


######################################################################
# Train the head on the synthetic task
# Usage: vote train-toy --steps 2000
######################################################################
@app.cli.command("train-toy")
@click.option("--steps", type=int, help="Step budget.")
@click.option("--samples", type=int, help="Synthetic dataset size.")
@click.option("--hidden", type=int, help="Hidden width H.")
@click.option("--chunk", type=int, help="Chunk size N.")
@click.option("--batch-size", type=int, help="Minibatch size; 0 trains on the full dataset.")
@click.option("--lr", type=float, help="Adam learning rate.")
@click.option("--lr-decay-step", type=int, help="Step from which the rate is scaled down.")
@click.option("--threshold", type=float, help="Action L1 that counts as converged.")
@click.option("--activation", type=click.Choice(head.OUTPUT_ACTIVATIONS), help="Output activation.")
@click.option("--log-every", type=int, help="Progress log interval in steps.")
@click.pass_context
@exits_with_status
def train_toy(ctx, steps, samples, hidden, chunk, batch_size, lr, lr_decay_step, threshold, activation,
              log_every):  # pylint: disable=too-many-arguments
    """Trains the action head; exits 2 if it does not converge"""
    section = _section(ctx, "train")
    settings = _merge(
        {
            "hidden": app.config["HIDDEN_DIM"],
            "chunk_size": app.config["CHUNK_SIZE"],
            "output_activation": app.config["OUTPUT_ACTIVATION"],
        },
        section,
        {
            "seed": _seed(ctx, section),
            "steps": steps,
            "samples": samples,
            "hidden": hidden,
            "chunk_size": chunk,
            "batch_size": batch_size,
            "lr": lr,
            "lr_decay_step": lr_decay_step,
            "l1_threshold": threshold,
            "output_activation": activation,
            "log_every": log_every,
        },
    )
    config = head.ToyTrainConfig.deserialize(settings)
    out = _out_dir(ctx)
    result = head.train_toy(config)

    weights = result.params.save(out / "weights.bin")
    with (out / "loss_trace.csv").open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream)
        writer.writerow(TRACE_COLUMNS)
        writer.writerows(result.trace)
    (out / "train_config.json").write_text(json.dumps(config.serialize(), indent=2), encoding="utf-8")
    click.echo(f"final_l1={result.final_l1:.6f} steps={len(result.trace)} weights={weights}")
    ctx.exit(status.EXIT_0_OK if result.converged else status.EXIT_2_NOT_CONVERGED)


######################################################################
# Evaluate ensemble strategies in the simulator
# Usage: vote eval --strategies vote,none --noise 0.0,0.2
######################################################################
@app.cli.command("eval")
@click.option("--strategies", callback=_csv_list(str), help="Comma separated strategies.")
@click.option("--noise", callback=_csv_list(float), help="Comma separated outlier probabilities.")
@click.option("--sigma", callback=_csv_list(float), help="Comma separated Gaussian sigmas.")
@click.option("--episodes", type=int, help="Episodes per grid cell.")
@click.option("--mode", type=click.Choice([m.value for m in sim.ExecutionMode]), help="Execution mode.")
@click.option("--task", type=click.Choice(sim.TASKS), help="Simulator task.")
@click.option("--chunk", type=int, help="Chunk size N.")
@click.option("-K", "--horizon", "horizon", type=int, help="Ensemble horizon K.")
@click.option("--tau", type=float, help="Similarity threshold.")
@click.option("--workers", type=int, help="Episode worker processes.")
@click.option("--episode-log", is_flag=True, help="Also write every episode as JSONL.")
@click.pass_context
@exits_with_status
def eval_suite(ctx, strategies, noise, sigma, episodes, mode, task, chunk, horizon, tau, workers,
               episode_log):  # pylint: disable=too-many-arguments
    """Runs the strategy x noise suite and writes eval.csv"""
    section = dict(_section(ctx, "suite"))
    env = dict(section.pop("env", {}))
    if task is not None:
        env["task"] = task
    shared = {key: value for key, value in _section(ctx, "ensemble").items() if key != "strategy"}
    settings = _merge(
        {"chunk_size": app.config["CHUNK_SIZE"], "K": app.config["HORIZON_K"], "tau": app.config["TAU"]},
        shared,
        section,
        {
            "seed": _seed(ctx, section),
            "strategies": strategies,
            "noise_p": noise,
            "sigmas": sigma,
            "episodes": episodes,
            "execution_mode": mode,
            "chunk_size": chunk,
            "K": horizon,
            "tau": tau,
            "env": env,
        },
    )
    suite = sim.SuiteConfig.from_dict(settings)
    out = _out_dir(ctx)
    workers = workers if workers is not None else app.config["WORKERS"]
    rows, logs = sim.evaluate(suite, workers=workers, keep_logs=episode_log)
    sim.write_csv(rows, out / "eval.csv")
    (out / "suite.json").write_text(json.dumps(suite.serialize(), indent=2), encoding="utf-8")
    if episode_log:
        sim.write_episode_logs(out / "episodes.jsonl", logs)
    for row in rows:
        click.echo(f"{row.strategy:16s} p={row.noise_p:.2f} sigma={row.sigma:.3f} "
                   f"success={row.success_rate:.3f} traj_error={row.mean_traj_error:.4f}")
    ctx.exit(status.EXIT_0_OK)


######################################################################
# Latency benchmark
# Usage: vote bench --queries 100 --chunk 8 --tokens 2
#        vote bench --weights out/weights.bin --replay h_act.bin
######################################################################
@app.cli.command("bench")
@click.option("--queries", type=int, help="Timed queries per row.")
@click.option("--warmup", type=int, help="Untimed queries before each row.")
@click.option("--chunk", type=int, help="Chunk size N of the <ACT> row.")
@click.option("--tokens", type=int, help="<ACT> tokens of the <ACT> row.")
@click.option("--hidden", type=int, help="Hidden width H.")
@click.option("--prefill-params", type=int, help="Synthetic parameters charged once per prompt.")
@click.option("--pass-params", type=int, help="Synthetic parameters charged per decoder pass.")
@click.option("--baseline", default="autoregressive", show_default=True, help="Row that speedups refer to.")
@click.option("--workers", type=int, default=0, show_default=True, help="Must stay 0.")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False),
              help="Trained head for the <ACT> rows (e.g. OUT/weights.bin from train-toy).")
@click.option("--replay", type=click.Path(exists=True, dir_okay=False),
              help="Hidden-state replay file (h_act/<step> tensors) used instead of the pseudo-backbone.")
@click.option("--stats", "stats_file", type=click.Path(exists=True, dir_okay=False),
              help="NormalizationStats JSON for denormalizing <ACT> rows.")
@click.pass_context
@exits_with_status
def bench_latency(ctx, queries, warmup, chunk, tokens, hidden, prefill_params, pass_params, baseline,
                  workers, weights, replay, stats_file):  # pylint: disable=too-many-arguments,too-many-locals
    """Times chunk prediction and writes bench.csv and bench.json"""
    section = _section(ctx, "bench")
    seed = _seed(ctx, {})
    if section:
        if not isinstance(section, list):
            raise DataValidationError("The bench section must be a list of rows")
        rows = [bench.BenchConfig.deserialize(row) for row in section]
    else:
        rows = bench.default_rows()
    if chunk is not None or tokens is not None:
        n = chunk if chunk is not None else app.config["CHUNK_SIZE"]
        t = tokens if tokens is not None else app.config["TOKENS"]
        rows = [row for row in rows if row.mode == bench.DecodeMode.SERIAL.value]
        rows.append(bench.BenchConfig(name=f"ours-{n * t}", N=n, tokens=t))
    overrides = _merge(
        {"seed": seed, "workers": workers},
        {
            "queries": queries,
            "warmup": warmup,
            "H": hidden,
            "prefill_params": prefill_params,
            "pass_params": pass_params,
        },
    )
    inputs = {"weights": weights, "replay": replay, "stats": stats_file}
    rows = [replace(row, **overrides) for row in rows]
    rows = [
        replace(row, **_merge(inputs)) if row.mode == bench.DecodeMode.ACT_TOKEN.value else row
        for row in rows
    ]
    names = [row.name for row in rows]
    if baseline not in names:
        raise bench.MissingBaseline(f"No bench row named {baseline!r}; rows are {names}")
    out = _out_dir(ctx)
    stats = [bench.bench_forward(row) for row in rows]
    report = bench.report(stats, names.index(baseline), warmup=rows[0].warmup)
    report.write(out)
    for row in report.rows:
        click.echo(f"{row['config_name']:16s} {row['mean_ms']:9.3f} ms {row['throughput_hz']:10.1f} Hz "
                   f"x{row['speedup']:.2f} passes={row['decoder_passes']}")
    ctx.exit(status.EXIT_0_OK)


######################################################################
# Replay a chunk trace through the ensemble
# Usage: vote ensemble-trace chunks.jsonl --strategy vote
######################################################################
def read_chunk_trace(path) -> list:
    """Parses one {"origin_step", "actions"} object per non-blank line"""
    chunks = []
    with Path(path).open(encoding="utf-8") as stream:
        for number, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                chunks.append(ActionChunk.deserialize(json.loads(line)))
            except (json.JSONDecodeError, DataValidationError, AttributeError) as error:
                raise TraceFormatError(f"{path}, line {number}: {error}") from error
    return chunks


@app.cli.command("ensemble-trace")
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.option("-K", "--horizon", "horizon", type=int, help="Ensemble horizon K.")
@click.option("--tau", type=float, help="Similarity threshold.")
@click.option("--strategy", type=click.Choice([s.value for s in ensemble.Strategy]), help="Aggregation.")
@click.option("--decay", type=float, help="Decay of the static weighted strategy.")
@click.option("--tie-break", type=click.Choice([t.value for t in ensemble.TieBreak]), help="Camp chosen on ties.")
@click.option("--stats", "stats_file", type=click.Path(exists=True, dir_okay=False),
              help="NormalizationStats JSON; raw chunks are normalized before ensembling. "
                   "Without it the trace must already hold normalized actions.")
@click.option("--output", type=click.Path(dir_okay=False), help="Trace file (default OUT/trace.jsonl).")
@click.pass_context
@exits_with_status
def ensemble_trace(ctx, trace, horizon, tau, strategy, decay, tie_break, stats_file,
                   output):  # pylint: disable=too-many-arguments
    """
    Aggregates every step of a chunk trace and writes one JSON line per step

    Similarity is computed on normalized actions: pass --stats for a trace of
    raw actions, or supply a trace that is already normalized.
    """
    settings = _merge(
        {"K": app.config["HORIZON_K"], "tau": app.config["TAU"]},
        _section(ctx, "ensemble"),
        {"K": horizon, "tau": tau, "strategy": strategy, "static_weight_decay": decay, "tie_break": tie_break},
    )
    config = ensemble.EnsembleConfig.deserialize(settings)
    chunks = read_chunk_trace(trace)
    stats = None
    if stats_file is not None:
        stats = NormalizationStats.deserialize(json.loads(Path(stats_file).read_text(encoding="utf-8")))
        chunks = [ActionChunk.from_array(normalize_array(c.as_array(), stats), c.origin_step) for c in chunks]
    path = Path(output) if output else _out_dir(ctx) / "trace.jsonl"
    with path.open("w", encoding="utf-8") as stream:
        for record in ensemble.replay_trace(chunks, config):
            if stats is not None:
                record["action"] = [float(v) for v in denormalize_array(record["action"], stats)]
            stream.write(json.dumps(record) + "\n")
    click.echo(f"Wrote {len(chunks)} records to {path}")
    ctx.exit(status.EXIT_0_OK)


######################################################################
# Summarize a weights file
# Usage: vote inspect-weights out/weights.bin
######################################################################
@app.cli.command("inspect-weights")
@click.argument("weights", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@exits_with_status
def inspect_weights(ctx, weights):
    """Prints the manifest, tensor shapes and parameter counts as JSON"""
    params = head.HeadParams.load(weights)
    manifest = tensor_file.read_manifest(weights)
    hidden, chunk, action = params.hidden, params.chunk_size, params.action_dim
    summary = {
        "H": hidden,
        "N": chunk,
        "A": action,
        "eps": params.eps,
        "output_activation": params.output_activation,
        "tensors": [{"name": t["name"], "shape": t["shape"]} for t in manifest["tensors"]],
        "param_count": int(sum(array.size for array in params.arrays())),
        "head_param_count": head.head_param_count(hidden, chunk, action),
        "oft_head_param_count": head.oft_head_param_count(hidden, action),
        "output_width_delta": head.output_width_delta(hidden, chunk, action),
    }
    click.echo(json.dumps(summary, indent=2))
    ctx.exit(status.EXIT_0_OK)
