######################################################################
# Copyright 2016, 2023 John J. Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
######################################################################

# pylint: disable=function-redefined, missing-function-docstring
# flake8: noqa
"""
CLI Steps

Steps file for cli.feature
"""
import csv
import json
import shlex

from behave import given, when, then

from vote.common.cli_commands import cli

CHUNK_SIZE = 5


def run(context, args):
    context.result = context.runner.invoke(cli, ["--out", str(context.out), *args])


def chunk_line(step, dx, g):
    action = [dx, 0.0, 0.0, 0.0, 0.0, 0.0, g]
    return json.dumps({"origin_step": step, "actions": [action] * CHUNK_SIZE})


@given('the following chunk trace')
def step_impl(context):
    """ Write one constant chunk per table row """
    context.trace = context.out / "chunks.jsonl"
    with context.trace.open("w", encoding="utf-8") as stream:
        for row in context.table:
            stream.write(chunk_line(int(row['origin_step']), float(row['dx']), float(row['g'])) + "\n")


@given('a chunk trace with a malformed second line')
def step_impl(context):
    context.trace = context.out / "chunks.jsonl"
    context.trace.write_text(chunk_line(0, 0.05, 1.0) + "\n{not json\n", encoding="utf-8")


@when('I run "{command}"')
def step_impl(context, command):
    run(context, shlex.split(command))


@when('I run "{command}" over the episode budget')
def step_impl(context, command):
    run(context, shlex.split(command) + ["--episodes", str(context.episodes)])


@when('I run "{command}" with the query budget')
def step_impl(context, command):
    run(context, shlex.split(command) + ["--queries", str(context.queries), "--warmup", "1"])


@when('I replay the trace with "{options}"')
def step_impl(context, options):
    run(context, ["ensemble-trace", str(context.trace), *shlex.split(options)])


@then('the exit code should be {code:d}')
def step_impl(context, code):
    assert context.result.exit_code == code, context.result.output


@then('I should see "{text}"')
def step_impl(context, text):
    assert text in context.result.output


@then('the file "{name}" should exist')
def step_impl(context, name):
    assert (context.out / name).exists()


@then('the file "{name}" should have {count:d} lines')
def step_impl(context, name, count):
    lines = (context.out / name).read_text(encoding="utf-8").splitlines()
    assert len(lines) == count


@then('every "{column}" in "{name}" should be "{value}"')
def step_impl(context, column, name, value):
    with (context.out / name).open(encoding="utf-8") as stream:
        rows = list(csv.DictReader(stream))
    assert rows
    assert all(float(row[column]) == float(value) for row in rows)


@then('the "{config}" row of "{name}" should have "{column}" of "{value}"')
def step_impl(context, config, name, column, value):
    with (context.out / name).open(encoding="utf-8") as stream:
        rows = {row['config_name']: row for row in csv.DictReader(stream)}
    assert rows[config][column] == value


@then('the last trace record should have {camp} set "{members}"')
def step_impl(context, camp, members):
    lines = (context.out / "trace.jsonl").read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[-1])
    assert record[camp] == [int(m) for m in members.split(",")]
