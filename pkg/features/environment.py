"""
Environment for Behave Testing
"""
import shutil
import tempfile
from os import getenv
from pathlib import Path

from click.testing import CliRunner

EPISODES = int(getenv('EPISODES', '5'))
QUERIES = int(getenv('QUERIES', '5'))


def before_all(context):
    """ Executed once before all tests """
    context.episodes = EPISODES
    context.queries = QUERIES
    context.config.setup_logging()


def before_scenario(context, scenario):  # pylint: disable=unused-argument
    """ Each scenario writes into its own output directory """
    context.runner = CliRunner()
    context.out = Path(tempfile.mkdtemp(prefix="vote-bdd-"))


def after_scenario(context, scenario):  # pylint: disable=unused-argument
    """ Executed after each scenario """
    shutil.rmtree(context.out, ignore_errors=True)
