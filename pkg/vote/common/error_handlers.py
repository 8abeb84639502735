# Copyright 2016, 2022 John J. Rofrano. All Rights Reserved.
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
"""
Module: error_handlers

Maps exceptions raised by the library to process exit codes
"""
import functools

import click

from vote import app
from vote.head import Diverged
from vote.models import DataValidationError
from . import status

HANDLERS = {}


def errorhandler(exc_class):
    """Registers the decorated function as the handler for exc_class"""

    def decorator(func):
        HANDLERS[exc_class] = func
        return func

    return decorator


def handle(error: Exception) -> int:
    """Runs the most specific registered handler and returns its exit code"""
    for klass in type(error).__mro__:
        if klass in HANDLERS:
            return HANDLERS[klass](error)
    raise error


def exits_with_status(func):
    """Turns handled exceptions raised by a command into its exit code"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except tuple(HANDLERS) as error:
            click.get_current_context().exit(handle(error))
        return None

    return wrapper


######################################################################
# Error Handlers
######################################################################
@errorhandler(DataValidationError)
def data_validation_error(error):
    """Handles contract violations in inputs and files"""
    message = str(error)
    app.logger.warning(message)
    click.echo(f"Error: {message}", err=True)
    return status.EXIT_1_ERROR


@errorhandler(Diverged)
def diverged(error):
    """Handles a training run whose loss stopped being finite"""
    message = str(error)
    app.logger.error("Training diverged: %s", message)
    click.echo(f"Error: training diverged: {message}", err=True)
    return status.EXIT_1_ERROR


@errorhandler(OSError)
def io_error(error):
    """Handles unreadable inputs and unwritable outputs"""
    message = str(error)
    app.logger.error(message)
    click.echo(f"Error: {message}", err=True)
    return status.EXIT_1_ERROR
