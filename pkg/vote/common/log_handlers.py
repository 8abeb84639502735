######################################################################
# Copyright 2016, 2021 John J. Rofrano. All Rights Reserved.
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

"""
Log Handlers

This module contains utility functions to set up logging
consistently
"""
import logging
import sys

FORMAT_STRING = "[%(asctime)s] [%(levelname)s] [%(module)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S %z"


def init_logging(app, logger_name: str, level=None):
    """
    Set up logging for the CLI

    Borrows the handlers of `logger_name` when a host has configured it,
    otherwise logs to stderr. Library modules log to children of the
    application logger ("vote.head", "vote.sim", ...) and propagate to it.
    """
    app.logger.propagate = False
    host_logger = logging.getLogger(logger_name)
    if host_logger.handlers:
        handlers = list(host_logger.handlers)
    else:
        handlers = [logging.StreamHandler(sys.stderr)]
    level = level if level is not None else app.config.get("LOGGING_LEVEL", logging.INFO)
    # Make all log formats consistent
    formatter = logging.Formatter(FORMAT_STRING, DATE_FORMAT)
    for handler in handlers:
        handler.setFormatter(formatter)
    app.logger.handlers = handlers
    app.logger.setLevel(level)
    app.logger.debug("Logging handler established")
