######################################################################
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
######################################################################

"""
Package: vote

Action-generation runtime: chunked action decoding from a single <ACT>
token, the vote ensemble, a closed-loop simulator and a latency bench.
This module creates and configures the Flask app that hosts the CLI
commands and sets up the logging
"""
from flask import Flask
from vote import config
from vote.common import log_handlers

# NOTE: Do not change the order of this code
# The Flask app must be created
# BEFORE you import modules that depend on it !!!

# Create the Flask app
app = Flask(__name__)  # pylint: disable=invalid-name

# Load Configurations
app.config.from_object(config)

# Dependencies require we import the commands AFTER the Flask app is created
# pylint: disable=wrong-import-position, wrong-import-order, cyclic-import
from vote.common import error_handlers, cli_commands  # noqa: F401, E402

# Set up logging for the command line
log_handlers.init_logging(app, "vote.cli")

app.logger.debug("Action runtime initialized!")
