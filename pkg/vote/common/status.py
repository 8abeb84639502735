# coding: utf8

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
Descriptive process exit codes, for improved code readability

Every subcommand ends with one of these
"""

# Completed - 0
EXIT_0_OK = 0

# Failed - 1: I/O, contract violations, divergence, usage errors
EXIT_1_ERROR = 1

# Finished without converging - 2
EXIT_2_NOT_CONVERGED = 2
