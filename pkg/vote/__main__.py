"""
Entry point: python -m vote
"""
from vote.common.cli_commands import main

main()
