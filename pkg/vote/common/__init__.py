"""
Common utilities shared by the CLI: exit codes, logging and error handlers
"""
