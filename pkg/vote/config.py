"""
Global Configuration for Application
"""
import os
import logging

# Get configuration from environment
LOGGING_LEVEL = getattr(logging, os.getenv("VOTE_LOG_LEVEL", "INFO").upper(), logging.INFO)

# Root seed; every component derives its own stream from it
SEED = int(os.getenv("VOTE_SEED", "0"))
OUT_DIR = os.getenv("VOTE_OUT", "out")

# Head and ensemble defaults
HIDDEN_DIM = int(os.getenv("VOTE_HIDDEN_DIM", "64"))
CHUNK_SIZE = int(os.getenv("VOTE_CHUNK_SIZE", "8"))
HORIZON_K = int(os.getenv("VOTE_HORIZON_K", "4"))
TAU = float(os.getenv("VOTE_TAU", "0.5"))
TOKENS = int(os.getenv("VOTE_TOKENS", "1"))
OUTPUT_ACTIVATION = os.getenv("VOTE_OUTPUT_ACTIVATION", "relu")

# Episode fan-out; 1 keeps runs bit-reproducible
WORKERS = int(os.getenv("VOTE_WORKERS", "1"))
