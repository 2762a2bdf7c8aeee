"""Experiment harness: configuration, checkpoint persistence, recipes, CLI."""

from .config import ExperimentConfig, ConfigError
from .checkpoint import (save_checkpoint, load_checkpoint, CheckpointFormatError,
                         ChecksumError, VersionError, TruncationError)
