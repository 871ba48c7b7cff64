"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, TrainingDiverged -> 3,
and IO failures (OSError) -> 4.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration, argument, or incompatible inputs."""


class DimensionError(ConfigError):
    """Image or grid dimensions incompatible with the tiling."""


class TrainingDiverged(RuntimeError):
    """Optimization diverged or the loss became non-finite."""
