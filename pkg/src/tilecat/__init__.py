"""tilecat: probabilistic source detection with a checkerboard-autoregressive
variational family fitted by simulation (neural posterior estimation).

Heavy submodules (network, varfamily, training, evaluation) import torch; they
are imported lazily so catalog and simulator utilities stay lightweight.
"""

__version__ = "0.1.0"

from . import catalogs, catalog_io, rng, simulator  # noqa: F401
from .errors import ConfigError, DimensionError, TrainingDiverged  # noqa: F401
