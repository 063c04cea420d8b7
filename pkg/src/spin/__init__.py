"""spin: cross-layer weight sharing for isotropic convolutional networks.

The package bundles a small f64 autodiff engine, ConvMixer-style model
construction, sharing topologies with exact parameter/MAC accounting,
dynamic weight transforms, fusion-based initialization, linear CKA
analysis, and a training/evaluation harness with a CLI.
"""

import os as _os

if _os.environ.get("SPIN_DETERMINISTIC") == "1":
    # Pin BLAS fan-out before numpy first loads so that reductions run in a
    # fixed order. Has no effect if numpy was already imported; the test
    # suite and CLI both set this before touching numpy.
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        _os.environ.setdefault(_var, "1")

from .errors import (  # noqa: E402
    SpinError,
    ConfigurationError,
    ValidationError,
    DimensionError,
    InputError,
    UsageError,
    FormatError,
    ResourceError,
)
from .tensor import Tensor, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "SpinError",
    "ConfigurationError",
    "ValidationError",
    "DimensionError",
    "InputError",
    "UsageError",
    "FormatError",
    "ResourceError",
    "__version__",
]
