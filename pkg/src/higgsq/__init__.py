"""Rotated vector quantization of weight tensors with a linear error model.

Modules:

* :mod:`higgsq.hadamard` - seeded randomized Hadamard transform
* :mod:`higgsq.grids` - Gaussian-optimal grids (Lloyd-Max, CLVQ, uniform, NF, AF)
* :mod:`higgsq.quantizer` - group-wise encode/decode and the HQTZ container
* :mod:`higgsq.linearity` - noise insertion, alpha calibration, probes
* :mod:`higgsq.allocator` - exact per-layer bitwidth allocation
* :mod:`higgsq.harness` - quadratic oracle and tiny MLP experiments
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BadMagic,
    BadVersion,
    ChecksumMismatch,
    ConvergenceError,
    CorruptionError,
    FormatError,
    HiggsError,
    InfeasibleBudget,
    InvalidArgument,
    Truncated,
)
from .grids import Grid, build_grid, clvq_build, lloyd_max_1d  # noqa: E402
from .hadamard import fwht, rht_forward, rht_inverse  # noqa: E402
from .quantizer import QuantConfig, QuantizedTensor, decode, encode  # noqa: E402

__all__ = [
    "BadMagic", "BadVersion", "ChecksumMismatch", "ConvergenceError", "CorruptionError",
    "FormatError", "Grid", "HiggsError", "InfeasibleBudget", "InvalidArgument", "QuantConfig",
    "QuantizedTensor", "Truncated", "build_grid", "clvq_build", "decode", "encode", "fwht",
    "lloyd_max_1d", "rht_forward", "rht_inverse",
]
