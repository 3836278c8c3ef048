"""Shared numeric constants. Tolerances live here and nowhere else."""

import numpy as np

LEAKY_SLOPE = 0.01

DEFAULT_DTYPE = np.float32

# finite-difference gradient checks
FD_STEP = 1e-5
FD_REL_TOL = 1e-4

# cross-mode agreement of the CC layer
CHUNKED_ATOL = 1e-6
RATIONAL_FAST_ATOL = 1e-5
CONV_SPECIAL_CASE_ATOL = 1e-6

# analytic kernel partition of unity
PARTITION_TOL = 1e-6

# last internal-net stage weight multiplier relative to its fan-in std
LAST_STAGE_WEIGHT_GAIN = 0.1

HIDDEN_WIDTHS = (16, 16)
