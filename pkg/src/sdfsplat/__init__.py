"""Relightable Gaussian surfels regularised by a discretized signed distance field."""

import warnings

# numba probes TBB at first parallel launch and warns when the system copy is
# too old; the OpenMP/workqueue fallback is fine for us.
warnings.filterwarnings("ignore", message=".*TBB.*")

__version__ = "0.1.0"
