"""Queryable rank-space update memory for low-rank adapters.

A frozen backbone is adapted through low-rank factors whose bottleneck is
modulated by a routed operator: a sparse convex combination of globally
shared rank-space atoms, selected per block of layers from the current
rank state, a depth summary of earlier blocks, and an optional instruction
prior.  The package ships the adapter algebra, a synthetic non-convex
regression benchmark against plain static low-rank adaptation, routing
analytics, and a machine-checked certification suite for every bound and
gradient identity the design relies on.
"""

from rankmem.kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
