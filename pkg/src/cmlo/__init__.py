"""Event-triggered model-based RL laboratory with a bound-verification suite."""

__version__ = "0.1.0"

from cmlo.kernels import BACKEND as kernel_backend  # noqa: F401
