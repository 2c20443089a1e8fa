"""Virtual mixup training with a VADA-style objective for toy domain adaptation."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
