"""Task-conditioned branch fusion for all-in-one image restoration."""

from taskfuse.tensor import Tensor, Tape, backward, finite_diff_check

__version__ = "0.1.0"
