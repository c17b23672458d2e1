from . import ops
from .optim import AdamState, adam_step
from .tape import DTYPE, NonFiniteError, Tape, TapeError, Tensor, active_tape, as_tensor, precision

__all__ = [
    "DTYPE",
    "AdamState",
    "NonFiniteError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "adam_step",
    "as_tensor",
    "ops",
    "precision",
]
