from . import ops
from .gradcheck import finite_diff_check
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, backward, no_tape

__all__ = ["Tensor", "Tape", "backward", "no_tape", "as_tensor", "ops",
           "finite_diff_check", "Adam", "AdamState", "adam_step"]
