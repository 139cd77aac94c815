"""Small reverse-mode autodiff engine used by both generative stages."""
from vesselgen.autodiff.params import Adam, ParameterStore, ParamFileError, glorot_uniform, step_decay
from vesselgen.autodiff.tensor import DimensionError, Tape, Tensor

__all__ = [
    "Adam",
    "DimensionError",
    "ParamFileError",
    "ParameterStore",
    "Tape",
    "Tensor",
    "glorot_uniform",
    "step_decay",
]
