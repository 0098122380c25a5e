from .gradcheck import GradCheckReport, NondeterministicError, grad_check
from .params import CheckpointError, ParamStore

__all__ = ["CheckpointError", "GradCheckReport", "NondeterministicError", "ParamStore", "grad_check"]
