"""Gated Transformer-XL: TrXL, TrXL-I and gated GTrXL stacks on a small numpy autodiff core."""

from .attention import MemoryState, relative_multi_head_attention, update_memory
from .blocks import GateKind, StackConfig, Variant, count_params, init_stack, param_report, stack_forward
from .tensor import ContractError, DimensionError, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "GateKind",
    "MemoryState",
    "StackConfig",
    "Tensor",
    "Variant",
    "backward",
    "count_params",
    "init_stack",
    "no_grad",
    "param_report",
    "relative_multi_head_attention",
    "stack_forward",
    "update_memory",
]
