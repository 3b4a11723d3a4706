"""Reverse-mode automatic differentiation on a per-batch tape.

The tape is explicit: a Graph owns an ordered list of nodes, each Tensor
carries a handle into at most one graph, and detached tensors evaluate with
plain numpy and zero tape growth. Every node declares exactly which buffers
it retains for its backward closure, which is what makes stored-activation
memory exactly countable.
"""

from .tensor import Graph, Tensor
from . import ops
from .ops import (
    add,
    sub,
    mul,
    neg,
    matmul,
    relu,
    softplus,
    sigmoid,
    exp,
    tsum,
    tmean,
    concat,
    cumsum_exclusive,
    reshape,
    conv1d,
)
from .gradcheck import GradCheckReport, gradient_check

__all__ = [
    "Graph",
    "Tensor",
    "ops",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "tsum",
    "tmean",
    "concat",
    "cumsum_exclusive",
    "reshape",
    "conv1d",
    "GradCheckReport",
    "gradient_check",
]
