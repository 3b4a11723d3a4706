"""Tensor and Graph: the tape itself."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError


def _buffer_key(arr: np.ndarray) -> tuple[int, int]:
    # identify a buffer by (data pointer, byte extent) so full views dedup
    return (arr.__array_interface__["data"][0], arr.nbytes)


@dataclass
class Node:
    """One recorded operation. parents holds node ids (None for constants)."""

    op: str
    scope: str
    parents: tuple[Optional[int], ...]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    saved_keys: tuple[tuple[int, int], ...] = ()
    saved_elems: tuple[int, ...] = ()
    kink: Optional[np.ndarray] = None
    grad_leaf: bool = False
    out: Optional[np.ndarray] = None  # populated only under retain_outputs


class Graph:
    """Ordered tape of nodes. Confined to a single thread by convention.

    accounting=False skips the stored-activation bookkeeping; it never
    changes any numeric result.
    """

    def __init__(self, accounting: bool = True, track_kinks: bool = False,
                 retain_outputs: bool = False):
        self.nodes: list[Node] = []
        self.accounting = accounting
        self.track_kinks = track_kinks
        self.retain_outputs = retain_outputs
        self._scope_stack: list[str] = []
        self._produced: dict[tuple[int, int], tuple[int, str]] = {}
        self._grads: dict[int, np.ndarray] = {}

    @contextmanager
    def scope(self, name: str):
        self._scope_stack.append(name)
        try:
            yield
        finally:
            self._scope_stack.pop()

    @property
    def current_scope(self) -> str:
        return "/".join(self._scope_stack)

    def leaf(self, data, grad: bool = False, dtype=None) -> "Tensor":
        """Attach an array to the graph as a leaf (parameter or constant)."""
        arr = np.asarray(data, dtype=dtype)
        node = Node(op="leaf", scope=self.current_scope, parents=(), backward=None,
                    grad_leaf=grad)
        self.nodes.append(node)
        return Tensor(arr, graph=self, node=len(self.nodes) - 1)

    def record(
        self,
        out_data: np.ndarray,
        parents: Sequence[Optional["Tensor"]],
        backward: Optional[Callable],
        saved: Sequence[np.ndarray] = (),
        op: str = "",
        kink: Optional[np.ndarray] = None,
    ) -> "Tensor":
        """Append a node; `saved` lists exactly the buffers backward retains."""
        pids = tuple(None if p is None else p.node for p in parents)
        if self.accounting:
            keys = tuple(_buffer_key(s) for s in saved)
            elems = tuple(int(s.size) for s in saved)
        else:
            keys, elems = (), ()
        node = Node(op=op, scope=self.current_scope, parents=pids,
                    backward=backward, saved_keys=keys, saved_elems=elems,
                    kink=kink if self.track_kinks else None,
                    out=out_data if self.retain_outputs else None)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        if self.accounting:
            self._produced.setdefault(_buffer_key(out_data), (nid, node.scope))
        return Tensor(out_data, graph=self, node=nid)

    def backward(self, loss: "Tensor") -> None:
        """Reverse sweep from a scalar loss; visits each node at most once."""
        if loss.graph is not self:
            raise ContractError("loss tensor does not belong to this graph")
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._grads = {}
        grads: dict[int, np.ndarray] = {
            loss.node: np.ones_like(loss.data)}
        for nid in range(loss.node, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.grad_leaf:
                self._grads[nid] = g
                continue
            if node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg

    def grad(self, t: "Tensor") -> Optional[np.ndarray]:
        """Gradient accumulated for a grad-enabled leaf, or None."""
        return self._grads.get(t.node)

    def activation_elements(self, scope_prefix: Optional[str] = None) -> int:
        """Count elements of distinct intermediate buffers retained for backward.

        A buffer counts when (a) some node saved it and (b) it was produced
        as a node output on this graph, i.e. leaves and raw constants are
        excluded. Each buffer counts once regardless of how many nodes
        retain it, attributed to the scope of its producer.
        """
        if not self.accounting:
            raise ContractError("graph was built with accounting disabled")
        counted: set[tuple[int, int]] = set()
        total = 0
        for node in self.nodes:
            for key, n in zip(node.saved_keys, node.saved_elems):
                if key in counted:
                    continue
                prod = self._produced.get(key)
                if prod is None:
                    continue
                if scope_prefix is not None and not prod[1].startswith(scope_prefix):
                    continue
                counted.add(key)
                total += n
        return total

    def kink_signature(self) -> list[np.ndarray]:
        """Boolean activation patterns of every kinked node, in tape order."""
        return [n.kink for n in self.nodes if n.kink is not None]


class Tensor:
    """A numpy array plus an optional handle into one graph.

    Detached tensors (graph is None) combine with plain numpy semantics and
    never grow any tape.
    """

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: Optional[Graph] = None,
                 node: Optional[int] = None):
        self.data = np.asarray(data)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "detached" if self.graph is None else f"node={self.node}"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, {tag})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        from . import ops
        return ops.tmean(self)

    def relu(self):
        from . import ops
        return ops.relu(self)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)
