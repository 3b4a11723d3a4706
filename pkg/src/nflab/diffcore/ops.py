"""Differentiable primitive operations.

Each op computes with plain numpy, and when any operand is attached to a
graph it records one node whose backward closure captures only the buffers
listed in `saved`. Detached operands behave as constants: their gradient
slot is None and no value is retained on their behalf.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, ShapeError
from .tensor import Graph, Tensor


def _as_pair(x) -> tuple[np.ndarray, Optional[Tensor]]:
    """Return (value, attached tensor or None) for any operand."""
    if isinstance(x, Tensor):
        return x.data, (x if x.graph is not None else None)
    return np.asarray(x), None


def _graph_of(*tensors: Optional[Tensor]) -> Optional[Graph]:
    graphs = {t.graph for t in tensors if t is not None}
    if len(graphs) > 1:
        raise ContractError("operands belong to different graphs")
    return graphs.pop() if graphs else None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    av, at = _as_pair(a)
    bv, bt = _as_pair(b)
    g = _graph_of(at, bt)
    out = av + bv
    if g is None:
        return Tensor(out)
    ash, bsh = av.shape, bv.shape

    def bw(grad):
        return (_unbroadcast(grad, ash) if at is not None else None,
                _unbroadcast(grad, bsh) if bt is not None else None)

    return g.record(out, (at, bt), bw, op="add")


def sub(a, b) -> Tensor:
    av, at = _as_pair(a)
    bv, bt = _as_pair(b)
    g = _graph_of(at, bt)
    out = av - bv
    if g is None:
        return Tensor(out)
    ash, bsh = av.shape, bv.shape

    def bw(grad):
        return (_unbroadcast(grad, ash) if at is not None else None,
                _unbroadcast(-grad, bsh) if bt is not None else None)

    return g.record(out, (at, bt), bw, op="sub")


def neg(a) -> Tensor:
    av, at = _as_pair(a)
    g = _graph_of(at)
    out = -av
    if g is None:
        return Tensor(out)

    def bw(grad):
        return (-grad,)

    return g.record(out, (at,), bw, op="neg")


def mul(a, b) -> Tensor:
    av, at = _as_pair(a)
    bv, bt = _as_pair(b)
    g = _graph_of(at, bt)
    out = av * bv
    if g is None:
        return Tensor(out)
    ash, bsh = av.shape, bv.shape
    saved = []
    if at is not None:
        saved.append(bv)
    if bt is not None:
        saved.append(av)

    def bw(grad):
        ga = _unbroadcast(grad * bv, ash) if at is not None else None
        gb = _unbroadcast(grad * av, bsh) if bt is not None else None
        return (ga, gb)

    return g.record(out, (at, bt), bw, saved=saved, op="mul")


def matmul(a, b) -> Tensor:
    av, at = _as_pair(a)
    bv, bt = _as_pair(b)
    g = _graph_of(at, bt)
    if av.ndim < 1 or bv.ndim != 2:
        raise ShapeError(
            f"matmul supports [..., K] @ [K, M]; got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    out = av @ bv
    if g is None:
        return Tensor(out)
    k, m = bv.shape
    saved = []
    if bt is not None:
        saved.append(av)
    if at is not None:
        saved.append(bv)

    def bw(grad):
        ga = grad @ bv.T if at is not None else None
        gb = (av.reshape(-1, k).T @ grad.reshape(-1, m)
              if bt is not None else None)
        return (ga, gb)

    return g.record(out, (at, bt), bw, saved=saved, op="matmul")


def relu(a) -> Tensor:
    av, at = _as_pair(a)
    g = _graph_of(at)
    out = np.maximum(av, 0)
    if g is None:
        return Tensor(out)

    def bw(grad):
        return (grad * (out > 0),)

    kink = (out > 0) if g.track_kinks else None
    return g.record(out, (at,), bw, saved=(out,), op="relu", kink=kink)


def softplus(a) -> Tensor:
    av, at = _as_pair(a)
    g = _graph_of(at)
    # stable for large |x|
    out = np.maximum(av, 0) + np.log1p(np.exp(-np.abs(av)))
    if g is None:
        return Tensor(out)

    def bw(grad):
        # d softplus / dx = sigmoid(x) = 1 - exp(-softplus(x))
        return (grad * -np.expm1(-out),)

    return g.record(out, (at,), bw, saved=(out,), op="softplus")


def sigmoid(a) -> Tensor:
    av, at = _as_pair(a)
    g = _graph_of(at)
    # stable for both signs: z = exp(-|x|) <= 1
    z = np.exp(-np.abs(av))
    out = np.where(av >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    if g is None:
        return Tensor(out)

    def bw(grad):
        return (grad * out * (1.0 - out),)

    return g.record(out, (at,), bw, saved=(out,), op="sigmoid")


def exp(a) -> Tensor:
    av, at = _as_pair(a)
    g = _graph_of(at)
    out = np.exp(av)
    if g is None:
        return Tensor(out)

    def bw(grad):
        return (grad * out,)

    return g.record(out, (at,), bw, saved=(out,), op="exp")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    av, at = _as_pair(a)
    g = _graph_of(at)
    out = av.sum(axis=axis, keepdims=keepdims)
    if g is None:
        return Tensor(out)
    ash = av.shape

    def bw(grad):
        gg = np.asarray(grad)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, ash),)

    return g.record(np.asarray(out), (at,), bw, op="sum")


def tmean(a) -> Tensor:
    """Mean over all elements."""
    av, at = _as_pair(a)
    g = _graph_of(at)
    out = np.asarray(av.mean())
    if g is None:
        return Tensor(out)
    ash, n = av.shape, av.size

    def bw(grad):
        return (np.broadcast_to(grad / n, ash),)

    return g.record(out, (at,), bw, op="mean")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    pairs = [_as_pair(p) for p in parts]
    vals = [v for v, _ in pairs]
    tens = [t for _, t in pairs]
    if axis not in (-1, vals[0].ndim - 1):
        raise ContractError("concat supports the last axis only")
    g = _graph_of(*tens)
    out = np.concatenate(vals, axis=-1)
    if g is None:
        return Tensor(out)
    widths = [v.shape[-1] for v in vals]

    def bw(grad):
        outs = []
        start = 0
        for w, t in zip(widths, tens):
            outs.append(grad[..., start:start + w] if t is not None else None)
            start += w
        return outs

    return g.record(out, tens, bw, op="concat")


def cumsum_exclusive(a, axis: int = -1) -> Tensor:
    """y[..., i] = sum of x[..., j] for j < i along `axis`."""
    av, at = _as_pair(a)
    g = _graph_of(at)
    out = np.zeros_like(av)
    head = [slice(None)] * av.ndim
    tail = [slice(None)] * av.ndim
    head[axis] = slice(1, None)
    tail[axis] = slice(None, -1)
    out[tuple(head)] = np.cumsum(av, axis=axis)[tuple(tail)]
    if g is None:
        return Tensor(out)

    def bw(grad):
        s = np.flip(np.cumsum(np.flip(grad, axis), axis), axis)
        return (s - grad,)

    return g.record(out, (at,), bw, op="cumsum_exclusive")


def reshape(a, shape) -> Tensor:
    av, at = _as_pair(a)
    g = _graph_of(at)
    out = av.reshape(shape)
    if g is None:
        return Tensor(out)
    ash = av.shape

    def bw(grad):
        return (grad.reshape(ash),)

    return g.record(out, (at,), bw, op="reshape")


def conv1d_indices(length: int, k: int, stride: int, padding: str) -> np.ndarray:
    """Input index window per output position, shape [out_length, k].

    padding "replicate" clamps out-of-range taps to the edges and yields
    ceil(length/stride) outputs with window j centered so that its anchor
    tap sits at input j*stride. padding "none" takes only full windows.
    """
    if padding not in ("replicate", "none"):
        raise ContractError(f"unknown padding mode {padding!r}")
    if k < 1:
        raise ContractError(f"kernel width must be >= 1, got {k}")
    if padding == "none":
        n_out = (length - k) // stride + 1
        if n_out < 1:
            raise ContractError(
                f"kernel of width {k} yields empty output on length-{length} "
                "input without padding")
        base = np.arange(n_out)[:, None] * stride
        return base + np.arange(k)[None, :]
    n_out = -(-length // stride)
    base = np.arange(n_out)[:, None] * stride
    idx = base + (np.arange(k)[None, :] - (k - 1) // 2)
    return np.clip(idx, 0, length - 1)


def _conv_norm_x(av: np.ndarray) -> tuple[np.ndarray, int]:
    if av.ndim == 1:
        return av[None, :, None], 1
    if av.ndim == 2:
        return av[None, :, :], 2
    if av.ndim == 3:
        return av, 3
    raise ShapeError(f"conv1d input must be 1-3 dimensional, got {av.shape}")


def conv1d(x, kernel, bias=None, stride: int = 1,
           padding: str = "replicate") -> Tensor:
    """1-D convolution along the sample axis.

    x: [S], [S, C] or [R, S, C]; kernel: [k] (single channel) or [k, C, M].
    Output length is ceil(S/stride) under replicate padding, or the number
    of full windows under padding "none".
    """
    xv, xt = _as_pair(x)
    kv, kt = _as_pair(kernel)
    bv, bt = _as_pair(bias) if bias is not None else (None, None)
    g = _graph_of(xt, kt, bt)
    xn, in_ndim = _conv_norm_x(xv)
    kn = kv[:, None, None] if kv.ndim == 1 else kv
    if kn.ndim != 3:
        raise ShapeError(f"kernel must be [k] or [k, C, M], got {kv.shape}")
    if kn.shape[1] != xn.shape[2]:
        raise ShapeError(
            f"kernel channels {kn.shape} do not match input {xv.shape}")
    S = xn.shape[1]
    idx = conv1d_indices(S, kn.shape[0], stride, padding)
    xw = xn[:, idx, :]                        # [R, S', k, C]
    out = np.einsum("rjuc,ucm->rjm", xw, kn)
    if bv is not None:
        out = out + bv
    if in_ndim == 1:
        out_ext = out[0, :, 0] if kv.ndim == 1 else out[0]
    elif in_ndim == 2:
        out_ext = out[0]
    else:
        out_ext = out
    if g is None:
        return Tensor(out_ext)
    k = kn.shape[0]

    def bw(grad):
        gn = grad.reshape(out.shape)
        gx = gk = gb = None
        if xt is not None:
            dxn = np.zeros_like(xn)
            dxt = dxn.transpose(1, 0, 2)
            for u in range(k):
                np.add.at(dxt, idx[:, u], (gn @ kn[u].T).transpose(1, 0, 2))
            gx = dxn.reshape(xv.shape)
        if kt is not None:
            gk_full = np.einsum("rjuc,rjm->ucm", xn[:, idx, :], gn)
            gk = gk_full[:, 0, 0] if kv.ndim == 1 else gk_full
        if bt is not None:
            gb = _unbroadcast(gn, bv.shape)
        return (gx, gk, gb)

    # the closure references both arrays regardless of which grads are live
    return g.record(out_ext, (xt, kt, bt), bw, saved=(xn, kn), op="conv1d")
