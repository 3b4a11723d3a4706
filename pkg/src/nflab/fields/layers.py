"""Fused trunk layers recorded as single tape nodes.

Each op saves its own output (for the activation mask) plus references to
already-stored inputs; anything else its backward needs is recomputed from
those, so one trunk layer retains exactly one feature map. That discipline
is what lets the closed-form activation count match the tape's measured
count to the element.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from ..diffcore.ops import conv1d_indices
from ..diffcore.tensor import Graph, Tensor
from ..errors import ShapeError

Arr = Union[np.ndarray, Tensor]


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


def _tens(x) -> Optional[Tensor]:
    return x if isinstance(x, Tensor) and x.graph is not None else None


def _relu(p):
    return np.maximum(p, 0)


def _softplus(p):
    return np.maximum(p, 0) + np.log1p(np.exp(-np.abs(p)))


def _sigmoid(p):
    z = np.exp(-np.abs(p))
    return np.where(p >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


_FORWARD = {
    "relu": _relu,
    "softplus": _softplus,
    "sigmoid": _sigmoid,
    "none": lambda p: p,
}

_FROM_OUTPUT = {
    # derivative of the activation expressed through its own output
    "relu": lambda g, y: g * (y > 0),
    "softplus": lambda g, y: g * -np.expm1(-y),
    "sigmoid": lambda g, y: g * (y * (1.0 - y)),
    "none": lambda g, y: g,
}


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def dense_act(tape: Optional[Graph], x: Arr, w: Arr, b: Arr,
              act: str = "relu", op: str = "dense") -> Arr:
    """y = act(x @ w + b) over the last axis."""
    xv, wv, bv = _val(x), _val(w), _val(b)
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"dense shapes mismatch: {xv.shape} @ {wv.shape}")
    y = _FORWARD[act](xv @ wv + bv)
    if tape is None:
        return y
    dact = _FROM_OUTPUT[act]
    xt, wt, bt = _tens(x), _tens(w), _tens(b)

    def bw(g):
        gp = dact(g, y)
        dx = gp @ wv.T if xt is not None else None
        dw = _flat2(xv).T @ _flat2(gp) if wt is not None else None
        db = gp.reshape(-1, gp.shape[-1]).sum(0) if bt is not None else None
        return (dx, dw, db)

    kink = (y > 0) if (act == "relu" and tape.track_kinks) else None
    return tape.record(y, (xt, wt, bt), bw, saved=(xv, wv, y), op=op,
                       kink=kink)


def dense_bcast_act(tape: Optional[Graph], x: Arr, z: np.ndarray, wx: Arr,
                    wz: Arr, b: Arr, act: str = "relu") -> Arr:
    """y = act(x @ wx + (z @ wz) per ray + b).

    x is [R, N, Cx]; z is a per-ray constant [R, Cz] broadcast along the
    sample axis, so the concat never materializes.
    """
    xv, zv, wxv, wzv, bv = _val(x), _val(z), _val(wx), _val(wz), _val(b)
    y = _FORWARD[act](xv @ wxv + (zv @ wzv)[:, None, :] + bv)
    if tape is None:
        return y
    dact = _FROM_OUTPUT[act]
    xt, wxt, wzt, bt = _tens(x), _tens(wx), _tens(wz), _tens(b)

    def bw(g):
        gp = dact(g, y)
        dx = gp @ wxv.T if xt is not None else None
        dwx = _flat2(xv).T @ _flat2(gp) if wxt is not None else None
        dwz = zv.T @ gp.sum(axis=1) if wzt is not None else None
        db = gp.reshape(-1, gp.shape[-1]).sum(0) if bt is not None else None
        return (dx, dwx, dwz, db)

    kink = (y > 0) if (act == "relu" and tape.track_kinks) else None
    return tape.record(y, (xt, wxt, wzt, bt), bw, saved=(xv, zv, wxv, y),
                       op="dense_bcast", kink=kink)


def dense2_act(tape: Optional[Graph], xa: Arr, xb: np.ndarray, wa: Arr,
               wb: Arr, b: Arr, act: str = "relu") -> Arr:
    """y = act(xa @ wa + xb @ wb + b) for a per-sample side input xb."""
    xav, xbv, wav, wbv, bv = _val(xa), _val(xb), _val(wa), _val(wb), _val(b)
    y = _FORWARD[act](xav @ wav + xbv @ wbv + bv)
    if tape is None:
        return y
    dact = _FROM_OUTPUT[act]
    xat, wat, wbt, bt = _tens(xa), _tens(wa), _tens(wb), _tens(b)

    def bw(g):
        gp = dact(g, y)
        dxa = gp @ wav.T if xat is not None else None
        dwa = _flat2(xav).T @ _flat2(gp) if wat is not None else None
        dwb = _flat2(xbv).T @ _flat2(gp) if wbt is not None else None
        db = gp.reshape(-1, gp.shape[-1]).sum(0) if bt is not None else None
        return (dxa, dwa, dwb, db)

    kink = (y > 0) if (act == "relu" and tape.track_kinks) else None
    return tape.record(y, (xat, wat, wbt, bt), bw, saved=(xav, xbv, wav, y),
                       op="dense2", kink=kink)


def subsample_dense_act(tape: Optional[Graph], x: Arr, w: Arr,
                        b: Arr) -> Arr:
    """Drop odd-indexed samples, then y = relu(x_even @ w + b).

    The even-index slice is a zero-copy view, so the layer stores only its
    own half-resolution output.
    """
    xv, wv, bv = _val(x), _val(w), _val(b)
    xe = xv[:, ::2]
    y = _relu(xe @ wv + bv)
    if tape is None:
        return y
    xt, wt, bt = _tens(x), _tens(w), _tens(b)

    def bw(g):
        gp = g * (y > 0)
        dx = None
        if xt is not None:
            dx = np.zeros_like(xv)
            dx[:, ::2] = gp @ wv.T
        dw = _flat2(xv[:, ::2]).T @ _flat2(gp) if wt is not None else None
        db = gp.reshape(-1, gp.shape[-1]).sum(0) if bt is not None else None
        return (dx, dw, db)

    kink = (y > 0) if tape.track_kinks else None
    return tape.record(y, (xt, wt, bt), bw, saved=(xv, wv, y),
                       op="subsample_dense", kink=kink)


def conv_act(tape: Optional[Graph], x: Arr, kern: Arr, b: Arr,
             stride: int = 2) -> Arr:
    """Strided replicate-padded convolution along the ray, then relu.

    The tap window gather is transient: it is rebuilt during backward from
    the input the previous layer already stores.
    """
    xv, kv, bv = _val(x), _val(kern), _val(b)
    if kv.ndim != 3 or kv.shape[1] != xv.shape[-1]:
        raise ShapeError(
            f"kernel {kv.shape} incompatible with input {xv.shape}")
    k, cin, cout = kv.shape
    r, s, _ = xv.shape
    idx = conv1d_indices(s, k, stride, "replicate")
    n_out = idx.shape[0]
    xw = xv[:, idx, :].reshape(r * n_out, k * cin)
    y = _relu((xw @ kv.reshape(k * cin, cout) + bv).reshape(r, n_out, cout))
    if tape is None:
        return y
    xt, kt, bt = _tens(x), _tens(kern), _tens(b)

    def bw(g):
        gp = g * (y > 0)
        dx = dk = db = None
        if kt is not None:
            regather = xv[:, idx, :].reshape(r * n_out, k * cin)
            dk = (regather.T @ gp.reshape(-1, cout)).reshape(k, cin, cout)
        if xt is not None:
            dx = np.zeros_like(xv)
            dxt_view = dx.transpose(1, 0, 2)
            for u in range(k):
                np.add.at(dxt_view, idx[:, u],
                          (gp @ kv[u].T).transpose(1, 0, 2))
        if bt is not None:
            db = gp.reshape(-1, cout).sum(0)
        return (dx, dk, db)

    kink = (y > 0) if tape.track_kinks else None
    return tape.record(y, (xt, kt, bt), bw, saved=(xv, kv, y),
                       op="conv_act", kink=kink)


def upsample_merge_act(tape: Optional[Graph], coarse: Arr, skip: Arr,
                       left: np.ndarray, right: np.ndarray,
                       wl: np.ndarray, wr: np.ndarray, w: Arr, b: Arr,
                       xb: Optional[np.ndarray] = None,
                       wb: Optional[Arr] = None) -> Arr:
    """One up-path layer: carry coarse features to the finer depths, add
    the same-resolution skip, then a dense layer with relu.

    Even output slots take the coarse rows unchanged (their depths are the
    anchor depths); odd slots combine anchors `left`/`right` with weights
    wl/wr, which encode position-aware, nearest, or average reconstruction.
    The merged map is rebuilt during backward rather than stored. xb/wb
    optionally inject an encoded-position block at this layer.
    """
    cv, sv, wv, bv = _val(coarse), _val(skip), _val(w), _val(b)
    xbv = _val(xb) if xb is not None else None
    wbv = _val(wb) if wb is not None else None
    wl = wl.astype(cv.dtype, copy=False)[..., None]
    wr = wr.astype(cv.dtype, copy=False)[..., None]

    def build_merged():
        m = np.empty_like(sv)
        m[:, 0::2] = cv
        m[:, 1::2] = cv[:, left] * wl + cv[:, right] * wr
        m += sv
        return m

    m = build_merged()
    pre = m @ wv + bv
    if xbv is not None:
        pre += xbv @ wbv
    y = _relu(pre)
    if tape is None:
        return y
    ct, st, wt, bt = _tens(coarse), _tens(skip), _tens(w), _tens(b)
    wbt = _tens(wb) if wb is not None else None

    def bw(g):
        gp = g * (y > 0)
        dw = _flat2(build_merged()).T @ _flat2(gp) if wt is not None else None
        dwb = (_flat2(xbv).T @ _flat2(gp)
               if (wbt is not None and xbv is not None) else None)
        db = gp.reshape(-1, gp.shape[-1]).sum(0) if bt is not None else None
        dm = gp @ wv.T
        dskip = dm if st is not None else None
        dc = None
        if ct is not None:
            dc = dm[:, 0::2].copy()  # even slots pass anchors through
            godd = dm[:, 1::2]
            dct = dc.transpose(1, 0, 2)
            np.add.at(dct, left, (godd * wl).transpose(1, 0, 2))
            np.add.at(dct, right, (godd * wr).transpose(1, 0, 2))
        return (dc, dskip, dw, db, dwb)

    kink = (y > 0) if tape.track_kinks else None
    return tape.record(y, (ct, st, wt, bt, wbt), bw,
                       saved=(cv, sv, wv, y), op="upsample_merge", kink=kink)
