"""Deterministic reference executor with reverse-mode differentiation.

Forward walks the topologically ordered node list computing one numpy array
per edge; when recording, each node contributes a backward closure to a tape.
Backward replays the tape in reverse from caller-supplied gradient seeds and
accumulates gradients per edge and per parameter.

Runtime batch size may differ from the nominal batch in edge specs: kernels
are batch-agnostic and shape checks skip dimensions labelled "batch".
Rounding quantizers apply straight-through gradient rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .ir import (
    Add, AvgPoolGlobal, BatchNorm, Concat, Conv2D, Embedding, FakeQuant,
    FullyConnected, Graph, LayerNorm, MatMul, MaxPool, Node, OneHot, Permute,
    ReLU, Reshape, Softmax, Split, kind_name,
)
from .quant import (
    LsqState, dorefa_activation_with_grad, dorefa_weight_with_grad,
    lsq_init_step, lsq_quantize_with_grad,
)

Array = np.ndarray


class EngineError(Exception):
    pass


class ShapeMismatch(EngineError):
    pass


class NonFiniteValue(EngineError):
    """NaN or Inf appeared at a node output."""


class LabelOutOfRange(EngineError):
    pass


@dataclass
class ExecutionContext:
    """Execution mode and statistics behaviour.

    In train mode BatchNorm uses batch statistics and, when
    ``update_bn_stats`` is set, folds them into the running statistics held
    in the graph's weight store; eval mode reads the running statistics.
    Uninitialised LSQ step parameters (<= 0 sentinel) are calibrated from
    the first tensor that flows through them.
    """

    mode: str = "eval"
    seed: int = 0
    update_bn_stats: bool = True
    check_finite: bool = True

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise EngineError(f"unknown mode {self.mode!r}")
        self.rng = np.random.default_rng(self.seed)

    @property
    def training(self) -> bool:
        return self.mode == "train"


# backward closure: output grads -> (input grads, {param name: grad})
BackwardFn = Callable[[list[Array]], tuple[list[Array], dict[str, Array]]]


@dataclass
class TapeEntry:
    node: Node
    bwd: BackwardFn


@dataclass
class Tape:
    graph: Graph
    entries: list[TapeEntry] = field(default_factory=list)


@dataclass
class ForwardResult:
    outputs: dict[str, Array]
    edges: dict[str, Array]
    tape: Tape | None = None


# --------------------------------------------------------------------------
# convolution plumbing
# --------------------------------------------------------------------------


def _windows(x: Array, kh: int, kw: int, stride: int, pad: int,
             pad_value: float = 0.0) -> tuple[Array, int, int]:
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"window {kh}x{kw}/{stride} empty on {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=pad_value) if pad else x
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, ho, wo, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)
    return win, ho, wo


def _im2col(x: Array, kh: int, kw: int, stride: int, pad: int) -> tuple[Array, int, int]:
    """Patch matrix of shape (B*Ho*Wo, C*kh*kw), single-pass copy."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"window {kh}x{kw}/{stride} empty on {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, ho, wo, c, kh, kw),
        (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    return win.reshape(b * ho * wo, c * kh * kw), ho, wo


def _col2im(dcol: Array, xshape: tuple[int, ...], kh: int, kw: int,
            stride: int, pad: int, ho: int, wo: int) -> Array:
    """Scatter patch-matrix gradients back to input layout (channels-last
    accumulator to keep the tap loop cache friendly)."""
    b, c, h, w = xshape
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=np.float32)
    d6 = dcol.reshape(b, ho, wo, c, kh, kw)
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hs:stride, j:j + ws:stride, :] += d6[:, :, :, :, i, j]
    if pad:
        dxp = dxp[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def _conv_single(x: Array, w: Array, stride: int, pad: int):
    """Dense conv via im2col; returns (y, col) for the backward pass."""
    o = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    col, ho, wo = _im2col(x, kh, kw, stride, pad)
    y2 = col @ w.reshape(o, -1).T
    y = np.ascontiguousarray(y2.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2))
    return y, col, ho, wo


# --------------------------------------------------------------------------
# positional encoding (sequence models)
# --------------------------------------------------------------------------


@lru_cache(maxsize=32)
def sinusoidal_encoding(length: int, dim: int) -> Array:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(np.float32, copy=False)


# --------------------------------------------------------------------------
# per-node kernels
# --------------------------------------------------------------------------


def _effective_weight(node: Node, w: Array, weights, ctx: ExecutionContext):
    """Apply the node's weight fake-quantizer, if any.

    Returns (w_eff, unquantize) where unquantize maps the gradient w.r.t.
    the effective weight to (gradient w.r.t. stored weight, extra param
    grads such as the LSQ step).
    """
    bits = int(node.attrs.get("w_bits", 32))
    if bits >= 32:
        return w, lambda dw: (dw, {})
    scheme = node.attrs.get("w_scheme", "dorefa")
    if scheme == "dorefa":
        wq, gmul = dorefa_weight_with_grad(w, bits)

        def unquantize(dw):
            return dw * gmul, {}

        return wq, unquantize
    sname = node.params["w_step"]
    sarr = weights[sname]
    if float(sarr.reshape(-1)[0]) <= 0.0:
        sarr.reshape(-1)[0] = lsq_init_step(w, bits, signed=True)
    state = LsqState(float(sarr.reshape(-1)[0]), bits, signed=True)
    wq, dmask, dselem = lsq_quantize_with_grad(w, state)

    def unquantize(dw):
        return dw * dmask, {sname: np.array([np.sum(dw * dselem)], dtype=np.float32)}

    return wq, unquantize


def _run_conv(node: Node, kind: Conv2D, xs: list[Array], g: Graph,
              ctx: ExecutionContext):
    (x,) = xs
    w = g.weights[node.params["weight"]]
    bias = g.weights[node.params["bias"]] if "bias" in node.params else None
    weff, unq = _effective_weight(node, w, g.weights, ctx)
    groups = kind.groups
    if groups == 1:
        y, col, ho, wo = _conv_single(x, weff, kind.stride, kind.padding)
        cols = [col]
    else:
        cg = x.shape[1] // groups
        og = weff.shape[0] // groups
        parts, cols = [], []
        for gi in range(groups):
            yg, colg, ho, wo = _conv_single(
                x[:, gi * cg:(gi + 1) * cg], weff[gi * og:(gi + 1) * og],
                kind.stride, kind.padding)
            parts.append(yg)
            cols.append(colg)
        y = np.concatenate(parts, axis=1)
    if bias is not None:
        y = y + bias[None, :, None, None]

    xshape, wshape = x.shape, w.shape
    has_bias = bias is not None
    wname = node.params["weight"]

    def bwd(douts):
        (dy,) = douts
        pgrads: dict[str, Array] = {}
        if has_bias:
            pgrads[node.params["bias"]] = dy.sum(axis=(0, 2, 3))
        o = wshape[0]
        if groups == 1:
            dy_col = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, o)
            dweff = (dy_col.T @ cols[0]).reshape(wshape)
            dcol = dy_col @ weff.reshape(o, -1)
            dx = _col2im(dcol, xshape, kind.kernel_h, kind.kernel_w,
                         kind.stride, kind.padding, ho, wo)
        else:
            cg = xshape[1] // groups
            og = o // groups
            dweff = np.zeros(wshape, dtype=np.float32)
            dx = np.zeros(xshape, dtype=np.float32)
            gxshape = (xshape[0], cg, xshape[2], xshape[3])
            for gi in range(groups):
                dyg = dy[:, gi * og:(gi + 1) * og]
                dy_col = np.ascontiguousarray(dyg.transpose(0, 2, 3, 1)).reshape(-1, og)
                dweff[gi * og:(gi + 1) * og] = (
                    dy_col.T @ cols[gi]).reshape(og, *wshape[1:])
                dcol = dy_col @ weff[gi * og:(gi + 1) * og].reshape(og, -1)
                dx[:, gi * cg:(gi + 1) * cg] = _col2im(
                    dcol, gxshape, kind.kernel_h, kind.kernel_w,
                    kind.stride, kind.padding, ho, wo)
        dw, extra = unq(dweff)
        pgrads[wname] = dw.astype(np.float32, copy=False)
        pgrads.update(extra)
        return [dx.astype(np.float32, copy=False)], pgrads

    return y.astype(np.float32, copy=False), bwd


def _run_fc(node: Node, xs: list[Array], g: Graph, ctx: ExecutionContext):
    (x,) = xs
    w = g.weights[node.params["weight"]]
    bias = g.weights[node.params["bias"]] if "bias" in node.params else None
    weff, unq = _effective_weight(node, w, g.weights, ctx)
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    y = x2 @ weff.T
    if bias is not None:
        y = y + bias
    y = y.reshape(*lead, w.shape[0])
    if node.attrs.get("positional") and y.ndim == 3:
        y = y + sinusoidal_encoding(y.shape[1], y.shape[2])[None]
    has_bias = bias is not None

    def bwd(douts):
        (dy,) = douts
        dy2 = dy.reshape(-1, w.shape[0])
        pgrads = {}
        if has_bias:
            pgrads[node.params["bias"]] = dy2.sum(axis=0).astype(np.float32, copy=False)
        dweff = dy2.T @ x2
        dw, extra = unq(dweff)
        pgrads[node.params["weight"]] = dw.astype(np.float32, copy=False)
        pgrads.update(extra)
        dx = (dy2 @ weff).reshape(x.shape).astype(np.float32, copy=False)
        return [dx], pgrads

    return y.astype(np.float32, copy=False), bwd


def _run_bn(node: Node, kind: BatchNorm, xs: list[Array], g: Graph,
            ctx: ExecutionContext):
    (x,) = xs
    gamma = g.weights[node.params["gamma"]]
    beta = g.weights[node.params["beta"]]
    rmean = g.weights[node.params["running_mean"]]
    rvar = g.weights[node.params["running_var"]]
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)

    if ctx.training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if ctx.update_bn_stats:
            m = kind.momentum
            rmean[...] = (1 - m) * rmean + m * mean
            rvar[...] = (1 - m) * rvar + m * var
    else:
        mean, var = rmean, rvar
    invstd = 1.0 / np.sqrt(var + kind.epsilon)
    xhat = (x - mean.reshape(shape)) * invstd.reshape(shape)
    y = gamma.reshape(shape) * xhat + beta.reshape(shape)
    n = x.size // x.shape[1]
    training = ctx.training

    def bwd(douts):
        (dy,) = douts
        dgamma = (dy * xhat).sum(axis=axes).astype(np.float32, copy=False)
        dbeta = dy.sum(axis=axes).astype(np.float32, copy=False)
        if training:
            dx = (gamma.reshape(shape) * invstd.reshape(shape) / n) * (
                n * dy - dbeta.reshape(shape) - xhat * dgamma.reshape(shape))
        else:
            dx = dy * gamma.reshape(shape) * invstd.reshape(shape)
        return [dx.astype(np.float32, copy=False)], {node.params["gamma"]: dgamma,
                                         node.params["beta"]: dbeta}

    return y.astype(np.float32, copy=False), bwd


def _run_ln(node: Node, kind: LayerNorm, xs: list[Array], g: Graph):
    (x,) = xs
    gamma = g.weights[node.params["gamma"]]
    beta = g.weights[node.params["beta"]]
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + kind.epsilon)
    xhat = (x - mean) * invstd
    y = xhat * gamma + beta
    d = x.shape[-1]
    lead_axes = tuple(range(x.ndim - 1))

    def bwd(douts):
        (dy,) = douts
        dgamma = (dy * xhat).sum(axis=lead_axes).astype(np.float32, copy=False)
        dbeta = dy.sum(axis=lead_axes).astype(np.float32, copy=False)
        dxhat = dy * gamma
        dx = invstd / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                           - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return [dx.astype(np.float32, copy=False)], {node.params["gamma"]: dgamma,
                                         node.params["beta"]: dbeta}

    return y.astype(np.float32, copy=False), bwd


def _run_maxpool(node: Node, kind: MaxPool, xs: list[Array]):
    (x,) = xs
    k, s, p = kind.kernel, kind.stride, kind.padding
    win, ho, wo = _windows(x, k, k, s, p, pad_value=-np.inf)
    b, c = x.shape[:2]
    winr = win.reshape(b, c, ho, wo, k * k)
    idx = winr.argmax(axis=-1)
    y = np.take_along_axis(winr, idx[..., None], axis=-1)[..., 0]

    def bwd(douts):
        (dy,) = douts
        dxp = np.zeros((b, c, x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=np.float32)
        bi, ci, hi, wi = np.ogrid[:b, :c, :ho, :wo]
        rows = hi * s + idx // k
        cols = wi * s + idx % k
        np.add.at(dxp, (bi, ci, rows, cols), dy)
        dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
        return [dx.astype(np.float32, copy=False)], {}

    return np.ascontiguousarray(y, dtype=np.float32), bwd


def _run_softmax(node: Node, kind: Softmax, xs: list[Array]):
    (x,) = xs
    axis = kind.axis
    if node.attrs.get("causal"):
        q, kdim = x.shape[-2], x.shape[-1]
        mask = np.tril(np.ones((q, kdim), dtype=bool), k=kdim - q)
        x = np.where(mask, x, np.float32(-1e9))
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(douts):
        (dy,) = douts
        dx = y * (dy - (dy * y).sum(axis=axis, keepdims=True))
        return [dx.astype(np.float32, copy=False)], {}

    return y.astype(np.float32, copy=False), bwd


def _run_embedding(node: Node, kind: Embedding, xs: list[Array], g: Graph):
    (x,) = xs
    ids = np.rint(x).astype(np.int64)
    if ids.min() < 0 or ids.max() >= kind.vocab_size:
        raise EngineError(f"node {node.id}: token id outside [0, {kind.vocab_size})")
    table = g.weights[node.params["table"]]
    y = table[ids]
    if node.attrs.get("positional"):
        y = y + sinusoidal_encoding(y.shape[1], y.shape[2])[None]

    def bwd(douts):
        (dy,) = douts
        dtab = np.zeros_like(table)
        np.add.at(dtab, ids.ravel(), dy.reshape(-1, table.shape[1]))
        return [np.zeros_like(x)], {node.params["table"]: dtab}

    return y.astype(np.float32, copy=False), bwd


def _run_fakequant(node: Node, kind: FakeQuant, xs: list[Array], g: Graph,
                   ctx: ExecutionContext):
    (x,) = xs
    if kind.bits >= 32:
        return x, lambda douts: ([douts[0]], {})
    if kind.scheme == "dorefa":
        y, mask = dorefa_activation_with_grad(x, kind.bits)

        def bwd(douts):
            return [(douts[0] * mask).astype(np.float32, copy=False)], {}

        return y, bwd
    # lsq
    sname = node.params["step"]
    sarr = g.weights[sname]
    signed = bool(node.attrs.get("signed"))
    if float(sarr.reshape(-1)[0]) <= 0.0:
        sarr.reshape(-1)[0] = lsq_init_step(x, kind.bits, signed)
    state = LsqState(float(sarr.reshape(-1)[0]), kind.bits, signed)
    y, dmask, dselem = lsq_quantize_with_grad(x, state)

    def bwd(douts):
        (dy,) = douts
        ds = np.array([np.sum(dy * dselem)], dtype=np.float32)
        return [(dy * dmask).astype(np.float32, copy=False)], {sname: ds}

    return y, bwd


def _split_sizes(sections: Sequence[int]) -> list[int]:
    out, acc = [], 0
    for s in sections[:-1]:
        acc += s
        out.append(acc)
    return out


def run_node(node: Node, xs: list[Array], g: Graph, ctx: ExecutionContext):
    """Execute one node; returns (list of outputs, backward closure)."""
    k = node.kind

    if isinstance(k, Conv2D):
        y, bwd = _run_conv(node, k, xs, g, ctx)
        return [y], bwd
    if isinstance(k, FullyConnected):
        y, bwd = _run_fc(node, xs, g, ctx)
        return [y], bwd
    if isinstance(k, BatchNorm):
        y, bwd = _run_bn(node, k, xs, g, ctx)
        return [y], bwd
    if isinstance(k, LayerNorm):
        y, bwd = _run_ln(node, k, xs, g)
        return [y], bwd
    if isinstance(k, MaxPool):
        y, bwd = _run_maxpool(node, k, xs)
        return [y], bwd
    if isinstance(k, AvgPoolGlobal):
        (x,) = xs
        hw = x.shape[2] * x.shape[3]
        y = x.mean(axis=(2, 3))

        def bwd_gap(douts):
            dy = douts[0]
            dx = np.broadcast_to(dy[:, :, None, None] / hw, x.shape)
            return [dx.astype(np.float32, copy=False)], {}

        return [y.astype(np.float32, copy=False)], bwd_gap
    if isinstance(k, ReLU):
        (x,) = xs
        mask = x > 0
        return [np.where(mask, x, 0.0).astype(np.float32, copy=False)], \
            lambda douts: ([(douts[0] * mask).astype(np.float32, copy=False)], {})
    if isinstance(k, Concat):
        axis = k.axis
        y = np.concatenate(xs, axis=axis)
        sizes = _split_sizes([a.shape[axis] for a in xs])

        def bwd_cat(douts):
            return list(np.split(douts[0], sizes, axis=axis)), {}

        return [y.astype(np.float32, copy=False)], bwd_cat
    if isinstance(k, Add):
        a, b = xs
        return [(a + b).astype(np.float32, copy=False)], lambda douts: ([douts[0], douts[0]], {})
    if isinstance(k, Split):
        (x,) = xs
        outs = np.split(x, _split_sizes(k.sections), axis=k.axis)

        def bwd_split(douts):
            filled = [d if d is not None else np.zeros_like(o)
                      for d, o in zip(douts, outs)]
            return [np.concatenate(filled, axis=k.axis).astype(np.float32, copy=False)], {}

        return [np.ascontiguousarray(o, dtype=np.float32) for o in outs], bwd_split
    if isinstance(k, Embedding):
        y, bwd = _run_embedding(node, k, xs, g)
        return [y], bwd
    if isinstance(k, OneHot):
        (x,) = xs
        ids = np.rint(x).astype(np.int64)
        if ids.min() < 0 or ids.max() >= k.vocab_size:
            raise EngineError(f"node {node.id}: token id outside [0, {k.vocab_size})")
        y = np.zeros(ids.shape + (k.vocab_size,), dtype=np.float32)
        np.put_along_axis(y, ids[..., None], 1.0, axis=-1)
        return [y], lambda douts: ([np.zeros(ids.shape, dtype=np.float32)], {})
    if isinstance(k, Softmax):
        y, bwd = _run_softmax(node, k, xs)
        return [y], bwd
    if isinstance(k, MatMul):
        a, b = xs
        scale = float(node.attrs.get("scale", 1.0))
        y = np.matmul(a, b)
        if scale != 1.0:
            y = y * scale

        def bwd_mm(douts):
            dy = douts[0] * scale
            da = np.matmul(dy, np.swapaxes(b, -1, -2))
            db = np.matmul(np.swapaxes(a, -1, -2), dy)
            return [da.astype(np.float32, copy=False), db.astype(np.float32, copy=False)], {}

        return [y.astype(np.float32, copy=False)], bwd_mm
    if isinstance(k, Permute):
        (x,) = xs
        inv = tuple(np.argsort(k.order))
        return [np.ascontiguousarray(x.transpose(k.order), dtype=np.float32)], \
            lambda douts: ([np.ascontiguousarray(douts[0].transpose(inv), dtype=np.float32)], {})
    if isinstance(k, Reshape):
        (x,) = xs
        dims = list(k.target_dims)
        if -1 not in dims and dims[0] != x.shape[0] and math.prod(dims) != x.size:
            dims[0] = -1  # nominal batch differs from runtime batch
        y = x.reshape(dims)
        xshape = x.shape
        return [np.ascontiguousarray(y, dtype=np.float32)], \
            lambda douts: ([douts[0].reshape(xshape).astype(np.float32, copy=False)], {})
    if isinstance(k, FakeQuant):
        y, bwd = _run_fakequant(node, k, xs, g, ctx)
        return [y], bwd

    raise EngineError(f"node {node.id}: no kernel for {kind_name(k)}")


# --------------------------------------------------------------------------
# graph execution
# --------------------------------------------------------------------------


def _needed_nodes(graph: Graph, wanted_edges: set[str]) -> list[Node]:
    needed: set[str] = set(wanted_edges)
    keep: list[Node] = []
    for node in reversed(graph.nodes):
        if any(e in needed for e in node.outputs):
            keep.append(node)
            needed.update(node.inputs)
    keep.reverse()
    return keep


def _check_input(name: str, arr: Array, graph: Graph, batch: int | None) -> int | None:
    spec = graph.edges[name]
    dims, roles = spec.dims, spec.roles
    if arr.ndim != len(dims):
        raise ShapeMismatch(f"input {name!r}: rank {arr.ndim} vs spec {dims}")
    for i, (d, r) in enumerate(zip(dims, roles)):
        if r == "batch":
            if batch is None:
                batch = arr.shape[i]
            elif arr.shape[i] != batch:
                raise ShapeMismatch(f"input {name!r}: inconsistent batch {arr.shape[i]}")
        elif arr.shape[i] != d:
            raise ShapeMismatch(f"input {name!r}: dim {i} is {arr.shape[i]}, spec says {d}")
    return batch


def forward(graph: Graph, inputs: dict[str, Array], ctx: ExecutionContext,
            taps: Iterable[str] = (), record_tape: bool = False,
            outputs: Sequence[str] | None = None) -> ForwardResult:
    """Run the graph; computes only what the requested edges need."""
    wanted = list(outputs) if outputs is not None else list(graph.graph_outputs)
    wanted_set = set(wanted) | set(taps)
    edges: dict[str, Array] = {}
    batch: int | None = None
    for name in graph.graph_inputs:
        if name not in inputs:
            raise ShapeMismatch(f"missing graph input {name!r}")
        arr = np.asarray(inputs[name], dtype=np.float32)
        batch = _check_input(name, arr, graph, batch)
        edges[name] = arr

    tape = Tape(graph) if record_tape else None
    for node in _needed_nodes(graph, wanted_set):
        xs = [edges[e] for e in node.inputs]
        ys, bwd = run_node(node, xs, graph, ctx)
        for e, y in zip(node.outputs, ys):
            if ctx.check_finite and not np.all(np.isfinite(y)):
                raise NonFiniteValue(f"non-finite value at node {node.id}")
            edges[e] = y
        if tape is not None:
            tape.entries.append(TapeEntry(node, bwd))

    missing = [e for e in wanted_set if e not in edges]
    if missing:
        raise ShapeMismatch(f"requested edges not present in graph: {missing}")
    return ForwardResult(outputs={e: edges[e] for e in wanted},
                         edges=edges, tape=tape)


@dataclass
class Gradients:
    params: dict[str, Array]
    inputs: dict[str, Array]


def backward(tape: Tape, seeds: dict[str, Array]) -> Gradients:
    """Reverse the tape from gradient seeds keyed by edge id."""
    edge_grads: dict[str, Array] = {k: np.asarray(v, dtype=np.float32)
                                    for k, v in seeds.items()}
    param_grads: dict[str, Array] = {}
    for entry in reversed(tape.entries):
        node = entry.node
        if not any(e in edge_grads for e in node.outputs):
            continue
        # Split is the only multi-output kind; its bwd tolerates missing grads.
        douts = [edge_grads.get(e) for e in node.outputs]
        dins, pgrads = entry.bwd(douts)
        for e, d in zip(node.inputs, dins):
            if e in edge_grads:
                edge_grads[e] = edge_grads[e] + d
            else:
                edge_grads[e] = d
        for name, grad in pgrads.items():
            if name in param_grads:
                param_grads[name] = param_grads[name] + grad
            else:
                param_grads[name] = grad
    input_grads = {e: edge_grads[e] for e in tape.graph.graph_inputs if e in edge_grads}
    return Gradients(params=param_grads, inputs=input_grads)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mse(a: Array, b: Array) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse shapes {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def mse_grad(a: Array, b: Array) -> Array:
    return (2.0 * (a - b) / a.size).astype(np.float32, copy=False)


_COS_EPS = 1e-8


def _flatten_batch(a: Array) -> Array:
    return a.reshape(a.shape[0], -1)


def cosine_distance(a: Array, b: Array) -> float:
    """Mean over the batch of 1 - cos(a_i, b_i) on flattened samples."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine shapes {a.shape} vs {b.shape}")
    fa, fb = _flatten_batch(a).astype(np.float64), _flatten_batch(b).astype(np.float64)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    cos = (fa * fb).sum(axis=1) / (na * nb + _COS_EPS)
    return float(np.mean(1.0 - cos))


def cosine_distance_grad(a: Array, b: Array) -> Array:
    fa, fb = _flatten_batch(a), _flatten_batch(b)
    na = np.linalg.norm(fa, axis=1, keepdims=True)
    nb = np.linalg.norm(fb, axis=1, keepdims=True)
    denom = na * nb + _COS_EPS
    s = (fa * fb).sum(axis=1, keepdims=True)
    inv_na2 = 1.0 / np.maximum(na * na, 1e-12)
    dcos = fb / denom - s * fa * inv_na2 / denom
    grad = -dcos / a.shape[0]
    return grad.reshape(a.shape).astype(np.float32, copy=False)


def cross_entropy_hard(logits: Array, labels: Array) -> float:
    """Mean negative log softmax probability of the labelled class."""
    logits2 = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if y.min() < 0 or y.max() >= logits2.shape[1]:
        raise LabelOutOfRange(f"labels outside [0, {logits2.shape[1]})")
    z = logits2 - logits2.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def cross_entropy_hard_grad(logits: Array, labels: Array) -> Array:
    logits2 = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    z = logits2 - logits2.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    return (p / len(y)).reshape(logits.shape).astype(np.float32, copy=False)


@dataclass
class LossValue:
    scalar: float
    components: list[tuple[int, float]]


def stage_weight(stage_index: int, current_stage: int, gamma: float) -> float:
    return gamma ** (current_stage - stage_index)


def staged_loss(components: list[tuple[int, float]], current_stage: int,
                gamma: float) -> LossValue:
    """Geometric down-weighting of earlier-stage losses; the current stage
    carries weight 1."""
    if not 0.0 < gamma < 1.0:
        raise EngineError("gamma must be in (0, 1)")
    total = 0.0
    for i, v in components:
        total += stage_weight(i, current_stage, gamma) * v
    return LossValue(scalar=float(total), components=list(components))


# --------------------------------------------------------------------------
# utilities
# --------------------------------------------------------------------------


def random_inputs(graph: Graph, rng: np.random.Generator,
                  batch: int | None = None) -> dict[str, Array]:
    """Synthesize valid random inputs for a graph (tokens for id-consuming
    inputs, standard normals otherwise)."""
    vocab_for: dict[str, int] = {}
    for node in graph.nodes:
        if isinstance(node.kind, (Embedding, OneHot)):
            vocab_for[node.inputs[0]] = node.kind.vocab_size
    out: dict[str, Array] = {}
    for name in graph.graph_inputs:
        spec = graph.edges[name]
        dims = list(spec.dims)
        if batch is not None and spec.roles and spec.roles[0] == "batch":
            dims[0] = batch
        if name in vocab_for:
            out[name] = rng.integers(0, vocab_for[name], size=dims).astype(np.float32, copy=False)
        else:
            out[name] = rng.standard_normal(dims).astype(np.float32, copy=False)
    return out
