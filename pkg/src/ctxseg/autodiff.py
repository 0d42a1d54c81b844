"""Minimal reverse-mode automatic differentiation over float64 arrays.

Define-by-run: ops executed while a :class:`Tape` is active append nodes to
it, and :func:`backward` replays the tape in reverse. The tape is rebuilt
every optimizer step, which keeps freezing/unfreezing subnets trivial.
Without an active tape every op is a plain numpy computation, which is what
evaluation-mode inference uses.

All data is float64. Convolutions go through im2col + one GEMM so the
training loop spends its time inside BLAS rather than Python.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .rng import RngState

# Debug-mode scan: when True, every op output is checked for NaN/Inf.
CHECK_FINITE = False


def _check(arr: np.ndarray, tag: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by op '{tag}'")


class Tensor:
    """Dense rank-N float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None  # populated by backward() for leaves
        self.node_id = None  # valid only for self._tape
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class TapeNode:
    __slots__ = ("tag", "input_ids", "backward_fn", "tensor")

    def __init__(self, tag, input_ids, backward_fn, tensor=None):
        self.tag = tag
        self.input_ids = input_ids
        self.backward_fn = backward_fn  # None for leaves
        self.tensor = tensor  # leaf tensors only, to receive .grad


class Tape:
    """Append-only op record; nodes are in topological order by construction."""

    _stack: list = []

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls):
        return cls._stack[-1] if cls._stack else None

    def _register_leaf(self, t: Tensor) -> int:
        t._tape = self
        t.node_id = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), None, t))
        return t.node_id

    def _record(self, tag, inputs, backward_fn, out: Tensor) -> None:
        ids = []
        for t in inputs:
            if t.requires_grad:
                if t._tape is not self or t.node_id is None:
                    self._register_leaf(t)
                ids.append(t.node_id)
            else:
                ids.append(None)
        out._tape = self
        out.node_id = len(self.nodes)
        self.nodes.append(TapeNode(tag, tuple(ids), backward_fn))


def _emit(tag, inputs, out_data, backward_fn) -> Tensor:
    """Create the output tensor of an op and record it if a tape is active."""
    _check(out_data, tag)
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = Tape.active()
    if tape is not None and req:
        tape._record(tag, inputs, backward_fn, out)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate gradients of ``loss`` into every reachable leaf's ``.grad``.

    Visits each tape node at most once, in reverse topological order.
    Leaves that do not contribute to the loss are left untouched (their
    gradient reads as zero through :class:`Parameter`).
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return  # constant loss (e.g. everything frozen): nothing reachable
    if loss._tape is not tape or loss.node_id is None:
        raise ContractError("loss was not recorded on the given tape")

    grads: list = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)

    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:  # leaf
            t = node.tensor
            t.grad = g.copy() if t.grad is None else t.grad + g
            grads[nid] = None
            continue
        for iid, gi in zip(node.input_ids, node.backward_fn(g)):
            if iid is None or gi is None:
                continue
            grads[iid] = gi if grads[iid] is None else grads[iid] + gi
        grads[nid] = None  # free activations as we go


class Parameter:
    """A learnable tensor plus freeze state.

    Frozen parameters drop out of the tape (requires_grad goes False), so
    they accumulate no gradient and sgd_step never moves them.
    """

    def __init__(self, value, name: str = ""):
        self.value = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        self.value.requires_grad = True
        self.name = name
        self.frozen = False

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        if self.frozen or self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None

    def freeze(self):
        self.frozen = True
        self.value.requires_grad = False
        self.value.grad = None

    def unfreeze(self):
        self.frozen = False
        self.value.requires_grad = True

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.value.shape}, frozen={self.frozen})"


def sgd_step(params, lr: float) -> None:
    """value <- value - lr * grad for non-frozen params; clears all grads."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    for p in params:
        if not p.frozen and p.value.grad is not None:
            # Out-of-place so arrays captured by earlier closures stay valid.
            p.value.data = p.value.data - lr * p.value.grad
        p.zero_grad()


def fan_in_uniform(shape, fan_in: int, rng: RngState) -> np.ndarray:
    """Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (broadcasting) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit("mul", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in (0,1), got {slope}")
    factor = np.where(a.data >= 0, 1.0, slope)
    out = a.data * factor

    def bwd(g):
        return (g * factor,)

    return _emit("leaky_relu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    # Clip at +-36: beyond that float64 rounds the output onto {0,1} exactly,
    # and downstream score contracts need strictly (0,1). The value error
    # introduced is < 3e-16 and the true gradient there is ~0 anyway.
    x = np.clip(a.data, -36.0, 36.0)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (a,), out, bwd)


def clip_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.data, floor)
    passed = a.data >= floor

    def bwd(g):
        return (g * passed,)

    return _emit("clip_min", (a,), out, bwd)


def dropout(a: Tensor, rate: float, rng: RngState, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = rng.uniform(0.0, 1.0, a.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    return _emit("dropout", (a,), a.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _emit("sum", (a,), out, bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape) / n,)

    return _emit("mean", (a,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes).copy(),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tuple(tensors), out, bwd)


def slice_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice along axis 1."""
    out = a.data[:, lo:hi].copy()
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape)
        ga[:, lo:hi] = g
        return (ga,)

    return _emit("slice_channels", (a,), out, bwd)


def detach(a: Tensor) -> Tensor:
    """Stop-gradient view of ``a`` (shares data)."""
    out = Tensor(a.data, requires_grad=False)
    return out


# ---------------------------------------------------------------------------
# linear algebra ops
# ---------------------------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise x @ W^T + b for x:[M,Din], W:[Dout,Din], b:[Dout]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"affine expects 2-D input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"affine inner dims disagree: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bwd(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit("affine", (x, weight, bias), out, bwd)


def _conv_out_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    eff = dilation * (k - 1) + 1
    return (size + 2 * padding - eff) // stride + 1


def same_padding(k: int, dilation: int = 1) -> int:
    """Padding that preserves H,W at stride 1 (k must be odd)."""
    return dilation * (k - 1) // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated 2-D cross-correlation, NCHW, via im2col + GEMM."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D tensors, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ContractError(f"conv2d kernels must be square with odd size, got {kh}x{kw}")
    if cin != kcin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
    k = kh
    oh = _conv_out_size(h, k, stride, dilation, padding)
    ow = _conv_out_size(w, k, stride, dilation, padding)
    if oh <= 0 or ow <= 0:
        raise ConfigError(f"conv2d output would be empty: {oh}x{ow}")

    xd, kd, bd = x.data, kernel.data, bias.data

    if k == 1 and stride == 1 and padding == 0:
        # 1x1 fast path: one GEMM over pixels.
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, cin)  # [N*H*W, Cin]
        wmat = kd.reshape(cout, cin)
        out = (cols @ wmat.T + bd).reshape(n, h, w, cout).transpose(0, 3, 1, 2)

        def bwd(g):
            gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            gx = (gmat @ wmat).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
            gw = (gmat.T @ cols).reshape(cout, cin, 1, 1)
            gb = gmat.sum(axis=0)
            return gx, gw, gb

        return _emit("conv2d", (x, kernel, bias), np.ascontiguousarray(out), bwd)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xp.strides
    # Channel-major column layout [Cin*k*k, N*oh*ow]: the copy streams along
    # near-contiguous spatial runs, and the backward column gradient reshapes
    # back without any transpose.
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(cin, k, k, n, oh, ow),
        strides=(s1, s2 * dilation, s3 * dilation, s0, s2 * stride, s3 * stride),
    )
    m = n * oh * ow
    cols = windows.reshape(cin * k * k, m)
    wmat = kd.reshape(cout, cin * k * k)
    out = (wmat @ cols + bd[:, None]).reshape(cout, n, oh, ow).transpose(1, 0, 2, 3)

    hp, wp = xp.shape[2], xp.shape[3]
    need_gx = x.requires_grad

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, m)
        gw = (gmat @ cols.T).reshape(cout, cin, k, k)
        gb = gmat.sum(axis=1)
        if not need_gx:
            return None, gw, gb
        gcols = (wmat.T @ gmat).reshape(cin, k, k, n, oh, ow)
        gxp = np.zeros((cin, n, hp, wp))
        for p in range(k):
            for q in range(k):
                gxp[:, :, p * dilation: p * dilation + stride * oh: stride,
                    q * dilation: q * dilation + stride * ow: stride] += gcols[:, p, q]
        gxp = gxp.transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
        return gx, gw, gb

    return _emit("conv2d", (x, kernel, bias), np.ascontiguousarray(out), bwd)


# ---------------------------------------------------------------------------
# pixel-map ops
# ---------------------------------------------------------------------------

def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1 of [N,C,H,W] (max-subtracted)."""
    xd = x.data
    z = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax_channels", (x,), out, bwd)


def log_softmax_channels(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax_channels", (x,), out, bwd)


def gather_rows(table: Tensor, index_map: np.ndarray) -> Tensor:
    """Per-pixel embedding lookup: table[K,d], idx[N,H,W] -> [N,d,H,W]."""
    idx = np.asarray(index_map)
    kk, dim = table.shape
    if idx.min() < 0 or idx.max() >= kk:
        raise DimensionError(
            f"gather_rows index out of range [0,{kk}): {idx.min()}..{idx.max()}")
    out = table.data[idx].transpose(0, 3, 1, 2)  # [N,H,W,d] -> [N,d,H,W]

    def bwd(g):
        gt = np.zeros((kk, dim))
        np.add.at(gt, idx.reshape(-1), g.transpose(0, 2, 3, 1).reshape(-1, dim))
        return (gt,)

    return _emit("gather_rows", (table,), np.ascontiguousarray(out), bwd)
