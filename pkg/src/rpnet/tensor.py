"""Dense tensors with tape-based reverse-mode differentiation.

Layout follows batch x X x Y x D (lower ranks allowed).  Every op checks its
output for NaN/Inf and raises ``FloatingPointError`` when one appears.

Differentiable ops are recorded on the innermost active :class:`Tape`::

    with Tape() as tape:
        loss = (w * x).sum()
    tape.backward(loss)

Without an active tape, ops compute values only.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "backward", "detach",
    "conv2d", "relu", "sigmoid", "gap", "channel_max", "global_max", "add",
    "sub", "mul", "scale", "div_scalar", "add_scalar", "sum", "mean",
    "matmul", "square", "masked_mean", "cosine_similarity_map",
    "max_over_last", "linear_map2d", "softplus_bce", "stack_last",
    "take_channels", "concat_channels", "flip_y",
]

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "name")

    def __init__(self, out, inputs, backward_fn, name):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered record of differentiable ops executed while it is active."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    @property
    def op_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def backward(self, loss: "Tensor") -> list[str]:
        """Populate ``grad`` of every requires-grad leaf reachable from ``loss``.

        Nodes are replayed in exact reverse execution order.  Returns the names
        of visited ops in visiting order.  The tape is consumed.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward")
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape (detached loss)")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            visited.append(node.name)
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
        self.nodes = []
        self.consumed = True
        return visited


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional real array that may take part in a tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                             and data.dtype.kind == "f" else DEFAULT_DTYPE))
        if arr.size == 0:
            raise ShapeError("empty tensor")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> list[str]:
        return backward(self)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name}: non-finite values in output")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._tape = None
    tape = _active_tape()
    needs = any(i.requires_grad for i in inputs)
    t.requires_grad = needs and tape is not None
    if t.requires_grad:
        t._tape = tape
        tape.nodes.append(_Node(t, tuple(inputs), backward_fn, name))
    return t


def backward(loss: Tensor) -> list[str]:
    """Run reverse-mode differentiation from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("loss is detached: it was not produced under an active tape")
    return loss._tape.backward(loss)


def detach(t: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(t.data, requires_grad=False)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    Besides equal shapes, a ``(..., 1)`` per-position factor times a
    ``(..., D)`` map is allowed (either operand order).
    """
    if a.shape == b.shape:
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if a.shape[:-1] == b.shape[:-1] and 1 in (a.shape[-1], b.shape[-1]):
        def bw(g):
            ga = g * b.data
            gb = g * a.data
            if a.shape[-1] == 1:
                ga = ga.sum(axis=-1, keepdims=True)
            if b.shape[-1] == 1:
                gb = gb.sum(axis=-1, keepdims=True)
            return ga, gb
        return _make(a.data * b.data, (a, b), bw, "mul")
    raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def add_scalar(a: Tensor, k: float) -> Tensor:
    return _make(a.data + k, (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def div_scalar(a: Tensor, s: Tensor) -> Tensor:
    """``a / s`` for a one-element tensor ``s``; differentiable in both."""
    if s.data.size != 1:
        raise ShapeError("div_scalar: divisor must have one element")
    sv = s.data.reshape(())
    out = a.data / sv

    def bw(g):
        return g / sv, np.reshape(-(g * a.data).sum() / (sv * sv), s.shape)
    return _make(out, (a, s), bw, "div_scalar")


def relu(t: Tensor) -> Tensor:
    pos = t.data > 0
    return _make(np.where(pos, t.data, 0.0).astype(t.dtype), (t,),
                 lambda g: (g * pos,), "relu")


def sigmoid(t: Tensor) -> Tensor:
    out = _sigmoid(t.data)
    return _make(out, (t,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def flip_y(t: Tensor) -> Tensor:
    """Mirror along the width axis (axis -2)."""
    return _make(t.data[..., ::-1, :].copy(), (t,), lambda g: (g[..., ::-1, :].copy(),), "flip_y")


# ---------------------------------------------------------------- reductions

def sum(t: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(t.data.sum()), (t,),
                 lambda g: (np.broadcast_to(g, t.shape).copy(),), "sum")


def mean(t: Tensor) -> Tensor:
    n = t.data.size
    return _make(np.asarray(t.data.sum() / n), (t,),
                 lambda g: (np.broadcast_to(g / n, t.shape).copy(),), "mean")


def gap(t: Tensor) -> Tensor:
    """Spatial mean per channel: (X, Y, D) -> (D,), (B, X, Y, D) -> (B, D)."""
    if t.ndim not in (3, 4):
        raise ShapeError(f"gap expects rank 3 or 4, got {t.shape}")
    n = t.shape[-3] * t.shape[-2]
    out = t.data.sum(axis=(-3, -2)) / n

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / n, (-3, -2)), t.shape).copy(),)
    return _make(out, (t,), bw, "gap")


def channel_max(t: Tensor) -> Tensor:
    """Per-position max over the last axis, keeping it as size 1.

    Gradient goes to the argmax channel; ties go to the lowest index.
    """
    idx = np.argmax(t.data, axis=-1)[..., None]
    out = np.take_along_axis(t.data, idx, axis=-1)

    def bw(g):
        gi = np.zeros_like(t.data)
        np.put_along_axis(gi, idx, g, axis=-1)
        return (gi,)
    return _make(out, (t,), bw, "channel_max")


max_over_last = channel_max


def global_max(t: Tensor) -> Tensor:
    """Scalar max over all entries; gradient to the first argmax."""
    flat = int(np.argmax(t.data))
    out = np.asarray(t.data.reshape(-1)[flat])

    def bw(g):
        gi = np.zeros_like(t.data)
        gi.reshape(-1)[flat] = g
        return (gi,)
    return _make(out, (t,), bw, "global_max")


def stack_last(ts: Sequence[Tensor]) -> Tensor:
    """Concatenate equally shaped ``(..., 1)`` maps along the last axis."""
    return concat_channels(ts)


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ShapeError("concat of empty list")
    lead = ts[0].shape[:-1]
    for t in ts:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: extents differ {t.shape} vs {ts[0].shape}")
    sizes = [t.shape[-1] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=-1)
    cuts = np.cumsum(sizes)[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=-1)), "concat")


def take_channels(t: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        gi = np.zeros_like(t.data)
        gi[..., start:stop] = g
        return (gi,)
    return _make(t.data[..., start:stop].copy(), (t,), bw, "take_channels")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape (..., K) and b of shape (K, M)."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear_map2d(t: Tensor, rows: np.ndarray, cols: np.ndarray, name="linear_map2d") -> Tensor:
    """Apply fixed operators along both spatial axes: ``rows @ t[..., d] @ cols.T``.

    ``t`` is (X, Y, D); ``rows`` is (X', X) and ``cols`` is (Y', Y).
    """
    if t.ndim != 3 or rows.shape[1] != t.shape[0] or cols.shape[1] != t.shape[1]:
        raise ShapeError(f"{name}: operator shapes {rows.shape}, {cols.shape} vs map {t.shape}")
    out = np.einsum("ax,xyd,by->abd", rows, t.data, cols, optimize=True)

    def bw(g):
        return (np.einsum("ax,abd,by->xyd", rows, g, cols, optimize=True),)
    return _make(out.astype(t.dtype, copy=False), (t,), bw, name)


# ---------------------------------------------------------------- convolution

def _pad_amount(padding, kh, kw):
    if padding == "same":
        return (kh - 1) // 2, (kw - 1) // 2
    if padding == "valid":
        return 0, 0
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding=0, groups: int = 1,
           bias: Tensor | None = None) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    ``x`` is (X, Y, Cin) or (B, X, Y, Cin); ``kernel`` is (kh, kw, Cin/groups, Cout).
    ``padding`` is an int, an (int, int) pair, "same" or "valid".
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected input rank 3/4 and kernel rank 4, got {x.shape}, {kernel.shape}")
    if stride < 1 or groups < 1:
        raise ShapeError("conv2d: stride and groups must be positive")
    B, H, W, cin = xd.shape
    kh, kw, cg, cout = kernel.shape
    if cin % groups:
        raise ShapeError(f"conv2d: input channels {cin} not divisible by groups {groups}")
    if cg * groups != cin:
        raise ShapeError(f"conv2d: kernel expects {cg * groups} input channels "
                         f"({cg} per group x {groups}), input has {cin}")
    if cout % groups:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups {groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ph, pw = _pad_amount(padding, kh, kw)
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw}")
    og = cout // groups
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xd

    # cols: (B, Ho, Wo, kh, kw, G, cg)
    cols = np.empty((B, Ho, Wo, kh, kw, cin), dtype=np.result_type(xd, kernel.data))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    P = B * Ho * Wo
    cols_g = cols.reshape(P, kh * kw, groups, cg).transpose(2, 0, 1, 3).reshape(groups, P, kh * kw * cg)
    w_g = kernel.data.reshape(kh, kw, cg, groups, og).transpose(3, 0, 1, 2, 4).reshape(groups, kh * kw * cg, og)
    out = np.matmul(cols_g, w_g)  # (G, P, og)
    out = out.transpose(1, 0, 2).reshape(B, Ho, Wo, cout)
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gg = g4.reshape(P, groups, og).transpose(1, 0, 2)  # (G, P, og)
        gw = np.matmul(cols_g.transpose(0, 2, 1), gg)  # (G, kh*kw*cg, og)
        gw = gw.reshape(groups, kh, kw, cg, og).transpose(1, 2, 3, 0, 4).reshape(kernel.shape)
        gcols = np.matmul(gg, w_g.transpose(0, 2, 1))  # (G, P, kh*kw*cg)
        gcols = gcols.reshape(groups, P, kh * kw, cg).transpose(1, 2, 0, 3).reshape(B, Ho, Wo, kh, kw, cin)
        gxp = np.zeros_like(xp, dtype=gcols.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, ph:ph + H, pw:pw + W, :]
        if squeeze:
            gx = gx[0]
        gb = g4.reshape(-1, cout).sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, inputs, bw, "conv2d")


# ---------------------------------------------------------------- metric ops

def masked_mean(features: Tensor, mask: np.ndarray) -> Tensor:
    """Spatial mean of (X, Y, D) features weighted by a constant (X, Y) mask."""
    m = np.asarray(mask, dtype=features.dtype).reshape(features.shape[:2])
    total = m.sum()
    if total <= 0:
        raise ZeroDivisionError("masked_mean: empty mask")
    out = np.einsum("xy,xyd->d", m, features.data) / total

    def bw(g):
        return (m[:, :, None] * g[None, None, :] / total,)
    return _make(out, (features,), bw, "masked_mean")


def cosine_similarity_map(target: Tensor, protos: Tensor) -> Tensor:
    """Cosine between every (x, y) vector of ``target`` and each prototype row.

    ``target`` is (X, Y, D), ``protos`` is (K, D); returns (X, Y, K).  A zero
    vector on either side gives similarity 0 with zero gradient.
    """
    if target.ndim != 3 or protos.ndim != 2 or target.shape[-1] != protos.shape[-1]:
        raise ShapeError(f"cosine: width mismatch {target.shape} vs {protos.shape}")
    t = target.data
    p = protos.data
    tn = np.sqrt((t * t).sum(axis=-1))  # (X, Y)
    pn = np.sqrt((p * p).sum(axis=-1))  # (K,)
    tz = tn > 0
    pz = pn > 0
    t_inv = np.where(tz, 1.0 / np.where(tz, tn, 1.0), 0.0)
    p_inv = np.where(pz, 1.0 / np.where(pz, pn, 1.0), 0.0)
    that = t * t_inv[..., None]
    phat = p * p_inv[:, None]
    out = (that @ phat.T).astype(t.dtype, copy=False)

    def bw(g):
        # d cos / d t = (phat - cos * that) / |t|
        g_that = g @ phat  # (X, Y, D)
        gt = (g_that - (g * out).sum(axis=-1, keepdims=True) * that) * t_inv[..., None]
        g_phat = np.einsum("xyk,xyd->kd", g, that)
        gp = (g_phat - np.einsum("xyk,xyk->k", g, out)[:, None] * phat) * p_inv[:, None]
        return gt, gp
    return _make(out, (target, protos), bw, "cosine")


def stack_rows(vs: Sequence[Tensor]) -> Tensor:
    """Stack equally sized vectors into a (K, D) matrix."""
    if not vs:
        raise ShapeError("stack of empty list")
    out = np.stack([v.data for v in vs])
    return _make(out, tuple(vs), lambda g: tuple(g[i] for i in range(len(vs))), "stack_rows")


__all__.append("stack_rows")


def softplus_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over entries of sigmoid cross-entropy, computed stably."""
    u = np.asarray(targets, dtype=logits.dtype)
    if u.shape != logits.shape:
        raise ShapeError(f"bce: length mismatch {logits.shape} vs {u.shape}")
    v = logits.data
    n = v.size
    per = np.maximum(v, 0) - v * u + np.log1p(np.exp(-np.abs(v)))
    out = np.asarray(per.sum() / n)

    def bw(g):
        return (g * (_sigmoid(v) - u) / n,)
    return _make(out, (logits,), bw, "bce")


def params_grad(params: Iterable[Tensor]) -> list[np.ndarray | None]:
    return [p.grad for p in params]
