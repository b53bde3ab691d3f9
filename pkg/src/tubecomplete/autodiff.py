"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors record the operations that produced them as backward closures; calling
`backward` on a scalar walks the graph once in reverse topological order and
accumulates exact gradients into the `requires_grad` leaves.  Everything runs
in double precision.  Deliberate restrictions keep the correctness surface
small: no broadcasting beyond scalars (bias addition is its own primitive),
2D matmul only, explicit reshape.

Also home to the Adam optimizer and the model checkpoint format, since both
operate on named parameter tensors.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeMismatch

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array plus an optional gradient accumulator.

    Non-leaf tensors keep references to their parents and a closure that
    scatters the output gradient back to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # convenience arithmetic; all route through the primitives below
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape not in ((), like.data.shape):
        raise ShapeMismatch("add", like.data.shape, arr.shape)
    return Tensor(np.broadcast_to(arr, like.data.shape).copy())


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("add", a.data.shape, b.data.shape)

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("sub", a.data.shape, b.data.shape)

    def backward(g):
        a.accumulate(g)
        b.accumulate(-g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("mul", a.data.shape, b.data.shape)

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a.accumulate(g * s)

    return _make(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-D bias to every row of a (..., D) tensor.

    The one sanctioned broadcast; its backward sums the gradient over rows.
    """
    if bias.data.ndim != 1 or x.data.shape[-1] != bias.data.shape[0]:
        raise ShapeMismatch("add_bias", x.data.shape, bias.data.shape)

    def backward(g):
        x.accumulate(g)
        bias.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(x.data + bias.data, (x, bias), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat needs at least one tensor")
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            t.accumulate(g[tuple(sl)])
            offset += size

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, backward)


def gather(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0; indices may be any integer-array shape.

    Output shape is indices.shape + x.shape[1:].  Backward scatter-adds, so
    repeated indices accumulate.
    """
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx.ravel(), g.reshape(-1, *x.data.shape[1:]))

    return _make(x.data[idx], (x,), backward)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; gradient routes to the first (lowest-index)
    position attaining the maximum."""
    arg = np.argmax(x.data, axis=axis)
    value = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        x.accumulate(full)

    return _make(np.squeeze(value, axis=axis), (x,), backward)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size

        def backward(g):
            x.accumulate(np.full_like(x.data, float(g) / n))

        return _make(x.data.mean(), (x,), backward)
    n = x.data.shape[axis]

    def backward_axis(g):
        x.accumulate(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _make(x.data.mean(axis=axis), (x,), backward_axis)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:

        def backward(g):
            x.accumulate(np.full_like(x.data, float(g)))

        return _make(x.data.sum(), (x,), backward)

    def backward_axis(g):
        n = x.data.shape[axis]
        x.accumulate(np.repeat(np.expand_dims(g, axis), n, axis=axis))

    return _make(x.data.sum(axis=axis), (x,), backward_axis)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * np.where(mask, 1.0, alpha))

    return _make(np.where(mask, x.data, alpha * x.data), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - y * y))

    return _make(y, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate(y * (g - inner))

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        x.accumulate(inv * (g - gm - xhat * gx))

    return _make(xhat, (x,), backward)


def euclidean_norm_rows(x: Tensor) -> Tensor:
    """Row-wise Euclidean norm of an (N, D) tensor -> (N,).

    Gradient is x / ||x|| per row, defined as 0 at zero-norm rows (the
    subgradient choice coincident point pairs rely on).
    """
    if x.data.ndim != 2:
        raise ShapeMismatch("euclidean_norm_rows", x.data.shape)
    norms = np.sqrt(np.sum(x.data * x.data, axis=1))

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        direction = x.data / safe[:, None]
        direction[norms == 0] = 0.0
        x.accumulate(direction * g[:, None])

    return _make(norms, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        x.accumulate(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch("transpose", x.data.shape)

    def backward(g):
        x.accumulate(g.T)

    return _make(x.data.T, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Populate gradients of every requires_grad leaf reachable from `loss`.

    Requires a scalar; repeated calls accumulate into existing .grad buffers.
    """
    if loss.data.shape != ():
        raise ConfigError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.accumulate(np.float64(1.0))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if not node.requires_grad or node._parents:
                node.grad = None  # free interior buffers as we go


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update over named parameter tensors, in place.

    Parameters with no accumulated gradient are treated as zero-gradient and
    left unchanged.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        mhat = state.m[name] / c1
        vhat = state.v[name] / c2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TSRC"
_CKPT_VERSION = 1


def save_checkpoint(path, config: dict, blobs: dict):
    """Write config JSON plus named float arrays.

    Layout: magic, u32 version, u32 config length, config JSON, then per blob
    u32 name length, name, u32 ndim, ndim u32 dims, little-endian f32 data.
    """
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(cfg)))
        fh.write(cfg)
        for name in sorted(blobs):
            arr = blobs[name]
            data = np.asarray(arr.data if isinstance(arr, Tensor) else arr,
                              dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def load_checkpoint(path):
    """(config dict, {name: float64 array}) from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    try:
        config = json.loads(raw[off:off + cfg_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed config block ({exc})") from exc
    off += cfg_len
    blobs = {}
    while off < len(raw):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated blob header")
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: blob '{name}' data truncated")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        blobs[name] = data.reshape(shape).astype(np.float64)
        off = end
    return config, blobs
