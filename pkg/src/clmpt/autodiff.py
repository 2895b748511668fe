"""A small dense-tensor library with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Operations are recorded on the innermost
active :class:`Tape` whenever an input requires gradients::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.sigmoid(w * 2.0))
    grads = tape.backward(loss)      # {w: array([...])}

Complex vectors are stored with interleaved ``(re, im)`` pairs on the last axis.
Elementwise ``add``/``sub``/``mul`` follow numpy broadcasting; other primitives
take the shapes documented on them.
"""
from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class ZeroNormError(ValueError):
    pass


class OptimizerError(FloatingPointError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of primitive applications; reversed for backpropagation.

    A tape belongs to one thread. Records are appended in execution order, which
    is already a topological order of the computation.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a one-element ``output`` for every leaf that requires them.

        Leaves recorded on the tape but not influencing ``output`` get zeros. The
        result is also stored on each leaf's ``.grad``.
        """
        if output.size != 1:
            raise ContractError(f"backward needs a one-element output, got shape {output.shape}")
        if not self.records or output._tape is not self:
            raise ContractError("output was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=DTYPE)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            for x in rec.inputs:
                if isinstance(x, Tensor) and x.requires_grad and x._tape is not self:
                    leaves[id(x)] = x
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for x, gx in zip(rec.inputs, in_grads):
                if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros(leaf.shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE)
            out[leaf] = leaf.grad
        return out


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate through the tape that produced ``output``."""
    if output.size != 1:
        raise ContractError(f"backward needs a one-element output, got shape {output.shape}")
    if output._tape is None:
        raise ContractError("output has no recorded history (was it computed inside a Tape?)")
    return output._tape.backward(output)


def _make(data, inputs: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(op, out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _broadcast(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {shapes}") from exc


# ----------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a.shape, b.shape)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ----------------------------------------------------------------------------
# Linear algebra and complex arithmetic


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., m, k)`` and ``b`` of shape ``(..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _broadcast("matmul", a.shape[:-2], b.shape[:-2])

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def _check_complex(op, *shapes):
    for s in shapes:
        if not s or s[-1] % 2:
            raise ShapeError(f"{op}: last axis must hold (re, im) pairs, got shape {s}")


def cmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Interleaved complex product on plain arrays."""
    ar, ai = a[..., 0::2], a[..., 1::2]
    br, bi = b[..., 0::2], b[..., 1::2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=DTYPE)
    out[..., 0::2] = ar * br - ai * bi
    out[..., 1::2] = ar * bi + ai * br
    return out


def conj(a: np.ndarray) -> np.ndarray:
    """Interleaved complex conjugate on plain arrays."""
    out = np.array(a, dtype=DTYPE, copy=True)
    out[..., 1::2] *= -1.0
    return out


def complex_hadamard(a, b) -> Tensor:
    """Elementwise complex product of interleaved vectors (broadcasts leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_complex("complex_hadamard", a.shape, b.shape)
    _broadcast("complex_hadamard", a.shape, b.shape)

    def bwd(g):
        ga = _unbroadcast(cmul(g, conj(b.data)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(cmul(g, conj(a.data)), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(cmul(a.data, b.data), (a, b), bwd, "complex_hadamard")


def conjugate(x) -> Tensor:
    x = as_tensor(x)
    _check_complex("conjugate", x.shape)
    return _make(conj(x.data), (x,), lambda g: (conj(g),), "conjugate")


# ----------------------------------------------------------------------------
# Normalisation and reductions


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def logsumexp(x, axis: int = -1) -> Tensor:
    """``log(sum(exp(x)))`` along ``axis``, accurate when one term dominates."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    idx = np.argmax(x.data, axis=axis)
    np.put_along_axis(e, np.expand_dims(idx, axis), 0.0, axis=axis)
    out = np.squeeze(m, axis=axis) + np.log1p(e.sum(axis=axis))

    def bwd(g):
        p = np.exp(x.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * p,)

    return _make(out, (x,), bwd, "logsumexp")


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply ``gain``/``bias``."""
    x = as_tensor(x)
    gain = None if gain is None else as_tensor(gain)
    bias = None if bias is None else as_tensor(bias)
    for p in (gain, bias):
        if p is not None and p.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: affine parameter shape {p.shape} != {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        gh = g * gain.data if gain is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain is not None else None
        gb = _unbroadcast(g, bias.shape) if bias is not None else None
        return gx, gg, gb

    return _make(out, (x, gain, bias), bwd, "layer_norm")


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // (np.size(out) or 1)
    return _make(out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / count,), "mean")


def max(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis (or all); the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    out = x.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        grad = np.zeros(x.shape, dtype=DTYPE)
        if axis is None:
            grad.reshape(-1)[np.argmax(x.data)] = np.reshape(g, ())
        else:
            idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(grad, idx, gk, axis=axis)
        return (grad,)

    return _make(out, (x,), bwd, "max")


def l2_norm(x) -> Tensor:
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def bwd(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[..., None] > 0, g[..., None] * x.data / safe[..., None], 0.0),)

    return _make(n, (x,), bwd, "l2_norm")


def cube_norm_penalty(x) -> Tensor:
    """Sum over complex coordinates of ``|z|^3`` (last axis interleaved)."""
    x = as_tensor(x)
    _check_complex("cube_norm_penalty", x.shape)
    re, im = x.data[..., 0::2], x.data[..., 1::2]
    mod = np.sqrt(re * re + im * im)
    out = (mod ** 3).sum(axis=-1)

    def bwd(g):
        return (3.0 * g[..., None] * np.repeat(mod, 2, axis=-1) * x.data,)

    return _make(out, (x,), bwd, "cube_norm_penalty")


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along the last axis (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"cosine_similarity: last axes differ, {a.shape} vs {b.shape}")
    _broadcast("cosine_similarity", a.shape, b.shape)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if (na == 0).any() or (nb == 0).any():
        raise ZeroNormError("cosine_similarity: zero-norm vector")
    dot = (a.data * b.data).sum(axis=-1)
    denom = na * nb
    c = dot / denom

    def bwd(g):
        ge = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(ge * (b.data / denom[..., None] - c[..., None] * a.data / (na * na)[..., None]),
                              a.shape)
        if b.requires_grad:
            gb = _unbroadcast(ge * (a.data / denom[..., None] - c[..., None] * b.data / (nb * nb)[..., None]),
                              b.shape)
        return ga, gb

    return _make(c, (a, b), bwd, "cosine_similarity")


# ----------------------------------------------------------------------------
# Structural


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from exc
    n = len(xs)
    return _make(out, xs, lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)), "stack")


def getitem(x, idx) -> Tensor:
    """Indexing and slicing, including integer-array gathers (gradients scatter-add)."""
    x = as_tensor(x)
    try:
        out = x.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from exc

    basic = _is_basic_index(idx)

    def bwd(g):
        grad = np.zeros(x.shape, dtype=DTYPE)
        if basic:
            grad[idx] += g
        else:
            np.add.at(grad, idx, g)
        return (grad,)

    return _make(np.array(out, dtype=DTYPE), (x,), bwd, "slice")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def take_rows(table, ids) -> Tensor:
    """``table[ids]`` for an integer id array of any shape."""
    return getitem(table, np.asarray(ids, dtype=np.int64))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


# ----------------------------------------------------------------------------
# Gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, step: float = 1e-5) -> float:
    """Largest relative gap between taped and central-difference gradients.

    The relative error of one coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    leaves = [Tensor(np.array(as_tensor(x).data, copy=True), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*leaves)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    analytic = tape.backward(out) if out._tape is tape else {}
    worst = 0.0
    for i, leaf in enumerate(leaves):
        ga = analytic.get(leaf, np.zeros(leaf.shape))
        base = [Tensor(lf.data) for lf in leaves]
        flat = base[i].data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = fn(*base).item()
            flat[j] = orig - step
            fm = fn(*base).item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * step)
            an = ga.reshape(-1)[j]
            err = abs(an - num) / np.maximum(1e-8, abs(an) + abs(num))
            worst = err if err > worst else worst
    return float(worst)


# ----------------------------------------------------------------------------
# Optimiser


class ParamStore:
    """Named parameters plus AdamW moment estimates and the step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = dict(params)
        self.exp_avg = {k: np.zeros(p.shape, dtype=DTYPE) for k, p in self.params.items()}
        self.exp_avg_sq = {k: np.zeros(p.shape, dtype=DTYPE) for k, p in self.params.items()}
        self.step = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"exp_avg/{k}"] = self.exp_avg[k]
            out[f"exp_avg_sq/{k}"] = self.exp_avg_sq[k]
        out["step"] = np.array([self.step], dtype=DTYPE)
        return out


def adamw_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> ParamStore:
    """One AdamW update with decoupled weight decay, in place.

    Parameters missing from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != store.params[name].shape:
            raise ShapeError(f"adamw_step: gradient shape {g.shape} != parameter {name!r} {store.params[name].shape}")
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** store.step
    bc2 = 1.0 - b2 ** store.step
    for name, g in grads.items():
        p = store.params[name].data
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m = store.exp_avg[name]
        v = store.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return store


# ----------------------------------------------------------------------------
# Checkpoint container
#
# Layout (all integers little-endian):
#   8 bytes   magic b"CLMPTCK1"
#   8 bytes   header length H (uint64)
#   H bytes   UTF-8 JSON: {"metadata": {...}, "arrays": [{"name", "shape", "offset", "nbytes"}]}
#   ...       raw float64 little-endian array payloads at the listed offsets
# Arrays are written in sorted name order so identical content gives identical bytes.

_MAGIC = b"CLMPTCK1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(DTYPE).reshape(e["shape"])
    return arrays, header["metadata"]
