"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operators the predictor needs are provided. There is no general
broadcasting: binary ops require equal shapes, except that ``add``/``sub``
accept a right operand whose shape is a suffix of the left one (a bias),
and ``add``/``mul`` accept Python scalars.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
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

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (default 1 for a scalar) to every ancestor."""
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=np.float64).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _suffix_ok(a: Tensor, b: Tensor) -> bool:
    return b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)

        def back_scalar(g):
            if a.requires_grad:
                a._accumulate(g)

        return _result(a.data + c, (a,), back_scalar)
    b = as_tensor(b)
    if a.shape != b.shape and not _suffix_ok(a, b):
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    lead = tuple(range(a.ndim - b.ndim))

    def back(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=lead) if lead else g)

    return _result(a.data + b.data, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), back)


def sub(a, b) -> Tensor:
    if np.isscalar(b):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)

        def back_scalar(g):
            a._accumulate(g * c)

        return _result(a.data * c, (a,), back_scalar)
    b = as_tensor(b)
    _check_same(a, b, "mul")

    def back(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), back)


def square(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        a._accumulate(2.0 * a.data * g)

    return _result(a.data * a.data, (a,), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def back(g):
        a._accumulate(g * out)

    return _result(out, (a,), back)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")

    def back(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), back)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def back(g):
        a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), back)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def back(g):
        a._accumulate(g * (1.0 - out * out))

    return _result(out, (a,), back)


_kink_log: list | None = None


@contextmanager
def record_kinks():
    """Collect the sign pattern of every leaky ReLU evaluated inside the block."""
    global _kink_log
    saved, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = saved


def leaky_relu(a, alpha: float = 0.0) -> Tensor:
    """``max(x, alpha*x)``; the derivative at exactly 0 is taken as ``alpha``."""
    a = as_tensor(a)
    pos = a.data > 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(pos))
    slope = np.where(pos, 1.0, alpha)

    def back(g):
        a._accumulate(g * slope)

    return _result(a.data * slope, (a,), back)


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _result(out, (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / float(n))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        a._accumulate(g.reshape(a.shape))

    return _result(out, (a,), back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: nothing to concatenate")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ValueError(f"concat: incompatible shapes {ts[0].shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(p, (int, slice)) or p is Ellipsis for p in parts):
        raise ValueError("slice_: only basic slicing is supported")
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        full[index] += g
        a._accumulate(full)

    return _result(np.array(out), (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and convolutions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), back)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape, k: int, stride: int) -> np.ndarray:
    """Scatter-add ``cols`` of shape (N, Ho, Wo, C, k, k) into an (N, C, H, W) grid."""
    n, ho, wo, c = cols.shape[:4]
    out = np.zeros(shape)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, k, k, Ho, Wo
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, k, k) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: shape mismatch input {x.shape} kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(o, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            w._accumulate((gm.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
            dxp = _col2im(dcols, xp.shape, k, stride)
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + wd])

    return _result(np.ascontiguousarray(out), parents, back)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d``: (N, C, H, W) input, (C, O, k, k) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv_transpose2d: shape mismatch input {x.shape} kernel {w.shape}")
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    hp, wp = (h - 1) * stride + k, (wd - 1) * stride + k
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d: padding removes the whole output")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = w.data.reshape(c, -1)
    full = _col2im((xm @ wm).reshape(n, h, wd, o, k, k), (n, o, hp, wp), k, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ValueError(f"conv_transpose2d: bias shape {b.shape} != ({o},)")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gcols = _im2col(_pad(g, padding), k, stride, h, wd)
        if w.requires_grad:
            w._accumulate((xm.T @ gcols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate((gcols @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))

    return _result(np.ascontiguousarray(out), parents, back)


# ---------------------------------------------------------------------------
# composite layers


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def lstm_cell(x, h, c, w, b):
    """One LSTM step; ``w`` is (in + units, 4 * units) with gate blocks i, f, o, g."""
    x, h, c, w, b = map(as_tensor, (x, h, c, w, b))
    units = h.shape[1]
    if w.shape != (x.shape[1] + units, 4 * units) or b.shape != (4 * units,) or c.shape != h.shape:
        raise ValueError(
            f"lstm_cell: shape mismatch x {x.shape} h {h.shape} c {c.shape} w {w.shape} b {b.shape}"
        )
    gates = add(matmul(concat([x, h], axis=1), w), b)
    i = sigmoid(gates[:, :units])
    f = sigmoid(gates[:, units : 2 * units])
    o = sigmoid(gates[:, 2 * units : 3 * units])
    g = tanh(gates[:, 3 * units :])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# gradient checking


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst_index: int | None


def grad_check_report(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    indices=None,
    exclude=None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare backprop against central differences coordinate by coordinate.

    The relative error is ``|a - n| / max(|a|, |n|, 1e-8)``. ``indices``
    restricts the check to some flat coordinates. ``exclude`` is a boolean
    mask (or a callable mapping ``x.data`` to one) of coordinates to skip.
    With ``skip_kinks`` a coordinate is also skipped when either perturbed
    evaluation changes the sign pattern of any leaky ReLU, since the central
    difference then straddles a kink.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    x.zero_grad()
    with record_kinks() as base_kinks:
        out = f(x)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value")
    out.backward()
    analytic = x.grad.reshape(-1).copy()
    if not np.isfinite(analytic).all():
        raise FloatingPointError("non-finite analytic gradient")
    skip = np.zeros(x.size, dtype=bool)
    if exclude is not None:
        mask = exclude(x.data) if callable(exclude) else exclude
        skip = np.asarray(mask, dtype=bool).reshape(-1)
    coords = range(x.size) if indices is None else [int(i) for i in indices]
    flat = x.data.reshape(-1)
    worst, worst_idx, checked, skipped = 0.0, None, 0, 0
    for idx in coords:
        if skip[idx]:
            skipped += 1
            continue
        orig = flat[idx]
        flat[idx] = orig + eps
        with record_kinks() as up:
            fp = f(x).item()
        flat[idx] = orig - eps
        with record_kinks() as down:
            fm = f(x).item()
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {idx}")
        if skip_kinks and not (_same_pattern(up, base_kinks) and _same_pattern(down, base_kinks)):
            skipped += 1
            continue
        a = analytic[idx]
        num = (fp - fm) / (2.0 * eps)
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        checked += 1
        if err >= worst:
            worst, worst_idx = err, idx
    return GradCheckReport(worst, checked, skipped, worst_idx)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, indices=None, exclude=None, skip_kinks: bool = False) -> float:
    """Largest relative error between backprop and central differences."""
    return grad_check_report(f, x, eps, indices, exclude, skip_kinks).max_rel_error


# ---------------------------------------------------------------------------
# optimisation and checkpoints


class Adam:
    """Bias-corrected adaptive moment estimation over a dict of parameters."""

    def __init__(self, params: dict, lr: float = 2e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


CHECKPOINT_MAGIC = b"ICEW"
CHECKPOINT_VERSION = 1


def params_to_bytes(params: dict) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def params_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    version, count = struct.unpack("<BI", take(5))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    return out


def save_params(params: dict, destination) -> None:
    payload = params_to_bytes(params)
    if hasattr(destination, "write"):
        destination.write(payload)
    else:
        with open(destination, "wb") as fh:
            fh.write(payload)


def load_params(source) -> dict[str, np.ndarray]:
    if hasattr(source, "read"):
        return params_from_bytes(source.read())
    with open(source, "rb") as fh:
        return params_from_bytes(fh.read())
