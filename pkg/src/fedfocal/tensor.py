"""Dense-tensor numeric core with reverse-mode differentiation.

Every differentiable operation records its parents and a vector-Jacobian
closure on the output tensor; the recorded graph is the tape. ``backward``
walks the tape in reverse topological order and accumulates gradients into
every ``requires_grad`` tensor reachable from the loss.

Determinism contract: identical inputs and identical operation order produce
bit-identical outputs. All reductions delegate to numpy, whose reduction
order is fixed for a given array shape, so results are reproducible across
runs and across client threads.

Broadcasting is rejected except for the affine-bias pattern
(matrix [R, C] plus vector [C]).
"""

from __future__ import annotations

import io
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64, "i64": np.int64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
                np.dtype(np.int64): "i64"}


def dtype_from_name(name: str) -> np.dtype:
    if name not in DTYPES:
        raise ContractError(f"unknown dtype name {name!r}; expected one of {sorted(DTYPES)}")
    return np.dtype(DTYPES[name])


class Tensor:
    """N-dimensional array with an optional gradient slot.

    The data buffer is treated as immutable after construction; only the
    ``grad`` slot mutates (during backward / zero_grad) and only the owning
    worker may touch it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same buffer, no gradient tracking."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={_DTYPE_NAMES[self.dtype]}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def _record(out: Tensor, parents: Sequence[Tensor], vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ContractError(f"dtype mismatch: {_DTYPE_NAMES[dt]} vs {_DTYPE_NAMES[t.dtype]}")


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul requires rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose requires a rank-2 tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the only permitted broadcast is [R, C] + [C] (bias)."""
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data)

        def vjp(g):
            ga = g if a.requires_grad else None
            gb = g.sum(axis=0) if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), vjp)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def vjp(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, a.dtype.type(0)))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    bad = np.flatnonzero(a.data <= 0)
    if bad.size:
        raise NumericError(f"log of nonpositive value at flat index {int(bad[0])}")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def power(base: Tensor, exponent) -> Tensor:
    """base ** exponent, where exponent is a float or a scalar tensor.

    With a tensor exponent the base must be strictly positive so the
    exponent gradient base**e * ln(base) stays finite.
    """
    if isinstance(exponent, Tensor):
        if exponent.data.size != 1:
            raise ShapeError(f"tensor exponent must be scalar, got shape {exponent.shape}")
        _check_same_dtype(base, exponent)
        e = float(exponent.data.reshape(()))
        if exponent.requires_grad and np.any(base.data <= 0):
            bad = np.flatnonzero(base.data <= 0)
            raise NumericError(f"power with trainable exponent requires positive base; "
                               f"flat index {int(bad[0])} is not")
        out = Tensor(np.power(base.data, base.dtype.type(e)))

        def vjp(g):
            if e == 0.0:
                gb = np.zeros_like(base.data) if base.requires_grad else None
            else:
                gb = (g * e * np.power(base.data, base.dtype.type(e - 1.0))
                      if base.requires_grad else None)
            ge = None
            if exponent.requires_grad:
                ge = np.sum(g * out.data * np.log(base.data)).reshape(exponent.shape)
                ge = ge.astype(base.dtype)
            return gb, ge

        return _record(out, (base, exponent), vjp)

    e = float(exponent)
    out = Tensor(np.power(base.data, base.dtype.type(e)))

    def vjp_scalar(g):
        if e == 0.0:
            return (np.zeros_like(base.data),)
        return (g * e * np.power(base.data, base.dtype.type(e - 1.0)),)

    return _record(out, (base,), vjp_scalar)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _record(out, (a,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty sequence")
    _check_same_dtype(*tensors)
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeError(f"concat rank mismatch: {tensors[0].shape} vs {t.shape}")
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise ShapeError(f"concat shapes disagree off axis {axis}: "
                         f"{[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _record(out, tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.data.ndim}")
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = tuple(slice(start, stop) if d == axis else slice(None)
                  for d in range(a.data.ndim))
    out = Tensor(a.data[index].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), vjp)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(a.data.sum())
        return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))
    out = Tensor(a.data.sum(axis=axis))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return _record(out, (a,), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe softmax: the axis max is subtracted before exp."""
    if np.isnan(a.data).any():
        bad = np.flatnonzero(np.isnan(a.data))
        raise NumericError(f"softmax input contains NaN at flat index {int(bad[0])}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    s = ex / ex.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((g - inner) * s,)

    return _record(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    from .errors import ConfigError

    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    _check_same_dtype(a, gain, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} "
                         f"do not match feature dim {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    y = xc * inv
    out = Tensor(y * gain.data + bias.data)

    def vjp(g):
        dy = g * gain.data
        dx = None
        if a.requires_grad:
            dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                        - y * (dy * y).mean(axis=-1, keepdims=True))
        dgain = (g * y).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        dbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the recorded graph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``loss``.

    Repeated calls without ``zero_grad`` accumulate.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# serialization: plain-text header `dtype rank d1 ... dn`, then the raw
# little-endian row-major buffer


def write_array(fh, arr: np.ndarray) -> None:
    key = np.dtype(arr.dtype)
    if key not in _DTYPE_NAMES:
        raise ContractError(f"unsupported dtype for serialization: {arr.dtype}")
    dims = " ".join(str(d) for d in arr.shape)
    header = f"{_DTYPE_NAMES[key]} {arr.ndim}{' ' + dims if dims else ''}\n"
    fh.write(header.encode("ascii"))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def read_array(fh) -> np.ndarray:
    from .errors import IngestionError

    header = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            raise IngestionError("unexpected end of stream while reading tensor header")
        if ch == b"\n":
            break
        header.extend(ch)
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) < 2 or parts[0] not in DTYPES:
        raise IngestionError(f"malformed tensor header: {bytes(header)!r}")
    dtype = np.dtype(DTYPES[parts[0]]).newbyteorder("<")
    rank = int(parts[1])
    if len(parts) != 2 + rank:
        raise IngestionError(f"tensor header declares rank {rank} but lists "
                             f"{len(parts) - 2} dimensions")
    shape = tuple(int(p) for p in parts[2:])
    if any(d < 0 for d in shape):
        raise IngestionError(f"negative dimension in tensor header: {shape}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise IngestionError(f"tensor payload truncated: expected {count * dtype.itemsize} "
                             f"bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)


def array_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_array(buf, arr)
    return buf.getvalue()
