"""Dense tensors with a dynamically built reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure that pushes the incoming gradient back to them.
``backward`` walks the reachable graph in reverse creation order, which is a
valid topological order because a node can only be created after its inputs.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._id = next(_counter)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        out._op = op
        out._id = next(_counter)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g.reshape(self.data.shape)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients add into existing ``grad`` buffers, so a tensor used twice
    receives the sum of both contributions.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in order:
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          rule: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    out = Tensor._result(data, parents, op)
    if out.requires_grad:
        out._backward = rule
    return out


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise sum. ``b`` may also be a scalar or broadcast over a's batch axis."""
    b = _as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))
    if b.size == 1:
        return _node(a.data + b.data.reshape(()), (a, b), "add",
                     lambda g: (g, np.array([g.sum()])))
    if a.ndim >= 2 and b.shape == a.shape[1:]:
        return _node(a.data + b.data, (a, b), "add", lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), "hadamard", lambda g: (g * bd, g * ad))


def scale(a: Tensor, gamma: float) -> Tensor:
    gamma = float(gamma)
    return _node(a.data * gamma, (a,), "scale", lambda g: (g * gamma,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _node(np.array([a.data.sum()]), (a,), "sum",
                 lambda g: (np.broadcast_to(g.reshape(()), shape),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _node(np.array([a.data.mean()]), (a,), "mean",
                 lambda g: (np.broadcast_to(g.reshape(()) / n, shape),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), "square", lambda g: (2.0 * g * ad,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse everything after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat",
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# --- gradient checking -----------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tol: float
    errors: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> np.ndarray:
    """Per-element relative error; where both values are below ``abs_floor`` the absolute error is used."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    near_zero = denom < abs_floor
    return np.where(near_zero, diff, diff / np.where(near_zero, 1.0, denom))


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-4,
              indices: Sequence[int] | None = None, abs_floor: float = 1e-8) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    ``indices`` restricts the probe to selected flat positions of ``x``.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("gradcheck: f(x) is not finite")
    backward(out)
    analytic_full = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    analytic, numeric = [], []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"gradcheck: non-finite output while probing element {i}")
        numeric.append((fp - fm) / (2 * h))
        analytic.append(analytic_full.reshape(-1)[i])
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    errs = relative_errors(analytic, numeric, abs_floor)
    max_rel = float(errs.max()) if errs.size else 0.0
    max_abs = float(np.abs(analytic - numeric).max()) if errs.size else 0.0
    return GradcheckReport(max_rel, max_abs, max_rel < tol, tol, errs, analytic, numeric)


# --- binary serialization --------------------------------------------------

def tensor_to_bytes(arr: np.ndarray | Tensor) -> bytes:
    """u32 rank, u32 dims..., little-endian float64 values."""
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    head = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns the array and the next offset."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)
    return arr, offset + 8 * count
