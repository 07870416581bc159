"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records the operation that produced it,
so calling :meth:`Tensor.backward` on a scalar result fills ``.grad`` on
every tensor it depends on.  The graph is rebuilt on every forward pass;
nothing is compiled or cached.  Everything is double precision, which keeps
finite-difference checks tight and runs deterministic.

    >>> x = Tensor([0.0, 1.0], requires_grad=True)
    >>> y = x.tanh().sum()
    >>> y.backward()
    >>> x.grad
    array([1.        , 0.41997434])
"""

import contextlib
import math

import numpy as np
from scipy.special import erf

LOG_2PI = float(np.log(2.0 * np.pi))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward compute)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


_SCALAR_TENSORS: dict = {}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD.

    Construction validates that every element is finite; NaN or Inf input
    raises immediately rather than poisoning a training run three modules
    later.  Results of internal ops skip the check (their inputs were
    already validated and the trainer watches its losses).
    """

    __slots__ = ("data", "grad", "requires_grad", "_backfn", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite, got NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backfn = None
        self._parents = ()

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backfn) -> "Tensor":
        # Internal fast path: no dtype copy, no finite check.
        out = object.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backfn = backfn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backfn = None
        return out

    # ---------------------------------------------------------------- basics

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root.

        Gradient accumulators of every node reached from the root are reset
        to zero first, so repeated calls never mix passes.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backfn is not None and node.grad is not None:
                node._backfn(node.grad)

    def detach(self) -> "Tensor":
        """A view of the same data outside the graph (stop-gradient)."""
        out = object.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backfn = None
        return out

    # ----------------------------------------------------------- arithmetic

    @staticmethod
    def _lift(x) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        # plain python scalars dominate lifting in the training loop; cache
        # their wrappers, which is safe because lifted leaves are never
        # mutated and never accumulate gradients
        if type(x) is float or type(x) is int:
            hit = _SCALAR_TENSORS.get(x)
            if hit is None:
                if not math.isfinite(x):
                    raise ValueError("tensor data must be finite, got NaN or Inf")
                hit = Tensor._make(np.asarray(x, dtype=np.float64), (), None)
                if len(_SCALAR_TENSORS) < 4096:
                    _SCALAR_TENSORS[x] = hit
            return hit
        return Tensor(np.asarray(x, dtype=np.float64))

    def __add__(self, other):
        other = Tensor._lift(other)
        out_data = self.data + other.data

        def backfn(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), backfn)

    def __sub__(self, other):
        other = Tensor._lift(other)
        out_data = self.data - other.data

        def backfn(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return Tensor._make(out_data, (self, other), backfn)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out_data = self.data * other.data

        def backfn(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backfn)

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out_data = self.data / other.data

        def backfn(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return Tensor._make(out_data, (self, other), backfn)

    def __radd__(self, other):
        return Tensor._lift(other).__add__(self)

    def __rsub__(self, other):
        return Tensor._lift(other).__sub__(self)

    def __rmul__(self, other):
        return Tensor._lift(other).__mul__(self)

    def __rtruediv__(self, other):
        return Tensor._lift(other).__truediv__(self)

    def __neg__(self):
        def backfn(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), backfn)

    def __matmul__(self, other):
        other = Tensor._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.data.shape[1] != other.data.shape[0]:
            raise ValueError(
                f"matmul requires compatible 2-D operands, got {self.data.shape} @ {other.data.shape}"
            )
        out_data = self.data @ other.data

        def backfn(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor._make(out_data, (self, other), backfn)

    # ----------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def backfn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, shape))

        return Tensor._make(np.asarray(out_data), (self,), backfn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        shape = self.data.shape
        count = self.data.size if axis is None else self.data.shape[axis]

        def backfn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g / count, shape))

        return Tensor._make(np.asarray(out_data), (self,), backfn)

    # ------------------------------------------------------------ elementwise

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)

        def backfn(g):
            self._accum(g * (1.0 - y * y))

        return Tensor._make(y, (self,), backfn)

    def gelu(self) -> "Tensor":
        """Exact Gaussian error linear unit, x * Phi(x)."""
        x = self.data
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        y = x * cdf

        def backfn(g):
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            self._accum(g * (cdf + x * pdf))

        return Tensor._make(y, (self,), backfn)

    def softplus(self) -> "Tensor":
        """log(1 + exp(x)), computed without overflow for large |x|."""
        x = self.data
        y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

        def backfn(g):
            # sigmoid via tanh: no overflow at either extreme
            self._accum(g * (0.5 * (1.0 + np.tanh(0.5 * x))))

        return Tensor._make(y, (self,), backfn)

    def exp(self) -> "Tensor":
        y = np.exp(self.data)

        def backfn(g):
            self._accum(g * y)

        return Tensor._make(y, (self,), backfn)

    def log(self) -> "Tensor":
        def backfn(g):
            self._accum(g / self.data)

        return Tensor._make(np.log(self.data), (self,), backfn)

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)

        def backfn(g):
            self._accum(g / (2.0 * y))

        return Tensor._make(y, (self,), backfn)

    def square(self) -> "Tensor":
        def backfn(g):
            self._accum(g * (2.0 * self.data))

        return Tensor._make(self.data * self.data, (self,), backfn)

    def clip(self, lo: float, hi: float) -> "Tensor":
        # Pass-through gradient on the closed interval, zero outside.
        mask = (self.data >= lo) & (self.data <= hi)

        def backfn(g):
            self._accum(g * mask)

        return Tensor._make(np.clip(self.data, lo, hi), (self,), backfn)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        m = x.max(axis=axis, keepdims=True)
        shifted = x - m
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse

        def backfn(g):
            self._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

        return Tensor._make(y, (self,), backfn)

    # -------------------------------------------------------------- reshaping

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]
        shape = self.data.shape

        def backfn(g):
            full = np.zeros(shape)
            full[idx] = g
            self._accum(full)

        return Tensor._make(np.asarray(out_data), (self,), backfn)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.data.shape

        def backfn(g):
            self._accum(g.reshape(old))

        return Tensor._make(self.data.reshape(shape), (self,), backfn)


def broadcast_to(t: Tensor, shape: tuple) -> Tensor:
    orig = t.data.shape

    def backfn(g):
        t._accum(_unbroadcast(g, orig))

    return Tensor._make(np.broadcast_to(t.data, shape), (t,), backfn)


def concatenate(tensors: list, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backfn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._make(out_data, tuple(tensors), backfn)


def stop_gradient(t: Tensor) -> Tensor:
    """Block gradient flow: downstream gradients through the result are zero."""
    return t.detach()


def gaussian_log_pdf(x: Tensor, mean: Tensor, var: Tensor) -> Tensor:
    """Diagonal Gaussian log-density, summed over the last axis.

    log N(x; mean, diag(var)) = sum_d [ -0.5 log(2 pi var_d)
                                        - (x_d - mean_d)^2 / (2 var_d) ]

    Differentiable in x, mean and var alike; var must be positive.
    """
    x = Tensor._lift(x)
    mean = Tensor._lift(mean)
    var = Tensor._lift(var)
    diff = x - mean
    terms = (var.log() + LOG_2PI) * (-0.5) - diff.square() / (var * 2.0)
    return terms.sum(axis=-1)
