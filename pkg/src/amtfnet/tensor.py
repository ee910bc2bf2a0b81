"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor records the operation that produced it (define-by-run), so the
graph is rebuilt on each forward pass and ``backward`` replays the recorded
rules in reverse topological order, accumulating gradients additively.
A graph and its tensors belong to one thread; evaluated tensors are
immutable and may be shared freely.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax",
    "concat",
    "stack",
    "select",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """N-dimensional float64 array plus an optional gradient.

    ``grad`` is populated by ``backward`` and has the same shape as ``data``.
    Operations record their inputs and a backward rule on the output tensor
    whenever gradients are enabled and some input requires them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad and is_grad_enabled()
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # private copy
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    # -- graph construction ---------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...],
              rule: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_rule = rule
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_rule = None
        return out

    # -- elementwise binary ops ------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, lambda a, b, g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda a, b, g: (g, -g))

    def __rsub__(self, other):
        # other is a plain scalar here; Tensor - Tensor goes through __sub__
        out_data = np.subtract(other, self.data)
        return Tensor._make(out_data, (self,), lambda g, s=self: s._accumulate(-g))

    def __mul__(self, other):
        return _binary(self, other, np.multiply,
                       lambda a, b, g: (g * b, g * a))

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._make(-self.data, (self,),
                            lambda g, s=self: s._accumulate(-g))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise unary ops -------------------------------------------------

    def relu(self) -> "Tensor":
        y = np.maximum(self.data, 0.0)
        mask = self.data > 0.0

        def rule(g, s=self, mask=mask):
            s._accumulate(g * mask)

        return Tensor._make(y, (self,), rule)

    def sigmoid(self) -> "Tensor":
        # sigma(x) = (1 + tanh(x/2)) / 2: stable for any argument, one pass
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))

        def rule(g, s=self, y=y):
            s._accumulate(g * y * (1.0 - y))

        return Tensor._make(y, (self,), rule)

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)

        def rule(g, s=self, y=y):
            s._accumulate(g * (1.0 - y * y))

        return Tensor._make(y, (self,), rule)

    # -- reductions --------------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        ax = _check_axis(axis, self.data.ndim)
        y = self.data.sum(axis=ax)

        def rule(g, s=self, ax=ax):
            if ax is None:
                s._accumulate(np.broadcast_to(g, s.data.shape))
            else:
                s._accumulate(np.broadcast_to(np.expand_dims(g, ax), s.data.shape))

        return Tensor._make(np.asarray(y), (self,), rule)

    def mean(self, axis: int | None = None) -> "Tensor":
        ax = _check_axis(axis, self.data.ndim)
        y = self.data.mean(axis=ax)
        n = self.data.size if ax is None else self.data.shape[ax]

        def rule(g, s=self, ax=ax, n=n):
            if ax is None:
                s._accumulate(np.broadcast_to(g / n, s.data.shape))
            else:
                s._accumulate(np.broadcast_to(np.expand_dims(g / n, ax), s.data.shape))

        return Tensor._make(np.asarray(y), (self,), rule)

    def std(self, axis: int | None = None) -> "Tensor":
        """Population standard deviation (divisor N) along ``axis``.

        The subgradient at zero variance is defined as zero.
        """
        ax = _check_axis(axis, self.data.ndim)
        centered = self.data - self.data.mean(axis=ax, keepdims=True)
        y = np.sqrt(np.mean(centered * centered, axis=ax))
        n = self.data.size if ax is None else self.data.shape[ax]

        def rule(g, s=self, ax=ax, n=n, centered=centered, y=y):
            safe = np.where(y > 0.0, y, 1.0)
            gy = np.where(y > 0.0, g / (n * safe), 0.0)
            if ax is None:
                s._accumulate(centered * gy)
            else:
                s._accumulate(centered * np.expand_dims(gy, ax))

        return Tensor._make(np.asarray(y), (self,), rule)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        y = self.data.reshape(shape)

        def rule(g, s=self):
            s._accumulate(g.reshape(s.data.shape))

        return Tensor._make(y, (self,), rule)

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose needs a rank-2 tensor, got shape {self.shape}")
        y = np.ascontiguousarray(self.data.T)

        def rule(g, s=self):
            s._accumulate(g.T)

        return Tensor._make(y, (self,), rule)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if sorted(axes) != list(range(self.data.ndim)):
            raise ShapeError(f"invalid permutation {axes} for rank-{self.data.ndim} tensor")
        y = np.ascontiguousarray(np.transpose(self.data, axes))
        inverse = tuple(np.argsort(axes))

        def rule(g, s=self, inverse=inverse):
            s._accumulate(np.transpose(g, inverse))

        return Tensor._make(y, (self,), rule)

    # -- autodiff ----------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_rule is not None and node.grad is not None:
                node._backward_rule(node.grad)


def _check_axis(axis: int | None, ndim: int) -> int | None:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank-{ndim} tensor")
    return axis % ndim


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


# -- broadcasting ------------------------------------------------------------
#
# Deliberately narrow: besides equal shapes, a rank-1 tensor of length d may
# combine with a higher-rank tensor whose trailing axis has size d (summed
# over the leading axes on the way back), or with a rank-2 tensor whose
# leading axis has size d (vector seen as a column). Nothing else.


def _align(sa: tuple[int, ...], sb: tuple[int, ...]):
    """Return (reshape_a, reshape_b, reduce_a, reduce_b) or raise ShapeError.

    ``reshape_*`` maps operand data to a numpy-broadcastable view and
    ``reduce_*`` collapses an output-shaped gradient back to operand shape.
    """
    ident = lambda x: x
    if sa == sb:
        return ident, ident, ident, ident

    def one_sided(v: tuple[int, ...], m: tuple[int, ...]):
        # v rank-1 against higher-rank m; returns (reshape_v, reduce_v)
        d = v[0]
        if m[-1] == d:
            axes = tuple(range(len(m) - 1))
            return ident, lambda g: g.sum(axis=axes)
        if len(m) == 2 and m[0] == d:
            return (lambda x: x.reshape(d, 1)), (lambda g: g.sum(axis=1))
        raise ShapeError(f"cannot broadcast shapes {v} and {m}")

    if len(sa) == 1 and len(sb) > 1:
        ra, reda = one_sided(sa, sb)
        return ra, ident, reda, ident
    if len(sb) == 1 and len(sa) > 1:
        rb, redb = one_sided(sb, sa)
        return ident, rb, ident, redb
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _binary(a: Tensor, b, fwd, grads) -> Tensor:
    if not isinstance(b, Tensor):
        # plain python scalar: constant, receives no gradient
        c = float(b)
        out_data = fwd(a.data, c)

        def srule(g, a=a, c=c):
            ga, _ = grads(a.data, c, g)
            a._accumulate(ga)

        return Tensor._make(out_data, (a,), srule)

    if a.shape == b.shape:
        out_data = fwd(a.data, b.data)

        def eqrule(g, a=a, b=b):
            ga, gb = grads(a.data, b.data, g)
            if a.requires_grad:
                a._accumulate(ga)
            if b.requires_grad:
                b._accumulate(gb)

        return Tensor._make(out_data, (a, b), eqrule)

    ra, rb, reda, redb = _align(a.shape, b.shape)
    av, bv = ra(a.data), rb(b.data)
    out_data = fwd(av, bv)

    def rule(g, a=a, b=b, av=av, bv=bv, reda=reda, redb=redb):
        ga, gb = grads(av, bv, g)
        if a.requires_grad:
            a._accumulate(reda(ga).reshape(a.data.shape))
        if b.requires_grad:
            b._accumulate(redb(gb).reshape(b.data.shape))

    return Tensor._make(out_data, (a, b), rule)


# -- module-level operations ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; inner dimensions must agree."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs rank-2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def rule(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._make(out_data, (a, b), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    if np.isnan(a.data).any():
        raise ValueError("softmax input contains NaN")
    ax = _check_axis(axis, a.data.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def rule(g, a=a, y=y, ax=ax):
        dot = (g * y).sum(axis=ax, keepdims=True)
        a._accumulate(y * (g - dot))

    return Tensor._make(y, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must match."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ax = _check_axis(axis, tensors[0].data.ndim)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != ax and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(
                f"concat shapes incompatible along axis {axis}: "
                f"{tensors[0].shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=ax)
    widths = [t.shape[ax] for t in tensors]

    def rule(g, tensors=tuple(tensors), widths=widths, ax=ax):
        offset = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(offset, offset + w)
                t._accumulate(g[tuple(idx)])
            offset += w

    return Tensor._make(out_data, tuple(tensors), rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    shape0 = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape0:
            raise ShapeError(f"stack shapes differ: {shape0} vs {t.shape}")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def rule(g, tensors=tuple(tensors), axis=axis):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(out_data, tuple(tensors), rule)


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Slice out ``index`` along ``axis``, dropping that axis."""
    ax = _check_axis(axis, a.data.ndim)
    if not 0 <= index < a.shape[ax]:
        raise ShapeError(f"index {index} out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[ax] = index
    out_data = a.data[tuple(idx)]

    def rule(g, a=a, idx=tuple(idx)):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return Tensor._make(np.ascontiguousarray(out_data), (a,), rule)


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_rel_error: float
    eps: float
    tol: float
    worst: str = ""
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[list[Tensor]], Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, tol: float = 1e-4,
               abs_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    Coordinates where the analytic gradient is below ``abs_floor`` are
    compared absolutely; everywhere else the error is relative to
    ``max(|analytic|, |numeric|)``. ``f`` must be deterministic.

    A coordinate exceeding ``tol`` is re-measured at eps/16 and eps/256
    (a difference interval straddling a ReLU-style kink stops doing so) and
    at eps*32 (roundoff noise on a small gradient shrinks with a larger
    step). A genuinely wrong backward rule keeps its error at every step
    size, so refinement never masks real defects.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = f(leaves)
    out.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy()
                for l in leaves]

    def measure(flat: np.ndarray, i: int, step: float, ana: float) -> float:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + step
            f_plus = f(leaves).item()
            flat[i] = orig - step
            f_minus = f(leaves).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        if abs(ana) < abs_floor:
            return abs(numeric - ana)
        return abs(numeric - ana) / max(abs(ana), abs(numeric))

    max_err = 0.0
    worst = ""
    per_input: list[float] = []
    for k, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        ana_flat = analytic[k].reshape(-1)
        err_k = 0.0
        for i in range(flat.size):
            err = measure(flat, i, eps, ana_flat[i])
            if err >= tol:
                for scale in (1 / 16, 1 / 256, 32):
                    err = min(err, measure(flat, i, eps * scale, ana_flat[i]))
                    if err < tol:
                        break
            if err > err_k:
                err_k = err
            if err > max_err:
                max_err = err
                worst = f"input {k} coord {i}: analytic={ana_flat[i]:.6g}"
        per_input.append(err_k)
    return GradCheckReport(max_rel_error=max_err, eps=eps, tol=tol,
                           worst=worst, per_input=per_input)
