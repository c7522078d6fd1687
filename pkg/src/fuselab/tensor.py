"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what the conditioning fusion and the toy denoiser
need: matmul, row softmax, affine maps, sequence concatenation,
elementwise arithmetic, tanh, reductions. Each op records its parents and a
backward rule on the output node; ``backward`` replays the recorded ops in
reverse topological order, accumulating adjoints additively. Gradients only
ever land on tensors with ``requires_grad=True``; repeated backward calls
without zeroing add up exactly.

Shape discipline is strict: no broadcasting except the bias add in
``add_row``/``linear``. Non-finite values are rejected at construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class NonFiniteError(ArithmeticError):
    """Raised when a tensor would contain NaN or Inf."""


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor of shape {arr.shape} contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an op output, recording parents and rule only if grads can flow."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _want_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and affine ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _want_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _want_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _want_same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (b.data * g, a.data * g))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (not a tape participant)."""
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (s * g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: ((1.0 - y * y) * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward gives dA = dC.B^T and dB = A^T.dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got shape {a.shape}")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def add_row(a: Tensor, v: Tensor) -> Tensor:
    """Broadcast a length-n vector onto every row of an m-by-n matrix.

    The single sanctioned broadcast (bias add); everything else is strict.
    """
    if a.data.ndim != 2 or v.data.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"add_row: shapes {a.shape} and {v.shape} incompatible")
    return _node(a.data + v.data, (a, v), lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add_row(matmul(x, w), b)


# ---------------------------------------------------------------------------
# sequence ops


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two row sequences; backward splits the gradient at the boundary."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: feature dims of {a.shape} and {b.shape} differ")
    rows_a = a.shape[0]
    return _node(
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        lambda g: (g[:rows_a], g[rows_a:]),
    )


def split_rows(a: Tensor, boundary: int) -> tuple[Tensor, Tensor]:
    """Inverse of concat_rows at the given row index."""
    if a.data.ndim != 2 or not 0 <= boundary <= a.shape[0]:
        raise ShapeError(f"split_rows: boundary {boundary} invalid for shape {a.shape}")

    def back_top(g):
        z = np.zeros_like(a.data)
        z[:boundary] = g
        return (z,)

    def back_bottom(g):
        z = np.zeros_like(a.data)
        z[boundary:] = g
        return (z,)

    top = _node(a.data[:boundary].copy(), (a,), back_top)
    bottom = _node(a.data[boundary:].copy(), (a,), back_bottom)
    return top, bottom


def take_row(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= i < a.shape[0]:
        raise ShapeError(f"take_row: row {i} out of range for shape {a.shape}")

    def back(g):
        z = np.zeros_like(a.data)
        z[i] = g
        return (z,)

    return _node(a.data[i].copy(), (a,), back)


def take_col(a: Tensor, j: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= j < a.shape[1]:
        raise ShapeError(f"take_col: column {j} out of range for shape {a.shape}")

    def back(g):
        z = np.zeros_like(a.data)
        z[:, j] = g
        return (z,)

    return _node(a.data[:, j].copy(), (a,), back)


# ---------------------------------------------------------------------------
# softmax and reductions


def softmax_rows(a: Tensor, att_scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``att_scale * a``, stabilized by row-max subtraction."""
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise ShapeError(f"softmax_rows: expected 2-d with >=1 column, got {a.shape}")
    att_scale = float(att_scale)
    z = att_scale * a.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (att_scale * y * (g - inner),)

    return _node(y, (a,), back)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences, as a scalar tensor."""
    _want_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        d = (2.0 / n) * diff * g
        return (d, -d)

    return _node(np.asarray(np.mean(diff * diff)), (a, b), back)


# ---------------------------------------------------------------------------
# tape replay


def _topo_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable along grad-requiring edges, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Accumulation is additive: calling twice without zeroing doubles grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")

    order = _topo_order(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, contrib in zip(node._parents, node._backward(g)):
            if contrib is None or not parent.requires_grad:
                continue
            held = adjoint.get(id(parent))
            # never accumulate in place: contributions may alias other buffers
            adjoint[id(parent)] = contrib if held is None else held + contrib

    for node in order:
        g = adjoint.get(id(node))
        if g is None:
            continue
        # adjoint buffers are never mutated in place, so storing them is safe
        node.grad = g if node.grad is None else node.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    n_checked: int
    worst: tuple[int, int, float, float] | None = None  # (tensor idx, flat idx, tape, fd)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {verdict}: max_rel_error={self.max_rel_error:.3e} "
            f"(tol={self.tol:.1e}, {self.n_checked} entries)"
        )


def gradcheck(f, wrt, h: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its forward pass from the current ``data`` of the
    tensors in ``wrt`` each time it is called. Relative error per entry is
    |tape - fd| / max(1, |tape|, |fd|).
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    wrt = list(wrt)
    zero_grads(wrt)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    max_rel = 0.0
    worst = None
    n = 0
    for ti, t in enumerate(wrt):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            flat[i] = x0 + h
            up = float(f().data.reshape(()))
            flat[i] = x0 - h
            down = float(f().data.reshape(()))
            flat[i] = x0
            fd = (up - down) / (2.0 * h)
            tape = analytic[ti].reshape(-1)[i]
            rel = abs(tape - fd) / max(1.0, abs(tape), abs(fd))
            n += 1
            if rel > max_rel:
                max_rel = rel
                worst = (ti, i, float(tape), float(fd))
    return GradcheckReport(max_rel_error=max_rel, tol=tol, passed=max_rel <= tol, n_checked=n, worst=worst)
