"""Dense rank-2 tensors with a define-by-run reverse-mode tape.

Every array is a float64 matrix. Operations on tensors that require
gradients are recorded on the innermost active :class:`Tape`; calling
:func:`backward` replays the tape in reverse recording order.

Backward rules live in :data:`BACKWARD_RULES`, keyed by op name, so a
rule can be swapped out (the gradient check suite relies on this for
fault injection).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """A 2-D float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are rank-2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tensors produced while the tape is active
    are recorded on it. ``kink_margin`` tracks how close any recorded
    relu/abs input or cosine argmax came to a non-differentiable point.
    """

    nodes: list[_Node] = field(default_factory=list)
    kink_margin: float = float("inf")

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, ctx: dict) -> None:
        output.node_id = len(self.nodes)
        output.tape = self
        self.nodes.append(_Node(op, tuple(inputs), output, ctx))

    def note_kink(self, margin: float) -> None:
        if margin < self.kink_margin:
            self.kink_margin = margin


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, ctx: dict | None = None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node_id = None
    out.tape = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.record(op, inputs, out, ctx or {})
    return out


# --------------------------------------------------------------------------
# Backward rules: rule(grad_out, node) -> tuple of input grads (None = no grad)
# --------------------------------------------------------------------------

BackwardRule = Callable[[np.ndarray, _Node], tuple]
BACKWARD_RULES: dict[str, BackwardRule] = {}


def _rule(name: str):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn
    return deco


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data)


@_rule("matmul")
def _matmul_bw(g, node):
    a, b = node.inputs
    return g @ b.data.T, a.data.T @ g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _emit("add", (a, b), a.data + b.data)


@_rule("add")
def _add_bw(g, node):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data)


@_rule("sub")
def _sub_bw(g, node):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data)


@_rule("mul")
def _mul_bw(g, node):
    a, b = node.inputs
    return g * b.data, g * a.data


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, {"c": c})


@_rule("scale")
def _scale_bw(g, node):
    return (g * node.ctx["c"],)


def _note_kink(a: Tensor) -> None:
    # exact zeros come from upstream clamps that stay put under small
    # perturbations, so only nonzero entries count toward the margin
    tape = active_tape()
    if tape is not None and a.requires_grad:
        nz = np.abs(a.data[a.data != 0.0])
        if nz.size:
            tape.note_kink(float(nz.min()))


def relu(a: Tensor) -> Tensor:
    _note_kink(a)
    return _emit("relu", (a,), np.maximum(a.data, 0.0))


@_rule("relu")
def _relu_bw(g, node):
    return (g * (node.inputs[0].data > 0.0),)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", (a,), out)


@_rule("sigmoid")
def _sigmoid_bw(g, node):
    s = node.output.data
    return (g * s * (1.0 - s),)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input has non-positive entries")
    return _emit("log", (a,), np.log(a.data))


@_rule("log")
def _log_bw(g, node):
    return (g / node.inputs[0].data,)


def exp(a: Tensor) -> Tensor:
    return _emit("exp", (a,), np.exp(a.data))


@_rule("exp")
def _exp_bw(g, node):
    return (g * node.output.data,)


def square(a: Tensor) -> Tensor:
    return _emit("square", (a,), a.data * a.data)


@_rule("square")
def _square_bw(g, node):
    return (2.0 * g * node.inputs[0].data,)


def abs_(a: Tensor) -> Tensor:
    _note_kink(a)
    return _emit("abs", (a,), np.abs(a.data))


@_rule("abs")
def _abs_bw(g, node):
    return (g * np.sign(node.inputs[0].data),)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "square": square,
    "abs": abs_,
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch a pointwise op by name (add, sub, mul, relu, sigmoid, log, square, abs)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T))


@_rule("transpose")
def _transpose_bw(g, node):
    return (g.T,)


def sum_(a: Tensor) -> Tensor:
    return _emit("sum", (a,), np.array([[a.data.sum()]]))


@_rule("sum")
def _sum_bw(g, node):
    return (np.full(node.inputs[0].shape, g[0, 0]),)


def sum_rows(a: Tensor) -> Tensor:
    """Row sums as an m x 1 column."""
    return _emit("sum_rows", (a,), a.data.sum(axis=1, keepdims=True))


@_rule("sum_rows")
def _sum_rows_bw(g, node):
    return (np.broadcast_to(g, node.inputs[0].shape).copy(),)


def mul_col(col: Tensor, m: Tensor) -> Tensor:
    """DIAG(col) @ m: scale row i of ``m`` by ``col[i]``."""
    if col.cols != 1 or col.rows != m.rows:
        raise ShapeError(f"mul_col: column {col.shape} does not match {m.shape}")
    return _emit("mul_col", (col, m), col.data * m.data)


@_rule("mul_col")
def _mul_col_bw(g, node):
    col, m = node.inputs
    return (g * m.data).sum(axis=1, keepdims=True), g * col.data


def vstack(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.cols:
        raise ShapeError(f"vstack: column mismatch {a.shape} vs {b.shape}")
    return _emit("vstack", (a, b), np.vstack([a.data, b.data]))


@_rule("vstack")
def _vstack_bw(g, node):
    n = node.inputs[0].rows
    return g[:n], g[n:]


def hstack(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"hstack: row mismatch {a.shape} vs {b.shape}")
    return _emit("hstack", (a, b), np.hstack([a.data, b.data]))


@_rule("hstack")
def _hstack_bw(g, node):
    n = node.inputs[0].cols
    return g[:, :n], g[:, n:]


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    return _emit("row_slice", (a,), a.data[start:stop].copy(), {"start": start, "stop": stop})


@_rule("row_slice")
def _row_slice_bw(g, node):
    out = np.zeros(node.inputs[0].shape)
    out[node.ctx["start"]:node.ctx["stop"]] = g
    return (out,)


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    return _emit("col_slice", (a,), a.data[:, start:stop].copy(), {"start": start, "stop": stop})


@_rule("col_slice")
def _col_slice_bw(g, node):
    out = np.zeros(node.inputs[0].shape)
    out[:, node.ctx["start"]:node.ctx["stop"]] = g
    return (out,)


def row_softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"row_softmax: temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _emit("row_softmax", (a,), out, {"T": temperature})


@_rule("row_softmax")
def _row_softmax_bw(g, node):
    s = node.output.data
    inner = (g * s).sum(axis=1, keepdims=True)
    return (s * (g - inner) / node.ctx["T"],)


def row_log_softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"row_log_softmax: temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return _emit("row_log_softmax", (a,), out, {"T": temperature})


@_rule("row_log_softmax")
def _row_log_softmax_bw(g, node):
    s = np.exp(node.output.data)
    return ((g - s * g.sum(axis=1, keepdims=True)) / node.ctx["T"],)


def row_cosine_max(h: Tensor, p: Tensor) -> Tensor:
    """Per row of ``h``, the largest cosine similarity to any row of ``p``.

    Norms carry a 1e-12 guard. Gradient flows only through the argmax
    prototype of each row.
    """
    if h.cols != p.cols:
        raise ShapeError(f"row_cosine_max: dims differ {h.shape} vs {p.shape}")
    hn = np.sqrt((h.data ** 2).sum(axis=1, keepdims=True)) + NORM_EPS
    pn = np.sqrt((p.data ** 2).sum(axis=1, keepdims=True)) + NORM_EPS
    cos = (h.data / hn) @ (p.data / pn).T
    arg = np.argmax(cos, axis=1)
    best = cos[np.arange(h.rows), arg][:, None]
    tape = active_tape()
    if tape is not None and (h.requires_grad or p.requires_grad) and p.rows > 1:
        top2 = np.sort(cos, axis=1)[:, -2:]
        tape.note_kink(float(np.min(top2[:, 1] - top2[:, 0])))
    return _emit("row_cosine_max", (h, p), best, {"arg": arg, "hn": hn, "pn": pn})


@_rule("row_cosine_max")
def _row_cosine_max_bw(g, node):
    h, p = node.inputs
    arg, hn, pn = node.ctx["arg"], node.ctx["hn"], node.ctx["pn"]
    pa = p.data[arg]
    pan = pn[arg]
    # cos = <h,p> / ((|h|+eps)(|p|+eps)); d|h|/dh = h/|h|, taken as 0 at h = 0
    hnorm = hn - NORM_EPS
    pnorm = pan - NORM_EPS
    dot = (h.data * pa).sum(axis=1, keepdims=True)
    dh = pa / (hn * pan) - dot * h.data / (hn ** 2 * pan * np.where(hnorm > 0, hnorm, np.inf))
    dpa = h.data / (hn * pan) - dot * pa / (hn * pan ** 2 * np.where(pnorm > 0, pnorm, np.inf))
    gh = g * dh
    gp = np.zeros(p.shape)
    np.add.at(gp, arg, g * dpa)
    return gh, gp


# --------------------------------------------------------------------------
# Reverse pass and finite-difference oracle
# --------------------------------------------------------------------------

class ContractError(ValueError):
    pass


def backward(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``loss`` w.r.t. each of ``leaves``.

    Leaves the loss does not depend on get zero gradients.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
    result = {id(t): np.zeros(t.shape) for t in leaves}
    if loss.node_id is None:
        if id(loss) in result:
            result[id(loss)] = np.ones((1, 1))
        return [result[id(t)] for t in leaves]
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        in_grads = BACKWARD_RULES[node.op](g, node)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id is not None and t.tape is tape:
                if t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + gi
                else:
                    grads[t.node_id] = gi
            elif id(t) in result:
                result[id(t)] = result[id(t)] + gi
    return [result[id(t)] for t in leaves]


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_leaf: int
    worst_index: tuple[int, int]
    kink_margin: float

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> GradCheckResult:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must rebuild its output from the current ``leaves[i].data`` on
    every call. Relative error per entry uses the denominator
    max(|analytic|, |numeric|, 1e-8); the worst entry is reported.
    """
    with Tape() as tape:
        out = f()
    analytic = backward(out, leaves)
    worst = (0.0, -1, (-1, -1))
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f().item()
            flat[k] = orig - eps
            fm = f().item()
            flat[k] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = analytic[li].reshape(-1)[k]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if err > worst[0]:
                worst = (err, li, tuple(int(i) for i in np.unravel_index(k, leaf.shape)))
    return GradCheckResult(worst[0], worst[1], worst[2], tape.kink_margin)
