"""Finite-difference gradient checks over every op, random op chains,
the full prototype layer and the composite training loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .graph import Graph, symmetrize
from .layers import GraphOperators, P2Model, p2_layer_forward, relu
from .losses import LossWeights, cross_entropy, final_loss

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
# central differences at eps=1e-5 resolve gradient entries only down to
# about |f| * 1e-11; smaller nonzero entries cannot be checked to 1e-4
MIN_RESOLVABLE_GRAD = 1e-6
MAX_DIM = 8


def _leaf(rng, r, c, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=(r, c)), requires_grad=True)


# each single-op case: (leaves factory, program using those leaves)
def _op_cases():
    def pos(rng):
        return _leaf(rng, 3, 4, 0.5, 2.0)

    return {
        "matmul": (lambda r: [_leaf(r, 3, 4), _leaf(r, 4, 2)], lambda a, b: ad.matmul(a, b)),
        "add": (lambda r: [_leaf(r, 3, 4), _leaf(r, 3, 4)], lambda a, b: ad.square(ad.add(a, b))),
        "sub": (lambda r: [_leaf(r, 3, 4), _leaf(r, 3, 4)], lambda a, b: ad.square(ad.sub(a, b))),
        "mul": (lambda r: [_leaf(r, 3, 4), _leaf(r, 3, 4)], lambda a, b: ad.mul(a, b)),
        "scale": (lambda r: [_leaf(r, 3, 4)], lambda a: ad.square(ad.scale(a, -1.7))),
        "relu": (lambda r: [_leaf(r, 3, 4)], lambda a: ad.square(ad.relu(a))),
        "sigmoid": (lambda r: [_leaf(r, 3, 4, -3, 3)], lambda a: ad.sigmoid(a)),
        "log": (lambda r: [pos(r)], lambda a: ad.log(a)),
        "exp": (lambda r: [_leaf(r, 3, 4)], lambda a: ad.exp(a)),
        "square": (lambda r: [_leaf(r, 3, 4)], lambda a: ad.square(a)),
        "abs": (lambda r: [_leaf(r, 3, 4)], lambda a: ad.square(ad.abs_(a))),
        "transpose": (lambda r: [_leaf(r, 3, 4), _leaf(r, 3, 2)],
                      lambda a, b: ad.matmul(ad.transpose(a), b)),
        "sum": (lambda r: [_leaf(r, 3, 4)], lambda a: ad.square(ad.sum_(a))),
        "sum_rows": (lambda r: [_leaf(r, 3, 4)], lambda a: ad.square(ad.sum_rows(a))),
        "mul_col": (lambda r: [_leaf(r, 3, 1), _leaf(r, 3, 4)], lambda a, b: ad.square(ad.mul_col(a, b))),
        "vstack": (lambda r: [_leaf(r, 2, 3), _leaf(r, 4, 3)], lambda a, b: ad.square(ad.vstack(a, b))),
        "hstack": (lambda r: [_leaf(r, 3, 2), _leaf(r, 3, 4)], lambda a, b: ad.square(ad.hstack(a, b))),
        "row_slice": (lambda r: [_leaf(r, 5, 3)], lambda a: ad.square(ad.row_slice(a, 1, 4))),
        "col_slice": (lambda r: [_leaf(r, 3, 5)], lambda a: ad.square(ad.col_slice(a, 1, 3))),
        "row_softmax": (lambda r: [_leaf(r, 3, 4, -3, 3), _leaf(r, 3, 4)],
                        lambda a, b: ad.mul(ad.row_softmax(a, 2.0), b)),
        "row_log_softmax": (lambda r: [_leaf(r, 3, 4, -3, 3), _leaf(r, 3, 4)],
                            lambda a, b: ad.mul(ad.row_log_softmax(a, 1.5), b)),
        "row_cosine_max": (lambda r: [_leaf(r, 4, 3), _leaf(r, 3, 3)], lambda a, b: ad.row_cosine_max(a, b)),
    }


OP_CASES = _op_cases()


def well_conditioned(f, leaves) -> bool:
    """True when ``f`` is away from kinks and every nonzero gradient entry is resolvable."""
    with ad.Tape() as tape:
        out = f()
    if tape.kink_margin < KINK_MARGIN or not abs(out.item()) < 1e6:
        return False
    for g in ad.backward(out, leaves):
        mag = np.abs(g)
        if np.any((mag > 0) & (mag < MIN_RESOLVABLE_GRAD)):
            return False
    return True


def _smooth_check(build, rng, max_tries=50, eps=1e-5):
    """Draw leaves until the program is well conditioned, then grad-check it."""
    for _ in range(max_tries):
        leaves, f = build(rng)
        if well_conditioned(f, leaves):
            return grad_check(f, leaves, eps).max_rel_error
    raise RuntimeError("could not sample a well-conditioned point")


def check_op(name: str, rng) -> float:
    make, prog = OP_CASES[name]

    def build(r):
        leaves = make(r)
        return leaves, (lambda: ad.sum_(prog(*leaves)))

    return _smooth_check(build, rng)


# --------------------------------------------------------------------------
# Random composite programs
# --------------------------------------------------------------------------

_UNARY = ("relu", "sigmoid", "square", "abs", "logsig", "softmax", "logsoftmax", "transpose", "scale")
_BINARY = ("matmul", "add", "sub", "mul", "mul_col", "cosine", "vstack", "hstack")


def random_program(rng: np.random.Generator, max_depth: int = 5, max_dim: int = MAX_DIM):
    """A random chain of up to ``max_depth`` ops on random leaves (dims <= max_dim).

    Returns ``(leaves, f, op_names)``; ``f`` replays the chain on the
    current leaf values and reduces to a scalar.
    """
    depth = int(rng.integers(1, max_depth + 1))
    r, c = (int(x) for x in rng.integers(1, max_dim + 1, size=2))
    leaves = [_leaf(rng, r, c, -2, 2)]
    steps = []
    shape = (r, c)
    for _ in range(depth):
        if rng.random() < 0.5:
            op = str(rng.choice(_UNARY))
            arg = None
            if op in ("softmax", "logsoftmax"):
                arg = float(rng.choice([0.5, 1.0, 2.0, 10.0]))
            elif op == "scale":
                arg = float(rng.uniform(-2, 2))
            elif op == "transpose":
                shape = (shape[1], shape[0])
            steps.append((op, arg))
        else:
            op = str(rng.choice(_BINARY))
            if op == "matmul":
                k = int(rng.integers(1, max_dim + 1))
                other = _leaf(rng, shape[1], k)
                shape = (shape[0], k)
            elif op == "mul_col":
                other = _leaf(rng, shape[0], 1)
            elif op == "cosine":
                if shape[1] < 2:  # cosine of scalars is piecewise constant
                    steps.append(("square", None))
                    continue
                other = _leaf(rng, int(rng.integers(1, max_dim + 1)), shape[1])
                shape = (shape[0], 1)
            elif op == "vstack":
                other = _leaf(rng, int(rng.integers(1, max_dim + 1)), shape[1])
                shape = (shape[0] + other.rows, shape[1])
            elif op == "hstack":
                other = _leaf(rng, shape[0], int(rng.integers(1, max_dim + 1)))
                shape = (shape[0], shape[1] + other.cols)
            else:
                other = _leaf(rng, *shape)
            leaves.append(other)
            steps.append((op, len(leaves) - 1))
    weights = Tensor(rng.uniform(-1, 1, size=shape))

    def f():
        x = leaves[0]
        for op, arg in steps:
            if op == "relu":
                x = ad.relu(x)
            elif op == "sigmoid":
                x = ad.sigmoid(x)
            elif op == "square":
                x = ad.square(x)
            elif op == "abs":
                x = ad.abs_(x)
            elif op == "logsig":
                x = ad.log(ad.sigmoid(x))
            elif op == "softmax":
                x = ad.row_softmax(x, arg)
            elif op == "logsoftmax":
                x = ad.row_log_softmax(x, arg)
            elif op == "transpose":
                x = ad.transpose(x)
            elif op == "scale":
                x = ad.scale(x, arg)
            elif op == "matmul":
                x = ad.matmul(x, leaves[arg])
            elif op == "add":
                x = ad.add(x, leaves[arg])
            elif op == "sub":
                x = ad.sub(x, leaves[arg])
            elif op == "mul":
                x = ad.mul(x, leaves[arg])
            elif op == "mul_col":
                x = ad.mul_col(leaves[arg], x)
            elif op == "cosine":
                x = ad.row_cosine_max(x, leaves[arg])
            elif op == "vstack":
                x = ad.vstack(x, leaves[arg])
            elif op == "hstack":
                x = ad.hstack(x, leaves[arg])
        return ad.sum_(ad.mul(x, weights))

    return leaves, f, [op for op, _ in steps]


def check_random_programs(rng, count: int = 100) -> tuple[float, list[str]]:
    """Worst relative error over ``count`` random programs, and that program's ops."""
    worst, worst_ops = 0.0, []
    for _ in range(count):
        for _ in range(50):
            leaves, f, ops = random_program(rng)
            if well_conditioned(f, leaves):
                break
        err = grad_check(f, leaves).max_rel_error
        if err > worst:
            worst, worst_ops = err, ops
    return worst, worst_ops


# --------------------------------------------------------------------------
# Prototype layer and full loss
# --------------------------------------------------------------------------

def random_graph(rng, n: int = 12, d0: int = 5, classes: int = 3, p: float = 0.3) -> Graph:
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    edges = symmetrize(np.column_stack([iu[keep], ju[keep]]))
    labels = np.arange(n) % classes
    split = np.array(["train", "val", "test"] * (n // 3 + 1))[:n]
    return Graph(n, edges, rng.standard_normal((n, d0)), labels, split)


def _p2_model(rng, g: Graph, hidden: int, k_n: int, k_a: int, layers: int = 2) -> P2Model:
    return P2Model("gcn", g.feature_dim, hidden, g.num_classes, num_layers=layers, num_pn=k_n,
                   num_pa=k_a, dropout=0.0, seed=int(rng.integers(2 ** 31)), features=g.features)


def check_p2_layer(rng, num_nodes: int = 12, hidden: int = 8, k_n: int = 4, k_a: int = 4) -> float:
    """Gradient of a weighted readout of one hidden P2 layer, both mechanisms on."""
    def build(r):
        g = random_graph(r, num_nodes)
        model = _p2_model(r, g, hidden, k_n, k_a)
        ops = GraphOperators.build(g, k_n)
        lp = model.layers[0]
        readout = Tensor(r.standard_normal((num_nodes + k_n, hidden)))
        leaves = [p for _, p in lp.named("l")] + [model.bank.p_n, model.bank.p_a[0]]
        X = g.X

        def f():
            H0 = ad.vstack(X, model.bank.p_n)
            H, _ = p2_layer_forward(lp, ops.A_base, ops.A_P, H0, True, True, p_a=model.bank.p_a[0],
                                    num_nodes=num_nodes, activation=relu)
            return ad.sum_(ad.mul(H, readout))

        return leaves, f

    return _smooth_check(build, rng)


def check_final_loss(rng, num_nodes: int = 12, hidden: int = 8, k_n: int = 4, k_a: int = 4) -> float:
    """Gradient of the full composite loss of a 2-layer model w.r.t. every parameter."""
    weights = LossWeights(0.1, 0.1, 0.01)

    def build(r):
        g = random_graph(r, num_nodes)
        model = _p2_model(r, g, hidden, k_n, k_a)
        ops = GraphOperators.build(g, k_n)
        leaves = [p for _, p in model.named_parameters()]
        train = g.mask("train")

        def f():
            logits, trace = model.forward(g, ops, training=False)
            task = cross_entropy(logits, g.labels, train)
            return final_loss(task, model.bank, trace, g.X, weights)

        return leaves, f

    return _smooth_check(build, rng)


@dataclass
class GradcheckReport:
    results: list[tuple[str, float]] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list[tuple[str, float]]:
        return [(n, e) for n, e in self.results if not e < self.tolerance]

    @property
    def worst(self) -> tuple[str, float]:
        return max(self.results, key=lambda t: t[1])

    @property
    def passed(self) -> bool:
        return not self.failures


def run_gradcheck(seed: int = 0, programs: int = 100) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name in OP_CASES:
        report.results.append((f"op:{name}", check_op(name, rng)))
    err, ops = check_random_programs(rng, programs)
    report.results.append((f"random_programs[{programs}] worst=" + "+".join(ops or ["-"]), err))
    report.results.append(("p2_layer", check_p2_layer(rng)))
    report.results.append(("final_loss", check_final_loss(rng)))
    return report
