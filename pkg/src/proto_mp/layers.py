"""GCN/SGC backbones with the two prototype plug-ins.

A P2 layer computes, on node rows:

1. backbone messages from graph neighbours (``h_base``) and, when
   prototype neighbours are enabled, from the prototype pseudo-nodes
   (``h_pn``), mixed by a gated two-way attention into ``h_n``;
2. when message alignment is enabled, ``h_n`` attends over a per-layer
   prototype bank to give ``h_a``, mixed with ``h_n`` into ``h_out``.

With both plug-ins disabled the layer is exactly the backbone layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, expand_for_prototypes, normalize_adjacency

DEFAULT_TEMPERATURE = 2.0


def relu(x: Tensor) -> Tensor:
    return ad.relu(x)


def identity(x: Tensor) -> Tensor:
    return x


def gcn_forward(A_hat: Tensor, H: Tensor, W: Tensor, activation=identity) -> Tensor:
    """activation(A_hat @ H @ W), associated as A_hat @ (H @ W)."""
    if A_hat.cols != H.rows or H.cols != W.rows:
        raise ad.ShapeError(f"gcn_forward: A {A_hat.shape}, H {H.shape}, W {W.shape} do not conform")
    return activation(ad.matmul(A_hat, ad.matmul(H, W)))


def sgc_forward(A_hat: Tensor, X: Tensor, W: Tensor, k: int = 2) -> Tensor:
    """(A_hat^k X) W with no nonlinearity."""
    if k < 1:
        raise ValueError(f"sgc_forward needs k >= 1, got {k}")
    H = X
    for _ in range(k):
        H = ad.matmul(A_hat, H)
    return ad.matmul(H, W)


def mixed_attention(H_a: Tensor, H_b: Tensor, gate_a: Tensor, gate_b: Tensor, W_mix: Tensor,
                    temperature: float = DEFAULT_TEMPERATURE, activation=identity):
    """Per-node convex mix of two message sources.

    Each source gets a sigmoid gate score; the two scores are mixed by
    ``W_mix`` and pushed through a temperature softmax. Returns
    ``(H, alpha_a, alpha_b)`` with ``alpha_*`` as n x 1 columns.
    """
    if H_a.shape != H_b.shape:
        raise ad.ShapeError(f"mixed_attention: message shapes differ {H_a.shape} vs {H_b.shape}")
    if gate_a.shape != (H_a.cols, 1) or gate_b.shape != (H_b.cols, 1):
        raise ad.ShapeError(f"mixed_attention: gates must be ({H_a.cols}, 1)")
    if W_mix.shape != (2, 2):
        raise ad.ShapeError(f"mixed_attention: W_mix must be 2x2, got {W_mix.shape}")
    score_a = ad.sigmoid(ad.matmul(H_a, gate_a))
    score_b = ad.sigmoid(ad.matmul(H_b, gate_b))
    alpha = ad.row_softmax(ad.matmul(ad.hstack(score_a, score_b), W_mix), temperature)
    alpha_a = ad.col_slice(alpha, 0, 1)
    alpha_b = ad.col_slice(alpha, 1, 2)
    H = activation(ad.add(ad.mul_col(alpha_b, H_b), ad.mul_col(alpha_a, H_a)))
    return H, alpha_a, alpha_b


def align_messages(H_N: Tensor, P_A: Tensor) -> tuple[Tensor, Tensor]:
    """Snap each message onto the prototype bank.

    Row i attends over the prototypes with softmax(<P_A[k], H_N[i]>) and
    returns the weighted prototype sum. Returns ``(H_A, weights)``.
    """
    if H_N.cols != P_A.cols:
        raise ad.ShapeError(f"align_messages: hidden dims differ {H_N.shape} vs {P_A.shape}")
    weights = ad.row_softmax(ad.matmul(H_N, ad.transpose(P_A)))
    return ad.matmul(weights, P_A), weights


@dataclass
class LayerParams:
    w_base: Tensor
    w_pn: Tensor | None = None
    gate_base: Tensor | None = None
    gate_pn: Tensor | None = None
    mix_n: Tensor | None = None
    gate_n: Tensor | None = None
    gate_a: Tensor | None = None
    mix_a: Tensor | None = None
    temperature: float = DEFAULT_TEMPERATURE

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for key in ("w_base", "w_pn", "gate_base", "gate_pn", "mix_n", "gate_n", "gate_a", "mix_a"):
            t = getattr(self, key)
            if t is not None:
                out.append((f"{prefix}.{key}", t))
        return out


@dataclass
class PrototypeBank:
    """Trainable prototypes; a disabled mechanism has ``None``, never a 0-row bank."""

    p_n: Tensor | None = None
    p_a: list[Tensor] | None = None

    def __post_init__(self):
        if self.p_n is not None and self.p_n.rows < 1:
            raise ValueError("prototype-neighbour bank must have at least one row")
        if self.p_a is not None and any(p.rows < 1 for p in self.p_a):
            raise ValueError("alignment banks must have at least one row")


@dataclass
class LayerTrace:
    h_base: Tensor
    h_n: Tensor
    h_out: Tensor
    h_pn: Tensor | None = None
    h_a: Tensor | None = None
    align_weights: Tensor | None = None
    alpha_base: Tensor | None = None
    alpha_pn: Tensor | None = None
    alpha: Tensor | None = None
    alpha_a: Tensor | None = None


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)

    def penultimate(self) -> np.ndarray:
        """Node embeddings feeding the output layer."""
        if len(self.layers) >= 2:
            return self.layers[-2].h_out.data
        return self.layers[-1].h_n.data

    def attention_summary(self) -> dict[str, float]:
        out = {}
        for i, lt in enumerate(self.layers):
            if lt.alpha_pn is not None:
                out[f"layer{i + 1}.alpha_pn_mean"] = float(lt.alpha_pn.data.mean())
            if lt.alpha_a is not None:
                out[f"layer{i + 1}.alpha_a_mean"] = float(lt.alpha_a.data.mean())
        return out


@dataclass(frozen=True)
class Propagation:
    """Backbone message-passing rule shared by the base and prototype branches."""

    kind: str = "gcn"
    hops: int = 2

    def __call__(self, A_hat: Tensor, H: Tensor, W: Tensor, activation) -> Tensor:
        if self.kind == "gcn":
            return gcn_forward(A_hat, H, W, activation)
        if self.kind == "sgc":
            return sgc_forward(A_hat, H, W, self.hops)
        raise ValueError(f"unknown backbone {self.kind!r}")


def carry_prototype_rows(h_base_full: Tensor, num_nodes: int) -> Tensor:
    """Prototype rows handed to the next layer.

    Prototypes receive no messages, so their base-branch rows are just
    their own representation pushed through W_base and the activation.
    """
    return ad.row_slice(h_base_full, num_nodes, h_base_full.rows)


def p2_layer_forward(layer: LayerParams, A_base: Tensor, A_P: Tensor | None, H_prev: Tensor,
                     use_pn: bool, use_pa: bool, p_a: Tensor | None = None,
                     num_nodes: int | None = None, activation=identity,
                     propagation: Propagation = Propagation("gcn")) -> tuple[Tensor, LayerTrace]:
    """One layer of the prototype-augmented backbone.

    With ``use_pn`` the input carries ``num_nodes`` node rows followed by
    the prototype rows, ``A_base``/``A_P`` are the expanded normalized
    adjacencies, and the output again stacks node rows over prototype
    rows. Without it, ``A_base`` is the plain normalized adjacency.
    """
    if use_pn and (layer.w_pn is None or A_P is None or num_nodes is None):
        raise ValueError("use_pn set but the layer has no prototype-neighbour weights")
    if use_pa and (p_a is None or layer.gate_a is None):
        raise ValueError("use_pa set but no alignment bank was supplied")

    h_full = propagation(A_base, H_prev, layer.w_base, activation)
    if not use_pn and not use_pa:
        return h_full, LayerTrace(h_base=h_full, h_n=h_full, h_out=h_full)

    trace_kw = {}
    if use_pn:
        h_base = ad.row_slice(h_full, 0, num_nodes)
        h_pn_full = propagation(A_P, H_prev, layer.w_pn, activation)
        h_pn = ad.row_slice(h_pn_full, 0, num_nodes)
        h_n, a_base, a_pn = mixed_attention(h_base, h_pn, layer.gate_base, layer.gate_pn,
                                            layer.mix_n, layer.temperature, activation)
        trace_kw.update(h_pn=h_pn, alpha_base=a_base, alpha_pn=a_pn)
    else:
        h_base = h_n = h_full

    h_out = h_n
    if use_pa:
        h_a, weights = align_messages(h_n, p_a)
        h_out, a_n, a_a = mixed_attention(h_n, h_a, layer.gate_n, layer.gate_a,
                                          layer.mix_a, layer.temperature, activation)
        trace_kw.update(h_a=h_a, align_weights=weights, alpha=a_n, alpha_a=a_a)

    trace = LayerTrace(h_base=h_base, h_n=h_n, h_out=h_out, **trace_kw)
    if use_pn:
        h_out = ad.vstack(h_out, carry_prototype_rows(h_full, num_nodes))
    return h_out, trace


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


@dataclass
class GraphOperators:
    """Normalized adjacencies for one graph and prototype count."""

    A_hat: Tensor
    A_base: Tensor | None = None
    A_P: Tensor | None = None
    num_nodes: int = 0

    @classmethod
    def build(cls, g: Graph, num_pn: int = 0) -> "GraphOperators":
        A = g.adjacency()
        ops = cls(normalize_adjacency(A).matrix, num_nodes=g.num_nodes)
        if num_pn > 0:
            A_base, A_P = expand_for_prototypes(A, num_pn)
            ops.A_base = normalize_adjacency(A_base, "base").matrix
            ops.A_P = normalize_adjacency(A_P, "prototype").matrix
        return ops


def layer_dims(backbone: str, d_in: int, hidden: int, n_classes: int, num_layers: int) -> list[int]:
    if backbone == "sgc":
        return [d_in, n_classes]
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    return [d_in] + [hidden] * (num_layers - 1) + [n_classes]


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    init, proto, drop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(proto), np.random.default_rng(drop)


def dropout(H: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return H
    keep = (rng.random(H.shape) >= rate) / (1.0 - rate)
    return ad.mul(H, Tensor(keep))


class BackboneModel:
    """Plain GCN/SGC stack, no prototype machinery."""

    def __init__(self, backbone: str, d_in: int, hidden: int, n_classes: int, num_layers: int = 2,
                 sgc_hops: int = 2, dropout: float = 0.5, seed: int = 0):
        self.backbone = backbone
        self.dims = layer_dims(backbone, d_in, hidden, n_classes, num_layers)
        self.sgc_hops = sgc_hops
        self.dropout = dropout
        rng_init, _, self._drop_rng = _seed_streams(seed)
        self.weights = [glorot(rng_init, a, b, f"layer{i + 1}.w_base")
                        for i, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:]))]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"layer{i + 1}.w_base", w) for i, w in enumerate(self.weights)]

    def decayed(self, name: str) -> bool:
        return ".w_" in name

    def forward(self, g: Graph, ops: GraphOperators, training: bool = False):
        H = g.X
        trace = ForwardTrace()
        L = len(self.weights)
        for i, W in enumerate(self.weights):
            if i > 0 and training:
                H = dropout(H, self.dropout, self._drop_rng)
            if self.backbone == "sgc":
                H = sgc_forward(ops.A_hat, H, W, self.sgc_hops)
            else:
                H = gcn_forward(ops.A_hat, H, W, relu if i < L - 1 else identity)
            trace.layers.append(LayerTrace(h_base=H, h_n=H, h_out=H))
        return H, trace


class P2Model:
    """Backbone stack with optional prototype neighbours and message alignment.

    ``num_pn``/``num_pa`` of 0 disable the respective mechanism. Backbone
    weights and dropout masks come from the same seeded streams as
    :class:`BackboneModel`, so a fully disabled model trains identically.
    """

    def __init__(self, backbone: str, d_in: int, hidden: int, n_classes: int, num_layers: int = 2,
                 num_pn: int = 0, num_pa: int = 0, temperature: float = DEFAULT_TEMPERATURE,
                 sgc_hops: int = 2, dropout: float = 0.5, seed: int = 0,
                 features: np.ndarray | None = None):
        self.backbone = backbone
        self.dims = layer_dims(backbone, d_in, hidden, n_classes, num_layers)
        self.propagation = Propagation(backbone, sgc_hops)
        self.dropout = dropout
        self.use_pn = num_pn > 0
        self.use_pa = num_pa > 0
        rng_init, rng_proto, self._drop_rng = _seed_streams(seed)

        pairs = list(zip(self.dims[:-1], self.dims[1:]))
        self.layers = [LayerParams(glorot(rng_init, a, b), temperature=temperature) for a, b in pairs]
        for lp, (a, b) in zip(self.layers, pairs):
            if self.use_pn:
                lp.w_pn = glorot(rng_proto, a, b)
                lp.gate_base = glorot(rng_proto, b, 1)
                lp.gate_pn = glorot(rng_proto, b, 1)
                lp.mix_n = glorot(rng_proto, 2, 2)
            if self.use_pa:
                lp.gate_n = glorot(rng_proto, b, 1)
                lp.gate_a = glorot(rng_proto, b, 1)
                lp.mix_a = glorot(rng_proto, 2, 2)

        p_n = p_a = None
        if self.use_pn:
            if features is not None and features.shape[0] > 0:
                rows = rng_proto.choice(features.shape[0], size=num_pn, replace=features.shape[0] < num_pn)
                init = features[rows] + 1e-2 * rng_proto.standard_normal((num_pn, d_in))
            else:
                init = rng_proto.standard_normal((num_pn, d_in)) / np.sqrt(d_in)
            p_n = Tensor(init, requires_grad=True, name="p_n")
        if self.use_pa:
            p_a = [Tensor(rng_proto.standard_normal((num_pa, b)) / np.sqrt(b), requires_grad=True,
                          name=f"layer{i + 1}.p_a") for i, (_, b) in enumerate(pairs)]
        self.bank = PrototypeBank(p_n, p_a)

    @property
    def num_pn(self) -> int:
        return self.bank.p_n.rows if self.bank.p_n is not None else 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, lp in enumerate(self.layers):
            out.extend(lp.named(f"layer{i + 1}"))
        if self.bank.p_n is not None:
            out.append(("p_n", self.bank.p_n))
        if self.bank.p_a is not None:
            out.extend((f"layer{i + 1}.p_a", p) for i, p in enumerate(self.bank.p_a))
        return out

    def decayed(self, name: str) -> bool:
        """Weight decay applies to backbone/prototype-branch weights only."""
        return name.endswith(".w_base") or name.endswith(".w_pn")

    def forward(self, g: Graph, ops: GraphOperators, training: bool = False):
        V = g.num_nodes
        H = g.X
        if self.use_pn:
            H = ad.vstack(H, self.bank.p_n)
            A_base, A_P = ops.A_base, ops.A_P
        else:
            A_base, A_P = ops.A_hat, None
        trace = ForwardTrace()
        L = len(self.layers)
        for i, lp in enumerate(self.layers):
            if i > 0 and training:
                H = dropout(H, self.dropout, self._drop_rng)
            act = relu if (i < L - 1 and self.backbone == "gcn") else identity
            H, lt = p2_layer_forward(lp, A_base, A_P, H, self.use_pn, self.use_pa,
                                     p_a=self.bank.p_a[i] if self.use_pa else None,
                                     num_nodes=V, activation=act, propagation=self.propagation)
            trace.layers.append(lt)
        logits = ad.row_slice(H, 0, V) if self.use_pn else H
        return logits, trace
