"""Task loss and the prototype regularizers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ForwardTrace, PrototypeBank


@dataclass(frozen=True)
class LossWeights:
    alignment: float = 0.0
    diversity: float = 0.0
    sparsity: float = 0.0

    def __post_init__(self):
        for name in ("alignment", "diversity", "sparsity"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    def scaled(self, t: float) -> "LossWeights":
        return LossWeights(self.alignment * t, self.diversity * t, self.sparsity * t)

    @property
    def all_zero(self) -> bool:
        return self.alignment == 0 and self.diversity == 0 and self.sparsity == 0


def cross_entropy(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-likelihood over the masked rows."""
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: mask selects no nodes")
    target = np.zeros(logits.shape)
    rows = np.flatnonzero(mask)
    target[rows, labels[rows]] = 1.0
    logp = ad.row_log_softmax(logits)
    return ad.scale(ad.sum_(ad.mul(Tensor(target), logp)), -1.0 / n)


def alignment_loss(H: Tensor, P: Tensor) -> Tensor:
    """-sum over rows of H of the best cosine similarity to a prototype."""
    return ad.scale(ad.sum_(ad.row_cosine_max(H, P)), -1.0)


def diversity_loss(P: Tensor, H: Tensor, axis: str = "samples") -> Tensor:
    """Negative entropy sum C log C of the prototype/sample attention.

    ``axis="samples"`` normalizes each prototype's row of P H^T over the
    samples; ``axis="prototypes"`` normalizes each sample's column over
    the prototypes instead. Minimizing this spreads the attention.
    """
    logits = ad.matmul(P, ad.transpose(H))
    if axis == "prototypes":
        logits = ad.transpose(logits)
    elif axis != "samples":
        raise ValueError(f"diversity axis must be 'samples' or 'prototypes', got {axis!r}")
    logc = ad.row_log_softmax(logits)
    return ad.sum_(ad.mul(ad.exp(logc), logc))


def sparsity_loss(P: Tensor) -> Tensor:
    """Elastic-net penalty sum(P^2 + |P|)."""
    return ad.sum_(ad.add(ad.square(P), ad.abs_(P)))


def regularizer(bank: PrototypeBank, trace: ForwardTrace, X: Tensor, weights: LossWeights,
                diversity_axis: str = "samples", target_grad: bool = True) -> Tensor | None:
    """Weighted prototype regularizers; None when nothing contributes.

    With ``target_grad=False`` the layer representations enter alignment
    and diversity as constants, so only the prototypes receive gradient
    from those terms.
    """
    terms = []
    p_a = bank.p_a or []
    h_n = [trace.layers[l].h_n if target_grad else trace.layers[l].h_n.detach() for l in range(len(p_a))]
    if weights.alignment and p_a:
        al = [alignment_loss(h_n[l], p) for l, p in enumerate(p_a)]
        terms.append(ad.scale(_total(al), weights.alignment))
    if weights.diversity and (bank.p_n is not None or p_a):
        dv = []
        if bank.p_n is not None:
            dv.append(diversity_loss(bank.p_n, X, diversity_axis))
        dv.extend(diversity_loss(p, h_n[l], diversity_axis) for l, p in enumerate(p_a))
        terms.append(ad.scale(_total(dv), weights.diversity))
    if weights.sparsity and (bank.p_n is not None or p_a):
        sp = []
        if bank.p_n is not None:
            sp.append(sparsity_loss(bank.p_n))
        sp.extend(sparsity_loss(p) for p in p_a)
        terms.append(ad.scale(_total(sp), weights.sparsity))
    return _total(terms) if terms else None


def final_loss(task: Tensor, bank: PrototypeBank, trace: ForwardTrace, X: Tensor,
               weights: LossWeights, diversity_axis: str = "samples", target_grad: bool = True) -> Tensor:
    """task + w_al * alignment + w_d * diversity + w_s * sparsity.

    Alignment and diversity for a layer's alignment bank are measured
    against that layer's mixed messages ``h_n``; prototype neighbours
    are measured against the input features ``X``.
    """
    reg = regularizer(bank, trace, X, weights, diversity_axis, target_grad)
    return task if reg is None else ad.add(task, reg)


def _total(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out
