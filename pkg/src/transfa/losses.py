"""Hierarchical identity-constraint attribute loss and its components.

Every component is a differentiable scalar tensor so that the total can be
back-propagated and the pieces logged separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import AttributeGroupSpec, LossWeights
from .errors import ContractError, DimensionError, DomainError

PROB_CLAMP = 1e-12


@dataclass
class LossBreakdown:
    loss_A: Tensor
    loss_g_list: list[Tensor]
    loss_LA: Tensor
    loss_F: Tensor
    loss_C: Tensor
    loss_GI: Tensor
    loss_total: Tensor

    @property
    def loss_g_sum(self) -> float:
        return float(sum(g.item() for g in self.loss_g_list))

    def as_dict(self) -> dict[str, float]:
        return {
            "loss_A": self.loss_A.item(),
            "loss_g_sum": self.loss_g_sum,
            "loss_LA": self.loss_LA.item(),
            "loss_F": self.loss_F.item(),
            "loss_C": self.loss_C.item(),
            "loss_GI": self.loss_GI.item(),
            "loss_total": self.loss_total.item(),
        }


def binary_cross_entropy(p, y) -> Tensor:
    """Summed BCE ``-sum[y log p + (1 - y) log(1 - p)]`` with ``p`` clamped to [1e-12, 1 - 1e-12]."""
    p = ad.as_tensor(p)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    if np.any(~np.isfinite(p.data)) or np.any((p.data < 0) | (p.data > 1)):
        raise DomainError("probabilities must lie in [0, 1]")
    pc = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = ad.log(pc) * y + ad.log(1.0 - pc) * (1.0 - y)
    return -ll.sum()


def loss_attribute(p, y, spec: AttributeGroupSpec) -> tuple[Tensor, list[Tensor]]:
    """Grouped attribute BCE: summed over groups, their attributes and samples.

    Returns the total and the per-group partial sums.
    """
    p = ad.as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape[-1] != spec.num_attributes:
        raise DimensionError(f"expected {spec.num_attributes} attributes, got {p.shape[-1]}")
    partials = [binary_cross_entropy(p[:, sl], y[:, sl]) for sl in spec.group_slices()]
    total = partials[0]
    for part in partials[1:]:
        total = total + part
    return total, partials


def pair_mask(identities) -> np.ndarray:
    """``w[i, j] = 1`` iff samples i and j share an identity and ``i != j``."""
    ids = np.asarray(identities)
    if ids.ndim != 1 or len(ids) < 2:
        raise ContractError("pair mask needs at least two samples")
    w = (ids[:, None] == ids[None, :]).astype(np.float64)
    np.fill_diagonal(w, 0.0)
    return w


def loss_pairwise(features, mask: np.ndarray) -> Tensor:
    """``1/(N(N-1)) * sum_{i<j} w_ij ||f_i - f_j||^2`` (unordered pairs, ordered-pair normaliser)."""
    f = ad.as_tensor(features)
    n = f.shape[0]
    if n < 2:
        raise ContractError("pairwise loss needs at least two samples")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n, n):
        raise DimensionError(f"mask shape {mask.shape} does not match {n} samples")
    upper = np.triu(mask, k=1)
    if not upper.any():
        return (f * 0.0).sum()
    diff = f.reshape(n, 1, -1) - f.reshape(1, n, -1)
    sq = (diff * diff).sum(axis=-1)
    return (sq * upper).sum() * (1.0 / (n * (n - 1)))


def loss_identity_ce(logits, identities) -> Tensor:
    """Identity cross-entropy summed over the batch (stable log-softmax)."""
    z = ad.as_tensor(logits)
    ids = np.asarray(identities, dtype=np.int64)
    n, c = z.shape
    if ids.shape != (n,):
        raise DimensionError(f"expected {n} identities, got shape {ids.shape}")
    if np.any(ids < 0) or np.any(ids >= c):
        raise ContractError(f"identity label outside [0, {c})")
    return -ad.log_softmax(z, axis=-1)[np.arange(n), ids].sum()


def compose(loss_A, loss_g_list, loss_F, loss_C, weights: LossWeights) -> LossBreakdown:
    """Combine the components:

    ``LA = lam * A + beta * sum(g)``, ``GI = alpha * F + (1 - alpha) * C``,
    ``total = GI + LA``.  With ``weights.identity_constraint`` off, beta and
    the GI term are zeroed (attribute-only training).
    """
    loss_A, loss_F, loss_C = ad.as_tensor(loss_A), ad.as_tensor(loss_F), ad.as_tensor(loss_C)
    g_list = [ad.as_tensor(g) for g in loss_g_list]
    g_sum = g_list[0] if g_list else ad.Tensor(0.0)
    for g in g_list[1:]:
        g_sum = g_sum + g
    if weights.identity_constraint:
        beta, gi_scale = weights.beta, 1.0
    else:
        beta, gi_scale = 0.0, 0.0
    loss_LA = loss_A * weights.lam + g_sum * beta
    loss_GI = (loss_F * weights.alpha + loss_C * (1.0 - weights.alpha)) * gi_scale
    return LossBreakdown(loss_A, g_list, loss_LA, loss_F, loss_C, loss_GI, loss_GI + loss_LA)


def compute_losses(bundle, labels: np.ndarray, identities: np.ndarray, spec: AttributeGroupSpec,
                   weights: LossWeights) -> LossBreakdown:
    """All components for one batch of predictions."""
    mask = pair_mask(identities)
    loss_A, _ = loss_attribute(bundle.probabilities, labels, spec)
    loss_g = [loss_pairwise(f, mask) for f in bundle.branch_features]
    loss_F = loss_identity_ce(bundle.identity_logits, identities)
    loss_C = loss_pairwise(bundle.global_feature, mask)
    return compose(loss_A, loss_g, loss_F, loss_C, weights)
