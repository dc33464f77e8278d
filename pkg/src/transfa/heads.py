"""Attention-specific attribute branches and the identity-correlation branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import _linear_params, linear
from .config import AttributeGroupSpec, ModelConfig
from .errors import DimensionError


@dataclass
class PredictionBundle:
    probabilities: Tensor  # (B, A), group order
    logits: Tensor  # (B, A)
    identity_logits: Tensor  # (B, C)
    branch_features: list[Tensor]  # G tensors of (B, h2)
    global_feature: Tensor  # (B, G * h2)


def init_heads(cfg: ModelConfig, spec: AttributeGroupSpec, num_identities: int, in_dim: int,
               rng: np.random.Generator) -> dict:
    params: dict[str, Tensor] = {}
    h1, h2 = cfg.branch_hidden
    for g, attrs in spec.groups:
        _linear_params(params, f"heads.{g}.fc1", rng, in_dim, h1, cfg.init_std)
        _linear_params(params, f"heads.{g}.fc2", rng, h1, h2, cfg.init_std)
        _linear_params(params, f"heads.{g}.fc3", rng, h2, len(attrs), cfg.init_std)
    _linear_params(params, "identity.fc", rng, spec.num_groups * h2, max(num_identities, 1), cfg.init_std)
    return params


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def branch_forward(
    shared_feature,
    group: str,
    params: dict,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Three linear layers, ReLU + dropout after the first two.

    Returns ``(fea_g, logits)`` where ``fea_g`` is the second layer's ReLU
    output (taken before its dropout) and ``logits`` has one entry per
    attribute of the group.
    """
    x = ad.as_tensor(shared_feature)
    w1 = params[f"heads.{group}.fc1.weight"]
    if x.shape[-1] != w1.shape[0]:
        raise DimensionError(f"branch {group}: feature dim {x.shape[-1]} != expected {w1.shape[0]}")
    h = dropout(ad.relu(linear(x, params, f"heads.{group}.fc1")), dropout_rate, training, rng)
    fea = ad.relu(linear(h, params, f"heads.{group}.fc2"))
    logits = linear(dropout(fea, dropout_rate, training, rng), params, f"heads.{group}.fc3")
    return fea, logits


def predict(
    shared_feature,
    params: dict,
    spec: AttributeGroupSpec,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PredictionBundle:
    """Run all branches in group order and the identity classifier on their concatenation."""
    feats, logits = [], []
    for g in spec.group_names:
        f, lg = branch_forward(shared_feature, g, params, training, dropout_rate, rng)
        feats.append(f)
        logits.append(lg)
    all_logits = ad.concat(logits, axis=-1)
    global_feature = ad.concat(feats, axis=-1)
    return PredictionBundle(
        probabilities=ad.sigmoid(all_logits),
        logits=all_logits,
        identity_logits=linear(global_feature, params, "identity.fc"),
        branch_features=feats,
        global_feature=global_feature,
    )
