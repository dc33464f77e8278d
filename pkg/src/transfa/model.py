"""The full network: backbone, attribute branches and identity classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import backbone_forward, init_backbone
from .config import AttributeGroupSpec, ModelConfig
from .heads import PredictionBundle, init_heads, predict


@dataclass
class ForwardResult:
    bundle: PredictionBundle
    shared_feature: Tensor
    final_grid: Tensor


class TransFA:
    """Parameters, BatchNorm buffers and the forward pass.

    Attributes:
        params: Ordered ``name -> Tensor`` map of every trainable parameter.
        buffers: ``name -> ndarray`` running statistics (not trained).
    """

    def __init__(self, cfg: ModelConfig, spec: AttributeGroupSpec, num_identities: int,
                 params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.cfg = cfg
        self.spec = spec
        self.num_identities = num_identities
        self.params = params
        self.buffers = buffers

    @classmethod
    def create(cls, cfg: ModelConfig, spec: AttributeGroupSpec, num_identities: int | None = None,
               seed: int = 0) -> "TransFA":
        c = cfg.num_identities or num_identities or 1
        rng = np.random.default_rng([seed, 0x7FA])
        params, buffers = init_backbone(cfg, rng)
        params.update(init_heads(cfg, spec, c, cfg.final_dim, rng))
        return cls(cfg, spec, c, params, buffers)

    def forward(self, images, training: bool = False, rng: np.random.Generator | None = None,
                trace: list | None = None) -> ForwardResult:
        feature, grid = backbone_forward(images, self.params, self.buffers, self.cfg, training, trace)
        bundle = predict(feature, self.params, self.spec, training, self.cfg.dropout_rate, rng)
        return ForwardResult(bundle, feature, grid)

    def features(self, images, batch_size: int = 64) -> tuple[list[np.ndarray], np.ndarray]:
        """Eval-mode branch features (one array per group) and global features."""
        per_branch: list[list[np.ndarray]] = [[] for _ in self.spec.group_names]
        glob = []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                out = self.forward(images[start:start + batch_size], training=False)
                for k, f in enumerate(out.bundle.branch_features):
                    per_branch[k].append(f.data)
                glob.append(out.bundle.global_feature.data)
        return [np.concatenate(p) for p in per_branch], np.concatenate(glob)

    def predict_proba(self, images, batch_size: int = 64) -> np.ndarray:
        out = []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.forward(images[start:start + batch_size], training=False).bundle.probabilities.data)
        return np.concatenate(out)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer as plain arrays, sorted by name."""
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return dict(sorted(out.items()))
