"""Grad-CAM maps on the final token grid and map-driven attribute grouping."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import squareform

from . import autodiff as ad
from .config import AttributeGroupSpec, canonical_name
from .data import preprocess, resize_bilinear
from .errors import ContractError


@dataclass
class AttentionMap:
    """One attribute's Grad-CAM map for one image (or a mean over images).

    Attributes:
        raw: ``(h, w)`` non-negative map over the final token grid.
        upsampled: ``(S, S)`` map scaled to ``[0, 1]`` (all zero if ``raw`` is).
        attribute: Canonical attribute name.
        source: Image name, or a description of the averaged set.
        image: Optional ``(S, S, 3)`` RGB image in ``[0, 1]`` used for overlays.
    """

    raw: np.ndarray
    upsampled: np.ndarray
    attribute: str
    source: str = ""
    image: np.ndarray | None = None


def _normalise(m: np.ndarray) -> np.ndarray:
    peak = m.max()
    return m / peak if peak > 0 else np.zeros_like(m)


def _attribute_column(model, attribute: str) -> int:
    idx = model.spec.attribute_index
    key = canonical_name(attribute)
    if key not in idx:
        raise KeyError(f"unknown attribute {attribute!r}")
    return idx[key]


def _as_input(model, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(network input (3, S, S), display image (S, S, 3))`` for an HWC image in [0, 1]."""
    size = model.cfg.image_size
    image = np.asarray(image, dtype=np.float64)
    x = preprocess(image, size)
    return x, np.clip(x.transpose(1, 2, 0) * 0.5 + 0.5, 0.0, 1.0)


def raw_maps(model, inputs: np.ndarray, attribute: str) -> np.ndarray:
    """Grad-CAM raw maps ``(B, h, w)`` for preprocessed inputs ``(B, 3, S, S)``.

    Eval mode makes samples independent, so the gradient of the summed
    logit gives every sample's own gradient in one backward pass.
    """
    col = _attribute_column(model, attribute)
    fwd = model.forward(inputs, training=False)
    target = fwd.bundle.logits[:, col].sum()
    (g,) = ad.grad(target, [fwd.final_grid])
    grid = fwd.final_grid.data
    weights = g.mean(axis=(1, 2), keepdims=True)  # (B, 1, 1, d)
    return np.maximum((grid * weights).sum(axis=-1), 0.0)


def upsample(raw: np.ndarray, size: int) -> np.ndarray:
    return _normalise(resize_bilinear(raw, size, size))


def grad_cam(model, image: np.ndarray, attribute: str, source: str = "") -> AttentionMap:
    """Grad-CAM map of ``attribute``'s logit for one HWC image in ``[0, 1]``.

    Raises:
        KeyError: ``attribute`` is not one of the model's attributes.
    """
    key = canonical_name(attribute)
    x, shown = _as_input(model, image)
    raw = raw_maps(model, x[None], key)[0]
    return AttentionMap(raw, upsample(raw, model.cfg.image_size), key, source, shown)


def mean_maps(model, manifest, attributes=None, per_attribute: int = 64, split: str | None = None,
              seed: int = 0, batch_size: int = 32) -> dict[str, AttentionMap]:
    """Mean raw map per attribute over up to ``per_attribute`` positive images.

    Attributes with no positive image get an all-zero map.
    """
    attributes = list(attributes or model.spec.attributes)
    pool = manifest.indices(split)
    labels = manifest.attribute_matrix(model.spec)[pool]
    rng = np.random.default_rng(seed)
    size = model.cfg.image_size
    out = {}
    for a in attributes:
        col = _attribute_column(model, a)
        pos = pool[labels[:, col] > 0.5]
        if len(pos) > per_attribute:
            pos = np.sort(rng.choice(pos, per_attribute, replace=False))
        h = model.cfg.final_extent
        acc = np.zeros((h, h))
        for start in range(0, len(pos), batch_size):
            x = np.stack([manifest.preprocessed(int(i), size) for i in pos[start:start + batch_size]])
            acc += raw_maps(model, x, a).sum(axis=0)
        raw = acc / max(len(pos), 1)
        key = canonical_name(a)
        out[key] = AttentionMap(raw, upsample(raw, size), key, f"mean of {len(pos)} positives")
    return out


def map_similarity(maps) -> np.ndarray:
    """Cosine similarity between flattened maps; two all-zero maps count as identical."""
    flat = np.stack([np.asarray(m.raw if isinstance(m, AttentionMap) else m, dtype=np.float64).ravel()
                     for m in maps])
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    sim = (flat / safe[:, None]) @ (flat / safe[:, None]).T
    zero = norms == 0
    sim[np.ix_(zero, zero)] = 1.0
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def spatial_correlation(a, b) -> float:
    return float(map_similarity([a, b])[0, 1])


@dataclass
class GroupProposal:
    """Clusters proposed from attention maps, for human review."""

    clusters: list[list[str]]
    similarity: np.ndarray
    attributes: list[str]

    def labels(self) -> np.ndarray:
        lab = {a: k for k, c in enumerate(self.clusters) for a in c}
        return np.array([lab[a] for a in self.attributes])

    def to_spec(self) -> AttributeGroupSpec:
        return AttributeGroupSpec.build([(f"cluster{k + 1}", c) for k, c in enumerate(self.clusters)])

    def to_text(self) -> str:
        head = "# proposed grouping from attention maps; review before use\n"
        return head + self.to_spec().to_text()


def group_suggest(maps, k: int | None = None, threshold: float | None = None) -> GroupProposal:
    """Average-linkage clustering of attributes by attention-map similarity.

    Args:
        maps: ``{attribute: AttentionMap or array}``.
        k: Number of clusters wanted.
        threshold: Similarity above which attributes are merged; used when
            ``k`` is not given (default 0.5).

    Raises:
        ContractError: fewer than two attributes.
    """
    names = list(maps)
    if len(names) < 2:
        raise ContractError("group suggestion needs at least two attributes")
    sim = map_similarity([maps[n] for n in names])
    dist = squareform(np.clip(1.0 - sim, 0.0, None), checks=False)
    z = linkage(dist, method="average")
    if k is not None:
        if k < 1:
            raise ContractError("k must be positive")
        labels = fcluster(z, t=min(k, len(names)), criterion="maxclust")
    else:
        t = 0.5 if threshold is None else threshold
        labels = fcluster(z, t=1.0 - t, criterion="distance")
    order: dict[int, list[str]] = {}
    for n, lab in zip(names, labels):
        order.setdefault(int(lab), []).append(n)
    return GroupProposal(list(order.values()), sim, names)


def cluster_agreement(predicted, truth) -> float:
    """Fraction of items whose cluster maps to their true group under the best one-to-one matching."""
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ContractError("label arrays differ in length")
    p_vals, p_idx = np.unique(predicted, return_inverse=True)
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((len(p_vals), len(t_vals)))
    np.add.at(table, (p_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / len(truth))


# -- export -----------------------------------------------------------------
def jet(v: np.ndarray) -> np.ndarray:
    """Jet colormap: values in [0, 1] to RGB in [0, 1]."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)[..., None]
    centres = np.array([0.75, 0.5, 0.25])
    return np.clip(1.5 - np.abs(4.0 * v - 4.0 * centres), 0.0, 1.0)


def overlay(amap: AttentionMap) -> np.ndarray:
    base = amap.image if amap.image is not None else np.zeros(amap.upsampled.shape + (3,))
    if base.shape[:2] != amap.upsampled.shape:
        base = resize_bilinear(base, *amap.upsampled.shape)
    return 0.5 * jet(amap.upsampled) + 0.5 * base


def _quantise(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_map(amap: AttentionMap, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>`` as an 8-bit PGM map and ``<stem>_overlay.ppm`` as the colour blend.

    The overlay is drawn on black when the map carries no image.
    """
    path = Path(path).with_suffix(".pgm")
    over = path.with_name(path.stem + "_overlay.ppm")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_quantise(amap.upsampled)).save(path)
    Image.fromarray(_quantise(overlay(amap))).save(over)
    return path, over
