"""Attribute accuracy and rank-1 identification."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .config import AttributeGroupSpec
from .errors import DimensionError, ProtocolError


@dataclass
class AttributeReport:
    attributes: tuple[str, ...]
    display_names: tuple[str, ...]
    per_attribute: np.ndarray  # percent
    groups: tuple[str, ...]
    per_group: np.ndarray  # percent, unweighted mean over the group's attributes
    overall: float
    _group_sizes: tuple[int, ...] = field(default=(), repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["index", "attribute", "group", "accuracy"])
        group_of = {}
        for g, n in zip(self.groups, self._group_sizes):
            for _ in range(n):
                group_of[len(group_of)] = g
        for i, (a, acc) in enumerate(zip(self.attributes, self.per_attribute)):
            w.writerow([i + 1, a, group_of[i], f"{acc:.2f}"])
        for g, acc in zip(self.groups, self.per_group):
            w.writerow(["", f"mean[{g}]", g, f"{acc:.2f}"])
        w.writerow(["", "mean", "", f"{self.overall:.2f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max(len(d) for d in self.display_names + ("Average",)) + 2
        lines = [f"{'#':>3}  {'Attribute':<{width}}{'Acc (%)':>8}", "-" * (width + 13)]
        for i, (name, acc) in enumerate(zip(self.display_names, self.per_attribute)):
            lines.append(f"{i + 1:>3}  {name:<{width}}{acc:>8.2f}")
        lines.append("-" * (width + 13))
        for g, acc in zip(self.groups, self.per_group):
            lines.append(f"     {g + ' (group)':<{width}}{acc:>8.2f}")
        lines.append(f"     {'Average':<{width}}{self.overall:>8.2f}")
        return "\n".join(lines) + "\n"


def attribute_accuracy(p, y, spec: AttributeGroupSpec, threshold: float = 0.5) -> AttributeReport:
    """Per-attribute accuracy (percent) of ``p >= threshold`` against ``y``.

    Ties at the threshold count as positive predictions.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape != y.shape or p.ndim != 2:
        raise DimensionError(f"predictions {p.shape} and labels {y.shape} must be equal N x A arrays")
    if p.shape[1] != spec.num_attributes:
        raise DimensionError(f"expected {spec.num_attributes} attributes, got {p.shape[1]}")
    correct = (p >= threshold) == (y > 0.5)
    per_attr = 100.0 * correct.mean(axis=0)
    per_group = np.array([per_attr[sl].mean() for sl in spec.group_slices()])
    return AttributeReport(
        attributes=spec.attributes,
        display_names=tuple(spec.display(a) for a in spec.attributes),
        per_attribute=per_attr,
        groups=spec.group_names,
        per_group=per_group,
        overall=float(per_attr.mean()),
        _group_sizes=spec.sizes,
    )


def nearest_gallery(gallery: np.ndarray, probe: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of each probe's Euclidean nearest gallery feature (lowest index on ties)."""
    gallery = np.asarray(gallery, dtype=np.float64)
    probe = np.asarray(probe, dtype=np.float64)
    if gallery.ndim != 2 or probe.ndim != 2 or gallery.shape[1] != probe.shape[1]:
        raise DimensionError(f"gallery {gallery.shape} and probe {probe.shape} features disagree")
    out = np.empty(len(probe), dtype=np.int64)
    for start in range(0, len(probe), chunk):
        diff = probe[start:start + chunk, None, :] - gallery[None, :, :]
        out[start:start + chunk] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return out


def rank1(gallery_features, gallery_ids, probe_features, probe_ids) -> float:
    """Percentage of probes whose nearest gallery neighbour shares their identity.

    Raises:
        ProtocolError: a probe identity does not occur in the gallery.
    """
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    absent = sorted(set(probe_ids.tolist()) - set(gallery_ids.tolist()))
    if absent:
        raise ProtocolError(f"probe identities missing from gallery: {absent[:5]}")
    if len(probe_ids) == 0:
        raise ProtocolError("empty probe set")
    nn = nearest_gallery(gallery_features, probe_features)
    return 100.0 * float(np.mean(gallery_ids[nn] == probe_ids))


@dataclass
class Rank1Report:
    sources: tuple[str, ...]
    accuracy: np.ndarray
    num_identities: int
    probe_size: int
    gallery_size: int
    seed: int
    note: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["branch", "rank1"])
        for s, a in zip(self.sources, self.accuracy):
            w.writerow([s, f"{a:.2f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max(len(s) for s in self.sources) + 2
        lines = [f"{'Branch':<{width}}{'Rank-1 (%)':>11}", "-" * (width + 11)]
        lines += [f"{s:<{width}}{a:>11.2f}" for s, a in zip(self.sources, self.accuracy)]
        lines.append("-" * (width + 11))
        lines.append(f"identities={self.num_identities} probes={self.probe_size} "
                     f"gallery={self.gallery_size} seed={self.seed}")
        if self.note:
            lines.append(self.note)
        return "\n".join(lines) + "\n"


def split_probe_gallery(identities, num_identities: int, seed: int,
                        allow_fewer: bool = True) -> tuple[np.ndarray, np.ndarray, str]:
    """Sample identities with >= 2 images, one random probe image each; the rest is gallery.

    Returns ``(probe_idx, gallery_idx, note)``; ``note`` is non-empty when
    fewer than ``num_identities`` identities were available.
    """
    ids = np.asarray(identities)
    uniq, counts = np.unique(ids, return_counts=True)
    eligible = uniq[counts >= 2]
    note = ""
    if len(eligible) < num_identities:
        if not allow_fewer or len(eligible) < 2:
            raise ProtocolError(f"need {num_identities} identities with >= 2 images, only {len(eligible)} available")
        note = f"scaled down: {len(eligible)} eligible identities < requested {num_identities}"
        num_identities = len(eligible)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=num_identities, replace=False))
    probe, gallery = [], []
    for ident in chosen:
        members = np.flatnonzero(ids == ident)
        pick = members[rng.integers(len(members))]
        probe.append(pick)
        gallery.extend(m for m in members if m != pick)
    return np.array(probe, dtype=np.int64), np.array(sorted(gallery), dtype=np.int64), note


def rank1_protocol(model, manifest, num_identities: int = 100, seed: int = 0, split: str | None = "test",
                   allow_fewer: bool = True) -> Rank1Report:
    """Rank-1 identification once per branch feature and for the concatenated feature.

    Features are computed in eval mode.  When ``split`` has fewer than two
    identities with two or more images the whole manifest is used.
    """
    pool = manifest.indices(split)
    _, counts = np.unique(manifest.identities[pool], return_counts=True)
    fallback = ""
    if np.sum(counts >= 2) < 2 and split is not None:
        pool = manifest.indices(None)
        fallback = f"split {split!r} has too few repeated identities; using every image"
    probe_rel, gallery_rel, note = split_probe_gallery(manifest.identities[pool], num_identities, seed, allow_fewer)
    note = "; ".join(n for n in (fallback, note) if n)
    probe, gallery = pool[probe_rel], pool[gallery_rel]
    used = np.concatenate([probe, gallery])
    images = np.stack([manifest.preprocessed(int(i), model.cfg.image_size) for i in used])
    branch_feats, global_feat = model.features(images)
    ids = manifest.identities[used]
    n_probe = len(probe)
    sources, acc = [], []
    for g, f in zip(model.spec.group_names, branch_feats):
        sources.append(f"{g} Region Branch")
        acc.append(rank1(f[n_probe:], ids[n_probe:], f[:n_probe], ids[:n_probe]))
    sources.append("Identity Correlation Branch")
    acc.append(rank1(global_feat[n_probe:], ids[n_probe:], global_feat[:n_probe], ids[:n_probe]))
    return Rank1Report(tuple(sources), np.array(acc), len(probe), len(probe), len(gallery), seed, note)
