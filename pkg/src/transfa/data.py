"""CelebA-format ingestion, preprocessing, batching and synthetic faces.

A dataset directory holds::

    list_attr_celeba.txt      count / header / "file +-1 ..." rows
    identity_CelebA.txt       "file identity" rows
    list_eval_partition.txt   "file 0|1|2" rows (optional; 0 train, 1 val, 2 test)
    img_align_celeba/ or images/   the image files

Synthetic datasets are written in exactly this layout so that both paths go
through the same parsers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import AttributeGroupSpec, canonical_name
from .errors import ContractError, ParseError

logger = logging.getLogger(__name__)

ATTR_FILE = "list_attr_celeba.txt"
IDENTITY_FILE = "identity_CelebA.txt"
PARTITION_FILE = "list_eval_partition.txt"
SPLIT_CODES = {"0": "train", "1": "val", "2": "test"}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}


@dataclass
class Sample:
    """One face: an ``H x W x 3`` image in [0, 1], attribute bits, identity."""

    attributes: np.ndarray
    identity: int
    source_name: str
    image: np.ndarray | None = None
    path: Path | None = None

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.path is None:
                raise ContractError(f"{self.source_name}: no image data or path")
            return load_image(self.path)
        return self.image


@dataclass
class Batch:
    images: np.ndarray  # N x 3 x S x S, normalised
    attributes: np.ndarray  # N x A in {0, 1}, group order
    identities: np.ndarray  # N
    names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.identities)


@dataclass
class DatasetManifest:
    samples: list[Sample]
    attribute_names: tuple[str, ...]
    identity_count: int
    splits: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.samples)
        if len(self.splits) != len(self.samples):
            raise ContractError("one split label per sample required")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.samples))
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def attribute_matrix(self, spec: AttributeGroupSpec | None = None) -> np.ndarray:
        """``N x A`` labels, reordered to ``spec``'s group order when given."""
        raw = np.stack([s.attributes for s in self.samples]).astype(np.float64)
        if spec is None:
            return raw
        return raw[:, self.column_order(spec)]

    def column_order(self, spec: AttributeGroupSpec) -> np.ndarray:
        pos = {canonical_name(n): i for i, n in enumerate(self.attribute_names)}
        missing = [a for a in spec.attributes if a not in pos]
        if missing:
            raise ContractError(f"dataset lacks attributes required by the grouping: {', '.join(missing)}")
        return np.array([pos[a] for a in spec.attributes], dtype=np.int64)

    def preprocessed(self, index: int, size: int) -> np.ndarray:
        key = (index, size)
        img = self._cache.get(key)
        if img is None:
            img = preprocess(self.samples[index].load_image(), size)
            self._cache[key] = img
        return img


# -- annotation files -----------------------------------------------------
def parse_attribute_file(path: str | Path) -> tuple[tuple[str, ...], list[tuple[str, np.ndarray]]]:
    """Read a CelebA attribute file; ``1`` maps to 1 and ``-1`` to 0.

    Raises:
        ParseError: bad count line, wrong column count, a token other than
            ``1``/``-1``, or a row count that disagrees with line 1.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file: missing count line", 1, str(path))
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"line 1 must be an integer count, got {lines[0]!r}", 1, str(path)) from None
    if len(lines) < 2:
        raise ParseError("missing attribute-name header", 2, str(path))
    names = tuple(lines[1].split())
    if not names:
        raise ParseError("empty attribute-name header", 2, str(path))
    rows = []
    for lineno, line in enumerate(lines[2:], 3):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != len(names) + 1:
            raise ParseError(f"expected {len(names) + 1} columns, got {len(toks)}", lineno, str(path))
        vals = np.empty(len(names), dtype=np.int8)
        for j, tok in enumerate(toks[1:]):
            if tok == "1":
                vals[j] = 1
            elif tok == "-1":
                vals[j] = 0
            else:
                raise ParseError(f"token {tok!r} for {names[j]} is not 1 or -1", lineno, str(path))
        rows.append((toks[0], vals))
    if len(rows) != declared:
        raise ParseError(f"row count {len(rows)} does not match declared count {declared}", None, str(path))
    return names, rows


def write_attribute_file(path: str | Path, names: Sequence[str], rows: Sequence[tuple[str, np.ndarray]]) -> None:
    lines = [str(len(rows)), " ".join(names)]
    for fname, bits in rows:
        lines.append(fname + " " + " ".join("1" if b else "-1" for b in bits))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_identity_file(path: str | Path) -> dict[str, int]:
    """Map file name to identity, re-indexed densely in first-appearance order.

    The identity count is ``len(set(result.values()))``.
    """
    path = Path(path)
    mapping: dict[str, int] = {}
    dense: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 2:
                raise ParseError(f"expected 'filename identity', got {len(toks)} tokens", lineno, str(path))
            fname, raw = toks
            try:
                int(raw)
            except ValueError:
                raise ParseError(f"identity {raw!r} is not an integer", lineno, str(path)) from None
            if fname in mapping:
                raise ParseError(f"duplicate filename {fname!r}", lineno, str(path))
            mapping[fname] = dense.setdefault(raw, len(dense))
    return mapping


def parse_partition_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 2 or toks[1] not in SPLIT_CODES:
                raise ParseError("expected 'filename 0|1|2'", lineno, str(path))
            out[toks[0]] = SPLIT_CODES[toks[1]]
    return out


def parse_prediction_file(path: str | Path) -> tuple[tuple[str, ...], list[tuple[str, np.ndarray]]]:
    """Attribute-file layout whose values are probabilities in [0, 1] (``-1`` reads as 0)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ParseError("missing count or header line", len(lines) + 1, str(path))
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"line 1 must be an integer count, got {lines[0]!r}", 1, str(path)) from None
    names = tuple(lines[1].split())
    rows = []
    for lineno, line in enumerate(lines[2:], 3):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != len(names) + 1:
            raise ParseError(f"expected {len(names) + 1} columns, got {len(toks)}", lineno, str(path))
        try:
            vals = np.array([float(t) for t in toks[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, str(path)) from None
        vals[vals == -1.0] = 0.0
        if np.any((vals < 0) | (vals > 1)):
            raise ParseError("probabilities must lie in [0, 1]", lineno, str(path))
        rows.append((toks[0], vals))
    if len(rows) != declared:
        raise ParseError(f"row count {len(rows)} does not match declared count {declared}", None, str(path))
    return names, rows


# -- images ---------------------------------------------------------------
def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling over the first two axes.

    Output pixel ``i`` samples source coordinate ``i * (H - 1) / (out_h - 1)``,
    so corner pixels are reproduced exactly.
    """
    out_w = out_h if out_w is None else out_w
    h, w = image.shape[:2]

    def coords(n_out: int, n_in: int):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    extra = (1,) * (image.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(image: np.ndarray, size: int = 224) -> np.ndarray:
    """Resize to ``size x size``, move channels first, map [0, 1] to [-1, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1 or image.shape[2] != 3:
        raise ContractError(f"expected a non-empty H x W x 3 image, got shape {image.shape}")
    if image.shape[:2] != (size, size):
        image = resize_bilinear(image, size)
    return (np.transpose(image, (2, 0, 1)) - 0.5) / 0.5


# -- batching -------------------------------------------------------------
def batch_indices(n: int, batch_size: int, shuffle_seed) -> list[np.ndarray]:
    """Seeded permutation cut into batches; a trailing batch of one is dropped."""
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2 (pairwise losses need two samples)")
    order = np.random.default_rng(shuffle_seed).permutation(n) if shuffle_seed is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def make_batch(manifest: DatasetManifest, idx: Sequence[int], image_size: int,
               spec: AttributeGroupSpec | None = None) -> Batch:
    key = ("labels", spec.attributes if spec is not None else None)
    labels = manifest._cache.get(key)
    if labels is None:
        labels = manifest._cache[key] = manifest.attribute_matrix(spec)
    idx = np.asarray(idx, dtype=np.int64)
    images = np.stack([manifest.preprocessed(int(i), image_size) for i in idx])
    ids = manifest.identities[idx]
    names = tuple(manifest.samples[int(i)].source_name for i in idx)
    return Batch(images, labels[idx], ids, names)


def batches(
    manifest: DatasetManifest,
    batch_size: int,
    shuffle_seed,
    image_size: int = 224,
    spec: AttributeGroupSpec | None = None,
    split: str | None = None,
) -> Iterator[Batch]:
    """Yield batches over ``manifest`` (optionally one split) in seeded order."""
    pool = manifest.indices(split)
    for chunk in batch_indices(len(pool), batch_size, shuffle_seed):
        yield make_batch(manifest, pool[chunk], image_size, spec)


# -- synthetic faces ------------------------------------------------------
def synth_attribute_names(attr_count: int, num_regions: int | None = None) -> list[str]:
    r = _num_regions(attr_count, num_regions)
    return [f"region{i % r}_glyph{i // r}" for i in range(attr_count)]


def _num_regions(attr_count: int, num_regions: int | None) -> int:
    if num_regions is None:
        num_regions = max(1, min(4, attr_count // 2))
    return max(1, min(num_regions, attr_count))


def synth_group_spec(attr_count: int, num_regions: int | None = None) -> AttributeGroupSpec:
    """Ground-truth grouping of synthetic attributes: one group per glyph region."""
    r = _num_regions(attr_count, num_regions)
    names = synth_attribute_names(attr_count, r)
    groups = [(f"region{g}", [n for i, n in enumerate(names) if i % r == g]) for g in range(r)]
    return AttributeGroupSpec.build(groups, names)


def _glyph(size: int, band: tuple[int, int], index: int) -> tuple[int, np.ndarray]:
    """Channel and additive mask of attribute ``index``'s glyph inside a horizontal band.

    Channel, pattern and stroke period all derive from ``index``, so every
    attribute is recognisable by its texture and located by its band.
    """
    top, bottom = band
    yy, xx = np.mgrid[0:size, 0:size]
    margin = max(1, size // 16)
    inside = (yy >= top + 1) & (yy < bottom - 1) & (xx >= margin) & (xx < size - margin)
    channel = index % 3
    kind = (index // 3) % 3
    period = 2 + (index // 9) % 3
    if kind == 0:
        pattern = (yy // period) % 2 == 0 if (index // 9) % 2 == 0 else (xx // period) % 2 == 0
    elif kind == 1:
        pattern = ((yy // period) + (xx // period)) % 2 == 0
    else:
        pattern = np.ones_like(inside)
    return channel, (inside & pattern).astype(np.float64)


def synth_dataset(
    num_identities: int,
    per_identity: int,
    attr_count: int,
    seed: int,
    image_size: int = 64,
    num_regions: int | None = None,
    flip_prob: float = 0.05,
    noise: float = 0.03,
    test_per_identity: int = 0,
) -> DatasetManifest:
    """Generate identity-clustered synthetic faces with learnable attributes.

    Every attribute owns a striped glyph inside one horizontal band (its
    region); the glyph is painted when the attribute is on.  Each identity
    has a base attribute vector and a smooth colour field; samples flip at
    most ``floor(flip_prob * attr_count)`` bits, so same-identity samples
    agree on at least ``1 - 2 * flip_prob`` of their bits.

    ``meta["attribute_regions"]`` records each attribute's region, the
    ground truth for grouping recovery.
    """
    if min(num_identities, per_identity, attr_count, image_size) < 1:
        raise ContractError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    regions = _num_regions(attr_count, num_regions)
    names = synth_attribute_names(attr_count, regions)
    bounds = np.linspace(0, image_size, regions + 1).round().astype(int)
    glyphs = []
    for a in range(attr_count):
        r = a % regions
        glyphs.append(_glyph(image_size, (bounds[r], bounds[r + 1]), a))

    base_attrs = np.zeros((num_identities, attr_count), dtype=np.int8)
    for a in range(attr_count):
        pos = rng.permutation(num_identities)[: (num_identities + 1) // 2]
        base_attrs[pos, a] = 1
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    bases = []
    for _ in range(num_identities):
        field_ = np.empty((image_size, image_size, 3))
        for c in range(3):
            level = rng.uniform(0.3, 0.5)
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            field_[..., c] = level + 0.08 * np.cos(2 * np.pi * fy * yy + ph[0]) * np.cos(2 * np.pi * fx * xx + ph[1])
        bases.append(field_)

    max_flips = int(np.floor(flip_prob * attr_count))
    samples, splits = [], []
    for ident in range(num_identities):
        for k in range(per_identity + test_per_identity):
            bits = base_attrs[ident].copy()
            if max_flips:
                flips = np.flatnonzero(rng.random(attr_count) < flip_prob)[:max_flips]
                bits[flips] ^= 1
            img = bases[ident].copy()
            for a in np.flatnonzero(bits):
                ch, mask = glyphs[a]
                img[..., ch] += 0.35 * mask
            img += rng.uniform(-0.03, 0.03)
            img += rng.normal(0.0, noise, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            name = f"{len(samples) + 1:06d}.png"
            samples.append(Sample(bits, ident, name, image=img))
            splits.append("train" if k < per_identity else "test")
    meta = {
        "attribute_regions": [a % regions for a in range(attr_count)],
        "num_regions": regions,
        "seed": seed,
    }
    return DatasetManifest(samples, tuple(names), num_identities, splits, meta)


# -- persistence ----------------------------------------------------------
def save_dataset(manifest: DatasetManifest, directory: str | Path) -> Path:
    """Write images (PNG) and CelebA-format annotation files into ``directory``."""
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for s in manifest.samples:
        save_image(img_dir / s.source_name, s.load_image())
    write_attribute_file(directory / ATTR_FILE, manifest.attribute_names,
                         [(s.source_name, s.attributes) for s in manifest.samples])
    (directory / IDENTITY_FILE).write_text(
        "".join(f"{s.source_name} {s.identity}\n" for s in manifest.samples), encoding="utf-8")
    (directory / PARTITION_FILE).write_text(
        "".join(f"{s.source_name} {SPLIT_NAMES[sp]}\n" for s, sp in zip(manifest.samples, manifest.splits)),
        encoding="utf-8")
    if "attribute_regions" in manifest.meta:
        spec = synth_group_spec(len(manifest.attribute_names), manifest.meta["num_regions"])
        (directory / "groups.cfg").write_text(
            "# ground-truth glyph regions of the synthetic attributes\n" + spec.to_text(), encoding="utf-8")
    return directory


def load_dataset(directory: str | Path, eager: bool = True) -> DatasetManifest:
    """Read a CelebA-layout directory (real CelebA or a saved synthetic set)."""
    directory = Path(directory)
    names, rows = parse_attribute_file(directory / ATTR_FILE)
    id_path = directory / IDENTITY_FILE
    if id_path.exists():
        ids = parse_identity_file(id_path)
    else:
        logger.warning("%s missing: every image gets its own identity", id_path)
        ids = {fname: i for i, (fname, _) in enumerate(rows)}
    part_path = directory / PARTITION_FILE
    parts = parse_partition_file(part_path) if part_path.exists() else {}
    img_dir = next((d for d in (directory / "img_align_celeba", directory / "images") if d.is_dir()), directory)
    samples, splits = [], []
    for lineno, (fname, bits) in enumerate(rows, 3):
        if fname not in ids:
            raise ParseError(f"{fname} has no identity entry", lineno, str(directory / ATTR_FILE))
        path = img_dir / fname
        samples.append(Sample(bits, ids[fname], fname, image=load_image(path) if eager else None, path=path))
        splits.append(parts.get(fname, "train"))
    used = sorted({s.identity for s in samples})
    remap = {old: new for new, old in enumerate(used)}
    for s in samples:
        s.identity = remap[s.identity]
    meta = {}
    groups_file = directory / "groups.cfg"
    if groups_file.exists():
        meta["groups_file"] = str(groups_file)
    return DatasetManifest(samples, names, len(used), splits, meta)
