"""SGD with momentum, the training loop, and the binary checkpoint format.

Checkpoint layout (little-endian)::

    b"TRANSFA1"
    u32  entry count
    per entry: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
               float64 values in row-major order
    u64  checksum (BLAKE2b, 8-byte digest, of every preceding byte)

Entries are ``param.<name>``, ``buffer.<name>``, ``velocity.<name>`` and
``meta.{epoch,step,seed,lr}``.  Shuffling and dropout draw from a generator
seeded with ``(seed, epoch)``, so ``meta.seed`` plus ``meta.epoch`` is the
complete RNG state.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import LossWeights, TrainConfig, lr_at
from .data import DatasetManifest, batch_indices, make_batch
from .errors import CheckpointError, ContractError, TrainingError
from .losses import LossBreakdown, compute_losses
from .model import TransFA

logger = logging.getLogger(__name__)

MAGIC = b"TRANSFA1"
LOG_FIELDS = ("step", "epoch", "lr", "loss_A", "loss_g_sum", "loss_LA", "loss_F", "loss_C", "loss_GI", "loss_total")


@dataclass
class OptimizerState:
    velocities: dict[str, np.ndarray]
    momentum: float = 0.9
    lr: float = 0.01

    @classmethod
    def zeros_like(cls, params: dict, momentum: float = 0.9, lr: float = 0.01) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, momentum, lr)


def sgd_step(params: dict, state: OptimizerState) -> None:
    """Classical momentum: ``v <- mu v + g``; ``p <- p - lr v`` (in name order)."""
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {name}")
        v = state.velocities.get(name)
        if v is None or v.shape != p.data.shape:
            raise ContractError(f"no velocity buffer matching parameter {name}")
        v *= state.momentum
        v += p.grad
        p.data = p.data - state.lr * v


# -- checkpoint I/O -------------------------------------------------------
def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    payload = buf.getvalue()
    return payload + struct.pack("<Q", _checksum(payload))


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint truncated")
    if blob[: len(MAGIC)] != MAGIC:
        if blob[:7] == MAGIC[:7]:
            raise CheckpointError(f"checkpoint version mismatch: {blob[:8]!r}, expected {MAGIC!r}")
        raise CheckpointError("not a checkpoint file (bad magic)")
    payload, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored:
        raise CheckpointError("checksum mismatch: checkpoint corrupted or truncated")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError("checkpoint truncated")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(payload):
        raise CheckpointError("trailing bytes after the last entry")
    return out


def save_checkpoint(entries: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)


def checkpoint_entries(model: TransFA, opt: OptimizerState | None = None, epoch: int = 0, step: int = 0,
                       seed: int = 0) -> dict[str, np.ndarray]:
    entries = {f"param.{k}": v.data.copy() for k, v in model.params.items()}
    entries.update({f"buffer.{k}": v.copy() for k, v in model.buffers.items()})
    if opt is not None:
        entries.update({f"velocity.{k}": v.copy() for k, v in opt.velocities.items()})
        entries["meta.lr"] = np.array(opt.lr)
    entries["meta.epoch"] = np.array(float(epoch))
    entries["meta.step"] = np.array(float(step))
    entries["meta.seed"] = np.array(float(seed))
    return entries


def restore(model: TransFA, entries: dict[str, np.ndarray], opt: OptimizerState | None = None) -> dict:
    """Copy checkpoint tensors into ``model`` (and ``opt``); returns the ``meta.*`` values.

    Raises:
        CheckpointError: a parameter or buffer is missing or has another shape.
    """
    for kind, target in (("param", {k: p.data for k, p in model.params.items()}), ("buffer", model.buffers)):
        for name, current in target.items():
            key = f"{kind}.{name}"
            if key not in entries:
                raise CheckpointError(f"checkpoint lacks {kind} {name}")
            if entries[key].shape != current.shape:
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {entries[key].shape}, model {current.shape}")
    extra = [k[len("param."):] for k in entries if k.startswith("param.") and k[len("param."):] not in model.params]
    if extra:
        raise CheckpointError(f"checkpoint parameter {extra[0]} does not exist in the model")
    for name, p in model.params.items():
        p.data = entries[f"param.{name}"].copy()
        p.grad = None
    for name in model.buffers:
        model.buffers[name] = entries[f"buffer.{name}"].copy()
    if opt is not None:
        for name in opt.velocities:
            key = f"velocity.{name}"
            if key in entries:
                opt.velocities[name] = entries[key].copy()
        if "meta.lr" in entries:
            opt.lr = float(entries["meta.lr"])
    return {k[len("meta."):]: float(v) for k, v in entries.items() if k.startswith("meta.")}


# -- training loop --------------------------------------------------------
@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    checkpoint: dict[str, np.ndarray] = field(default_factory=dict)
    epochs_run: int = 0


def _first_non_finite(losses: LossBreakdown) -> str | None:
    items = [("loss_A", losses.loss_A)]
    items += [(f"loss_g[{i}]", g) for i, g in enumerate(losses.loss_g_list)]
    items += [("loss_LA", losses.loss_LA), ("loss_F", losses.loss_F), ("loss_C", losses.loss_C),
              ("loss_GI", losses.loss_GI), ("loss_total", losses.loss_total)]
    for name, t in items:
        if not np.isfinite(t.item()):
            return name
    return None


def write_log(rows: list[dict], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]


def train(
    model: TransFA,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    weights: LossWeights,
    out_dir: str | Path | None = None,
    resume: dict[str, np.ndarray] | None = None,
    split: str | None = "train",
    on_epoch: Callable[[int, TrainResult], None] | None = None,
) -> TrainResult:
    """Train end to end; returns the per-step log and the final checkpoint entries.

    With ``out_dir`` set, ``train_log.csv`` and ``checkpoint_epochNNN.bin``
    (plus ``checkpoint_last.bin``) are written after every epoch.  ``resume``
    takes checkpoint entries and continues from the epoch they record.

    Raises:
        TrainingError: a loss component became non-finite.
    """
    spec = model.spec
    pool = manifest.indices(split)
    if len(pool) < 2:
        raise ContractError(f"need at least 2 training samples, split {split!r} has {len(pool)}")
    if manifest.identity_count > model.num_identities:
        raise ContractError(f"model has {model.num_identities} identity classes, data has {manifest.identity_count}")
    opt = OptimizerState.zeros_like(model.params, cfg.momentum, lr_at(0, cfg))
    start_epoch, step, seed = 0, 0, cfg.seed
    if resume is not None:
        meta = restore(model, resume, opt)
        start_epoch, step, seed = int(meta["epoch"]), int(meta["step"]), int(meta["seed"])
    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    size = model.cfg.image_size
    for epoch in range(start_epoch, cfg.epochs):
        opt.lr = lr_at(epoch, cfg)
        rng = np.random.default_rng([seed, epoch])
        epoch_rows = []
        for chunk in batch_indices(len(pool), cfg.batch_size, rng):
            batch = make_batch(manifest, pool[chunk], size, spec)
            fwd = model.forward(batch.images, training=True, rng=rng)
            if not np.all(np.isfinite(fwd.bundle.logits.data)):
                raise TrainingError(f"non-finite attribute logits at epoch {epoch}, step {step}")
            losses = compute_losses(fwd.bundle, batch.attributes, batch.identities, spec, weights)
            bad = _first_non_finite(losses)
            if bad is not None:
                raise TrainingError(f"non-finite {bad} at epoch {epoch}, step {step}")
            ad.backward(losses.loss_total)
            sgd_step(model.params, opt)
            row = {"step": step, "epoch": epoch, "lr": opt.lr, **losses.as_dict()}
            epoch_rows.append(row)
            step += 1
        result.log.extend(epoch_rows)
        result.epochs_run += 1
        logger.info("epoch %d lr %.3g loss_total %.5g", epoch, opt.lr,
                    np.mean([r["loss_total"] for r in epoch_rows]) if epoch_rows else float("nan"))
        entries = checkpoint_entries(model, opt, epoch + 1, step, seed)
        if out is not None:
            write_log(epoch_rows, out / "train_log.csv", append=epoch > start_epoch or resume is not None)
            save_checkpoint(entries, out / f"checkpoint_epoch{epoch + 1:03d}.bin")
            save_checkpoint(entries, out / "checkpoint_last.bin")
        if on_epoch is not None:
            on_epoch(epoch, result)
    for p in model.params.values():
        p.grad = None
    if result.epochs_run == 0:
        result.checkpoint = checkpoint_entries(model, opt, start_epoch, step, seed)
        if out is not None:
            write_log([], out / "train_log.csv")
            save_checkpoint(result.checkpoint, out / "checkpoint_last.bin")
    else:
        result.checkpoint = entries
    return result
