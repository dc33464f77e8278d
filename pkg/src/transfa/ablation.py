"""Toy-scale component ablation: grouping strategy x identity-constraint loss.

Run as ``python -m transfa.ablation [--epochs N] [--out DIR]``.  The backbone
is always the windowed transformer; the two toggles give four runs that are
trained on the same synthetic data with the same seed and reported side by
side.  No accuracy ordering is expected at this scale.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import AttributeGroupSpec, Config, toy_overfit_config
from .data import DatasetManifest, make_batch, synth_dataset
from .metrics import attribute_accuracy
from .model import TransFA
from .trainer import train


@dataclass
class AblationRow:
    grouping: bool
    transformer: bool
    identity_constraint: bool
    train_accuracy: float
    test_accuracy: float
    final_loss: float
    seconds: float


def _mark(flag: bool) -> str:
    return "yes" if flag else "-"


def format_rows(rows: list[AblationRow]) -> str:
    head = f"{'grouping':>9}{'transformer':>13}{'id-loss':>9}{'train acc':>11}{'test acc':>10}{'loss':>10}{'time s':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{_mark(r.grouping):>9}{_mark(r.transformer):>13}{_mark(r.identity_constraint):>9}"
                     f"{r.train_accuracy:>11.2f}{r.test_accuracy:>10.2f}{r.final_loss:>10.4g}{r.seconds:>8.1f}")
    return "\n".join(lines) + "\n"


def _accuracy(model: TransFA, manifest: DatasetManifest, split: str) -> float:
    idx = manifest.indices(split)
    if len(idx) == 0:
        return float("nan")
    batch = make_batch(manifest, idx, model.cfg.image_size, model.spec)
    return attribute_accuracy(model.predict_proba(batch.images), batch.attributes, model.spec).overall


def run_ablation(manifest: DatasetManifest, base: Config, epochs: int | None = None) -> list[AblationRow]:
    """Train the four variants; rows follow the usual table order."""
    flat = AttributeGroupSpec.build([("all", list(base.groups.attributes))])
    train_cfg = base.train if epochs is None else replace(base.train, epochs=epochs)
    rows = []
    for grouping, identity in ((False, False), (True, False), (False, True), (True, True)):
        spec = base.groups if grouping else flat
        weights = replace(base.loss, identity_constraint=identity)
        model = TransFA.create(base.model, spec, manifest.identity_count, seed=train_cfg.seed)
        start = time.perf_counter()
        result = train(model, manifest, train_cfg, weights)
        tail = [r["loss_total"] for r in result.log[-10:]]
        rows.append(AblationRow(
            grouping, True, identity,
            _accuracy(model, manifest, "train"), _accuracy(model, manifest, "test"),
            float(np.mean(tail)) if tail else float("nan"), time.perf_counter() - start,
        ))
    return rows


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m transfa.ablation", description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=60, help="epochs per run (default 60)")
    parser.add_argument("--identities", type=int, default=4)
    parser.add_argument("--per-identity", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None, help="also write the table to this file")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    base = toy_overfit_config()
    base = replace(base, train=replace(base.train, seed=args.seed))
    manifest = synth_dataset(args.identities, args.per_identity, base.groups.num_attributes, seed=args.seed,
                             image_size=base.model.image_size, test_per_identity=2)
    table = format_rows(run_ablation(manifest, base, args.epochs))
    sys.stdout.write(table)
    if args.out is not None:
        args.out.write_text(table, encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
