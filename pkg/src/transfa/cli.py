"""Command-line entry point: ``transfa <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the work itself
fails.  Outputs go to ``--out`` or to ``runs/<subcommand>-<timestamp>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import AttributeGroupSpec, Config, canonical_name, config_to_text, load_config, toy_overfit_config
from .data import load_dataset, load_image, make_batch, parse_attribute_file, parse_prediction_file, \
    save_dataset, synth_dataset
from .errors import ContractError, TransFAError
from .model import TransFA

logger = logging.getLogger("transfa")

DEFAULT_SEED = 42
SEED_ENV = "TRANSFA_SEED"


class UsageError(Exception):
    """Bad command line; reported with usage text and exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def resolve_seed(flag: int | None, config_seed: int | None) -> int:
    """Seed precedence: flag, then ``TRANSFA_SEED``, then config, then 42."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return config_seed if config_seed is not None else DEFAULT_SEED


def run_dir(out: Path | None, command: str) -> Path:
    path = out if out is not None else Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _setup_logging(out: Path | None, verbose: bool) -> None:
    root = logging.getLogger("transfa")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(fmt)
    root.addHandler(err)
    if out is not None:
        fh = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _existing(path_str: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise argparse.ArgumentTypeError(f"{path_str} does not exist")
    return path


# -- configuration --------------------------------------------------------
def _flat_spec(names) -> AttributeGroupSpec:
    return AttributeGroupSpec.build([("all", list(names))])


def resolve_config(args, manifest=None) -> Config:
    """Defaults (or the toy preset), then the dataset's ``groups.cfg``, then ``--config``."""
    base = toy_overfit_config() if getattr(args, "toy", False) else Config()
    if manifest is not None:
        names = [canonical_name(n) for n in manifest.attribute_names]
        if set(names) != set(base.groups.attributes):
            base = replace(base, groups=_flat_spec(names))
        if "groups_file" in manifest.meta and args.config is None:
            base = load_config(manifest.meta["groups_file"], base)
    return load_config(args.config, base)


def _load_model(args, manifest=None) -> tuple[TransFA, Config]:
    """Rebuild a trained model from ``--checkpoint`` and the config saved beside it."""
    from .trainer import load_checkpoint, restore

    ckpt = Path(args.checkpoint)
    if args.config is None and (ckpt.parent / "config.txt").exists():
        args.config = ckpt.parent / "config.txt"
    cfg = resolve_config(args, manifest)
    entries = load_checkpoint(ckpt)
    key = "param.identity.fc.bias"
    c = entries[key].shape[0] if key in entries else cfg.model.num_identities or 1
    model = TransFA.create(cfg.model, cfg.groups, c)
    restore(model, entries)
    return model, cfg


# -- subcommands ----------------------------------------------------------
def cmd_synth(args) -> int:
    seed = resolve_seed(args.seed, None)
    manifest = synth_dataset(args.identities, args.per_identity, args.attributes, seed,
                             image_size=args.image_size, num_regions=args.regions,
                             test_per_identity=args.test_per_identity)
    save_dataset(manifest, args.out)
    logger.info("wrote %d images (%d identities, %d attributes) to %s", len(manifest),
                manifest.identity_count, args.attributes, args.out)
    return 0


def cmd_train(args) -> int:
    from .trainer import load_checkpoint, train

    manifest = load_dataset(args.data)
    cfg = resolve_config(args, manifest)
    train_cfg = replace(cfg.train, seed=resolve_seed(args.seed, cfg.train.seed))
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    cfg = replace(cfg, train=train_cfg)
    (args.out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    model = TransFA.create(cfg.model, cfg.groups, manifest.identity_count, seed=train_cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    split = args.split if len(manifest.indices(args.split)) >= 2 else None
    if split is None:
        logger.warning("split %r has fewer than 2 samples; training on the whole dataset", args.split)
    logger.info("training %d parameters for %d epochs, seed %d", model.param_count(), train_cfg.epochs,
                train_cfg.seed)
    result = train(model, manifest, train_cfg, cfg.loss, out_dir=args.out, resume=resume, split=split)
    logger.info("done: %d epochs, checkpoint %s", result.epochs_run, args.out / "checkpoint_last.bin")
    return 0


def _report(text: str, csv_text: str, out: Path, stem: str) -> None:
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    (out / f"{stem}.csv").write_text(csv_text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_eval(args) -> int:
    from .metrics import attribute_accuracy

    if args.predictions is not None:
        if args.labels is None:
            raise UsageError("eval: --predictions requires --labels")
        p_names, p_rows = parse_prediction_file(args.predictions)
        l_names, l_rows = parse_attribute_file(args.labels)
        if [canonical_name(n) for n in p_names] != [canonical_name(n) for n in l_names]:
            raise ContractError("prediction and label files list different attributes")
        labels = dict(l_rows)
        missing = [f for f, _ in p_rows if f not in labels]
        if missing:
            raise ContractError(f"no labels for {len(missing)} predicted images, e.g. {missing[0]}")
        cfg = resolve_config(args, load_dataset(args.data, eager=False) if args.data else None)
        names = [canonical_name(n) for n in l_names]
        spec = cfg.groups if set(names) == set(cfg.groups.attributes) else _flat_spec(names)
        pos = {n: i for i, n in enumerate(names)}
        order = [pos[a] for a in spec.attributes]
        p = np.stack([v for _, v in p_rows])[:, order]
        y = np.stack([labels[f] for f, _ in p_rows])[:, order]
    elif args.checkpoint is not None:
        if args.data is None:
            raise UsageError("eval: --checkpoint requires --data")
        manifest = load_dataset(args.data)
        model, _ = _load_model(args, manifest)
        spec = model.spec
        idx = manifest.indices(args.split)
        if len(idx) == 0:
            logger.warning("split %r is empty; evaluating every image", args.split)
            idx = manifest.indices(None)
        batch = make_batch(manifest, idx, model.cfg.image_size, spec)
        p, y = model.predict_proba(batch.images), batch.attributes
    else:
        raise UsageError("eval: give --predictions and --labels, or --checkpoint and --data")
    report = attribute_accuracy(p, y, spec, args.threshold)
    _report(report.to_table(), report.to_csv(), args.out, "attribute_report")
    return 0


def cmd_rank1(args) -> int:
    from .metrics import rank1_protocol

    manifest = load_dataset(args.data)
    model, cfg = _load_model(args, manifest)
    seed = resolve_seed(args.seed, cfg.train.seed)
    report = rank1_protocol(model, manifest, args.identities, seed, args.split)
    if report.note:
        logger.warning(report.note)
    _report(report.to_table(), report.to_csv(), args.out, "rank1_report")
    return 0


def cmd_cam(args) -> int:
    from .cam import export_map, grad_cam

    model, _ = _load_model(args)
    attrs = args.attributes.split(",") if args.attributes else list(model.spec.attributes)
    for image_path in args.image:
        image = load_image(image_path)
        for a in attrs:
            amap = grad_cam(model, image, a.strip(), source=image_path.name)
            gray, over = export_map(amap, args.out / f"{image_path.stem}_{amap.attribute}")
            logger.info("%s: %s, %s", amap.attribute, gray.name, over.name)
    return 0


def cmd_group_suggest(args) -> int:
    from .cam import cluster_agreement, group_suggest, mean_maps

    manifest = load_dataset(args.data)
    model, cfg = _load_model(args, manifest)
    maps = mean_maps(model, manifest, per_attribute=args.per_attribute, split=args.split,
                     seed=resolve_seed(args.seed, cfg.train.seed))
    proposal = group_suggest(maps, k=args.k, threshold=args.threshold)
    text = proposal.to_text()
    (args.out / "proposed_groups.cfg").write_text(text, encoding="utf-8")
    current = [model.spec.group_of(a) for a in proposal.attributes]
    agree = cluster_agreement(proposal.labels(), current)
    sys.stdout.write(text)
    sys.stdout.write(f"# agreement with the configured grouping: {100 * agree:.1f}%\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_toy_gradcheck

    report = run_toy_gradcheck(resolve_seed(args.seed, 0))
    text = report.to_table()
    (args.out / "gradcheck.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0 if report.passed else 2


# -- parser ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transfa", description="Face attribute transformer: training, evaluation, maps.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(p, config=True, data=False):
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default runs/<command>-<timestamp>)")
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (overrides ${SEED_ENV} and the config; default {DEFAULT_SEED})")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if config:
            p.add_argument("--config", type=_existing, default=None, help="key = value config file")
        if data:
            p.add_argument("--data", type=_existing, required=data == "required",
                           help="dataset directory in CelebA layout")

    p = sub.add_parser("synth", help="generate a synthetic dataset", description="Generate a synthetic dataset.")
    common(p, config=False)
    p.add_argument("--identities", type=int, default=4, help="number of identities (default 4)")
    p.add_argument("--per-identity", type=int, default=8, help="training images per identity (default 8)")
    p.add_argument("--test-per-identity", type=int, default=0, help="extra test images per identity (default 0)")
    p.add_argument("--attributes", type=int, default=8, help="attribute count (default 8)")
    p.add_argument("--regions", type=int, default=None, help="glyph regions (default min(4, attributes // 2))")
    p.add_argument("--image-size", type=int, default=64, help="image side in pixels (default 64)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model", description="Train a model and write checkpoints.")
    common(p, data="required")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale preset instead of full size")
    p.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    p.add_argument("--resume", type=_existing, default=None, help="checkpoint to continue from")
    p.add_argument("--split", default="train", help="training split (default train)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="attribute accuracy report",
                       description="Attribute accuracy from a prediction file or from a checkpoint.")
    common(p, data=True)
    p.add_argument("--predictions", type=_existing, default=None, help="prediction file (probabilities)")
    p.add_argument("--labels", type=_existing, default=None, help="ground-truth attribute file")
    p.add_argument("--checkpoint", type=_existing, default=None, help="trained checkpoint")
    p.add_argument("--split", default="test", help="split to evaluate with --checkpoint (default test)")
    p.add_argument("--threshold", type=float, default=0.5, help="decision threshold (default 0.5)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank1", help="rank-1 identification per branch",
                       description="Rank-1 identification with each branch feature and the global feature.")
    common(p, data="required")
    p.add_argument("--checkpoint", type=_existing, required=True, help="trained checkpoint")
    p.add_argument("--identities", type=int, default=100, help="identities to sample (default 100)")
    p.add_argument("--split", default="test", help="split to draw from (default test; all if empty)")
    p.set_defaults(func=cmd_rank1)

    p = sub.add_parser("cam", help="Grad-CAM maps", description="Write Grad-CAM maps and overlays.")
    common(p)
    p.add_argument("--checkpoint", type=_existing, required=True, help="trained checkpoint")
    p.add_argument("--image", type=_existing, nargs="+", required=True, help="input image file(s)")
    p.add_argument("--attributes", default=None, help="comma-separated attributes (default all)")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("group-suggest", help="propose a grouping from attention maps",
                       description="Cluster attributes by their mean Grad-CAM maps.")
    common(p, data="required")
    p.add_argument("--checkpoint", type=_existing, required=True, help="trained checkpoint")
    way = p.add_mutually_exclusive_group()
    way.add_argument("--k", type=int, default=None, help="number of groups")
    way.add_argument("--threshold", type=float, default=None,
                     help="merge attributes whose map similarity exceeds this (default 0.5)")
    p.add_argument("--per-attribute", type=int, default=64, help="positive images per map (default 64)")
    p.add_argument("--split", default=None, help="split to draw images from (default all)")
    p.set_defaults(func=cmd_group_suggest)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite",
                       description="Check every parameter gradient of the total loss on the toy model.")
    common(p, config=False)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth" and args.out is None:
            raise UsageError("synth: --out is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    args.out = run_dir(args.out, args.command)
    _setup_logging(args.out, args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"transfa: error: {exc}", file=sys.stderr)
        return 1
    except (TransFAError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        logger.error("%s", msg)
        return 2
    finally:
        for h in list(logger.handlers):
            h.close()
            logger.removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
