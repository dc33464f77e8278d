"""Configuration objects, the attribute grouping, and the config-file reader.

Config files are UTF-8 ``key = value`` text; ``#`` starts a comment.  Groups
are written ``group.<name> = attr1, attr2, ...``; when any group line is
present the file's groups replace the default seven-group layout.  See
``docs/config.md`` for the full key table.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

# CelebA header order (list_attr_celeba.txt, line 2).
CELEBA_ATTRIBUTES: tuple[str, ...] = (
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald",
    "Bangs", "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair", "Blurry", "Brown_Hair",
    "Bushy_Eyebrows", "Chubby", "Double_Chin", "Eyeglasses", "Goatee", "Gray_Hair",
    "Heavy_Makeup", "High_Cheekbones", "Male", "Mouth_Slightly_Open", "Mustache",
    "Narrow_Eyes", "No_Beard", "Oval_Face", "Pale_Skin", "Pointy_Nose",
    "Receding_Hairline", "Rosy_Cheeks", "Sideburns", "Smiling", "Straight_Hair",
    "Wavy_Hair", "Wearing_Earrings", "Wearing_Hat", "Wearing_Lipstick",
    "Wearing_Necklace", "Wearing_Necktie", "Young",
)

# Seven attention-region groups with their display names.
DEFAULT_GROUPS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("Global", ("Attractive", "Blurry", "Chubby", "Heavy Makeup", "Male", "Oval Face",
                "Pale Skin", "Smiling", "Young")),
    ("Around-head", ("Bald", "Bangs", "Black Hair", "Blond Hair", "Brown Hair", "Gray Hair",
                     "Receding Hairline", "Straight Hair", "Wavy Hair", "Wear Hat")),
    ("Eyes", ("Arched Eyebrows", "Bags Under Eyes", "Bushy Eyebrows", "Eyeglasses",
              "Narrow Eyes")),
    ("Nose", ("Big Nose", "Pointy Nose")),
    ("Mouth", ("5 O'Clock Shadow", "Big Lips", "Double Chin", "Goatee", "Mouth Slightly Open",
               "Mustache", "No Beard", "Sideburns", "Wear Lipstick")),
    ("Cheeks", ("High Cheekbones", "Rosy Cheeks", "Wear Earrings")),
    ("Neck", ("Wear Necklace", "Wear Necktie")),
)


def canonical_name(name: str) -> str:
    """Snake-case key used to match attribute names across files.

    ``"5 O'Clock Shadow"`` and ``"5_o_Clock_Shadow"`` both map to
    ``"5_o_clock_shadow"``; the short ``Wear X`` form maps to ``wearing_x``.
    """
    key = re.sub(r"[^0-9a-z]+", "_", name.strip().lower()).strip("_")
    if key.startswith("wear_"):
        key = "wearing_" + key[len("wear_"):]
    return key


@dataclass(frozen=True)
class AttributeGroupSpec:
    """Ordered partition of the attributes into named groups.

    The global attribute order is group order, then within-group order.
    """

    groups: tuple[tuple[str, tuple[str, ...]], ...]
    display_names: dict[str, str] = field(default_factory=dict, compare=False)

    @classmethod
    def build(
        cls,
        groups: Sequence[tuple[str, Sequence[str]]],
        universe: Iterable[str] | None = None,
    ) -> "AttributeGroupSpec":
        """Canonicalise names and check that ``groups`` partition ``universe``.

        Raises:
            ConfigError: on an empty group, an attribute listed twice, an
                attribute outside the universe, or one left unassigned.
        """
        display: dict[str, str] = {}
        seen: dict[str, str] = {}
        out = []
        for gname, attrs in groups:
            if not attrs:
                raise ConfigError(f"group.{gname}: group is empty")
            keys = []
            for a in attrs:
                k = canonical_name(a)
                if k in seen:
                    raise ConfigError(f"group.{gname}: attribute {a!r} already assigned to group {seen[k]!r}")
                seen[k] = gname
                display.setdefault(k, a.strip())
                keys.append(k)
            out.append((gname, tuple(keys)))
        if universe is not None:
            uni = [canonical_name(u) for u in universe]
            missing = [u for u in uni if u not in seen]
            if missing:
                raise ConfigError(f"group: attribute not assigned: {', '.join(missing)}")
            extra = [k for k in seen if k not in set(uni)]
            if extra:
                raise ConfigError(f"group.{seen[extra[0]]}: unknown attribute {extra[0]!r}")
        if not out:
            raise ConfigError("group: no groups defined")
        return cls(tuple(out), display)

    @classmethod
    def default(cls) -> "AttributeGroupSpec":
        return cls.build(DEFAULT_GROUPS, CELEBA_ATTRIBUTES)

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(g for g, _ in self.groups)

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(a for _, attrs in self.groups for a in attrs)

    @property
    def num_attributes(self) -> int:
        return sum(len(a) for _, a in self.groups)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(a) for _, a in self.groups)

    @property
    def attribute_index(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.attributes)}

    def group_slices(self) -> list[slice]:
        out, start = [], 0
        for n in self.sizes:
            out.append(slice(start, start + n))
            start += n
        return out

    def group_of(self, attribute: str) -> str:
        key = canonical_name(attribute)
        for g, attrs in self.groups:
            if key in attrs:
                return g
        raise KeyError(attribute)

    def display(self, attribute: str) -> str:
        return self.display_names.get(attribute, attribute)

    def to_text(self) -> str:
        """Render as ``group.<name> = ...`` lines, readable by :func:`load_config`."""
        lines = []
        for g, attrs in self.groups:
            lines.append(f"group.{g} = " + ", ".join(attrs))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 4
    embed_dim: int = 96
    # (layer_count, merge_after) per stage: 12 layers, 3 merges.
    stage_layout: tuple[tuple[int, bool], ...] = ((2, True), (2, True), (6, True), (2, False))
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 4
    shift_size: int = 2
    mlp_ratio: float = 4.0
    branch_hidden: tuple[int, int] = (256, 256)
    dropout_rate: float = 0.5
    # 0 means "take the identity count from the training data".
    num_identities: int = 0
    bn_momentum: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def check(ok: bool, key: str, msg: str):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        check(self.image_size >= 1, "image_size", "must be positive")
        check(self.patch_size >= 1, "patch_size", "must be positive")
        check(self.image_size % self.patch_size == 0, "image_size",
              f"{self.image_size} is not divisible by patch_size {self.patch_size}")
        check(self.embed_dim >= 1, "embed_dim", "must be positive")
        check(len(self.stage_layout) >= 1, "stage_layout", "needs at least one stage")
        check(all(n >= 1 for n, _ in self.stage_layout), "stage_layout", "layer counts must be positive")
        check(len(self.num_heads) == len(self.stage_layout), "num_heads",
              f"expected {len(self.stage_layout)} entries (one per stage), got {len(self.num_heads)}")
        check(self.window_size >= 1, "window_size", "must be positive")
        check(0 <= self.shift_size < self.window_size, "shift_size",
              f"must satisfy 0 <= shift_size < window_size ({self.window_size})")
        check(self.mlp_ratio > 0, "mlp_ratio", "must be positive")
        check(len(self.branch_hidden) == 2 and all(h >= 1 for h in self.branch_hidden),
              "branch_hidden", "needs two positive sizes")
        check(0.0 <= self.dropout_rate < 1.0, "dropout_rate", "must lie in [0, 1)")
        check(self.num_identities >= 0, "num_identities", "must be non-negative")
        check(0.0 < self.bn_momentum <= 1.0, "bn_momentum", "must lie in (0, 1]")
        extent, dim = self.image_size // self.patch_size, self.embed_dim
        for s, ((_, merge), heads) in enumerate(zip(self.stage_layout, self.num_heads)):
            check(heads >= 1 and dim % heads == 0, "num_heads",
                  f"stage {s}: channel dim {dim} not divisible by {heads} heads")
            if merge:
                check(extent % 2 == 0, "stage_layout",
                      f"stage {s}: cannot merge an odd {extent}x{extent} token grid")
                extent, dim = extent // 2, dim * 2

    def stages(self) -> list[dict]:
        """Per-stage geometry: grid extent, channels, heads, effective window/shift.

        A grid no larger than the window is attended as a single window
        without shifting; otherwise a grid that the window does not divide is
        zero-padded and the padding is masked out of attention.
        """
        out = []
        extent, dim = self.image_size // self.patch_size, self.embed_dim
        for (layers, merge), heads in zip(self.stage_layout, self.num_heads):
            if extent <= self.window_size:
                window, shift = extent, 0
            else:
                window, shift = self.window_size, self.shift_size
            out.append(dict(extent=extent, dim=dim, heads=heads, layers=layers, merge=merge,
                            window=window, shift=shift, pad=(-extent) % window))
            if merge:
                extent, dim = extent // 2, dim * 2
        return out

    @property
    def final_extent(self) -> int:
        st = self.stages()[-1]
        return st["extent"] // 2 if st["merge"] else st["extent"]

    @property
    def final_dim(self) -> int:
        st = self.stages()[-1]
        return st["dim"] * 2 if st["merge"] else st["dim"]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.3
    lam: float = 5.0
    # False drops both identity terms (beta and the global branch): the
    # "without identity-constraint loss" ablation.
    identity_constraint: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha: {self.alpha} outside [0, 1]")
        if self.beta < 0:
            raise ConfigError(f"beta: {self.beta} must be >= 0")
        if self.lam < 0:
            raise ConfigError(f"lambda: {self.lam} must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    lr_decay_factor: float = 10.0
    lr_decay_epochs: int = 5
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 16
    seed: int = 42

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr: {self.base_lr} must be positive")
        if self.lr_decay_factor <= 0:
            raise ConfigError(f"lr_decay_factor: {self.lr_decay_factor} must be positive")
        if self.lr_decay_epochs < 1:
            raise ConfigError(f"lr_decay_epochs: {self.lr_decay_epochs} must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum: {self.momentum} outside [0, 1)")
        if self.epochs < 0:
            raise ConfigError(f"epochs: {self.epochs} must be >= 0")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size: {self.batch_size} must be >= 2 (pairwise losses)")
        if self.seed < 0:
            raise ConfigError(f"seed: {self.seed} must be non-negative")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay learning rate: divided by ``lr_decay_factor`` every ``lr_decay_epochs``."""
    return cfg.base_lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_epochs)


# -- config file ----------------------------------------------------------
def _int(v: str) -> int:
    return int(v)


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _layout(v: str) -> tuple[tuple[int, bool], ...]:
    out = []
    for item in v.split(","):
        item = item.strip()
        if not item:
            continue
        count, _, kind = item.partition(":")
        kind = kind.strip().lower() or "none"
        if kind not in ("merge", "none"):
            raise ValueError(f"stage kind must be 'merge' or 'none', got {kind!r}")
        out.append((int(count), kind == "merge"))
    return tuple(out)


_MODEL_KEYS = {
    "image_size": _int, "patch_size": _int, "embed_dim": _int, "stage_layout": _layout,
    "num_heads": _int_list, "window_size": _int, "shift_size": _int, "mlp_ratio": float,
    "branch_hidden": _int_list, "dropout_rate": float, "num_identities": _int,
    "bn_momentum": float, "init_std": float,
}
_TRAIN_KEYS = {
    "base_lr": float, "lr_decay_factor": float, "lr_decay_epochs": _int, "momentum": float,
    "epochs": _int, "batch_size": _int, "seed": _int,
}
_LOSS_KEYS = {"alpha": ("alpha", float), "beta": ("beta", float), "lambda": ("lam", float),
              "identity_constraint": ("identity_constraint", _bool)}


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    groups: AttributeGroupSpec = field(default_factory=AttributeGroupSpec.default)

    def as_tuple(self):
        return self.model, self.train, self.loss, self.groups


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse config text; unspecified keys keep the values of ``base`` (defaults)."""
    base = base or Config()
    model_kw: dict = {}
    train_kw: dict = {}
    loss_kw: dict = {}
    groups: list[tuple[str, list[str]]] = []
    universe: list[str] | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (s.strip() for s in line.partition("="))
        try:
            if key.startswith("group."):
                name = key[len("group."):]
                if not name:
                    raise ValueError("group name is empty")
                groups.append((name, [a.strip() for a in value.split(",") if a.strip()]))
            elif key == "attributes":
                universe = [a.strip() for a in value.split(",") if a.strip()]
            elif key in _MODEL_KEYS:
                model_kw[key] = _MODEL_KEYS[key](value)
            elif key in _TRAIN_KEYS:
                train_kw[key] = _TRAIN_KEYS[key](value)
            elif key in _LOSS_KEYS:
                attr, conv = _LOSS_KEYS[key]
                loss_kw[attr] = conv(value)
            else:
                raise ConfigError(f"{key}: unknown key (line {lineno})")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{key}: bad value {value!r} (line {lineno}): {exc}") from exc
    if "branch_hidden" in model_kw and len(model_kw["branch_hidden"]) == 1:
        model_kw["branch_hidden"] = model_kw["branch_hidden"] * 2
    model = replace(base.model, **model_kw)
    train = replace(base.train, **train_kw)
    loss = replace(base.loss, **loss_kw)
    if groups:
        if universe is None:
            universe = list(base.groups.attributes) if base.groups.num_attributes else list(CELEBA_ATTRIBUTES)
        spec = AttributeGroupSpec.build(groups, universe)
    elif universe is not None:
        raise ConfigError("attributes: given without any group.<name> lines")
    else:
        spec = base.groups
    return Config(model, train, loss, spec)


def load_config(path: str | Path | None, base: Config | None = None) -> Config:
    """Read and validate a config file; ``None`` or an empty file gives the defaults."""
    if path is None:
        return base or Config()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    return parse_config(text, base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: Config) -> str:
    """Render every key; ``parse_config(config_to_text(c)) == c``."""
    lines = ["# model"]
    for key in _MODEL_KEYS:
        v = getattr(cfg.model, key)
        if key == "stage_layout":
            text = ", ".join(f"{n}:{'merge' if m else 'none'}" for n, m in v)
        elif isinstance(v, tuple):
            text = ", ".join(str(x) for x in v)
        else:
            text = _fmt(v)
        lines.append(f"{key} = {text}")
    lines.append("# training")
    lines += [f"{key} = {_fmt(getattr(cfg.train, key))}" for key in _TRAIN_KEYS]
    lines.append("# loss")
    lines += [f"{key} = {_fmt(getattr(cfg.loss, attr))}" for key, (attr, _) in _LOSS_KEYS.items()]
    lines.append("# grouping")
    lines.append("attributes = " + ", ".join(cfg.groups.attributes))
    return "\n".join(lines) + "\n" + cfg.groups.to_text()


def config_keys() -> list[str]:
    return (list(_MODEL_KEYS) + list(_TRAIN_KEYS) + list(_LOSS_KEYS)
            + ["attributes", "group.<name>"])


# -- toy presets ----------------------------------------------------------
def toy_gradcheck_model(num_identities: int = 3) -> ModelConfig:
    """16x16 input, patch 4, embed 8, 2 heads, window 2, shift 1, 2 layers, 1 merge."""
    return ModelConfig(
        image_size=16, patch_size=4, embed_dim=8, stage_layout=((2, True),), num_heads=(2,),
        window_size=2, shift_size=1, mlp_ratio=2.0, branch_hidden=(6, 5), dropout_rate=0.25,
        num_identities=num_identities, init_std=0.3,
    )


def toy_overfit_config() -> Config:
    """Desk-scale training preset for 64x64 synthetic faces."""
    from .data import synth_group_spec

    model = ModelConfig(
        image_size=64, patch_size=4, embed_dim=16, stage_layout=((2, True), (2, False)),
        num_heads=(2, 4), window_size=4, shift_size=2, mlp_ratio=2.0, branch_hidden=(32, 32),
        dropout_rate=0.1,
    )
    train = TrainConfig(base_lr=3e-4, lr_decay_factor=10.0, lr_decay_epochs=200, momentum=0.9,
                        epochs=200, batch_size=16, seed=0)
    return Config(model, train, LossWeights(), synth_group_spec(8))

