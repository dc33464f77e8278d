import pytest
from hypothesis import given
from hypothesis import strategies as st

from transfa.config import (
    CELEBA_ATTRIBUTES, AttributeGroupSpec, Config, LossWeights, ModelConfig, TrainConfig, canonical_name,
    config_to_text, load_config, lr_at, parse_config, toy_overfit_config,
)
from transfa.errors import ConfigError


def test_default_grouping_matches_table():
    spec = AttributeGroupSpec.default()
    assert spec.group_names == ("Global", "Around-head", "Eyes", "Nose", "Mouth", "Cheeks", "Neck")
    assert spec.sizes == (9, 10, 5, 2, 9, 3, 2)
    assert spec.num_attributes == 40
    assert sorted(spec.attributes) == sorted(canonical_name(a) for a in CELEBA_ATTRIBUTES)
    assert len(set(spec.attributes)) == 40


def test_canonical_names():
    assert canonical_name("5 O'Clock Shadow") == canonical_name("5_o_Clock_Shadow") == "5_o_clock_shadow"
    assert canonical_name("Wear Hat") == "wearing_hat"
    assert AttributeGroupSpec.default().display("wearing_hat") == "Wear Hat"


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    model, train, loss, groups = cfg.as_tuple()
    assert model == ModelConfig() and train == TrainConfig() and loss == LossWeights()
    assert groups.num_groups == 7 and groups.num_attributes == 40
    assert (loss.alpha, loss.beta, loss.lam) == (0.1, 0.3, 5.0)
    assert (train.base_lr, train.lr_decay_factor, train.lr_decay_epochs, train.momentum) == (0.01, 10, 5, 0.9)
    assert (model.patch_size, model.embed_dim, model.window_size, model.shift_size) == (4, 96, 4, 2)
    assert sum(n for n, _ in model.stage_layout) == 12


def test_grouping_missing_attribute():
    default = AttributeGroupSpec.default()
    lines = []
    for g, attrs in default.groups:
        kept = [a for a in attrs if a != "big_nose"]
        lines.append(f"group.{g} = " + ", ".join(kept))
    with pytest.raises(ConfigError, match="attribute not assigned"):
        parse_config("\n".join(lines))


def test_grouping_duplicate_and_unknown():
    with pytest.raises(ConfigError, match="already assigned"):
        AttributeGroupSpec.build([("a", ["x", "y"]), ("b", ["y"])], ["x", "y"])
    with pytest.raises(ConfigError, match="unknown attribute"):
        AttributeGroupSpec.build([("a", ["x", "z"])], ["x"])


def test_range_and_unknown_key_errors():
    with pytest.raises(ConfigError, match="alpha"):
        parse_config("alpha = 1.5")
    with pytest.raises(ConfigError, match="colour"):
        parse_config("colour = red")
    with pytest.raises(ConfigError, match="shift_size"):
        parse_config("shift_size = 4")
    with pytest.raises(ConfigError, match="image_size"):
        parse_config("image_size = 30")


def test_parse_overrides_and_comments():
    cfg = parse_config("# comment\nepochs = 3  # inline\nlambda = 2\nstage_layout = 2:merge, 2:none\nnum_heads = 2, 4\n")
    assert cfg.train.epochs == 3 and cfg.loss.lam == 2.0
    assert cfg.model.stage_layout == ((2, True), (2, False))


@pytest.mark.parametrize("epoch,lr", [(0, 0.01), (4, 0.01), (5, 0.001), (10, 0.0001), (12, 0.0001)])
def test_lr_schedule(epoch, lr):
    assert lr_at(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


@given(st.integers(0, 200))
def test_lr_non_increasing_and_piecewise_constant(e):
    cfg = TrainConfig()
    assert lr_at(e + 1, cfg) <= lr_at(e, cfg)
    assert lr_at(e, cfg) == lr_at(5 * (e // 5), cfg)


def test_stage_geometry_defaults():
    stages = ModelConfig().stages()
    assert [s["extent"] for s in stages] == [56, 28, 14, 7]
    assert [s["dim"] for s in stages] == [96, 192, 384, 768]
    last = stages[-1]
    # 7x7 grid with window 4: padded to 8 and masked
    assert last["pad"] == 1 and last["window"] == 4
    assert ModelConfig().final_dim == 768 and ModelConfig().final_extent == 7


def test_config_text_round_trip():
    for cfg in (Config(), toy_overfit_config()):
        assert parse_config(config_to_text(cfg)) == cfg
