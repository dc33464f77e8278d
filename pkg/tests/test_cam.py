import numpy as np
import pytest
from PIL import Image

from transfa.cam import (
    AttentionMap,
    cluster_agreement,
    export_map,
    grad_cam,
    group_suggest,
    jet,
    map_similarity,
    mean_maps,
    overlay,
    raw_maps,
    upsample,
)
from transfa.config import toy_gradcheck_model
from transfa.data import synth_dataset, synth_group_spec
from transfa.errors import ContractError
from transfa.model import TransFA


@pytest.fixture
def model():
    m = TransFA.create(toy_gradcheck_model(3), synth_group_spec(4), seed=3)
    rng = np.random.default_rng(0)
    for p in m.params.values():
        if not p.data.any():
            p.data = rng.normal(0, 0.1, p.shape)
    return m


def image(seed=0, size=16):
    return np.random.default_rng(seed).uniform(size=(size, size, 3))


def test_map_shapes_and_range(model):
    amap = grad_cam(model, image(), "region1_glyph0", source="x.png")
    assert amap.raw.shape == (model.cfg.final_extent,) * 2
    assert amap.upsampled.shape == (16, 16)
    assert amap.raw.min() >= 0
    assert amap.upsampled.max() == pytest.approx(1.0) or not amap.raw.any()
    assert amap.attribute == "region1_glyph0" and amap.source == "x.png"


def test_constant_head_gives_zero_map(model):
    model.params["heads.region1.fc3.weight"].data[:] = 0.0
    amap = grad_cam(model, image(), "region1_glyph0")
    assert not amap.raw.any()
    assert not amap.upsampled.any()


def test_map_matches_weighted_channel_sum(model):
    from transfa import autodiff as ad

    x = np.stack([np.random.default_rng(1).uniform(-1, 1, (3, 16, 16))])
    fwd = model.forward(x)
    col = model.spec.attribute_index["region0_glyph0"]
    (g,) = ad.grad(fwd.bundle.logits[:, col].sum(), [fwd.final_grid])
    grid = fwd.final_grid.data[0]
    expected = np.zeros(grid.shape[:2])
    for c in range(grid.shape[-1]):
        expected += g[0, :, :, c].mean() * grid[:, :, c]
    np.testing.assert_allclose(raw_maps(model, x, "region0_glyph0")[0], np.maximum(expected, 0), atol=1e-14)


def test_single_channel_uniform_gradient():
    # one channel, gradient 1 everywhere: the map is that channel's ReLU
    grid = np.array([[0.5, -1.0], [2.0, 0.0]])
    weight = np.ones((2, 2)).mean()
    raw = np.maximum(weight * grid, 0)
    np.testing.assert_array_equal(raw, [[0.5, 0.0], [2.0, 0.0]])
    up = upsample(raw, 4)
    assert up.max() == 1.0 and up[3, 0] == 1.0 and up[0, 0] == 0.25


def test_positive_scaling_invariance(model):
    base = grad_cam(model, image(2), "region0_glyph1")
    model.params["heads.region0.fc3.weight"].data *= 3.5
    model.params["heads.region0.fc3.bias"].data *= 3.5
    scaled = grad_cam(model, image(2), "region0_glyph1")
    np.testing.assert_allclose(scaled.raw, 3.5 * base.raw, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(scaled.upsampled, base.upsampled, atol=1e-9)


def test_deterministic(model):
    a = grad_cam(model, image(4), "region1_glyph1")
    b = grad_cam(model, image(4), "region1_glyph1")
    assert a.raw.tobytes() == b.raw.tobytes()


def test_unknown_attribute(model):
    with pytest.raises(KeyError):
        grad_cam(model, image(), "Wings")


def test_batch_maps_equal_single_maps(model):
    x = np.random.default_rng(5).uniform(-1, 1, (3, 3, 16, 16))
    batch = raw_maps(model, x, "region0_glyph0")
    for i in range(3):
        np.testing.assert_allclose(batch[i], raw_maps(model, x[i:i + 1], "region0_glyph0")[0], atol=1e-14)


def test_mean_maps_average_positives(model):
    manifest = synth_dataset(3, 2, 4, seed=0, image_size=16)
    maps = mean_maps(model, manifest, per_attribute=64)
    assert set(maps) == set(model.spec.attributes)
    col = manifest.attribute_matrix(model.spec)[:, model.spec.attribute_index["region0_glyph0"]]
    pos = np.flatnonzero(col > 0.5)
    x = np.stack([manifest.preprocessed(int(i), 16) for i in pos])
    np.testing.assert_allclose(maps["region0_glyph0"].raw, raw_maps(model, x, "region0_glyph0").mean(0), atol=1e-14)


# -- grouping -----------------------------------------------------------------
def test_identical_maps_form_one_cluster():
    m = np.random.default_rng(0).uniform(size=(4, 4))
    maps = {f"a{i}": m for i in range(5)}
    for t in (0.1, 0.5, 0.9):
        assert len(group_suggest(maps, threshold=t).clusters) == 1


@pytest.mark.parametrize("threshold", [0.01, 0.3, 0.5, 0.7, 0.99])
def test_disjoint_families_form_two_clusters(threshold):
    top, bottom = np.zeros((4, 4)), np.zeros((4, 4))
    top[:2] = np.random.default_rng(1).uniform(0.5, 1.0, (2, 4))
    bottom[2:] = np.random.default_rng(2).uniform(0.5, 1.0, (2, 4))
    maps = {}
    for i, scale in enumerate((1.0, 0.3, 7.0)):
        maps[f"top{i}"] = scale * top
        maps[f"bottom{i}"] = scale * bottom
    p = group_suggest(maps, threshold=threshold)
    assert sorted(map(sorted, p.clusters)) == [["bottom0", "bottom1", "bottom2"], ["top0", "top1", "top2"]]


def test_k_clusters_and_proposal_text():
    maps = {"a": np.eye(3), "b": np.eye(3) * 2, "c": np.ones((3, 3)) - np.eye(3)}
    p = group_suggest(maps, k=2)
    assert sorted(map(sorted, p.clusters)) == [["a", "b"], ["c"]]
    text = p.to_text()
    assert text.startswith("#") and "cluster1 = " in text
    assert p.to_spec().num_attributes == 3


def test_group_suggest_needs_two_attributes():
    with pytest.raises(ContractError):
        group_suggest({"a": np.ones((2, 2))})


def test_similarity_properties():
    maps = [np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2)]
    s = map_similarity(maps)
    np.testing.assert_array_equal(np.diag(s), 1.0)
    assert s[0, 1] == 1.0 and s[0, 2] == 0.0
    np.testing.assert_array_equal(s, s.T)


def test_cluster_agreement():
    assert cluster_agreement([1, 1, 2, 2], [0, 0, 1, 1]) == 1.0
    assert cluster_agreement([1, 1, 1, 1], [0, 0, 1, 1]) == 0.5
    assert cluster_agreement([0, 1, 2, 3], [0, 0, 1, 1]) == 0.5
    with pytest.raises(ContractError):
        cluster_agreement([0], [0, 1])


# -- export -------------------------------------------------------------------
def test_zero_map_exports_black(tmp_path):
    amap = AttentionMap(np.zeros((2, 2)), np.zeros((8, 8)), "a")
    gray, over = export_map(amap, tmp_path / "zero")
    assert gray.suffix == ".pgm" and over.name == "zero_overlay.ppm"
    assert not np.asarray(Image.open(gray)).any()


def test_export_round_trip_within_quantisation(tmp_path):
    up = np.random.default_rng(3).uniform(size=(12, 12))
    img = np.random.default_rng(4).uniform(size=(12, 12, 3))
    amap = AttentionMap(up[:3, :3], up, "a", image=img)
    gray, over = export_map(amap, tmp_path / "m.pgm")
    back = np.asarray(Image.open(gray), dtype=np.float64) / 255.0
    assert np.abs(back - up).max() <= 1 / 255
    colour = np.asarray(Image.open(over), dtype=np.float64) / 255.0
    for r, c in ((0, 0), (5, 7), (11, 3)):
        expected = 0.5 * jet(up[r, c]) + 0.5 * img[r, c]
        assert np.abs(colour[r, c] - expected).max() <= 1 / 255
    np.testing.assert_allclose(overlay(amap)[5, 7], 0.5 * jet(up[5, 7]) + 0.5 * img[5, 7])


def test_jet_endpoints():
    np.testing.assert_allclose(jet(0.0), [0.0, 0.0, 0.5])
    np.testing.assert_allclose(jet(0.5), [0.5, 1.0, 0.5])
    np.testing.assert_allclose(jet(1.0), [0.5, 0.0, 0.0])
