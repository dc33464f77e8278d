import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transfa.config import CELEBA_ATTRIBUTES, AttributeGroupSpec
from transfa.data import (
    batch_indices, batches, load_dataset, make_batch, parse_attribute_file, parse_identity_file,
    parse_prediction_file, preprocess, resize_bilinear, save_dataset, synth_dataset, synth_group_spec,
)
from transfa.errors import ContractError, ParseError


def _attr_file(path: Path, rows, count=None):
    lines = [str(len(rows) if count is None else count), " ".join(CELEBA_ATTRIBUTES)]
    lines += [f"{name} " + " ".join(str(v) for v in vals) for name, vals in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_attribute_file_mapping(tmp_path):
    vals = [1, -1] + [1] * 38
    names, rows = parse_attribute_file(_attr_file(tmp_path / "a.txt", [("000001.jpg", vals)]))
    assert names == CELEBA_ATTRIBUTES
    assert rows[0][0] == "000001.jpg"
    assert rows[0][1][0] == 1 and rows[0][1][1] == 0


def test_attribute_file_errors(tmp_path):
    ok = [1] * 40
    with pytest.raises(ParseError, match="row count"):
        parse_attribute_file(_attr_file(tmp_path / "a.txt", [("x.jpg", ok)], count=2))
    with pytest.raises(ParseError, match=r"b.txt:3:"):
        parse_attribute_file(_attr_file(tmp_path / "b.txt", [("x.jpg", [0] + ok[1:])]))
    with pytest.raises(ParseError, match=r"c.txt:3:"):
        parse_attribute_file(_attr_file(tmp_path / "c.txt", [("x.jpg", ok[:39])]))


@pytest.mark.skipif(not os.environ.get("CELEBA_ATTR_FILE"), reason="CelebA annotation file not available")
def test_full_celeba_file():
    names, rows = parse_attribute_file(os.environ["CELEBA_ATTR_FILE"])
    assert len(names) == 40 and len(rows) == 202599


def test_identity_file(tmp_path):
    p = tmp_path / "id.txt"
    p.write_text("a.jpg 7\nb.jpg 7\nc.jpg 9\n")
    ids = parse_identity_file(p)
    assert ids == {"a.jpg": 0, "b.jpg": 0, "c.jpg": 1}
    assert len(set(ids.values())) == 2
    p.write_text("")
    assert parse_identity_file(p) == {}
    p.write_text("a.jpg 1\na.jpg 2\n")
    with pytest.raises(ParseError, match="duplicate"):
        parse_identity_file(p)
    p.write_text("a.jpg\n")
    with pytest.raises(ParseError):
        parse_identity_file(p)


def test_prediction_file_reads_probabilities(tmp_path):
    p = tmp_path / "pred.txt"
    p.write_text("1\na b\nx.jpg 0.25 -1\n")
    names, rows = parse_prediction_file(p)
    assert names == ("a", "b")
    assert np.allclose(rows[0][1], [0.25, 0.0])


def test_preprocess_constants():
    assert np.array_equal(preprocess(np.full((5, 7, 3), 0.5), 8), np.zeros((3, 8, 8)))
    assert np.array_equal(preprocess(np.ones((5, 7, 3)), 8), np.ones((3, 8, 8)))
    with pytest.raises(ContractError):
        preprocess(np.zeros((0, 4, 3)), 8)


def test_checkerboard_bilinear_interior():
    board = np.array([[1.0, 0.0], [0.0, 1.0]])
    img = np.repeat(board[:, :, None], 3, axis=2)
    out = preprocess(img, 4)
    # corner-aligned sampling at i/3: (1,1) -> 4/9 + 1/9, (1,2) -> 2/9 + 2/9
    hand = np.array([[5 / 9, 4 / 9], [4 / 9, 5 / 9]])
    for c in range(3):
        assert np.allclose(out[c, 1:3, 1:3], 2 * hand - 1, atol=1e-15)
    assert np.allclose(out[0, 1:3, 1:3], [[1 / 9, -1 / 9], [-1 / 9, 1 / 9]], atol=1e-15)


@given(st.integers(1, 6), st.integers(1, 6))
def test_resize_reproduces_corners(h, w):
    img = np.arange(h * w, dtype=float).reshape(h, w)
    out = resize_bilinear(img, 9, 9)
    assert out[0, 0] == img[0, 0] and out[-1, -1] == img[-1, -1]
    assert out.min() >= img.min() and out.max() <= img.max()


def test_batch_sizes():
    assert [len(b) for b in batch_indices(10, 4, 0)] == [4, 4, 2]
    assert [len(b) for b in batch_indices(5, 4, 0)] == [4]
    first = np.concatenate(batch_indices(10, 4, 3))
    assert sorted(first) == list(range(10))
    assert np.array_equal(first, np.concatenate(batch_indices(10, 4, 3)))


def test_batches_stream_shapes():
    man = synth_dataset(2, 3, 4, seed=0, image_size=16)
    spec = synth_group_spec(4)
    got = list(batches(man, 4, 0, image_size=16, spec=spec))
    assert [b.images.shape for b in got] == [(4, 3, 16, 16), (2, 3, 16, 16)]
    assert got[0].attributes.shape == (4, 4) and got[0].identities.shape == (4,)


def test_synth_is_deterministic():
    a, b = synth_dataset(4, 8, 8, seed=1), synth_dataset(4, 8, 8, seed=1)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.attributes, y.attributes)
               for x, y in zip(a.samples, b.samples))
    c = synth_dataset(4, 8, 8, seed=2)
    assert not np.array_equal(a.samples[0].image, c.samples[0].image)


def test_synth_same_identity_agreement():
    man = synth_dataset(6, 10, 40, seed=3)
    y, ids = man.attribute_matrix(), man.identities
    for ident in range(6):
        rows = y[ids == ident]
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                assert np.mean(rows[i] == rows[j]) >= 0.9


def test_synth_linear_probe_beats_chance():
    from sklearn.linear_model import LogisticRegression

    man = synth_dataset(16, 4, 8, seed=5, image_size=32, test_per_identity=2)
    x = np.stack([s.image.ravel() for s in man.samples])
    y = man.attribute_matrix()
    tr, te = man.indices("train"), man.indices("test")
    for a in range(y.shape[1]):
        probe = LogisticRegression(max_iter=2000).fit(x[tr], y[tr, a])
        assert probe.score(x[te], y[te, a]) > 0.6


def test_save_load_round_trip(tmp_path):
    man = synth_dataset(3, 2, 6, seed=4, image_size=16, test_per_identity=1)
    save_dataset(man, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.attribute_names == man.attribute_names
    assert back.identity_count == 3 and back.splits == man.splits
    assert np.array_equal(back.attribute_matrix(), man.attribute_matrix())
    for s, t in zip(man.samples, back.samples):
        assert np.abs(s.image - t.image).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "ds" / "groups.cfg").exists()


def test_manifest_column_order_follows_grouping():
    man = synth_dataset(2, 2, 4, seed=0, image_size=8)
    spec = AttributeGroupSpec.build([("b", ["region1_glyph0"]), ("a", ["region0_glyph0", "region0_glyph1",
                                                                       "region1_glyph1"])])
    assert list(man.column_order(spec)) == [1, 0, 2, 3]
    bad = AttributeGroupSpec.build([("x", ["nope"])])
    with pytest.raises(ContractError):
        make_batch(man, [0, 1], 8, bad)
