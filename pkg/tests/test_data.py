import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from changerel.data import (
    AUGMENT_OPS, BiTemporalSample, DatasetManifest, ManifestEntry, augment, load_sample,
    read_manifest, scan_dataset, synth_dataset, tile_pair, write_manifest,
)
from changerel.errors import DegenerateInputError, GeometryError, ManifestError, ParameterError
from changerel.metrics import confusion


def _sample(h, w, seed=0, sid="s"):
    rng = np.random.default_rng(seed)
    return BiTemporalSample(rng.random((h, w, 3), dtype=np.float32), rng.random((h, w, 3), dtype=np.float32),
                            (rng.random((h, w)) > 0.5).astype(np.uint8), id=sid)


def _write_entry(root, name, pre, post, label):
    for sub, arr in (("A", pre), ("B", post), ("label", label)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(root / sub / name)
    return ManifestEntry(root / "A" / name, root / "B" / name, root / "label" / name)


def test_load_sample_shapes_and_scaling(tmp_path):
    rng = np.random.default_rng(0)
    pre = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    post = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    label = np.zeros((256, 256), np.uint8)
    label[:10] = 255
    s = load_sample(_write_entry(tmp_path, "x.png", pre, post, label))
    assert s.image_pre.shape == (256, 256, 3) and s.image_post.shape == (256, 256, 3)
    assert s.label.shape == (256, 256)
    assert s.image_pre.min() >= 0 and s.image_pre.max() <= 1
    np.testing.assert_array_equal(np.rint(s.image_pre * 255).astype(np.uint8), pre)
    assert s.id == "x"


def test_label_binarization_over_all_raw_values(tmp_path):
    raw = np.arange(256, dtype=np.uint8).reshape(16, 16)
    img = np.zeros((16, 16, 3), np.uint8)
    s = load_sample(_write_entry(tmp_path, "all.png", img, img, raw))
    # oracle: enumerate every raw value against "strictly above 127"
    expected = np.array([1 if v >= 128 else 0 for v in range(256)], np.uint8).reshape(16, 16)
    np.testing.assert_array_equal(s.label, expected)
    assert s.label.flat[255] == 1 and s.label.flat[0] == 0 and s.label.flat[128] == 1 and s.label.flat[127] == 0


def test_load_sample_errors(tmp_path):
    img = np.zeros((32, 32, 3), np.uint8)
    entry = _write_entry(tmp_path, "a.png", img, img, np.zeros((32, 32), np.uint8))
    missing = entry._replace(post=tmp_path / "B" / "nope.png")
    with pytest.raises(ManifestError, match="nope.png"):
        load_sample(missing)
    bad = _write_entry(tmp_path, "b.png", img, np.zeros((16, 16, 3), np.uint8), np.zeros((32, 32), np.uint8))
    with pytest.raises(GeometryError, match="'b'"):
        load_sample(bad)


def test_sample_invariants_enforced():
    with pytest.raises(GeometryError):
        BiTemporalSample(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4), np.uint8))


@pytest.mark.parametrize("side,tile,count", [(1024, 256, 16), (256, 256, 1), (300, 256, 1), (600, 128, 16)])
def test_tile_counts(side, tile, count):
    tiles = tile_pair(_sample(side, side), tile)
    assert len(tiles) == (side // tile) ** 2 == count
    assert all(t.shape == (tile, tile) for t in tiles)


def test_tile_identity_and_partition():
    s = _sample(256, 256)
    (only,) = tile_pair(s, 256)
    np.testing.assert_array_equal(only.image_pre, s.image_pre)
    np.testing.assert_array_equal(only.label, s.label)

    s = _sample(300, 520, seed=1)
    tiles = tile_pair(s, 128)
    rebuilt = np.full((256, 512), -1, dtype=np.int64)
    for k, t in enumerate(tiles):
        r, c = divmod(k, 4)  # row-major
        block = rebuilt[r * 128:(r + 1) * 128, c * 128:(c + 1) * 128]
        assert (block == -1).all()  # disjoint
        block[...] = t.label
    np.testing.assert_array_equal(rebuilt, s.label[:256, :512])


def test_tile_too_small():
    with pytest.raises(DegenerateInputError):
        tile_pair(_sample(100, 300), 128)


def test_augment_identity_and_involutions():
    s = _sample(32, 32)
    same = augment(s, "identity")
    assert same.image_pre.tobytes() == s.image_pre.tobytes()
    twice = augment(augment(s, "flip_h"), "flip_h")
    np.testing.assert_array_equal(twice.image_post, s.image_post)


def test_rot90_four_times_matches_matrix_oracle():
    rot = np.array([[0, -1], [1, 0]])
    assert (np.linalg.matrix_power(rot, 4) == np.eye(2)).all()
    s = _sample(16, 16, seed=2)
    r = s
    for _ in range(4):
        r = augment(r, "rot90")
    for a, b in ((r.image_pre, s.image_pre), (r.image_post, s.image_post), (r.label, s.label)):
        np.testing.assert_array_equal(a, b)
    # single rotation moves pixel (y, x) to (W-1-x, y) for a counter-clockwise quarter turn
    r1 = augment(s, "rot90")
    y, x = 3, 5
    assert r1.label[16 - 1 - x, y] == s.label[y, x]


def test_augment_applies_same_transform_to_all_parts():
    s = _sample(8, 8, seed=3)
    for op in AUGMENT_OPS:
        a = augment(s, op)
        marker = BiTemporalSample(s.image_pre, s.image_pre, (s.image_pre[..., 0] > 0.5).astype(np.uint8))
        m = augment(marker, op)
        np.testing.assert_array_equal(m.image_pre, m.image_post)
        np.testing.assert_array_equal(m.label, (m.image_pre[..., 0] > 0.5).astype(np.uint8))
        assert a.shape == s.shape


def test_augment_errors():
    s = _sample(8, 12)
    with pytest.raises(GeometryError):
        augment(s, "rot90")
    with pytest.raises(GeometryError):
        augment(s, "rot270")
    assert augment(s, "rot180").shape == (8, 12)
    with pytest.raises(ParameterError):
        augment(s, "shear")


@settings(max_examples=30, deadline=None)
@given(op=st.sampled_from(AUGMENT_OPS), seed=st.integers(0, 10_000))
def test_augmentation_preserves_confusion_counts(op, seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((12, 12)).astype(np.float32)
    label = (rng.random((12, 12)) > 0.6).astype(np.uint8)
    s = BiTemporalSample(np.repeat(pred[..., None], 3, -1), np.zeros((12, 12, 3), np.float32), label)
    a = augment(s, op)
    assert confusion(a.image_pre[..., 0], a.label) == confusion(pred, label)


def test_manifest_round_trip_and_layout(tmp_path):
    m = synth_dataset(5, 3, 64, 0.2, tmp_path / "d", "test")
    text = (tmp_path / "d" / "test.txt").read_text()
    assert text.count("\n") == 3 and text.splitlines()[0].split("\t")[0] == "A/test_00000.png"
    back = read_manifest(tmp_path / "d" / "test.txt")
    assert back.split == "test" and len(back) == 3
    assert [e.id for e in back.entries] == [e.id for e in m.entries]
    scanned = scan_dataset(tmp_path / "d", "test")
    assert [e.id for e in scanned.entries] == [e.id for e in m.entries]
    back.validate()
    out = write_manifest(back, tmp_path / "copy" / "test.txt")
    assert len(read_manifest(out)) == 3


def test_manifest_missing_file(tmp_path):
    (tmp_path / "m.txt").write_text("A/x.png\tB/x.png\tlabel/x.png\n")
    with pytest.raises(ManifestError, match="x.png"):
        read_manifest(tmp_path / "m.txt")
    with pytest.raises(ManifestError):
        DatasetManifest(tmp_path, "holdout")


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_is_deterministic(tmp_path):
    synth_dataset(7, 4, 64, 0.1, tmp_path / "a")
    synth_dataset(7, 4, 64, 0.1, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    synth_dataset(8, 4, 64, 0.1, tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_synth_near_zero_rate_gives_empty_labels(tmp_path):
    m = synth_dataset(1, 5, 64, 1e-9, tmp_path)
    for e in m.entries:
        assert load_sample(e).label.sum() == 0


def test_synth_positive_fraction_tracks_rate(tmp_path):
    from changerel.data import synth_sample
    rate, size = 0.1, 64
    for seed in range(100):
        _, _, label = synth_sample(np.random.default_rng([seed, 0]), size, rate)
        frac = np.count_nonzero(label) / label.size
        assert 0.5 * rate <= frac <= 1.5 * rate, (seed, frac)


def test_synth_labels_only_mark_rectangles(tmp_path):
    m = synth_dataset(9, 4, 64, 0.15, tmp_path)
    for e in m.entries:
        s = load_sample(e)
        # every labelled pixel sits in an axis-aligned box that differs between dates
        assert s.label.sum() > 0
        diff = np.abs(s.image_pre - s.image_post).max(-1)
        assert np.median(diff[s.label == 1]) > np.median(diff[s.label == 0])


def test_synth_preconditions(tmp_path):
    with pytest.raises(ParameterError):
        synth_dataset(0, 1, 32, 0.1, tmp_path)
    with pytest.raises(ParameterError):
        synth_dataset(0, 1, 64, 1.0, tmp_path)
