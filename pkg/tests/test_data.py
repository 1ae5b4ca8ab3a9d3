import struct

import numpy as np
import pytest

from tokenrate.data import Recipe, class_templates, gen_dataset, ingest_idx, part_pairs, write_idx


def small_recipe(**kw):
    base = dict(count=60, image_size=8, patch_size=4, classes=3, fg_patches=1)
    base.update(kw)
    return Recipe(**base)


def test_fixed_seed_is_byte_identical():
    a = gen_dataset(small_recipe(), seed=4)
    b = gen_dataset(small_recipe(), seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = gen_dataset(small_recipe(), seed=5)
    assert a.images.tobytes() != c.images.tobytes()


def test_shape_range_and_balance():
    ds = gen_dataset(small_recipe(count=61), seed=0)
    assert ds.images.shape == (61, 8, 8, 3)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.all(np.round(ds.images * 255) == ds.images * 255)
    counts = np.bincount(ds.labels)
    assert counts.max() - counts.min() <= 1
    assert ds.fg_mask.sum(axis=1).tolist() == [1] * 61


def test_noise_free_foreground_is_linearly_separable():
    r = small_recipe(count=120, noise=0.0, fg_patches=2)
    ds = gen_dataset(r, seed=3)
    g, p = r.grid, r.patch_size
    tiles = ds.images.reshape(len(ds), g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(len(ds), g * g, -1)
    feats = np.stack([tiles[i][ds.fg_mask[i]].mean(axis=0) for i in range(len(ds))])
    x = np.hstack([feats, np.ones((len(ds), 1))])
    y = np.eye(r.classes)[ds.labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert np.mean((x @ w).argmax(axis=1) == ds.labels) == 1.0


def test_foreground_carries_the_template():
    r = small_recipe(noise=0.0)
    ds = gen_dataset(r, seed=1)
    t = class_templates(r)
    i = 0
    k = int(np.flatnonzero(ds.fg_mask[i])[0])
    row, col = divmod(k, r.grid)
    patch = ds.images[i, row * 4 : row * 4 + 4, col * 4 : col * 4 + 4]
    np.testing.assert_allclose(patch, np.round(t[ds.labels[i]] * 255) / 255)


def test_part_pair_classes():
    assert part_pairs(4).tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]
    ds = gen_dataset(small_recipe(classes=6, parts=4, fg_patches=2), seed=0)
    assert set(ds.labels.tolist()) == set(range(6))
    with pytest.raises(ValueError):
        small_recipe(classes=5, parts=4)
    with pytest.raises(ValueError):
        small_recipe(classes=6, parts=4, fg_patches=3)


def test_inconsistent_recipe_rejected():
    with pytest.raises(ValueError):
        Recipe(image_size=10, patch_size=4)
    with pytest.raises(ValueError):
        Recipe(image_size=8, patch_size=4, fg_patches=5)


def test_fraction_is_balanced_subset():
    ds = gen_dataset(small_recipe(count=96), seed=0)
    sub = ds.fraction(16)
    assert len(sub) == 6
    assert np.bincount(sub.labels).tolist() == [2, 2, 2]


# --- IDX ---------------------------------------------------------------------------


def test_idx_round_trip(tmp_path):
    ds = gen_dataset(small_recipe(), seed=2)
    write_idx(ds, tmp_path / "i.idx", tmp_path / "l.idx")
    back = ingest_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert (tmp_path / "i.idx").read_bytes()[:4] == bytes([0, 0, 8, 4])


def test_single_grayscale_image(tmp_path):
    raw = struct.pack(">IIII", 0x803, 1, 28, 28) + bytes(range(256))[:28] * 28
    (tmp_path / "one.idx").write_bytes(raw)
    ds = ingest_idx(tmp_path / "one.idx")
    assert len(ds) == 1 and ds.images.shape == (1, 28, 28, 1)
    assert ds.images.max() == 27 / 255


def test_header_only_is_truncated(tmp_path):
    (tmp_path / "h.idx").write_bytes(struct.pack(">IIII", 0x803, 1, 28, 28))
    with pytest.raises(ValueError, match="truncated at offset 16"):
        ingest_idx(tmp_path / "h.idx")


def test_bad_magic_and_label_mismatch(tmp_path):
    (tmp_path / "b.idx").write_bytes(struct.pack(">IIII", 0x0D03, 1, 2, 2) + bytes(4))
    with pytest.raises(ValueError, match="magic"):
        ingest_idx(tmp_path / "b.idx")
    (tmp_path / "i.idx").write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(8))
    (tmp_path / "l.idx").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(ValueError, match="labels"):
        ingest_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    (tmp_path / "tiny.idx").write_bytes(b"\x00\x00")
    with pytest.raises(ValueError, match="truncated at offset 2"):
        ingest_idx(tmp_path / "tiny.idx")
