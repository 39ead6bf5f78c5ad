from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relaynet import data
from relaynet.data import AugmentConfig, BScan, DataError, PhantomSpec
from relaynet.loss import WeightConfig
from relaynet.tensor import FormatError, write_rtn1


def components(mask):
    seen = np.zeros_like(mask, bool)
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        queue = deque([start])
        seen[start] = True
        while queue:
            i, j = queue.popleft()
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < mask.shape[0] and 0 <= nj < mask.shape[1] and mask[ni, nj] and not seen[ni, nj]:
                    seen[ni, nj] = True
                    queue.append((ni, nj))
    return count


def scan(h=16, w=740, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return BScan(rng.random((h, w)).astype(np.float32), rng.integers(0, 10, (h, w)), **kw)


# ---------------------------------------------------------------- slicing

def test_slice_count_and_remainder():
    slices = data.slice_bscan(scan(), 64)
    assert len(slices) == 11
    assert 740 - 11 * 64 == 36


def test_slice_full_width_identity():
    s = scan(w=64)
    (img, lab), = data.slice_bscan(s, 64)
    assert np.array_equal(img, s.image[0, 0]) and np.array_equal(lab, s.labels)


def test_slices_reassemble():
    s = scan()
    parts = data.slice_bscan(s, 64)
    assert np.array_equal(np.concatenate([p[0] for p in parts], axis=1), s.image[0, 0, :, :704])
    assert np.array_equal(np.concatenate([p[1] for p in parts], axis=1), s.labels[:, :704])


# ----------------------------------------------------------- augmentation

def test_forced_flip_twice_is_identity(rng):
    a = rng.random((8, 6))
    once = data.transform_geometry(a, True, 0, 0)
    assert np.array_equal(data.transform_geometry(once, True, 0, 0), a)


def test_no_transform_is_identity(rng):
    a = rng.random((8, 6))
    assert np.array_equal(data.transform_geometry(a, False, 0, 0), a)


def test_flip_preserves_label_histogram(rng):
    lab = rng.integers(0, 10, (8, 6))
    flipped = data.transform_geometry(lab, True, 0, 0)
    assert np.array_equal(np.bincount(flipped.ravel(), minlength=10), np.bincount(lab.ravel(), minlength=10))


@given(st.integers(0, 2 ** 32 - 1))
def test_augment_moves_image_and_labels_together(seed):
    h, w = 24, 16
    # encode the coordinate of each pixel so the transform can be read back
    coords = (np.arange(h)[:, None] * w + np.arange(w)[None, :]).astype(np.int64) + 100
    img, lab = data.augment(coords.astype(np.float64), coords, seed, AugmentConfig(0.5, 5, 3))
    inside = lab >= 100
    assert np.array_equal(img[inside], lab[inside].astype(np.float64))
    assert np.all(np.isin(lab[~inside], [data.RAR, data.RBR]))
    assert np.all(img[~inside] == 0)


def test_augment_fill_respects_anatomy():
    lab = np.full((10, 4), data.ILM)
    out = data.transform_geometry(lab, False, 3, 0, data.RAR, data.RBR)
    assert np.all(out[:3] == data.RAR) and np.all(out[3:] == data.ILM)
    out = data.transform_geometry(lab, False, -2, 0, data.RAR, data.RBR)
    assert np.all(out[-2:] == data.RBR)


# --------------------------------------------------------------- batching

def test_batch_counts_55_scans_of_50():
    scans = [scan(h=8, seed=i) for i in range(55)]
    sizes = [len(b) for b in data.make_batches(scans, 64, 50, augmentation=False)]
    assert sizes == [50] * 12 + [5]
    assert data.count_batches(scans, 64, 50) == 13


def test_batch_tensor_shapes():
    scans = [scan(h=512, w=128, seed=i) for i in range(25)]
    first = next(data.make_batches(scans, 64, 50, WeightConfig()))
    assert first.images.shape == (50, 1, 512, 64)
    assert first.onehots.shape == (50, 10, 512, 64)
    assert first.weightmaps.shape == (50, 1, 512, 64)
    assert first.images.dtype == np.float32


def test_batches_reproducible():
    scans = [scan(h=8, w=128, seed=i) for i in range(3)]
    a = list(data.make_batches(scans, 32, 5, seed=[4, 1]))
    b = list(data.make_batches(scans, 32, 5, seed=[4, 1]))
    c = list(data.make_batches(scans, 32, 5, seed=[4, 2]))
    assert all(np.array_equal(x.images, y.images) and np.array_equal(x.labels, y.labels) for x, y in zip(a, b))
    assert not all(np.array_equal(x.images, y.images) for x, y in zip(a, c))


def test_batches_cover_every_slice_once_without_augmentation():
    scans = [scan(h=4, w=64, seed=i) for i in range(3)]
    batches = list(data.make_batches(scans, 16, 5, augmentation=False))
    got = sorted(tuple(x.ravel()) for b in batches for x in b.images[:, 0])
    want = sorted(tuple(p[0].ravel()) for s in scans for p in data.slice_bscan(s, 16))
    assert got == want


def test_empty_dataset_rejected():
    with pytest.raises(DataError):
        next(data.make_batches([], 64, 4))


# ----------------------------------------------------------------- splits

def test_fifty_fifty():
    plan = data.split_subjects(range(1, 11))
    assert plan.train_subjects == set(range(1, 6)) and plan.test_subjects == set(range(6, 11))


def test_holdout():
    plan = data.split_subjects(range(1, 11), "holdout", n_test=2)
    assert plan.test_subjects == {9, 10} and len(plan.train_subjects) == 8


def test_kfold_each_subject_held_out_once():
    plans = data.split_subjects(range(1, 9), "kfold", k=8)
    assert len(plans) == 8
    held = [s for p in plans for s in p.test_subjects]
    assert sorted(held) == list(range(1, 9))
    for p in plans:
        assert p.train_subjects | p.test_subjects == set(range(1, 9))
        assert not p.train_subjects & p.test_subjects


def test_kfold_folds_disjoint():
    plans = data.split_subjects(range(1, 11), "kfold", k=3)
    tests = [p.test_subjects for p in plans]
    assert sum(len(t) for t in tests) == 10 and len(set().union(*tests)) == 10


def test_bad_split():
    with pytest.raises(ValueError):
        data.split_subjects(range(4), "kfold", k=9)


# ---------------------------------------------------------------- phantom

def test_flat_noiseless_phantom_bands():
    spec = PhantomSpec(height=200, width=32, noise=0, curvature=0, ripple=0, fluid_blobs=0)
    s = data.generate_phantom(spec)
    edges = np.round((spec.top + np.concatenate([[0], np.cumsum(spec.layer_thickness)])) * 200).astype(int)
    assert np.all(s.labels == s.labels[:, :1])
    col = s.labels[:, 0]
    assert np.all(col[:edges[0]] == data.RAR) and np.all(col[edges[-1]:] == data.RBR)
    for k, cls in enumerate(data.LAYER_CLASSES):
        assert np.count_nonzero(col == cls) == edges[k + 1] - edges[k]


@pytest.mark.parametrize("seed", range(5))
def test_single_fluid_blob(seed):
    s = data.generate_phantom(PhantomSpec(height=256, width=128, seed=seed))
    assert components(s.labels == data.FLUID) == 1


def test_phantom_deterministic():
    a = data.generate_phantom(PhantomSpec(height=128, width=64, seed=3))
    b = data.generate_phantom(PhantomSpec(height=128, width=64, seed=3))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


def test_default_phantom_has_all_classes():
    s = data.generate_phantom()
    assert s.shape == (512, 256)
    assert set(np.unique(s.labels)) == set(range(10))


def test_phantom_band_intensities():
    spec = PhantomSpec(height=512, width=256, seed=1)
    s = data.generate_phantom(spec)
    img = s.image[0, 0]
    for cls in range(10):
        band = img[s.labels == cls]
        expected = spec.intensities[cls]
        assert abs(band.mean() - expected) <= 3 * spec.noise * max(expected, 1e-3) / np.sqrt(band.size) + 0.02


def test_phantom_layers_ordered_top_to_bottom():
    s = data.generate_phantom(PhantomSpec(height=256, width=64, seed=2, fluid_blobs=0))
    for j in range(64):
        col = s.labels[:, j]
        first = [np.argmax(col == c) for c in (data.RAR,) + data.LAYER_CLASSES + (data.RBR,)]
        assert first == sorted(first)


# -------------------------------------------------------------------- I/O

def test_pgm_roundtrip(tmp_path, rng):
    arr = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    data.write_pgm(tmp_path / "a.pgm", arr)
    assert np.array_equal(data.read_pgm(tmp_path / "a.pgm"), arr)


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert data.read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]


def test_pgm_bad_magic(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError, match="bad.pgm"):
        data.read_pgm(tmp_path / "bad.pgm")


def test_labels_out_of_range(tmp_path):
    data.write_pgm(tmp_path / "l.pgm", np.full((2, 2), 12, np.uint8))
    with pytest.raises(DataError, match="l.pgm"):
        data.read_labels(tmp_path / "l.pgm")


@pytest.mark.parametrize("fmt", ["pgm", "rtn1"])
def test_dataset_roundtrip(tmp_path, fmt):
    scans = [data.generate_phantom(PhantomSpec(height=64, width=32, seed=i), subject_id=1 + i // 2, frame_id=i % 2)
             for i in range(4)]
    scans[1].is_fovea = True
    data.save_dataset(tmp_path, scans, image_format=fmt)
    back = data.load_dataset(tmp_path)
    assert len(back) == 4
    for a, b in zip(scans, back):
        assert (a.subject_id, a.frame_id, a.is_fovea) == (b.subject_id, b.frame_id, b.is_fovea)
        assert np.array_equal(a.labels, b.labels)
        tol = 0 if fmt == "rtn1" else 0.5 / 255 + 1e-7
        assert np.abs(a.image - b.image).max() <= tol


def test_ten_subjects_eleven_frames(tmp_path):
    scans = [BScan(np.zeros((8, 8), np.float32), np.zeros((8, 8), int), subject_id=s, frame_id=f)
             for s in range(1, 11) for f in range(11)]
    data.save_dataset(tmp_path, scans)
    back = data.load_dataset(tmp_path)
    assert len(back) == 110
    plan = data.split_subjects({b.subject_id for b in back})
    train = [b for b in back if b.subject_id in plan.train_subjects]
    assert len(train) == 55


def test_empty_manifest(tmp_path):
    (tmp_path / data.MANIFEST).write_text(data.MANIFEST_HEADER + "\n")
    assert data.load_dataset(tmp_path) == []


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        data.load_dataset(tmp_path)


def test_corrupt_rtn1_names_file(tmp_path):
    write_rtn1(tmp_path / "img.rtn", np.zeros((1, 1, 4, 4), np.float32))
    data.write_pgm(tmp_path / "lab.pgm", np.zeros((4, 4), np.uint8))
    raw = bytearray((tmp_path / "img.rtn").read_bytes())
    raw[1] = 0
    (tmp_path / "img.rtn").write_bytes(bytes(raw))
    (tmp_path / data.MANIFEST).write_text(f"{data.MANIFEST_HEADER}\n1\t0\timg.rtn\tlab.pgm\t0\n")
    with pytest.raises(FormatError, match="img.rtn"):
        data.load_dataset(tmp_path)


def test_size_mismatch_names_files(tmp_path):
    data.write_pgm(tmp_path / "i.pgm", np.zeros((4, 4), np.uint8))
    data.write_pgm(tmp_path / "l.pgm", np.zeros((4, 5), np.uint8))
    (tmp_path / data.MANIFEST).write_text("1\t0\ti.pgm\tl.pgm\n")
    with pytest.raises(DataError, match="l.pgm"):
        data.load_dataset(tmp_path)


def test_bscan_rejects_bad_labels():
    with pytest.raises(DataError):
        BScan(np.zeros((2, 2)), np.full((2, 2), 10))
    with pytest.raises(DataError):
        BScan(np.zeros((2, 2)), np.zeros((2, 3), int))
