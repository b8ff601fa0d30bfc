import itertools

import numpy as np
import pytest
from PIL import Image

from gau.dataset import (
    SHAPES,
    ManifestError,
    SampleRecord,
    TemplateOracle,
    load_manifest,
    make_synthetic_dataset,
    read_image,
    sample_conditional_batch,
    split_patient_level,
    to_nchw,
    to_nhwc,
    write_image_set,
    write_manifest,
)


def records_for(sizes, prefix="p"):
    recs = []
    for p, n in enumerate(sizes):
        recs.extend(SampleRecord(f"{prefix}{p}_{k}.png", 0, f"{prefix}{p}") for k in range(n))
    return recs


# -- manifest ------------------------------------------------------------------


def write_rgb(path, arr):
    Image.fromarray(arr).save(path)


@pytest.fixture
def manifest_dir(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for k in range(100):
        arr = rng.integers(0, 256, size=(20, 24, 3), dtype=np.uint8)
        name = f"img_{k}.png"
        write_rgb(tmp_path / name, arr)
        rows.append(SampleRecord(name, k % 3, f"pat{k // 4}"))
    write_manifest(tmp_path / "m.csv", rows)
    return tmp_path


def test_load_manifest_reads_every_row(manifest_dir):
    data = load_manifest(manifest_dir / "m.csv", image_size=16)
    assert len(data) == 100
    assert data.images.shape == (100, 16, 16, 3)
    assert data.images.dtype == np.float32
    assert data.images.min() >= 0 and data.images.max() <= 1
    assert data.num_classes == 3
    assert data.records[5] == SampleRecord("img_5.png", 2, "pat1")


def test_load_manifest_resizes_bilinearly(tmp_path):
    arr = np.random.default_rng(1).integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
    write_rgb(tmp_path / "a.png", arr)
    got = read_image(tmp_path / "a.png", 20)
    ref = np.stack([np.asarray(Image.fromarray(arr[..., c]).convert("F").resize((20, 20), Image.BILINEAR))
                    for c in range(3)], axis=-1) / 255.0
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_no_resize_keeps_pixels_exact(tmp_path):
    arr = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
    write_rgb(tmp_path / "a.png", arr)
    np.testing.assert_allclose(read_image(tmp_path / "a.png", 4), arr / 255.0, atol=1e-7)


def test_grayscale_source_is_replicated(tmp_path):
    arr = np.random.default_rng(2).integers(0, 256, size=(8, 8), dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
    img = read_image(tmp_path / "g.png", 8)
    assert img.shape == (8, 8, 3)
    assert np.array_equal(img[..., 0], img[..., 1]) and np.array_equal(img[..., 1], img[..., 2])
    np.testing.assert_allclose(img[..., 0], arr / 255.0, atol=1e-7)


def test_sixteen_bit_grayscale_scales_to_unit_range(tmp_path):
    arr = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "g16.png")
    img = read_image(tmp_path / "g16.png", 2)
    np.testing.assert_allclose(img[..., 0], arr / 65535.0, atol=1e-6)


def test_missing_file_error_names_row(manifest_dir):
    (manifest_dir / "img_7.png").unlink()
    with pytest.raises(ManifestError, match=r"row 9\b.*img_7"):
        load_manifest(manifest_dir / "m.csv", image_size=8)


def test_undecodable_image_names_row(manifest_dir):
    (manifest_dir / "img_0.png").write_bytes(b"not a png")
    with pytest.raises(ManifestError, match=r"row 2\b.*decode"):
        load_manifest(manifest_dir / "m.csv", image_size=8)


def test_unknown_class_names_row(manifest_dir):
    with pytest.raises(ManifestError, match=r"row 4\b.*unknown class"):
        load_manifest(manifest_dir / "m.csv", image_size=8, num_classes=2)
    text = (manifest_dir / "m.csv").read_text().replace("img_1.png,1,", "img_1.png,benign,")
    (manifest_dir / "m.csv").write_text(text)
    with pytest.raises(ManifestError, match=r"row 3\b.*benign"):
        load_manifest(manifest_dir / "m.csv", image_size=8)


def test_missing_manifest_and_bad_header(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.csv")
    (tmp_path / "h.csv").write_text("file,label\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(tmp_path / "h.csv")
    (tmp_path / "e.csv").write_text("path,class,patient_id\n")
    with pytest.raises(ManifestError, match="no rows"):
        load_manifest(tmp_path / "e.csv")


def test_layout_round_trip():
    x = np.random.default_rng(0).random((2, 5, 6, 3)).astype(np.float32)
    assert to_nchw(x).shape == (2, 3, 5, 6)
    assert np.array_equal(to_nhwc(to_nchw(x)), x)


# -- splitting -----------------------------------------------------------------


def check_split(split, records):
    parts = [split.train, split.val, split.test]
    pats = [{r.patient_id for r in part} for part in parts]
    assert not (pats[0] & pats[1] or pats[0] & pats[2] or pats[1] & pats[2])
    idx = np.concatenate([split.train_idx, split.val_idx, split.test_idx])
    assert sorted(idx.tolist()) == list(range(len(records)))
    for part, ids in zip(parts, (split.train_idx, split.val_idx, split.test_idx)):
        assert part == [records[i] for i in ids]


def test_hundred_thousand_single_record_patients():
    recs = [SampleRecord(f"{k}.png", 0, f"p{k}") for k in range(100_000)]
    split = split_patient_level(recs, seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (70_000, 10_000, 20_000)


def test_ten_equal_patients_split_seven_one_two():
    for seed in range(20):
        split = split_patient_level(records_for([3] * 10), seed=seed)
        counts = [len({r.patient_id for r in part}) for part in (split.train, split.val, split.test)]
        assert counts == [7, 1, 2]


def best_achievable(sizes_in_order, ratios):
    """Exhaustive oracle: smallest worst-case deviation over all contiguous cuts."""
    total = sum(sizes_in_order)
    cum = np.concatenate([[0], np.cumsum(sizes_in_order)])
    best = np.inf
    for a, b in itertools.combinations_with_replacement(range(len(cum)), 2):
        fr = (cum[a] / total, (cum[b] - cum[a]) / total, (total - cum[b]) / total)
        best = min(best, max(abs(f - r) for f, r in zip(fr, ratios)))
    return best


@pytest.mark.parametrize("seed", range(30))
def test_split_is_near_the_exhaustive_optimum(seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 8, size=int(rng.integers(3, 12))).tolist()
    recs = records_for(sizes)
    split = split_patient_level(recs, seed=seed)
    check_split(split, recs)
    total, biggest = len(recs), max(sizes)
    fracs = [len(split.train) / total, len(split.val) / total, len(split.test) / total]
    worst = max(abs(f - r) for f, r in zip(fracs, (0.7, 0.1, 0.2)))
    patients = sorted({r.patient_id for r in recs})
    order = np.random.default_rng(seed).permutation(len(patients))
    by_name = {f"p{p}": n for p, n in enumerate(sizes)}
    opt = best_achievable([by_name[patients[i]] for i in order], (0.7, 0.1, 0.2))
    assert worst <= biggest / total + 1e-12
    # never worse than the best cut by more than half a patient at each of two boundaries
    assert worst <= opt + biggest / total + 1e-12


@pytest.mark.parametrize("seed", range(100))
def test_split_invariants_random(seed):
    rng = np.random.default_rng(1000 + seed)
    sizes = rng.integers(1, 51, size=int(rng.integers(10, 201))).tolist()
    recs = records_for(sizes)
    split = split_patient_level(recs, seed=seed)
    check_split(split, recs)
    total = len(recs)
    for part, r in zip((split.train, split.val, split.test), (0.7, 0.1, 0.2)):
        assert abs(len(part) / total - r) <= max(sizes) / total + 1e-12


def test_split_is_deterministic_and_seed_dependent():
    recs = records_for([2, 3, 1, 4, 2, 5, 1, 1, 3, 2])
    a, b = split_patient_level(recs, seed=4), split_patient_level(recs, seed=4)
    assert a.train == b.train and a.val == b.val and a.test == b.test
    others = [split_patient_level(recs, seed=s).train for s in range(10)]
    assert any(o != a.train for o in others)


def test_split_errors():
    with pytest.raises(ValueError, match="3 distinct"):
        split_patient_level(records_for([5, 5]))
    with pytest.raises(ValueError, match="ratios"):
        split_patient_level(records_for([1, 1, 1]), ratios=(0.5, 0.5, 0.5))


# -- pair sampling ---------------------------------------------------------------


def tiny_set(labels):
    data = make_synthetic_dataset(num_classes=2, n_per_class=1, image_size=16, seed=0)
    n = len(labels)
    images = np.repeat(data.images[:1], n, axis=0)
    images = images + np.arange(n, dtype=np.float32)[:, None, None, None] * 1e-3
    recs = [SampleRecord(f"{k}.png", int(c), f"p{k}") for k, c in enumerate(labels)]
    from gau.dataset import ImageSet
    return ImageSet(recs, images, max(labels) + 1)


def test_pairs_are_distinct_and_same_class():
    data = tiny_set([0, 1, 0, 1, 1, 0, 1])
    batch = sample_conditional_batch(data, 1, 500, np.random.default_rng(0))
    assert len(batch) == 500
    assert np.all(batch.idx_i != batch.idx_j)
    assert np.all(data.labels[batch.idx_i] == 1) and np.all(data.labels[batch.idx_j] == 1)
    assert batch.x_i.shape == (500, 3, 16, 16)
    assert np.array_equal(batch.x_j, to_nchw(data.images[batch.idx_j]))


def test_class_of_exactly_two():
    data = tiny_set([0, 1, 0, 1])
    batch = sample_conditional_batch(data, 0, 200, np.random.default_rng(1))
    pairs = set(zip(batch.idx_i.tolist(), batch.idx_j.tolist()))
    assert pairs == {(0, 2), (2, 0)}


def test_class_of_one_is_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        sample_conditional_batch(tiny_set([0, 1, 1]), 0, 4, np.random.default_rng(0))


def test_pair_sampling_uniformity():
    data = tiny_set([0] * 10 + [1] * 3)
    batch = sample_conditional_batch(data, 0, 10_000, np.random.default_rng(2))
    freq_j = np.bincount(batch.idx_j, minlength=10)[:10] / 10_000
    freq_i = np.bincount(batch.idx_i, minlength=10)[:10] / 10_000
    assert np.all(np.abs(freq_j - 0.1) <= 0.02)
    assert np.all(np.abs(freq_i - 0.1) <= 0.02)
    # ordered pairs are uniform over the 90 off-diagonal cells
    joint = np.zeros((10, 10))
    np.add.at(joint, (batch.idx_i, batch.idx_j), 1)
    assert np.trace(joint) == 0
    off = joint[~np.eye(10, dtype=bool)] / 10_000
    assert np.all(np.abs(off - 1 / 90) < 0.006)


def test_pair_sampling_is_seeded():
    data = tiny_set([0] * 6)
    a = sample_conditional_batch(data, 0, 20, np.random.default_rng(5))
    b = sample_conditional_batch(data, 0, 20, np.random.default_rng(5))
    assert np.array_equal(a.idx_i, b.idx_i) and np.array_equal(a.idx_j, b.idx_j)


# -- synthetic shapes --------------------------------------------------------------


def test_synthetic_dataset_shape_and_ids():
    data = make_synthetic_dataset(num_classes=3, n_per_class=7, image_size=32, seed=1)
    assert len(data) == 21 and data.images.shape == (21, 32, 32, 3)
    assert np.bincount(data.labels).tolist() == [7, 7, 7]
    assert len({r.patient_id for r in data.records}) == 21
    assert data.images.min() >= 0 and data.images.max() <= 1


def test_synthetic_dataset_is_bit_identical_per_seed():
    a = make_synthetic_dataset(n_per_class=20, image_size=32, seed=3)
    b = make_synthetic_dataset(n_per_class=20, image_size=32, seed=3)
    c = make_synthetic_dataset(n_per_class=20, image_size=32, seed=4)
    assert a.images.tobytes() == b.images.tobytes() and a.records == b.records
    assert a.images.tobytes() != c.images.tobytes()


def test_synthetic_dataset_rejects_class_count():
    for bad in (1, len(SHAPES) + 1):
        with pytest.raises(ValueError):
            make_synthetic_dataset(num_classes=bad, n_per_class=1)


@pytest.mark.parametrize("size", [32, 64])
def test_oracle_is_perfect_on_noiseless_renders(size):
    data = make_synthetic_dataset(num_classes=len(SHAPES), n_per_class=15, image_size=size,
                                  noise_sigma=0.0, seed=2)
    assert TemplateOracle(len(SHAPES), size).accuracy(data) == 1.0


def test_oracle_on_the_desk_dataset():
    data = make_synthetic_dataset(num_classes=2, n_per_class=500, image_size=64, noise_sigma=0.05, seed=0)
    assert len(data) == 1000
    assert TemplateOracle(2, 64).accuracy(data) >= 0.99


def test_oracle_noiseless_render_correlates_exactly():
    data = make_synthetic_dataset(num_classes=2, n_per_class=3, image_size=32, noise_sigma=0.0, seed=0)
    oracle = TemplateOracle(2, 32)
    for img, c in zip(data.images, data.labels):
        assert oracle.scores(img)[c] == pytest.approx(1.0, abs=1e-9)


def test_write_image_set_round_trips(tmp_path):
    data = make_synthetic_dataset(num_classes=2, n_per_class=4, image_size=16, seed=0)
    manifest = write_image_set(data, tmp_path)
    back = load_manifest(manifest, image_size=16)
    assert back.records == data.records
    # PNG quantization is at most half an 8-bit step
    assert np.abs(back.images - data.images).max() <= 0.5 / 255 + 1e-6
