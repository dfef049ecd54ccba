import numpy as np
import pytest
from hypothesis import given, strategies as st

from prepretrain.data import (AugmentConfig, LabelVocabulary, augment_batch, augment_preset, bicubic_matrix,
                              dedup_merge, default_downstream_classes, default_vocabulary, generate_downstream,
                              generate_weak_dataset, horizontal_flip, random_resized_crop, random_spec, read_manifest,
                              render, sample_crop_box, synthesize_caption, write_manifest, WeakRecord)
from prepretrain.wsp import extract_hashtags, labels_from_tags

VOCAB = default_vocabulary()


def test_render_is_pure_and_uint8():
    spec = random_spec(np.random.default_rng(3))
    a, b = render(spec), render(spec)
    assert a.dtype == np.uint8 and a.shape == (3, 32, 32)
    assert np.array_equal(a, b)


def test_noiseless_labels_equal_planted_attributes():
    manifest = generate_weak_dataset(300, VOCAB, 0.0, 0.0, seed=5)
    for rec in manifest:
        assert sorted(rec.labels) == sorted(rec.spec.attributes())


@given(st.integers(0, 2**32), st.floats(0.0, 0.95))
def test_extract_hashtags_recovers_written_tags(seed, noise):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    caption, tags = synthesize_caption(spec, VOCAB, noise, rng)
    assert extract_hashtags(caption) == tags
    labels = labels_from_tags(tags, VOCAB)
    truth = set(spec.attributes())
    assert truth <= set(labels)
    assert len(set(labels) - truth) <= 1


def test_distractor_rate_matches_noise():
    manifest = generate_weak_dataset(2000, VOCAB, 0.2, 0.0, seed=1)
    extra = np.mean([len(r.labels) > 3 for r in manifest])
    assert abs(extra - 0.2) < 4 * np.sqrt(0.2 * 0.8 / 2000)


def test_duplicate_fraction_counting_oracle():
    n = 1000
    manifest = generate_weak_dataset(n, VOCAB, 0.2, 0.2, seed=11)
    counts = {}
    for r in manifest:
        counts[r.hash] = counts.get(r.hash, 0) + 1
    # records whose image already appeared earlier in the manifest
    dup = n - len(counts)
    assert abs(dup - 200) < 4 * np.sqrt(n * 0.2 * 0.8)
    shared = sum(c for c in counts.values() if c > 1)
    assert shared >= dup


def test_weak_dataset_deterministic(tmp_path):
    a = generate_weak_dataset(50, VOCAB, 0.2, 0.1, seed=9)
    b = generate_weak_dataset(50, VOCAB, 0.2, 0.1, seed=9)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_manifest(pa, a)
    write_manifest(pb, b)
    assert pa.read_bytes() == pb.read_bytes()
    back = read_manifest(pa)
    assert [r.to_json() for r in back] == [r.to_json() for r in a]


def test_weak_dataset_errors():
    with pytest.raises(ValueError):
        LabelVocabulary((), {})
    with pytest.raises(ValueError):
        generate_weak_dataset(5, VOCAB, 1.0, 0.0, seed=0)
    with pytest.raises(ValueError):
        generate_weak_dataset(5, VOCAB, 0.0, -0.1, seed=0)


def _rec(i, h, labels):
    spec = random_spec(np.random.default_rng(i))
    return WeakRecord(i, spec, "", labels, h)


def test_dedup_examples():
    recs = [_rec(0, "x", [0]), _rec(1, "y", [2])]
    assert dedup_merge(recs) == recs
    merged = dedup_merge([_rec(0, "x", [0]), _rec(1, "x", [1])])
    assert len(merged) == 1 and sorted(merged[0].labels) == [0, 1]


@given(st.lists(st.tuples(st.integers(0, 6), st.sets(st.integers(0, 15), max_size=4)), max_size=40))
def test_dedup_hash_set_oracle(items):
    recs = [_rec(i, f"h{h}", sorted(ls)) for i, (h, ls) in enumerate(items)]
    out = dedup_merge(recs)
    assert len(out) == len({r.hash for r in recs})
    for r in out:
        union = set().union(*[set(x.labels) for x in recs if x.hash == r.hash])
        assert set(r.labels) == union


def test_crop_degenerate_is_whole_resize():
    rng = np.random.default_rng(0)
    img = rng.random((3, 16, 16))
    cfg = AugmentConfig(scale=(1.0, 1.0), ratio=(1.0, 1.0), size=16)
    assert np.allclose(random_resized_crop(img, cfg, rng), img, atol=1e-12)


def test_crop_constant_image():
    img = np.full((3, 32, 32), 0.37)
    rng = np.random.default_rng(1)
    out = random_resized_crop(img, AugmentConfig(size=24), rng)
    assert out.shape == (3, 24, 24)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_bicubic_rows_sum_to_one():
    for a, b in [(7, 32), (32, 32), (32, 5)]:
        assert np.allclose(bicubic_matrix(a, b).sum(1), 1.0)


def test_crop_area_monte_carlo():
    rng = np.random.default_rng(2)
    scale = (0.08, 1.0)
    h = w = 224
    areas = []
    for _ in range(10000):
        _, _, ch, cw = sample_crop_box(h, w, scale, (3 / 4, 4 / 3), rng)
        areas.append(ch * cw / (h * w))
    areas = np.array(areas)
    # integer rounding of the box sides widens the range by a hair
    assert areas.min() >= scale[0] - 0.005 and areas.max() <= scale[1] + 1e-12
    assert abs(areas.min() - scale[0]) < 0.02 and abs(areas.max() - scale[1]) < 0.02


def test_augment_errors_and_presets():
    with pytest.raises(ValueError):
        AugmentConfig(size=0)
    assert augment_preset("mae").scale == (0.2, 1.0)
    assert augment_preset("wsp").scale == (0.08, 1.0)
    assert augment_preset("lit").scale == (0.9, 1.0)


def test_flip_examples_and_frequency():
    rng = np.random.default_rng(4)
    img = rng.random((3, 8, 8))
    assert horizontal_flip(img, 0.0, rng) is img
    once = horizontal_flip(img, 1.0, rng)
    assert np.array_equal(once, img[..., ::-1])
    assert np.array_equal(horizontal_flip(once, 1.0, rng), img)
    flips = sum(not np.array_equal(horizontal_flip(img, 0.5, rng), img) for _ in range(10000))
    assert abs(flips / 10000 - 0.5) < 0.02
    with pytest.raises(ValueError):
        horizontal_flip(img, 1.5, rng)


def test_augmented_pixels_stay_in_range():
    from prepretrain.rng import Stream
    from prepretrain.data import MEAN, STD
    imgs = generate_downstream(2, default_downstream_classes()[:4], seed=0)[0].images
    out = augment_batch(imgs, AugmentConfig(size=32), Stream(0), range(len(imgs)))
    raw = out * np.asarray(STD).reshape(-1, 1, 1) + np.asarray(MEAN).reshape(-1, 1, 1)
    assert raw.min() >= -1e-6 and raw.max() <= 1 + 1e-6


def test_downstream_balanced_and_disjoint():
    classes = default_downstream_classes()
    tr, va = generate_downstream(8, classes, seed=3)
    counts = np.bincount(np.concatenate([tr.labels, va.labels]), minlength=len(classes))
    assert (counts == 8).all()
    assert not set(tr.ids.tolist()) & set(va.ids.tolist())
    tr2, va2 = generate_downstream(8, classes, seed=3)
    assert np.array_equal(tr.images, tr2.images) and np.array_equal(va.ids, va2.ids)


def test_downstream_long_tail_halves():
    classes = default_downstream_classes()[:6]
    tr, va = generate_downstream(64, classes, seed=0, long_tail_ratio=0.5)
    counts = np.bincount(np.concatenate([tr.labels, va.labels]), minlength=6)
    for k in range(5):
        assert abs(counts[k + 1] - counts[k] / 2) <= 1
