import json

import numpy as np
import pytest

from cosal.data import (AugmentConfig, Instance, Sample, augment, load_dataset, load_sample, rescale_box,
                        save_dataset, save_sample, synth_generate, tight_box, union_mask, validate_sample)


@pytest.fixture(scope="module")
def thousand():
    return synth_generate(1000, 64, seed=3)


def test_empty_directory(tmp_path):
    assert list(load_dataset(tmp_path)) == []
    (tmp_path / "annotations").mkdir()
    ds = load_dataset(tmp_path)
    assert len(ds) == 0 and ds.diagnostics == []


def test_roundtrip_bit_identical(tmp_path):
    samples = synth_generate(3, 64, seed=0)
    save_dataset(samples, tmp_path / "a")
    first = load_dataset(tmp_path / "a")
    assert not first.diagnostics and len(first) == 3
    save_dataset(first, tmp_path / "b")
    second = load_dataset(tmp_path / "b")
    for orig, a, b in zip(samples, first, second):
        assert a.id == orig.id == b.id
        np.testing.assert_array_equal(a.y, orig.y)
        np.testing.assert_array_equal(a.image, orig.image)
        np.testing.assert_array_equal(b.image, a.image)
        for i0, i1, i2 in zip(orig.instances, a.instances, b.instances):
            np.testing.assert_array_equal(i1.mask, i0.mask)
            np.testing.assert_array_equal(i2.mask, i1.mask)
            np.testing.assert_allclose(i2.box, i0.box, atol=1e-6)
            assert i0.cosalient == i1.cosalient == i2.cosalient
    for p in (tmp_path / "a" / "masks").glob("*.png"):
        from PIL import Image

        with Image.open(p) as im:
            assert im.mode == "1"


def test_leaking_mask_rejected_with_rule(tmp_path):
    s = synth_generate(1, 64, seed=0)[0]
    save_sample(s, tmp_path)
    ann_path = tmp_path / "annotations" / f"{s.id}.json"
    ann = json.loads(ann_path.read_text())
    cx, cy, w, h = ann["instances"][0]["box"]
    ann["instances"][0]["box"] = [cx, cy, w - 4, h]
    ann_path.write_text(json.dumps(ann))
    ds = load_dataset(tmp_path)
    assert len(ds) == 0
    (path, msg), = ds.diagnostics
    assert path.endswith(f"{s.id}.json") and msg.startswith("mask_in_box")


def test_missing_mask_and_too_few_instances(tmp_path):
    s = synth_generate(2, 64, seed=0)
    save_dataset(s, tmp_path)
    (tmp_path / "masks" / f"{s[0].id}_0.png").unlink()
    ann_path = tmp_path / "annotations" / f"{s[1].id}.json"
    ann = json.loads(ann_path.read_text())
    co = [e for e in ann["instances"] if e["cosalient"]]
    ann["instances"] = co[:1]
    ann_path.write_text(json.dumps(ann))
    (tmp_path / "gt" / f"{s[1].id}.png").unlink()
    ds = load_dataset(tmp_path)
    rules = sorted(msg.split(":")[0] for _, msg in ds.diagnostics)
    assert rules == ["min_cosalient", "missing_file"]


def test_stale_gt_cache_rejected(tmp_path):
    a, b = synth_generate(2, 64, seed=0)
    save_sample(a, tmp_path)
    save_sample(b, tmp_path / "other")
    (tmp_path / "other" / "gt" / f"{b.id}.png").replace(tmp_path / "gt" / f"{a.id}.png")
    with pytest.raises(ValueError, match="y_is_union"):
        load_sample(tmp_path, a.id)


def test_synth_seed_determinism():
    a = synth_generate(5, 64, seed=9)
    b = synth_generate(5, 64, seed=9)
    c = synth_generate(5, 64, seed=10)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.y, y.y)
    assert any(not np.array_equal(x.image, z.image) for x, z in zip(a, c))


def test_synth_start_offset_matches_full_run():
    full = synth_generate(6, 64, seed=2)
    tail = synth_generate(2, 64, seed=2, start=4)
    np.testing.assert_array_equal(full[5].image, tail[1].image)


def test_synth_rejects_small_side():
    with pytest.raises(ValueError):
        synth_generate(1, 16)


def test_synth_invariants_and_distractors(thousand):
    n_distractor = 0
    for s in thousand:
        assert validate_sample(s) == []
        co = [i for i in s.instances if i.cosalient]
        assert 2 <= len(co) <= 4
        assert sum(not i.cosalient for i in s.instances) <= 2
        for inst in s.instances:
            np.testing.assert_array_equal(inst.box, tight_box(inst.mask))
            if not inst.cosalient:
                n_distractor += 1
                assert not np.any(s.y & inst.mask)
    assert n_distractor > 500


def test_shared_scale_within_jitter(thousand):
    for s in thousand[:200]:
        sizes = [max(i.box[2], i.box[3]) for i in s.instances if i.cosalient]
        # base * (1 +- 0.2), plus a pixel of rasterisation
        assert max(sizes) <= (1.2 / 0.8) * min(sizes) + 2


class _Scripted:
    """Stand-in generator: fixed op choices and scale, real draws otherwise."""

    def __init__(self, ops, scale, seed=0):
        self.ops = np.asarray(ops, dtype=float)
        self.scale = scale
        self.inner = np.random.default_rng(seed)
        self.first_uniform = True

    def random(self, n):
        return self.ops

    def uniform(self, lo, hi, size=None):
        if self.first_uniform and size is None:
            self.first_uniform = False
            return self.scale
        return self.inner.uniform(lo, hi, size)

    def integers(self, *a, **k):
        return self.inner.integers(*a, **k)

    def choice(self, *a, **k):
        return self.inner.choice(*a, **k)


def test_augment_identity_draw():
    s = synth_generate(1, 64, seed=0)[0]
    assert augment(s, _Scripted([0.9, 0.9, 0.9], 1.0)) is s


def test_rescale_box_oracle():
    np.testing.assert_array_equal(rescale_box((10, 20, 4, 6), 1.25), [12.5, 25, 5, 7.5])


def _rect_sample(spans):
    masks = []
    for y0, y1, x0, x1 in spans:
        m = np.zeros((64, 64), bool)
        m[y0:y1, x0:x1] = True
        masks.append(m)
    inst = [Instance(tight_box(m), m, True) for m in masks]
    img = np.random.default_rng(0).uniform(0, 1, (3, 64, 64)).astype(np.float32)
    return Sample(img, union_mask(inst, (64, 64)), inst)


def test_augment_rescale_maps_box_centres():
    # edges on multiples of 4 land on whole pixels at x1.25, so the oracle is exact
    s = _rect_sample([(8, 20, 8, 20), (40, 52, 36, 48), (24, 32, 44, 56)])
    out = augment(s, _Scripted([0.0, 0.9, 0.9], 1.25))
    crop = (80 - 64) // 2
    assert len(out.instances) == 3
    for before, after in zip(s.instances, out.instances):
        expected = rescale_box(before.box, 1.25)
        np.testing.assert_array_equal(after.box[:2], expected[:2] - crop)
        np.testing.assert_array_equal(after.box[2:], expected[2:])


def test_augment_invariants(thousand):
    rolled_back = 0
    for k, s in enumerate(thousand[:300]):
        out = augment(s, np.random.default_rng(k))
        assert validate_sample(out) == []
        assert out.image.shape == s.image.shape and out.image.dtype == np.float32
        np.testing.assert_array_equal(out.y, union_mask(out.instances, out.y.shape))
        rolled_back += out is s
    assert rolled_back < 150


def test_augment_drops_mostly_hidden_instances():
    m1 = np.zeros((64, 64), bool)
    m1[5:15, 5:15] = True      # fully inside the cropped strip
    m2 = np.zeros((64, 64), bool)
    m2[40:50, 40:50] = True
    m3 = np.zeros((64, 64), bool)
    m3[12:22, 40:50] = True    # 6 of 10 rows stay visible
    inst = [Instance(tight_box(m), m, True) for m in (m1, m2, m3)]
    s = Sample(np.full((3, 64, 64), 0.5, np.float32), m1 | m2 | m3, inst)

    class TopCrop(_Scripted):
        def integers(self, lo, hi=None, size=None):
            return 16 if hi is not None else 0  # strip depth 16 on edge 0 (top)

    out = augment(s, TopCrop([0.9, 0.0, 0.9], 1.0))
    assert validate_sample(out) == []
    assert len(out.instances) == 2
    np.testing.assert_array_equal(out.instances[0].mask, m2)
    np.testing.assert_array_equal(out.instances[1].box, tight_box(m3 & (np.arange(64) >= 16)[:, None]))
