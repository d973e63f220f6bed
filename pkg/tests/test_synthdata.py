import os

import numpy as np
import pytest

from kplift import synthdata as sd
from kplift.detector import ImageRaster
from kplift.geometry import orthographic_project


def small_dataset(seed=11, n=20, **kw):
    return sd.generate_dataset(2, n, seed, **kw)


def test_categories_deterministic():
    a = sd.gen_categories(3, 5)
    b = sd.gen_categories(3, 5)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.template, cb.template)
        assert np.array_equal(ca.deformation_basis, cb.deformation_basis)
        assert ca.skeleton == cb.skeleton


def test_categories_k_range_and_offsets():
    cats = sd.gen_categories(3, 5)
    ks = [c.keypoint_count for c in cats]
    assert all(6 <= k <= 14 for k in ks)
    reg = sd.Dataset(categories=cats, samples=[]).registry()
    offsets = [reg.schema(i).block_offset for i in range(3)]
    assert offsets == [0, ks[0], ks[0] + ks[1]]
    assert reg.total_keypoints == sum(ks)


def test_template_unit_rms():
    for cat in sd.gen_categories(4, 9):
        rms = np.sqrt(np.mean(np.sum(cat.template**2, axis=0)))
        assert abs(rms - 1.0) <= 1e-9
        assert np.allclose(cat.template.mean(axis=1), 0.0, atol=1e-12)


def test_basis_orthogonal_rows():
    for cat in sd.gen_categories(3, 2):
        b = cat.deformation_basis
        gram = b @ b.T
        off = gram - np.diag(np.diag(gram))
        assert np.max(np.abs(off)) < 1e-9
        expected = sd._MODE_POINT_RMS * np.sqrt(cat.keypoint_count)
        assert np.allclose(np.linalg.norm(b, axis=1), expected)


def test_skeleton_spans_all_keypoints():
    for cat in sd.gen_categories(3, 7):
        k = cat.keypoint_count
        assert len(cat.skeleton) == k - 1
        touched = {i for e in cat.skeleton for i in e}
        assert touched == set(range(k))


def test_sample_deterministic():
    cat = sd.gen_categories(1, 3)[0]
    s1 = sd.sample_instance(cat, 0, 123)
    s2 = sd.sample_instance(cat, 0, 123)
    assert np.array_equal(s1.keypoints3d, s2.keypoints3d)
    assert np.array_equal(s1.visibility, s2.visibility)
    assert s1.context_factor == s2.context_factor


def test_sample_zero_deformation_is_template():
    cat = sd.gen_categories(1, 3, deformation_scale=0.0)[0]
    s = sd.sample_instance(cat, 0, 5)
    assert np.allclose(s.keypoints3d, cat.template, atol=1e-15)


def test_sample_projection_consistency():
    cat = sd.gen_categories(1, 7)[0]
    for seed in range(20):
        s = sd.sample_instance(cat, 0, seed)
        proj = orthographic_project(s.rotation, s.keypoints3d)
        assert np.max(np.abs(proj - s.keypoints2d)) < 1e-9


def test_visibility_statistics():
    cats = sd.gen_categories(2, 31)
    fracs = []
    for i in range(5000):
        cat = cats[i % 2]
        s = sd.sample_instance(cat, i % 2, np.random.SeedSequence([31, 9, i]))
        assert s.visibility.sum() >= 3
        fracs.append(s.visibility.mean())
    assert 0.8 <= np.mean(fracs) <= 0.95


def test_render_pixel_range_and_quantization():
    ds = small_dataset(n=5)
    for s in ds.samples:
        px = s.image.pixels
        assert px.min() >= 0.0 and px.max() <= 1.0
        assert np.array_equal(px, np.round(px * 255) / 255)


def test_render_skeleton_only_when_all_occluded():
    cat = sd.gen_categories(1, 3)[0]
    s = sd.sample_instance(cat, 0, 7)
    s.visibility = np.zeros(cat.keypoint_count)
    img = sd.render_image(s, cat)
    scale = 0.5 + 0.5 * s.context_factor
    # only skeleton intensity (0.5 * scale) may appear
    expected = np.round(0.5 * scale * 255) / 255
    vals = set(np.unique(img.pixels))
    assert vals <= {0.0, expected}
    assert expected in vals


def test_render_context_scales_intensity():
    cat = sd.gen_categories(1, 3)[0]
    s = sd.sample_instance(cat, 0, 9)
    s1 = sd.SyntheticSample(**{**s.__dict__, "context_factor": 0.2})
    s2 = sd.SyntheticSample(**{**s.__dict__, "context_factor": 0.9})
    i1 = sd.render_image(s1, cat)
    i2 = sd.render_image(s2, cat)
    on = i1.pixels > 0
    ratio = (0.5 + 0.5 * 0.9) / (0.5 + 0.5 * 0.2)
    # quantization allows 1-level slack
    assert np.max(np.abs(i2.pixels[on] - i1.pixels[on] * ratio)) <= 2.0 / 255.0


def test_pgm_roundtrip_bit_exact(tmp_path):
    ds = small_dataset(n=3)
    img = ds.samples[0].image
    p = tmp_path / "x.pgm"
    sd.write_pgm(img, p)
    back = sd.read_pgm(p)
    assert np.array_equal(back.pixels, img.pixels)


def test_pgm_malformed_errors(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(ValueError, match="byte 0"):
        sd.read_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 3)
    with pytest.raises(ValueError, match="payload"):
        sd.read_pgm(p)


def test_dataset_roundtrip(tmp_path):
    ds = small_dataset(n=10)
    out = tmp_path / "ds"
    sd.write_dataset(ds, out)
    back = sd.read_dataset(out)
    assert len(back.samples) == len(ds.samples)
    assert back.window == ds.window
    for a, b in zip(ds.samples, back.samples):
        assert a.sample_id == b.sample_id
        assert a.category_id == b.category_id
        assert np.array_equal(a.keypoints2d, b.keypoints2d)
        assert np.array_equal(a.visibility, b.visibility)
        assert np.array_equal(a.keypoints3d, b.keypoints3d)
        assert np.array_equal(a.rotation, b.rotation)
        assert a.context_factor == b.context_factor
        assert np.array_equal(a.image.pixels, b.image.pixels)
    for ca, cb in zip(ds.categories, back.categories):
        assert np.array_equal(ca.template, cb.template)
        assert ca.skeleton == cb.skeleton


def test_roundtrip_projection_consistency_after_f32(tmp_path):
    ds = small_dataset(n=8)
    out = tmp_path / "ds"
    sd.write_dataset(ds, out)
    back = sd.read_dataset(out)
    for s in back.samples:
        x32 = s.keypoints3d.astype(np.float32).astype(np.float64)
        r32 = s.rotation.astype(np.float32).astype(np.float64)
        proj = orthographic_project(r32, x32)
        assert np.max(np.abs(proj - s.keypoints2d)) < 1e-6


def test_empty_dataset_roundtrip(tmp_path):
    ds = sd.Dataset(categories=sd.gen_categories(1, 0), samples=[])
    out = tmp_path / "empty"
    sd.write_dataset(ds, out)
    back = sd.read_dataset(out)
    assert back.samples == []


def test_unknown_category_reference_rejected(tmp_path):
    import json

    ds = small_dataset(n=2)
    out = tmp_path / "ds"
    sd.write_dataset(ds, out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["samples"][0]["category"] = "ghost"
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="unknown category reference"):
        sd.read_dataset(out)


def test_missing_field_rejected(tmp_path):
    import json

    ds = small_dataset(n=2)
    out = tmp_path / "ds"
    sd.write_dataset(ds, out)
    manifest = json.loads((out / "manifest.json").read_text())
    del manifest["samples"][0]["rotation"]
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="rotation"):
        sd.read_dataset(out)


def test_generation_deterministic_and_parallel_equals_serial():
    a = sd.generate_dataset(2, 15, 77, workers=1)
    b = sd.generate_dataset(2, 15, 77, workers=4)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.sample_id == sb.sample_id
        assert np.array_equal(sa.keypoints3d, sb.keypoints3d)
        assert np.array_equal(sa.image.pixels, sb.image.pixels)


def test_splits_differ_but_share_categories():
    tr = sd.generate_dataset(2, 5, 3, split="train", render=False)
    te = sd.generate_dataset(2, 5, 3, split="test", render=False)
    assert np.array_equal(tr.categories[0].template, te.categories[0].template)
    assert not np.array_equal(tr.samples[0].keypoints2d, te.samples[0].keypoints2d)


def test_read_without_images_ignores_files(tmp_path):
    ds = small_dataset(n=4)
    out = tmp_path / "ds"
    sd.write_dataset(ds, out)
    for f in (out / "images").iterdir():
        f.unlink()
    back = sd.read_dataset(out, with_images=False)
    assert all(s.image is None for s in back.samples)


def test_image_raster_validation():
    with pytest.raises(ValueError, match="2-D"):
        ImageRaster(pixels=np.zeros(5))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ImageRaster(pixels=np.full((2, 2), 1.5))
