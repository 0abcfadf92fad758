import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artefact_lab.errors import ArtifactVersionError
from artefact_lab.keypoints import (DescriptorFormatError, DetectionError, Keypoint,
                                    KeypointDescriptorSet, detect_and_describe,
                                    detect_coin_circle, detect_mser, detect_mser_features,
                                    export_descriptors, import_descriptors, keep_count,
                                    region_pixels, quantize)
from artefact_lab.raster import RasterImage


def _corner_image():
    u = np.zeros((96, 96))
    u[48:, 40:] = 1.0
    return RasterImage(u)


def _disk(cx, cy, r, size=300):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.float64)


def _square_field():
    u = np.ones((200, 200))
    u[80:120, 70:110] = 0.0
    return RasterImage(u)


def test_corner_detected_near_construction():
    ks = detect_and_describe(_corner_image(), 50)
    top = ks.keypoints[0]
    assert np.hypot(top.x - 40, top.y - 48) <= 2.0


def test_constant_image_no_keypoints():
    ks = detect_and_describe(RasterImage(np.full((64, 64), 0.5)), 50)
    assert len(ks) == 0


def test_tiny_image_rejected():
    with pytest.raises(ValueError):
        detect_and_describe(RasterImage(np.zeros((4, 4))), 10)


def test_detect_deterministic_and_sorted():
    rng = np.random.default_rng(0)
    img = RasterImage(np.clip(rng.random((80, 80)), 0, 1))
    a = detect_and_describe(img, 100)
    b = detect_and_describe(img, 100)
    assert np.array_equal(a.descriptors, b.descriptors)
    assert a.keypoints == b.keypoints
    keys = [(-k.strength, k.y, k.x) for k in a.keypoints]
    assert keys == sorted(keys)
    assert np.allclose(np.linalg.norm(a.descriptors, axis=1), 1.0, atol=1e-6)


def _toy_set(n=3, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.random((n, 64))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    kps = [Keypoint(float(i), float(i) + 0.5, 2.0, 1.0 / (i + 1)) for i in range(n)]
    return KeypointDescriptorSet("toy", kps, d)


def test_descriptor_roundtrip(tmp_path):
    ks = _toy_set()
    export_descriptors(ks, tmp_path / "a.adsc")
    back = import_descriptors(tmp_path / "a.adsc")
    assert len(back) == 3
    export_descriptors(back, tmp_path / "b.adsc")
    assert (tmp_path / "a.adsc").read_bytes() == (tmp_path / "b.adsc").read_bytes()


def test_descriptor_width_63_rejected(tmp_path):
    ks = _toy_set()
    export_descriptors(ks, tmp_path / "a.adsc")
    raw = bytearray((tmp_path / "a.adsc").read_bytes())
    # header declares the width; rewrite it to 63
    idx = raw.find((64).to_bytes(4, "little"), 5)
    raw[idx:idx + 4] = (63).to_bytes(4, "little")
    (tmp_path / "b.adsc").write_bytes(bytes(raw))
    with pytest.raises(DescriptorFormatError):
        import_descriptors(tmp_path / "b.adsc")


def test_descriptor_bad_magic_is_version_error(tmp_path):
    p = tmp_path / "x.adsc"
    p.write_bytes(b"ADSC9" + bytes(20))
    with pytest.raises(ArtifactVersionError):
        import_descriptors(p)


def test_descriptor_truncated(tmp_path):
    export_descriptors(_toy_set(), tmp_path / "a.adsc")
    raw = (tmp_path / "a.adsc").read_bytes()
    (tmp_path / "b.adsc").write_bytes(raw[:-8])
    with pytest.raises(DescriptorFormatError):
        import_descriptors(tmp_path / "b.adsc")


def test_coin_circle_rendered_disk():
    c = detect_coin_circle(RasterImage(_disk(150, 150, 120)), 90, 150)
    assert abs(c.cx - 150) <= 2 and abs(c.cy - 150) <= 2 and abs(c.radius - 120) <= 2


def test_coin_circle_blank_fails():
    with pytest.raises(DetectionError):
        detect_coin_circle(RasterImage(np.zeros((300, 300))), 90, 150)


def test_coin_circle_concentric_picks_in_range():
    u = _disk(150, 150, 120) - _disk(150, 150, 80) * 0.5
    c = detect_coin_circle(RasterImage(u), 100, 150)
    assert abs(c.radius - 120) <= 2


@pytest.mark.parametrize("dx,dy", [(7, -5), (-12, 9)])
def test_coin_circle_translation_equivariant(dx, dy):
    a = detect_coin_circle(RasterImage(_disk(150, 150, 110)), 90, 140)
    b = detect_coin_circle(RasterImage(_disk(150 + dx, 150 + dy, 110)), 90, 140)
    assert abs((b.cx - a.cx) - dx) <= 1 and abs((b.cy - a.cy) - dy) <= 1


def test_mser_dark_square_one_region():
    regs = detect_mser(_square_field(), max_area_fraction=0.05, polarities=("dark",))
    assert len(regs) == 1
    cx, cy = regs[0].center
    assert abs(cx - 89.5) <= 1 and abs(cy - 99.5) <= 1
    inv = RasterImage(1.0 - _square_field().data)
    regs_b = detect_mser(inv, max_area_fraction=0.05, polarities=("bright",))
    assert len(regs_b) == 1


def test_mser_polarity_duality():
    rng = np.random.default_rng(1)
    from scipy import ndimage
    u = ndimage.gaussian_filter(rng.random((80, 80)), 3)
    img = RasterImage((u - u.min()) / (u.max() - u.min()))
    inv = RasterImage(1.0 - img.data)
    a = detect_mser(img, polarities=("dark",), max_area_fraction=0.2)
    b = detect_mser(inv, polarities=("bright",), max_area_fraction=0.2)
    qa, qb = quantize(img.data), quantize(inv.data)
    sa = sorted(tuple(map(tuple, region_pixels(qa, r))) for r in a)
    sb = sorted(tuple(map(tuple, region_pixels(qb, r))) for r in b)
    assert sa == sb


def test_mser_regions_extremal_and_connected():
    rng = np.random.default_rng(2)
    from scipy import ndimage
    u = ndimage.gaussian_filter(rng.random((60, 60)), 2.5)
    img = RasterImage((u - u.min()) / (u.max() - u.min()))
    q = quantize(img.data)
    for r in detect_mser(img, polarities=("dark",), max_area_fraction=0.2):
        px = region_pixels(q, r)
        assert len(px) == r.area
        mask = np.zeros(q.shape, bool)
        mask[px[:, 0], px[:, 1]] = True
        assert ndimage.label(mask)[1] == 1
        ring = ndimage.binary_dilation(mask) & ~mask
        assert q[mask].max() < q[ring].min()


def test_keep_fraction_top_ten_percent():
    assert keep_count(50, 0.10) == 5


def test_mser_constant_image_empty():
    ks = detect_mser_features(RasterImage(np.full((64, 64), 0.3)))
    assert len(ks) == 0


def test_mser_keep_fraction_validated():
    with pytest.raises(ValueError):
        detect_mser_features(_square_field(), keep_fraction=0.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-0.5, 0.5))
def test_mser_affine_intensity_invariance(a, b):
    rng = np.random.default_rng(3)
    from scipy import ndimage
    u = ndimage.gaussian_filter(rng.random((60, 60)), 2.0)
    u = (u - u.min()) / (u.max() - u.min())
    v = a * u + b
    ref = detect_mser(RasterImage(u), max_area_fraction=0.2)
    # intensities are clipped to [0, 1] by the raster type, so scale into range first
    lo, hi = v.min(), v.max()
    w = (v - lo) / (hi - lo) * 0.8 + 0.1
    got = detect_mser(RasterImage(w), max_area_fraction=0.2)
    key = lambda rs: sorted((r.polarity, r.seed, r.area) for r in rs)
    assert key(ref) == key(got)
