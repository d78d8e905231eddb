import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
import hypothesis.extra.numpy as hnp

from ttakit import images
from ttakit.errors import DimensionError, FormatError, ParameterError
from ttakit.images import Transform, TransformKind, apply_transform, default_space


def image_arrays(min_side=4, max_side=12):
    return st.tuples(
        st.integers(min_side, max_side),
        st.integers(min_side, max_side),
        st.sampled_from([1, 3]),
    ).flatmap(
        lambda s: hnp.arrays(
            np.float32, s, elements=st.floats(0.0, 1.0, width=32, allow_nan=False)
        )
    )


def rand_image(h=8, w=8, c=3, seed=0):
    return np.random.default_rng(seed).random((h, w, c)).astype(np.float32)


class TestDefaultSpace:
    def test_size_is_12(self):
        assert len(default_space()) == 12

    def test_identity_is_last(self):
        space = default_space()
        assert space.identity_index() == 11
        assert sum(t.kind is TransformKind.IDENTITY for t in space.transforms) == 1

    def test_sharpness_params(self):
        params = sorted(
            t.param for t in default_space().transforms if t.kind is TransformKind.SHARPNESS
        )
        assert params == [0.2, 0.5, 3.0, 4.0]

    def test_rotation_and_zoom_params(self):
        space = default_space()
        assert sorted(t.param for t in space.transforms if t.kind is TransformKind.ROTATE) == [-20.0, 20.0]
        assert sorted(t.param for t in space.transforms if t.kind is TransformKind.ZOOM) == [0.8, 1.2]

    def test_duplicate_rejected(self):
        with pytest.raises(ParameterError):
            images.TransformSpace(
                (
                    Transform(TransformKind.IDENTITY),
                    Transform(TransformKind.ZOOM, 1.2),
                    Transform(TransformKind.ZOOM, 1.2),
                )
            )

    def test_missing_identity_rejected(self):
        with pytest.raises(ParameterError):
            images.TransformSpace((Transform(TransformKind.ZOOM, 1.2),))

    def test_fingerprint_stable(self):
        assert default_space().fingerprint() == default_space().fingerprint()
        assert len(default_space().fingerprint()) == 16


class TestApplyTransform:
    @given(image_arrays())
    @settings(max_examples=30, deadline=None)
    def test_identity_bit_equal(self, img):
        out = apply_transform(img, Transform(TransformKind.IDENTITY))
        assert out.tobytes() == img.tobytes()
        assert out is not img

    @given(image_arrays())
    @settings(max_examples=30, deadline=None)
    def test_hflip_involution(self, img):
        t = Transform(TransformKind.HFLIP)
        assert np.array_equal(apply_transform(apply_transform(img, t), t), img)

    @given(image_arrays(min_side=5))
    @settings(max_examples=15, deadline=None)
    def test_range_and_channels_preserved(self, img):
        for t in default_space().transforms:
            out = apply_transform(img, t)
            assert out.shape[2] == img.shape[2]
            assert out.dtype == np.float32
            assert out.min() >= 0.0 and out.max() <= 1.0

    @given(image_arrays())
    @settings(max_examples=30, deadline=None)
    def test_color_one_is_identity(self, img):
        out = apply_transform(img, Transform(TransformKind.COLOR, 1.0))
        np.testing.assert_allclose(out, img, atol=1e-6)

    @given(image_arrays())
    @settings(max_examples=30, deadline=None)
    def test_sharpness_one_is_identity(self, img):
        out = apply_transform(img, Transform(TransformKind.SHARPNESS, 1.0))
        np.testing.assert_allclose(out, img, atol=1e-6)

    @given(image_arrays())
    @settings(max_examples=30, deadline=None)
    def test_autocontrast_idempotent(self, img):
        t = Transform(TransformKind.AUTOCONTRAST)
        once = apply_transform(img, t)
        twice = apply_transform(once, t)
        np.testing.assert_allclose(twice, once, atol=1e-6)

    @given(st.floats(0.05, 1.0), st.sampled_from([-20.0, 20.0, 7.5, 180.0]))
    @settings(max_examples=20, deadline=None)
    def test_constant_fixed_points(self, value, degrees):
        img = np.full((9, 7, 3), np.float32(value))
        fixed = [
            Transform(TransformKind.ROTATE, degrees),
            Transform(TransformKind.ZOOM, 0.8),
            Transform(TransformKind.ZOOM, 1.2),
            Transform(TransformKind.HFLIP),
            Transform(TransformKind.SHARPNESS, 4.0),
            Transform(TransformKind.COLOR, 0.5),
        ]
        for t in fixed:
            np.testing.assert_allclose(apply_transform(img, t), img, atol=1e-6)

    def test_rotate_zero_is_near_identity(self):
        img = rand_image(11, 9)
        np.testing.assert_allclose(
            apply_transform(img, Transform(TransformKind.ROTATE, 0.0)), img, atol=1e-6
        )

    def test_autocontrast_two_value_stretch(self):
        # Direct evaluation of (v - min) / (max - min) on {0.25, 0.75}.
        img = np.full((6, 6, 1), 0.25, dtype=np.float32)
        img[3:, :, :] = 0.75
        out = apply_transform(img, Transform(TransformKind.AUTOCONTRAST))
        np.testing.assert_allclose(out[:3], 0.0, atol=1e-6)
        np.testing.assert_allclose(out[3:], 1.0, atol=1e-6)

    def test_autocontrast_per_channel(self):
        img = np.zeros((4, 4, 3), dtype=np.float32)
        img[..., 0] = np.linspace(0.2, 0.6, 16, dtype=np.float32).reshape(4, 4)
        img[..., 1] = 0.5
        img[..., 2] = np.linspace(0.0, 1.0, 16, dtype=np.float32).reshape(4, 4)
        out = apply_transform(img, Transform(TransformKind.AUTOCONTRAST))
        assert out[..., 0].min() == pytest.approx(0.0, abs=1e-6)
        assert out[..., 0].max() == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(out[..., 1], 0.5, atol=1e-6)  # flat channel untouched

    def test_color_blends_against_luminance(self):
        img = rand_image(5, 5, 3, seed=3)
        gray = (
            0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
        )[..., None]
        expect = np.clip(gray + 1.5 * (img - gray), 0, 1)
        out = apply_transform(img, Transform(TransformKind.COLOR, 1.5))
        np.testing.assert_allclose(out, expect, atol=1e-6)

    def test_sharpness_zero_is_smoothing(self):
        img = rand_image(6, 6, 1, seed=4)
        out = apply_transform(img, Transform(TransformKind.SHARPNESS, 0.0))
        kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
        center = sum(
            kernel[i, j] * img[1 + i - 1 + 1, 1 + j - 1 + 1, 0]  # window around (2, 2)
            for i in range(3)
            for j in range(3)
        )
        assert out[2, 2, 0] == pytest.approx(center, abs=1e-6)
        np.testing.assert_array_equal(out[0, :, 0], img[0, :, 0])  # edge row copied

    def test_crop_corners(self):
        img = rand_image(32, 32)
        side = int(round(0.875 * 32))
        out = apply_transform(img, Transform(TransformKind.CROP, 1))
        assert out.shape == (side, side, 3)
        np.testing.assert_array_equal(out, img[:side, :side])
        out_br = apply_transform(img, Transform(TransformKind.CROP, 4))
        np.testing.assert_array_equal(out_br, img[32 - side:, 32 - side:])

    def test_parameter_errors(self):
        img = rand_image()
        with pytest.raises(ParameterError):
            apply_transform(img, Transform(TransformKind.ROTATE, 200.0))
        with pytest.raises(ParameterError):
            apply_transform(img, Transform(TransformKind.ZOOM, 0.0))
        with pytest.raises(ParameterError):
            apply_transform(img, Transform(TransformKind.SHARPNESS, -1.0))
        with pytest.raises(ParameterError):
            apply_transform(img, Transform(TransformKind.CROP, 5))
        with pytest.raises(DimensionError):
            apply_transform(np.zeros((4, 4), dtype=np.float32), Transform(TransformKind.IDENTITY))

    def test_batch_matches_single(self):
        imgs = np.stack([rand_image(seed=s) for s in range(4)])
        for t in default_space().transforms:
            batched = images.batch_apply_transform(imgs, t)
            for i in range(4):
                np.testing.assert_array_equal(batched[i], apply_transform(imgs[i], t))


class TestCropSet:
    def test_five_crop_imagenet_convention(self):
        img = rand_image(300, 420)
        crops = images.crop_set(img, 5, 256, 224)
        assert len(crops) == 5
        assert all(c.shape == (224, 224, 3) for c in crops)

    def test_ten_crop_flip_relation(self):
        img = rand_image(64, 80)
        crops = images.crop_set(img, 10, 40, 36)
        assert len(crops) == 10
        for i in range(5):
            np.testing.assert_array_equal(crops[5 + i], images.hflip(crops[i]))

    def test_small_image_crop_ratio(self):
        img = rand_image(32, 32)
        crops = images.crop_set(img, 5, 32, 28)
        assert len(crops) == 5
        assert all(c.shape == (28, 28, 3) for c in crops)
        back = images.resize_bicubic(crops[0], 32, 32)
        assert back.shape == (32, 32, 3)

    def test_crop_errors(self):
        img = rand_image(32, 32)
        with pytest.raises(ParameterError):
            images.crop_set(img, 7, 32, 28)
        with pytest.raises(ParameterError):
            images.crop_set(img, 5, 28, 32)


class TestResize:
    def test_constant_stays_constant(self):
        img = np.full((10, 10, 3), 0.37, dtype=np.float32)
        out = images.resize_bicubic(img, 23, 17)
        assert out.shape == (23, 17, 3)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_same_size_is_copy(self):
        img = rand_image(9, 9)
        out = images.resize_bicubic(img, 9, 9)
        np.testing.assert_array_equal(out, img)
        assert out is not img


class TestPPM:
    def test_round_trip_exact_on_quantized(self, tmp_path):
        img = (images.quantize_u8(rand_image(7, 5)).astype(np.float32)) / 255.0
        p = tmp_path / "img.ppm"
        images.write_ppm(img, p)
        back = images.read_ppm(p)
        np.testing.assert_array_equal(back, img)

    def test_round_half_up(self, tmp_path):
        img = np.array([[[0.5 / 255.0, 1.49 / 255.0, 1.5 / 255.0]]], dtype=np.float32)
        p = tmp_path / "q.ppm"
        images.write_ppm(img, p)
        raw = p.read_bytes()
        assert raw.endswith(bytes([1, 1, 2]))

    def test_grayscale_expanded(self, tmp_path):
        img = rand_image(4, 4, 1)
        p = tmp_path / "g.ppm"
        images.write_ppm(img, p)
        back = images.read_ppm(p)
        assert back.shape == (4, 4, 3)
        np.testing.assert_array_equal(back[..., 0], back[..., 1])

    def test_header_with_comment(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
        img = images.read_ppm(p)
        assert img.shape == (1, 2, 3)

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(FormatError):
            images.read_ppm(p)

    def test_rejects_truncated(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
        with pytest.raises(FormatError):
            images.read_ppm(p)

    def test_rejects_wrong_maxval(self, tmp_path):
        p = tmp_path / "m.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            images.read_ppm(p)
