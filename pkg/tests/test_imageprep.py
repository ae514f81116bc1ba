import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mozart.errors import InvalidArgument
from mozart.imageprep import (BACKBONE_PREPROCESSING, IDENTITY_AUGMENT, IMAGENET_BGR_MEANS, MEAN_SUBTRACT,
                              SCALE_TO_PLUS_MINUS_ONE, AugmentParams, PreprocessMode, affine_transform,
                              augment, preprocess, read_png, resize, write_png)

pixels = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3])),
                elements=st.floats(0, 255))


def test_scale_endpoints_and_midpoint():
    out = preprocess(np.array([[0.0, 127.5, 255.0]]), SCALE_TO_PLUS_MINUS_ONE)
    assert out[0, :, 0].tolist() == [-1.0, 0.0, 1.0]


half_steps = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3])),
                    elements=st.integers(0, 510).map(lambda k: k / 2.0))


@given(half_steps)
def test_scale_range_and_monotone(img):
    out = preprocess(img, SCALE_TO_PLUS_MINUS_ONE)
    assert np.all(out >= -1.0) and np.all(out <= 1.0)
    flat_in, flat_out = img.reshape(-1), out.reshape(-1)
    order = np.argsort(flat_in, kind="stable")
    assert np.all(np.diff(flat_out[order]) >= 0)
    assert np.all((np.diff(flat_in[order]) > 0) <= (np.diff(flat_out[order]) > 0))


def test_mean_subtract_of_mean_image_is_zero():
    rgb = np.empty((2, 3, 3))
    rgb[..., :] = IMAGENET_BGR_MEANS[::-1]  # RGB order on input
    assert np.array_equal(preprocess(rgb, MEAN_SUBTRACT), np.zeros((2, 3, 3)))


def test_mean_subtract_channel_order():
    img = np.zeros((1, 1, 3))
    img[0, 0] = [10.0, 20.0, 30.0]  # R, G, B
    out = preprocess(img, MEAN_SUBTRACT)[0, 0]
    np.testing.assert_allclose(out, [30.0 - 103.939, 20.0 - 116.779, 10.0 - 123.68])


def test_mean_subtract_needs_three_channels():
    with pytest.raises(InvalidArgument):
        preprocess(np.zeros((2, 2, 1)), MEAN_SUBTRACT)
    with pytest.raises(InvalidArgument):
        PreprocessMode("mean_subtract", (1.0, 2.0))
    with pytest.raises(InvalidArgument):
        preprocess(np.full((2, 2), 300.0), SCALE_TO_PLUS_MINUS_ONE)


def test_custom_means_are_configuration():
    mode = PreprocessMode("mean_subtract", (1.0, 2.0, 3.0))
    out = preprocess(np.full((1, 1, 3), 5.0), mode)
    assert out[0, 0].tolist() == [4.0, 3.0, 2.0]


def test_backbone_table():
    assert BACKBONE_PREPROCESSING["InceptionV3"] == SCALE_TO_PLUS_MINUS_ONE
    assert BACKBONE_PREPROCESSING["Xception"] == SCALE_TO_PLUS_MINUS_ONE
    assert BACKBONE_PREPROCESSING["ResNet50"] == MEAN_SUBTRACT


def test_matches_reference_preprocessing():
    tf = pytest.importorskip("tensorflow")
    gen = np.random.default_rng(0)
    img = gen.integers(0, 256, size=(4, 5, 3)).astype(np.float64)
    caffe = tf.keras.applications.resnet50.preprocess_input(img.astype(np.float32)[None].copy())[0]
    np.testing.assert_allclose(preprocess(img, MEAN_SUBTRACT), caffe, atol=1e-4)
    scaled = tf.keras.applications.inception_v3.preprocess_input(img.astype(np.float32)[None].copy())[0]
    np.testing.assert_allclose(preprocess(img, SCALE_TO_PLUS_MINUS_ONE), scaled, atol=1e-6)


# -- augmentation ---------------------------------------------------------------

@given(pixels, st.integers(0, 2**32 - 1))
def test_identity_augment_bit_exact(img, seed):
    out = augment(img, IDENTITY_AUGMENT, np.random.default_rng(seed))
    assert out.tobytes() == img.reshape(out.shape).tobytes()


def test_flip_only_two_by_two():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert affine_transform(img, flip=True)[:, :, 0].tolist() == [[2.0, 1.0], [4.0, 3.0]]


@given(pixels)
def test_double_flip_is_identity(img):
    once = affine_transform(img, flip=True)
    assert affine_transform(once, flip=True).tobytes() == np.asarray(img).reshape(once.shape).tobytes()


def test_rotation_90_moves_delta_pixel():
    img = np.zeros((9, 9))
    img[2, 6] = 1.0  # row 2, column 6: up-right of centre (4, 4)
    out = affine_transform(img, rotation_degrees=90.0)[:, :, 0]
    # counter-clockwise quarter turn as displayed: (dx, dy) = (2, -2) -> (-2, -2)
    r, c = np.unravel_index(np.argmax(out), out.shape)
    assert abs(r - 2) <= 1 and abs(c - 2) <= 1
    assert abs(out.sum() - 1.0) < 1e-6


def test_rotation_off_grid_angle_conserves_interior_mass():
    img = np.zeros((21, 21))
    img[8:13, 8:13] = 1.0
    out = affine_transform(img, rotation_degrees=30.0)
    assert abs(out.sum() - img.sum()) < 0.05 * img.sum()


def test_zoom_and_shear_keep_shape():
    img = np.arange(48.0).reshape(6, 8)
    for kwargs in (dict(zoom=1.1), dict(zoom=0.9), dict(shear=0.1), dict(shear=-0.1, rotation_degrees=-10)):
        assert affine_transform(img, **kwargs).shape == (6, 8, 1)


def test_zoom_magnifies_about_centre():
    img = np.zeros((11, 11))
    img[5, 8] = 1.0
    out = affine_transform(img, zoom=2.0)[:, :, 0]
    # output column c samples source column 5 + (c - 5) / 2
    assert out[5, 10] == 0.5 and out[5, 8] == 0.0
    centred = np.zeros((11, 11))
    centred[5, 5] = 1.0
    assert affine_transform(centred, zoom=2.0)[5, 5, 0] == 1.0


def test_shear_direction():
    img = np.zeros((5, 5))
    img[4, 2] = 1.0  # dy = +2 from centre
    out = affine_transform(img, shear=0.5)[:, :, 0]
    # x' = x + 0.5 * dy -> column 3
    assert out[4, 3] == pytest.approx(1.0)


def test_augment_deterministic_and_in_range():
    img = np.random.default_rng(0).uniform(0, 255, size=(12, 10, 3))
    a = augment(img, AugmentParams(), np.random.default_rng(7))
    b = augment(img, AugmentParams(), np.random.default_rng(7))
    assert a.tobytes() == b.tobytes() and a.shape == img.shape
    assert a.min() >= 0 and a.max() <= 255 + 1e-9


def test_augment_consumes_fixed_draws():
    g1, g2 = np.random.default_rng(3), np.random.default_rng(3)
    augment(np.ones((3, 3)), AugmentParams(), g1)
    augment(np.ones((3, 3)), IDENTITY_AUGMENT, g2)
    assert g1.random() == g2.random()


def test_augment_params_validation():
    with pytest.raises(InvalidArgument):
        AugmentParams(zoom_fraction=1.0)
    with pytest.raises(InvalidArgument):
        AugmentParams(rotation_degrees=-1)


# -- resize ------------------------------------------------------------------------

def test_resize_same_size_identity():
    img = np.random.default_rng(1).uniform(0, 255, size=(299, 299, 3))
    assert resize(img, 299, 299).tobytes() == img.tobytes()


@given(st.floats(0, 255), st.integers(1, 12), st.integers(1, 12))
def test_resize_constant(value, h, w):
    out = resize(np.full((2, 2), value), h, w)
    assert out.shape == (h, w, 1) and np.all(out == value)


def test_resize_ramp_by_hand():
    ramp = np.arange(16.0).reshape(4, 4)  # 4r + c
    # half-pixel centres: target (0, 0) samples source (0.5, 0.5) -> mean of 0, 1, 4, 5
    expected = [[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4], [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]]
    assert resize(ramp, 2, 2)[:, :, 0].tolist() == expected == [[2.5, 4.5], [10.5, 12.5]]


def test_resize_validation():
    with pytest.raises(InvalidArgument):
        resize(np.ones((2, 2)), 0, 2)
    with pytest.raises(InvalidArgument):
        resize(np.ones((2, 2)), 2.5, 2)


# -- PNG --------------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(5, 7), (5, 7, 3)])
def test_png_round_trip_raw_values(tmp_path, shape):
    img = np.random.default_rng(2).integers(0, 256, size=shape).astype(np.float64)
    write_png(img, tmp_path / "x.png")
    back = read_png(tmp_path / "x.png")
    assert back.tobytes() == img.reshape(back.shape).tobytes()


def test_png_unsupported_mode(tmp_path):
    from PIL import Image
    Image.new("RGBA", (2, 2)).save(tmp_path / "a.png")
    with pytest.raises(InvalidArgument):
        read_png(tmp_path / "a.png")


def test_image_validation():
    with pytest.raises(InvalidArgument):
        preprocess(np.zeros((2, 2, 2)), SCALE_TO_PLUS_MINUS_ONE)
    with pytest.raises(InvalidArgument):
        affine_transform(np.full((2, 2), math.nan))
