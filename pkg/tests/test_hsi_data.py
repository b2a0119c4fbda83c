import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snapspec.hsi_data import (
    AUGMENTATIONS,
    HEADER_SIZE,
    CodedMask,
    HSICFormatError,
    HSICube,
    Measurement,
    apply_augmentation,
    augment,
    generate_synthetic_scene,
    load_cube,
    load_mask,
    load_measurement,
    random_crop,
    random_mask,
    save_cube,
    save_mask,
    save_measurement,
    write_hsic,
)


def test_cube_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cube = HSICube(rng.uniform(size=(4, 4, 3)))
    save_cube(cube, tmp_path / "c.hsic")
    loaded = load_cube(tmp_path / "c.hsic")
    assert loaded.data.dtype == np.float32
    np.testing.assert_array_equal(loaded.data, cube.data)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(0, 1, width=32)))
def test_round_trip_is_bit_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "x.hsic"
    save_cube(HSICube(data), path)
    out = load_cube(path).data
    assert out.tobytes() == data.tobytes()


def test_header_layout_and_payload_size(tmp_path):
    cube = HSICube(np.zeros((256, 256, 28), dtype=np.float32))
    path = tmp_path / "big.hsic"
    save_cube(cube, path)
    raw = path.read_bytes()
    assert len(raw) == 24 + 256 * 256 * 28 * 4
    magic, version, dtype, reserved, h, w, c, flags = struct.unpack("<4sBBHIIII", raw[:24])
    assert (magic, version, dtype, reserved) == (b"HSIC", 1, 1, 0)
    assert (h, w, c, flags) == (256, 256, 28, 0)


def test_payload_order_is_h_w_c(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4) / 24
    write_hsic(tmp_path / "o.hsic", data)
    payload = np.frombuffer((tmp_path / "o.hsic").read_bytes()[HEADER_SIZE:], dtype="<f4")
    np.testing.assert_array_equal(payload, data.ravel())


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.hsic"
    save_cube(HSICube(np.zeros((2, 2, 1))), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"HSIX"
    path.write_bytes(bytes(raw))
    with pytest.raises(HSICFormatError, match="magic"):
        load_cube(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.hsic"
    save_cube(HSICube(np.zeros((3, 3, 2))), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(HSICFormatError, match="truncated"):
        load_cube(path)


def test_dimension_overflow(tmp_path):
    path = tmp_path / "o.hsic"
    path.write_bytes(struct.pack("<4sBBHIIII", b"HSIC", 1, 1, 0, 2**31, 2**31, 28, 0))
    with pytest.raises(HSICFormatError, match="overflow"):
        load_cube(path)


def test_short_header(tmp_path):
    path = tmp_path / "s.hsic"
    path.write_bytes(b"HSIC\x01")
    with pytest.raises(HSICFormatError):
        load_cube(path)


def test_mask_and_measurement_containers(tmp_path):
    mask = random_mask(5, 6, seed=1)
    save_mask(mask, tmp_path / "m.hsic")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.hsic").data, mask.data)

    meas = Measurement(np.random.default_rng(0).uniform(size=(5, 10)))
    save_measurement(meas, tmp_path / "y.hsic")
    raw = (tmp_path / "y.hsic").read_bytes()
    assert struct.unpack("<I", raw[20:24])[0] & 1
    np.testing.assert_array_equal(load_measurement(tmp_path / "y.hsic").data, meas.data)
    # a cube file is not a measurement
    with pytest.raises(HSICFormatError):
        load_measurement(tmp_path / "m.hsic")


def test_measurement_width_check():
    Measurement(np.zeros((4, 10)), bands=4, step=2, scene_width=4)
    with pytest.raises(ValueError):
        Measurement(np.zeros((4, 9)), bands=4, step=2, scene_width=4)


def test_cube_validation():
    with pytest.raises(ValueError):
        HSICube(np.full((2, 2, 2), 1.5))
    with pytest.raises(ValueError):
        HSICube(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        CodedMask(-np.ones((2, 2)))


def test_scene_is_deterministic_and_bounded():
    a = generate_synthetic_scene(32, 24, 28, seed=5)
    b = generate_synthetic_scene(32, 24, 28, seed=5)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.shape == (32, 24, 28)
    assert a.data.min() >= 0 and a.data.max() <= 1
    c = generate_synthetic_scene(32, 24, 28, seed=6)
    assert not np.array_equal(a.data, c.data)


def test_scene_spectral_smoothness():
    # mean |second difference| along the band axis, over 100 seeded scenes
    vals = []
    for seed in range(100):
        x = generate_synthetic_scene(16, 16, 28, seed=seed).data.astype(np.float64)
        vals.append(np.abs(x[..., 2:] - 2 * x[..., 1:-1] + x[..., :-2]).mean())
    assert max(vals) < 0.2


@pytest.mark.parametrize("dims", [(0, 8, 3), (8, -1, 3), (8, 8, 0), (4, 8, 3)])
def test_scene_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        generate_synthetic_scene(*dims, seed=0)


def test_random_mask_kinds():
    b = random_mask(64, 64, seed=0)
    assert set(np.unique(b.data)) <= {0.0, 1.0}
    assert 0.4 < b.data.mean() < 0.6
    u = random_mask(64, 64, seed=0, kind="uniform")
    assert len(np.unique(u.data)) > 2
    with pytest.raises(ValueError):
        random_mask(4, 4, kind="gray")


def test_crop_shape_and_errors():
    scene = generate_synthetic_scene(512, 512, 28, seed=0)
    patch = random_crop(scene, 256, seed=3)
    assert patch.shape == (256, 256, 28)
    with pytest.raises(ValueError):
        random_crop(generate_synthetic_scene(16, 16, 3, seed=0), (17, 8))


def test_crop_is_a_window_of_the_source():
    scene = generate_synthetic_scene(20, 30, 4, seed=1)
    patch = random_crop(scene, (7, 9), seed=11)
    hits = [
        (i, j)
        for i in range(20 - 6)
        for j in range(30 - 8)
        if np.array_equal(scene.data[i:i + 7, j:j + 9], patch.data)
    ]
    assert hits


def test_augment_identity_and_involution():
    cube = generate_synthetic_scene(12, 12, 5, seed=2)
    np.testing.assert_array_equal(apply_augmentation(cube, "identity").data, cube.data)
    twice = apply_augmentation(apply_augmentation(cube, "rot180"), "rot180")
    np.testing.assert_array_equal(twice.data, cube.data)


@pytest.mark.parametrize("name", AUGMENTATIONS)
def test_augment_preserves_band_multisets(name):
    cube = HSICube(np.random.default_rng(0).uniform(size=(6, 6, 4)))
    out = apply_augmentation(cube, name)
    for c in range(4):
        np.testing.assert_array_equal(np.sort(out.data[..., c].ravel()), np.sort(cube.data[..., c].ravel()))


def test_augment_draw_is_uniform_and_seeded():
    cube = HSICube(np.random.default_rng(0).uniform(size=(5, 5, 2)))
    np.testing.assert_array_equal(augment(cube, seed=4).data, augment(cube, seed=4).data)
    seen = set()
    for seed in range(600):
        out = augment(cube, seed).data
        for name in AUGMENTATIONS:
            if np.array_equal(out, apply_augmentation(cube, name).data):
                seen.add(name)
                break
    assert seen == set(AUGMENTATIONS)
