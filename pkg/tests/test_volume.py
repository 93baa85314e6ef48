import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cartseg.errors import CartsegError
from cartseg.volume import (
    Cartilage,
    LabelVolume,
    RoiBox,
    Volume,
    argmax_labels,
    crop,
    decode_csgv,
    downsample,
    encode_csgv,
    one_hot,
    paste_accumulate,
    read_csgv,
    write_csgv,
)

dims_st = st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7))


def test_volume_rejects_bad_spacing():
    with pytest.raises(CartsegError):
        Volume(np.zeros((2, 2, 2), np.float32), (1.0, 0.0, 1.0))


def test_label_values_checked():
    with pytest.raises(CartsegError):
        LabelVolume(np.full((2, 2, 2), 4, np.uint8), (1, 1, 1))


def test_crop_example():
    arr = np.arange(4 * 5 * 6, dtype=np.float32).reshape(4, 5, 6)
    vol = Volume(arr, (1, 1, 1))
    out = crop(vol, RoiBox((1, 2, 3), (2, 2, 3), Cartilage.FC))
    assert np.array_equal(out.array, arr[1:3, 2:4, 3:6])
    assert out.spacing == vol.spacing


def test_crop_out_of_bounds():
    vol = Volume(np.zeros((4, 4, 4), np.float32), (1, 1, 1))
    with pytest.raises(CartsegError, match="roi-out-of-bounds"):
        crop(vol, RoiBox((2, 0, 0), (3, 2, 2), Cartilage.TC))


def test_clamped_box_and_oversize():
    box = RoiBox.clamped((-3, 5, 1), (4, 4, 4), Cartilage.PC, (8, 8, 8))
    assert box.origin == (0, 4, 1)
    with pytest.raises(CartsegError, match="roi-larger-than-volume"):
        RoiBox.clamped((0, 0, 0), (9, 4, 4), Cartilage.PC, (8, 8, 8))


def test_paste_roundtrip_and_max_rule():
    dst = np.zeros((4, 6, 6, 6), np.float32)
    a = RoiBox((0, 0, 0), (3, 3, 3), Cartilage.FC)
    b = RoiBox((2, 2, 2), (3, 3, 3), Cartilage.FC)
    paste_accumulate(dst, np.full((3, 3, 3), 0.3), a, 1)
    paste_accumulate(dst, np.full((3, 3, 3), 0.8), b, 1)
    assert dst[1, 2, 2, 2] == pytest.approx(0.8)
    assert dst[1, 0, 0, 0] == pytest.approx(0.3)
    assert dst[1, 4, 4, 4] == pytest.approx(0.8)
    assert not dst[[0, 2, 3]].any()
    fresh = np.zeros((4, 6, 6, 6), np.float32)
    paste_accumulate(fresh, np.ones((3, 3, 3)), a, 2, rule="overwrite")
    assert np.array_equal(fresh[2][a.slices], np.ones((3, 3, 3)))


def test_paste_background_rejected():
    with pytest.raises(CartsegError, match="background-not-writable"):
        paste_accumulate(np.zeros((4, 2, 2, 2)), np.zeros((1, 1, 1)), RoiBox((0, 0, 0), (1, 1, 1), 1), 0)


def test_downsample_example():
    arr = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    out = downsample(Volume(arr, (0.5, 0.5, 1.0)), (2, 2, 1))
    assert out.dims == (2, 2, 1)
    assert out.spacing == (1.0, 1.0, 1.0)
    # block (0,0): values 0,1,4,5
    assert out.array[0, 0, 0] == pytest.approx(2.5)
    assert out.array[1, 1, 0] == pytest.approx((10 + 11 + 14 + 15) / 4)


def test_downsample_pads_by_replication():
    arr = np.array([1.0, 2.0, 3.0], np.float32).reshape(3, 1, 1)
    out = downsample(Volume(arr, (1, 1, 1)), (2, 1, 1))
    assert out.array[:, 0, 0].tolist() == pytest.approx([1.5, 3.0])


def test_downsample_invalid_factor():
    with pytest.raises(CartsegError, match="invalid-factor"):
        downsample(Volume(np.zeros((2, 2, 2), np.float32), (1, 1, 1)), (0, 1, 1))


@given(arrays(np.uint8, dims_st, elements=st.integers(0, 3)))
def test_one_hot_argmax_roundtrip(labels):
    lab = LabelVolume(labels, (1, 1, 1))
    oh = one_hot(lab)
    assert oh.shape == (4, *labels.shape)
    assert np.all(oh.sum(axis=0) == 1.0)
    assert np.array_equal(argmax_labels(oh).array, labels)


def test_argmax_tie_break_lowest():
    probs = np.zeros((4, 1, 1, 2), np.float32)
    probs[:, 0, 0, 0] = [0.0, 0.5, 0.5, 0.0]
    probs[:, 0, 0, 1] = [0.25, 0.25, 0.25, 0.25]
    assert argmax_labels(probs).array.ravel().tolist() == [1, 0]


def test_argmax_non_finite():
    probs = np.zeros((4, 1, 1, 1), np.float32)
    probs[2] = np.nan
    with pytest.raises(CartsegError, match="non-finite-probability"):
        argmax_labels(probs)


@given(arrays(np.float32, dims_st, elements=st.floats(-10, 10, width=32)))
def test_csgv_roundtrip_real(arr):
    vol = Volume(arr, (0.365, 0.365, 0.7))
    buf = encode_csgv(vol)
    back = decode_csgv(buf)
    assert isinstance(back, Volume)
    assert np.array_equal(back.array, arr)
    assert encode_csgv(back) == buf


def test_csgv_layout_is_x_fastest(tmp_path):
    arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = tmp_path / "v.csgv"
    write_csgv(path, LabelVolume(arr % 4, (1.0, 2.0, 3.0)))
    raw = path.read_bytes()
    magic, ver, dt, nx, ny, nz, sx, sy, sz = struct.unpack_from("<4sBB3I3f", raw)
    assert (magic, ver, dt, nx, ny, nz) == (b"CSGV", 1, 1, 2, 3, 4)
    assert (sx, sy, sz) == (1.0, 2.0, 3.0)
    payload = raw[struct.calcsize("<4sBB3I3f") :]
    # second payload byte is voxel (1, 0, 0)
    assert payload[1] == (arr[1, 0, 0] % 4)
    assert np.array_equal(read_csgv(path).array, arr % 4)


@pytest.mark.parametrize(
    "mutate,code",
    [
        (lambda b: b"XSGV" + b[4:], "csgv-bad-magic"),
        (lambda b: b[:4] + bytes([2]) + b[5:], "csgv-bad-version"),
        (lambda b: b[:5] + bytes([7]) + b[6:], "csgv-bad-dtype"),
        (lambda b: b[:-1], "csgv-truncated"),
        (lambda b: b[:10], "csgv-truncated"),
    ],
)
def test_csgv_rejects(mutate, code):
    buf = encode_csgv(Volume(np.zeros((2, 2, 2), np.float32), (1, 1, 1)))
    with pytest.raises(CartsegError, match=code):
        decode_csgv(mutate(buf))
