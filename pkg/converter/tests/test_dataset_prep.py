"""prepare_dataset and the IDX reader."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from modelconv import DatasetError, prepare_dataset
from modelconv.datasets import read_idx


def _write_idx(path: Path, arr: np.ndarray, code: int, dtype: str) -> None:
    dims = struct.pack(f">{arr.ndim}I", *arr.shape)
    path.write_bytes(bytes([0, 0, code, arr.ndim]) + dims
                     + arr.astype(dtype).tobytes())


def test_idx_u8_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (7, 5, 4), dtype=np.uint8)
    p = tmp_path / "x.idx"
    _write_idx(p, arr, 0x08, ">u1")
    got = read_idx(p)
    assert got.shape == (7, 5, 4)
    assert np.array_equal(got, arr)


def test_idx_f4_big_endian_payload(tmp_path):
    arr = np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)
    p = tmp_path / "x.idx"
    _write_idx(p, arr, 0x0D, ">f4")
    got = read_idx(p)
    assert got.dtype == np.dtype(">f4")
    assert np.array_equal(got.astype("<f4"), arr)


def test_idx_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.idx"
    p.write_bytes(b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(DatasetError, match="magic"):
        read_idx(p)


def test_idx_rejects_short_payload(tmp_path):
    p = tmp_path / "x.idx"
    p.write_bytes(bytes([0, 0, 0x08, 2]) + struct.pack(">II", 3, 3) + b"\x00" * 5)
    with pytest.raises(DatasetError, match="shorter"):
        read_idx(p)


def test_idx_rejects_unknown_dtype(tmp_path):
    p = tmp_path / "x.idx"
    p.write_bytes(bytes([0, 0, 0x42, 1]) + struct.pack(">I", 0))
    with pytest.raises(DatasetError, match="0x42"):
        read_idx(p)


def test_prepare_from_idx_with_scale_and_pad(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (6, 28, 28), dtype=np.uint8)
    src = tmp_path / "digits.idx"
    _write_idx(src, imgs, 0x08, ">u1")
    out = tmp_path / "out"
    spec = {"input_shape": [1, 32, 32], "scale": 1.0 / 255.0, "pad": [2, 2]}
    n = prepare_dataset(src, spec, out)
    assert n == 6

    meta = json.loads((out / "samples.json").read_text())
    assert meta["shape"] == [1, 32, 32]
    assert meta["count"] == 6
    # the spec is recorded verbatim, plus the source file name
    assert meta["preprocessing"]["scale"] == spec["scale"]
    assert meta["preprocessing"]["pad"] == [2, 2]
    assert meta["preprocessing"]["source_file"] == "digits.idx"

    got = np.frombuffer((out / "samples.bin").read_bytes(),
                        dtype="<f4").reshape(6, 1, 32, 32)
    want = np.pad((imgs.astype(np.float32) * np.float32(1.0 / 255.0)),
                  ((0, 0), (2, 2), (2, 2)))
    assert np.array_equal(got[:, 0], want)
    assert np.all(got[:, 0, 0, :] == 0.0)  # padded border


def test_prepare_from_npy_with_mean_std(tmp_path):
    rng = np.random.default_rng(2)
    x = rng.uniform(0.0, 1.0, (4, 3, 6, 6)).astype(np.float32)
    src = tmp_path / "x.npy"
    np.save(src, x)
    out = tmp_path / "out"
    mean = [0.485, 0.456, 0.406]
    std = [0.229, 0.224, 0.225]
    prepare_dataset(src, {"input_shape": [3, 6, 6], "mean": mean, "std": std}, out)

    got = np.frombuffer((out / "samples.bin").read_bytes(),
                        dtype="<f4").reshape(4, 3, 6, 6)
    m = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    assert np.array_equal(got, (x - m) / s)


def test_prepare_scalar_mean(tmp_path):
    x = np.full((2, 1, 4, 4), 0.5, dtype=np.float32)
    src = tmp_path / "x.npy"
    np.save(src, x)
    out = tmp_path / "out"
    prepare_dataset(src, {"input_shape": [1, 4, 4], "mean": 0.5}, out)
    got = np.frombuffer((out / "samples.bin").read_bytes(), dtype="<f4")
    assert np.all(got == 0.0)


def test_prepare_limit(tmp_path):
    x = np.arange(5 * 4, dtype=np.float32).reshape(5, 4)
    src = tmp_path / "x.npy"
    np.save(src, x)
    out = tmp_path / "out"
    n = prepare_dataset(src, {"input_shape": [4], "limit": 2}, out)
    assert n == 2
    got = np.frombuffer((out / "samples.bin").read_bytes(), dtype="<f4")
    assert np.array_equal(got, x[:2].reshape(-1))


def test_documented_strides(tmp_path):
    # 28x28 grayscale -> 784 floats per sample; 3x224x224 -> 150528
    gray = tmp_path / "gray.npy"
    np.save(gray, np.zeros((2, 28, 28), dtype=np.float32))
    out1 = tmp_path / "o1"
    prepare_dataset(gray, {"input_shape": [1, 28, 28]}, out1)
    assert (out1 / "samples.bin").stat().st_size == 2 * 784 * 4

    rgb = tmp_path / "rgb.npy"
    np.save(rgb, np.zeros((2, 3, 224, 224), dtype=np.float32))
    out2 = tmp_path / "o2"
    prepare_dataset(rgb, {"input_shape": [3, 224, 224],
                          "mean": [0.485, 0.456, 0.406],
                          "std": [0.229, 0.224, 0.225]}, out2)
    assert (out2 / "samples.bin").stat().st_size == 2 * 150528 * 4
    meta = json.loads((out2 / "samples.json").read_text())
    assert meta["preprocessing"]["mean"] == [0.485, 0.456, 0.406]
    assert meta["preprocessing"]["std"] == [0.229, 0.224, 0.225]


def test_prepare_shape_mismatch_names_counts(tmp_path):
    x = np.zeros((3, 28, 28), dtype=np.float32)
    src = tmp_path / "x.npy"
    np.save(src, x)
    with pytest.raises(DatasetError, match=r"784.*\[1, 32, 32\].*1024"):
        prepare_dataset(src, {"input_shape": [1, 32, 32]}, tmp_path / "out")


def test_prepare_missing_input_shape(tmp_path):
    src = tmp_path / "x.npy"
    np.save(src, np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(DatasetError, match="input_shape"):
        prepare_dataset(src, {}, tmp_path / "out")


def test_prepare_mean_count_mismatch(tmp_path):
    src = tmp_path / "x.npy"
    np.save(src, np.zeros((2, 3, 4, 4), dtype=np.float32))
    with pytest.raises(DatasetError, match="mean has 2 entries for 3 channels"):
        prepare_dataset(src, {"input_shape": [3, 4, 4], "mean": [0.1, 0.2]},
                        tmp_path / "out")


def test_prepare_empty_after_limit(tmp_path):
    src = tmp_path / "x.npy"
    np.save(src, np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(DatasetError, match="no samples"):
        prepare_dataset(src, {"input_shape": [4], "limit": 0}, tmp_path / "out")
