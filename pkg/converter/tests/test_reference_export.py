"""export_reference: labels, golden logits, self-consistency, abort rules."""

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

import onnx_fixtures as fx
from modelconv import ReferenceExportError, convert_model, export_reference
from modelconv.evaluate import Evaluator, logits
from modelconv.portable import read_model, write_samples


def _dataset(tmp_path: Path, count: int, seed: int = 3) -> Path:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (count, 1, 8, 8)).astype("<f4")
    d = tmp_path / "data"
    write_samples(d, (1, 8, 8), x.tobytes(), count, {"source": "synthetic"})
    return d


def _model_dir(tmp_path: Path, **kw) -> Path:
    data, _ = fx.mini_cnn(**kw)
    src = tmp_path / "m.onnx"
    src.write_bytes(data)
    out = tmp_path / "model"
    convert_model(src, out)
    return out


def test_labels_and_logits_consistent_on_100(tmp_path):
    # ACCEPTANCE (secondary): argmax(golden logits) == labels on 100 samples
    model_dir = _model_dir(tmp_path)
    data_dir = _dataset(tmp_path, 100)
    labels = export_reference(model_dir, data_dir)
    assert len(labels) == 100

    doc = json.loads((data_dir / "labels.json").read_text())
    raw = (data_dir / "golden_logits.bin").read_bytes()
    classes = doc["num_classes"]
    assert classes == 10
    assert len(raw) == 4 * classes * 100
    rows = np.frombuffer(raw, dtype="<f4").reshape(100, classes)
    agree = [int(np.argmax(r)) == lab for r, lab in zip(rows, doc["labels"])]
    assert all(agree)
    assert doc["labels"] == labels
    print(f"ACCEPTANCE S2 reference-self-consistency: PASS "
          f"(argmax(golden) == labels on all {len(agree)} samples)")


def test_labels_json_fields(tmp_path):
    model_dir = _model_dir(tmp_path)
    data_dir = _dataset(tmp_path, 5)
    export_reference(model_dir, data_dir)
    doc = json.loads((data_dir / "labels.json").read_text())
    assert doc["format_version"] == "1.0"
    assert doc["samples_crc32"] == zlib.crc32((data_dir / "samples.bin").read_bytes())
    assert "float32" in doc["source"]
    assert all(0 <= v < 10 for v in doc["labels"])


def test_empty_dataset_rejected(tmp_path):
    model_dir = _model_dir(tmp_path)
    d = tmp_path / "data"
    write_samples(d, (1, 8, 8), b"", 0, {})
    with pytest.raises(ReferenceExportError, match="empty"):
        export_reference(model_dir, d)


def test_shape_mismatch_aborts(tmp_path):
    model_dir = _model_dir(tmp_path)
    d = tmp_path / "data"
    x = np.zeros((4, 3, 3), dtype="<f4")
    write_samples(d, (3, 3), x.tobytes(), 4, {})
    with pytest.raises(ReferenceExportError, match="sample 0"):
        export_reference(model_dir, d)
    assert not (d / "labels.json").exists()


def test_nonfinite_logit_aborts(tmp_path):
    # poison one fc weight with inf after conversion; every logit goes
    # non-finite and the export must abort without writing partial output
    out = tmp_path / "model"
    convert_model(_write_file(tmp_path, fx.mini_cnn()[0]), out)
    blob = bytearray((out / "weights.bin").read_bytes())
    doc = json.loads((out / "model.json").read_text())
    info = doc["tensors"]["fc_w"]
    blob[info["offset"]:info["offset"] + 4] = struct.pack("<f", np.inf)
    (out / "weights.bin").write_bytes(bytes(blob))
    doc["tensors"]["fc_w"]["crc32"] = zlib.crc32(
        bytes(blob[info["offset"]:info["offset"] + info["byte_length"]])
    )
    (out / "model.json").write_text(json.dumps(doc, indent=1, sort_keys=True))

    d = _dataset(tmp_path, 3)
    with pytest.raises(ReferenceExportError, match="sample 0"):
        export_reference(out, d)
    assert not (d / "labels.json").exists()


def _write_file(tmp_path: Path, data: bytes) -> Path:
    p = tmp_path / "m.onnx"
    p.write_bytes(data)
    return p


def test_evaluator_conv_against_direct_computation(tmp_path):
    # pin the evaluator's Conv2D to a literal dense computation
    model_dir = _model_dir(tmp_path)
    graph = read_model(model_dir)
    ev = Evaluator(graph)
    rng = np.random.default_rng(11)
    x = rng.uniform(-1.0, 1.0, 64).astype(np.float32)
    got = ev.run(x)

    w = {n: np.frombuffer(t.data, dtype="<f4").reshape(t.shape)
         for n, t in graph.initializers.items()}
    img = x.reshape(1, 8, 8).astype(np.float64)
    pad = np.pad(img, ((0, 0), (1, 1), (1, 1)))
    conv = np.zeros((4, 8, 8))
    for o in range(4):
        for i in range(8):
            for j in range(8):
                conv[o, i, j] = np.sum(pad[:, i:i + 3, j:j + 3] * w["conv_w"][o]) \
                    + w["conv_b"][o]
    relu = np.maximum(conv, 0.0)
    pooled = np.zeros((4, 4, 4))
    for i in range(4):
        for j in range(4):
            pooled[:, i, j] = relu[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(1, 2))
    logits_ref = pooled.reshape(-1) @ w["fc_w"].T.astype(np.float64) + w["fc_b"]
    assert np.allclose(got, logits_ref, atol=1e-4)


def test_softmax_drop_preserves_top1(tmp_path):
    plain = _model_dir(tmp_path)
    data2, _ = fx.mini_cnn(softmax_tail=True)
    src2 = tmp_path / "m2.onnx"
    src2.write_bytes(data2)
    soft = tmp_path / "model2"
    convert_model(src2, soft)

    rng = np.random.default_rng(4)
    samples = [rng.uniform(0.0, 1.0, 64).astype(np.float32) for _ in range(20)]
    a = logits(read_model(plain), samples)
    b = logits(read_model(soft), samples)
    assert np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1))
