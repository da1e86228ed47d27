"""Model format and scalar runtime tests.

Expected numerics come from hand arithmetic on exactly representable values
or from exact-rational references computed inline, never from the runtime
itself.
"""

import json
from fractions import Fraction
from pathlib import Path

import pytest

from certinfer.errors import RangeOverflowError
from certinfer.model import (
    ChecksumError,
    F32Tensor,
    Graph,
    ModelFormatError,
    Node,
    UnsupportedOpError,
    count_macs,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    validate_graph,
)
from certinfer.rounding import RoundingMode
from certinfer.runtime import BackendConfig, PreparedGraph, quantize_graph, run
from certinfer.softfloat import SoftFloat

from oracles import oracle_round

RNE = RoundingMode.RNE


def gemm_graph(w, b=None, name="g"):
    """[1,k] x [m,k]^T picture: weights already stored row-per-output."""
    out_dim = len(w)
    k = len(w[0])
    inits = {"w": F32Tensor((out_dim, k), [float(v) for row in w for v in row])}
    inputs = ["x", "w"]
    if b is not None:
        inits["b"] = F32Tensor((out_dim,), [float(v) for v in b])
        inputs.append("b")
    return Graph(
        name=name,
        nodes=[Node("fc", "Gemm", tuple(inputs), ("y",), {})],
        initializers=inits,
        inputs=[("x", (1, k))],
        outputs=[("y", (1, out_dim))],
    )


def run_model(graph, cfg, sample, workers=1):
    return run(quantize_graph(graph, cfg), sample, workers=workers)


def test_identity_gemm_returns_input():
    g = gemm_graph([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    cfg = BackendConfig("float", 24, RNE)
    out = run_model(g, cfg, [0.5, -2.25, 7.0])
    assert [v.to_float() for v in out.data] == [0.5, -2.25, 7.0]


def test_gemm_bias_and_rounding():
    # p=4: 3*5 + 1 = 16 exact; 3*5 + 0.4 -> 15.4 rounds to 15.5? p=4 grid at 8..16 step 1
    g = gemm_graph([[3.0]], b=[1.0])
    cfg = BackendConfig("float", 4, RNE)
    assert run_model(g, cfg, [5.0]).data[0].as_fraction() == 16
    g2 = gemm_graph([[3.0]], b=[0.4])
    got = run_model(g2, cfg, [5.0]).data[0].as_fraction()
    bias4 = oracle_round(Fraction(float(0.4)), 4, "rne")
    assert got == oracle_round(Fraction(15) + bias4, 4, "rne")


def conv_graph(x_shape, w_shape, w_vals, attrs, bias=None):
    inits = {"w": F32Tensor(w_shape, [float(v) for v in w_vals])}
    inputs = ["x", "w"]
    if bias is not None:
        inits["b"] = F32Tensor((w_shape[0],), [float(v) for v in bias])
        inputs.append("b")
    return Graph(
        name="conv",
        nodes=[Node("c0", "Conv2D", tuple(inputs), ("y",), attrs)],
        initializers=inits,
        inputs=[("x", x_shape)],
        outputs=[("y", (1,))],  # runtime infers real shape; manifest shape is advisory
    )


def test_conv_hand_case():
    # 3x3 input 1..9, 2x2 kernel picking main diagonal: y[i,j] = x[i,j] + x[i+1,j+1]
    g = conv_graph((1, 1, 3, 3), (1, 1, 2, 2), [1, 0, 0, 1], {})
    out = run_model(g, BackendConfig("float", 24, RNE), [float(v) for v in range(1, 10)])
    assert out.shape == (1, 1, 2, 2)
    assert [v.to_float() for v in out.data] == [6.0, 8.0, 12.0, 14.0]


def test_conv_padding_contributes_zeros():
    # 2x2 input, 3x3 all-ones kernel, pad 1: each output sums the in-bounds part
    g = conv_graph(
        (1, 1, 2, 2), (1, 1, 3, 3), [1] * 9, {"pads": [1, 1, 1, 1], "strides": [1, 1]}
    )
    out = run_model(g, BackendConfig("float", 24, RNE), [1.0, 2.0, 3.0, 4.0])
    assert out.shape == (1, 1, 2, 2)
    assert [v.to_float() for v in out.data] == [10.0, 10.0, 10.0, 10.0]


def test_conv_channel_ky_kx_order_is_contractual():
    """At p=2 RTZ the reduction order is observable; the fixed (c, ky, kx)
    enumeration gives exactly this value."""
    # two channels, 1x2 kernel; values chosen so truncation bites differently per order
    w = [1.0, 1.0, 1.0, 1.0]  # shape (1, 2, 1, 2)
    x = [1.0, 0.75, 3.0, 0.25]  # ch0: [1, .75], ch1: [3, .25]
    g = conv_graph((1, 2, 1, 2), (1, 2, 1, 2), w, {})
    got = run_model(g, BackendConfig("float", 2, RoundingMode.RTZ), x)
    # exact products in (c, ky, kx) order: 1, .75, 3, .25 -> naive RTZ p=2:
    # 1+.75=1.75->1.5; 1.5+3=4.5->4; 4+.25=4.25->4
    assert got.data[0].as_fraction() == 4


def test_relu_and_maxpool():
    nodes = [
        Node("r", "ReLU", ("x",), ("t",), {}),
        Node("p", "MaxPool", ("t",), ("y",), {"kernel": [2, 2], "strides": [2, 2]}),
    ]
    g = Graph("rp", nodes, {}, [("x", (1, 1, 2, 4))], [("y", (1, 1, 1, 2))])
    out = run_model(g, BackendConfig("float", 24, RNE), [-5.0, 1.0, 0.5, -0.25, 2.0, -3.0, -1.0, -2.0])
    assert out.shape == (1, 1, 1, 2)
    assert [v.to_float() for v in out.data] == [2.0, 0.5]


def test_maxpool_padding_never_wins():
    g = Graph(
        "mp",
        [Node("p", "MaxPool", ("x",), ("y",), {"kernel": [2, 2], "strides": [1, 1], "pads": [1, 1, 0, 0]})],
        {},
        [("x", (1, 1, 2, 2))],
        [("y", (1, 1, 2, 2))],
    )
    out = run_model(g, BackendConfig("float", 24, RNE), [-1.0, -2.0, -3.0, -4.0])
    # top-left window sees only x[0,0] = -1 even though padding surrounds it
    assert out.data[0].to_float() == -1.0


def test_global_average_pool_single_rounding():
    g = Graph(
        "gap",
        [Node("g", "GlobalAveragePool", ("x",), ("y",), {})],
        {},
        [("x", (1, 1, 2, 2))],
        [("y", (1, 1, 1, 1))],
    )
    # fixed f=2: raws [2,1,1,2] sum 6, /4 = 1.5 -> RNE even -> 2
    cfg = BackendConfig("fixed", 2, RNE, dot="accurate")
    out = run_model(g, cfg, [0.5, 0.25, 0.25, 0.5])
    assert out.data[0].raw == 2
    # float: mean of [1,1,1,2**-20] at p=8 equals round(exact mean), not
    # the twice-rounded sum/4
    cfgf = BackendConfig("float", 8, RNE)
    vals = [1.0, 1.0, 1.0, 2.0**-20]
    outf = run_model(g, cfgf, vals)
    exact_mean = sum(Fraction(v) for v in vals) / 4
    assert outf.data[0].as_fraction() == oracle_round(exact_mean, 8, "rne")


def test_batchnorm_folding_matches_direct_formula():
    from math import isqrt

    g = Graph(
        "bn",
        [Node("n", "BatchNormalization", ("x", "s", "b", "m", "v"), ("y",), {"epsilon": 1e-5})],
        {
            "s": F32Tensor((2,), [1.5, -0.5]),
            "b": F32Tensor((2,), [0.25, 1.0]),
            "m": F32Tensor((2,), [0.125, -2.0]),
            "v": F32Tensor((2,), [4.0, 0.25]),
        },
        [("x", (1, 2, 1, 2))],
        [("y", (1, 2, 1, 2))],
    )
    cfg = BackendConfig("float", 53, RNE)
    xs = [0.5, -1.25, 3.0, 0.0]
    out = run_model(g, cfg, xs)
    for i, (c, x) in enumerate([(0, 0.5), (0, -1.25), (1, 3.0), (1, 0.0)]):
        s, b, m, v = [(1.5, 0.25, 0.125, 4.0), (-0.5, 1.0, -2.0, 0.25)][c]
        # exact rational reference with a 400-bit square root
        t = Fraction(v) + Fraction(1e-5)
        root = Fraction(isqrt((t.numerator << 400) // t.denominator), 1 << 200)
        gc = Fraction(s) / root
        exact = gc * (Fraction(x) - Fraction(m)) + Fraction(b)
        got = out.data[i].as_fraction()
        # folding quantizes g and h once each, then g*x and +h round once each:
        # four relative perturbations of at most one ulp on terms bounded by
        # |g*x| + |h|
        budget = (abs(gc * x) + abs(Fraction(b) - Fraction(m) * gc)) * Fraction(6, 2**52)
        assert abs(got - exact) <= budget


def test_add_broadcasting():
    g = Graph(
        "add",
        [Node("a", "Add", ("x", "c"), ("y",), {})],
        {"c": F32Tensor((3,), [10.0, 20.0, 30.0])},
        [("x", (2, 3))],
        [("y", (2, 3))],
    )
    out = run_model(g, BackendConfig("float", 24, RNE), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert [v.to_float() for v in out.data] == [11.0, 22.0, 33.0, 14.0, 25.0, 36.0]


def test_flatten_reshape_constant():
    g = Graph(
        "fr",
        [
            Node("f", "Flatten", ("x",), ("t",), {"axis": 1}),
            Node("k", "Constant", (), ("c",), {"tensor": "cval"}),
            Node("m", "MatMul", ("t", "c"), ("y",), {}),
        ],
        {"cval": F32Tensor((4, 2), [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])},
        [("x", (1, 2, 2, 1))],
        [("y", (1, 2))],
    )
    out = run_model(g, BackendConfig("float", 24, RNE), [1.0, 2.0, 3.0, 4.0])
    assert [v.to_float() for v in out.data] == [4.0, 6.0]


def test_fixed_quantize_overflow_names_tensor():
    g = gemm_graph([[2000.0]])
    with pytest.raises(RangeOverflowError, match="'w'"):
        quantize_graph(g, BackendConfig("fixed", 4, RNE, dot="accurate"))
    pg = quantize_graph(gemm_graph([[600.0]]), BackendConfig("fixed", 4, RNE, dot="accurate"))
    assert pg.weights["w"].data[0].raw == 600 * 16


def test_thread_count_does_not_change_results():
    import random

    rng = random.Random(3)
    w = [[rng.uniform(-1, 1) for _ in range(8)] for _ in range(4)]
    g = gemm_graph(w)
    cfg = BackendConfig("fixed", 9, RNE, dot="accurate")
    sample = [rng.uniform(-1, 1) for _ in range(8)]
    a = run_model(g, cfg, sample, workers=1)
    b = run_model(g, cfg, sample, workers=8)
    assert [v.raw for v in a.data] == [v.raw for v in b.data]


def test_p53_matches_hardware_doubles():
    """Backend genericity: p=53 RNE naive/naive must reproduce binary64
    arithmetic exactly, since both round identically in the same order."""
    import random

    rng = random.Random(11)
    k, m = 17, 5
    w = [[rng.uniform(-2, 2) for _ in range(k)] for _ in range(m)]
    b = [rng.uniform(-1, 1) for _ in range(m)]
    x = [rng.uniform(-3, 3) for _ in range(k)]
    g = gemm_graph(w, b)
    out = run_model(g, BackendConfig("float", 53, RNE), x)
    for o in range(m):
        acc = 0.0
        for i in range(k):
            acc = acc + (x[i] * w[o][i])
        acc += b[o]
        assert out.data[o].to_float() == acc


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig("float", 24, RNE, dot="accurate")
    with pytest.raises(ValueError):
        BackendConfig("fixed", 8, RNE, dot="oro")
    with pytest.raises(ValueError):
        BackendConfig("decimal", 8, RNE)
    with pytest.raises(ValueError):
        BackendConfig("float", 1, RNE)
    with pytest.raises(ValueError):
        BackendConfig("float", 24, RNE, sum="fancy")


# -- file format ------------------------------------------------------------------


def test_model_round_trip(tmp_path):
    g = gemm_graph([[1.0, 2.0], [3.0, 4.0]], b=[0.5, -0.5])
    save_model(g, tmp_path)
    loaded = load_model(tmp_path)
    assert loaded.initializers["w"].values == [1.0, 2.0, 3.0, 4.0]
    assert loaded.initializers["b"].values == [0.5, -0.5]
    assert loaded.nodes[0].op == "Gemm"
    # deterministic bytes
    again = tmp_path / "again"
    save_model(g, again)
    assert (again / "weights.bin").read_bytes() == (tmp_path / "weights.bin").read_bytes()
    assert (again / "model.json").read_text() == (tmp_path / "model.json").read_text()


def test_weights_are_aligned(tmp_path):
    g = gemm_graph([[1.0]])
    g.initializers["b2"] = F32Tensor((3,), [1.0, 2.0, 3.0])
    save_model(g, tmp_path)
    manifest = json.loads((tmp_path / "model.json").read_text())
    for info in manifest["tensors"].values():
        assert info["offset"] % 64 == 0


def test_truncated_blob_is_checksum_error(tmp_path):
    save_model(gemm_graph([[1.0, 2.0]]), tmp_path)
    blob = (tmp_path / "weights.bin").read_bytes()
    (tmp_path / "weights.bin").write_bytes(blob[:-3])
    with pytest.raises(ChecksumError):
        load_model(tmp_path)


def test_corrupted_blob_is_checksum_error(tmp_path):
    save_model(gemm_graph([[1.0, 2.0]]), tmp_path)
    blob = bytearray((tmp_path / "weights.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "weights.bin").write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_model(tmp_path)


def test_unknown_op_rejected(tmp_path):
    save_model(gemm_graph([[1.0]]), tmp_path)
    manifest = json.loads((tmp_path / "model.json").read_text())
    manifest["nodes"][0]["op"] = "FancyOp"
    (tmp_path / "model.json").write_text(json.dumps(manifest))
    with pytest.raises(UnsupportedOpError, match="FancyOp"):
        load_model(tmp_path)


def test_unknown_major_version_rejected(tmp_path):
    save_model(gemm_graph([[1.0]]), tmp_path)
    manifest = json.loads((tmp_path / "model.json").read_text())
    manifest["format_version"] = "2.0"
    (tmp_path / "model.json").write_text(json.dumps(manifest))
    with pytest.raises(ModelFormatError, match="format_version"):
        load_model(tmp_path)
    manifest["format_version"] = "1.7"  # newer minor of a known major loads
    (tmp_path / "model.json").write_text(json.dumps(manifest))
    load_model(tmp_path)


def test_graph_validation_rules():
    dangling = Graph(
        "bad",
        [Node("n", "ReLU", ("ghost",), ("y",), {})],
        {},
        [("x", (1,))],
        [("y", (1,))],
    )
    with pytest.raises(ModelFormatError, match="ghost"):
        validate_graph(dangling)
    double = Graph(
        "bad2",
        [
            Node("a", "ReLU", ("x",), ("y",), {}),
            Node("b", "ReLU", ("x",), ("y",), {}),
        ],
        {},
        [("x", (1,))],
        [("y", (1,))],
    )
    with pytest.raises(ModelFormatError, match="producer"):
        validate_graph(double)


def test_count_macs_examples():
    assert count_macs(gemm_graph([[0.0] * 10 for _ in range(5)])) == 50
    conv = conv_graph((1, 1, 4, 4), (1, 1, 3, 3), [0.0] * 9, {})
    assert count_macs(conv) == 4 * 9
    # pooling/activation layers contribute nothing
    g = Graph(
        "mix",
        [
            Node("c", "Conv2D", ("x", "w"), ("t",), {}),
            Node("r", "ReLU", ("t",), ("y",), {}),
        ],
        {"w": F32Tensor((2, 1, 2, 2), [0.0] * 8)},
        [("x", (1, 1, 3, 3))],
        [("y", (1, 2, 2, 2))],
    )
    assert count_macs(g) == (2 * 2 * 2) * (1 * 2 * 2)


def test_dataset_round_trip(tmp_path):
    samples = [[0.5, -1.0], [2.0, 3.5], [0.0, 0.25]]
    save_dataset(tmp_path, (1, 2), samples, [1, 0, 1], labels_source="unit-test")
    ds = load_dataset(tmp_path)
    assert ds.samples == samples
    assert ds.labels == [1, 0, 1]
    assert ds.sample_shape == (1, 2)
    short = load_dataset(tmp_path, limit=2)
    assert len(short) == 2
    # corrupt count
    meta = json.loads((tmp_path / "samples.json").read_text())
    meta["count"] = 5
    (tmp_path / "samples.json").write_text(json.dumps(meta))
    with pytest.raises(ModelFormatError):
        load_dataset(tmp_path)
