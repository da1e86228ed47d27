"""Reference graph executor, generic over the scalar backend.

Every inner product of Conv2D/Gemm/MatMul goes through the reducers module
exactly as configured; elementwise ops use single scalar operations. This
engine is written for auditability, not speed. The vectorized module
provides fast equivalents that are required (and tested) to be bit-identical
to this one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from math import isqrt
from typing import Callable, Dict, List, Sequence, Union

from .errors import RangeOverflowError
from .fixedpoint import FixedFormat, FixedPoint
from .model import Graph, Node, UnsupportedOpError
from .reducers import (
    SUM_REDUCERS,
    ExactAccumulator,
    dot_fixed_accurate,
    dot_fixed_naive,
    dot_float_naive,
    dot_float_oro,
    sum_exact,
)
from .rounding import RoundingMode
from .softfloat import SoftFloat
from .tensor import Tensor, broadcast_index, broadcast_shapes, flat_offset

Scalar = Union[SoftFloat, FixedPoint]

FLOAT_DOTS = ("naive", "oro")
FIXED_DOTS = ("naive", "accurate")
SUM_NAMES = tuple(SUM_REDUCERS)


@dataclass(frozen=True)
class BackendConfig:
    """Arithmetic kind, width, rounding mode and reduction algorithms.

    For float arithmetic ``pbits`` is the total significand width including
    the leading 1; for fixed arithmetic it is the fraction width f (with
    ``mbits`` integer bits on top).
    """

    arith: str
    pbits: int
    mode: RoundingMode
    dot: str = "naive"
    sum: str = "naive"
    mbits: int = 10

    def __post_init__(self) -> None:
        if self.arith not in ("float", "fixed"):
            raise ValueError(f"arith must be 'float' or 'fixed', got {self.arith!r}")
        if self.sum not in SUM_NAMES:
            raise ValueError(f"unknown sum algorithm {self.sum!r}")
        allowed = FLOAT_DOTS if self.arith == "float" else FIXED_DOTS
        if self.dot not in allowed:
            raise ValueError(
                f"dot algorithm {self.dot!r} is not valid for {self.arith} arithmetic "
                f"(expected one of {', '.join(allowed)})"
            )
        if self.arith == "float":
            if self.pbits < 2:
                raise ValueError("float precision needs at least 2 bits")
        else:
            if self.pbits < 0:
                raise ValueError("fixed fraction width must be non-negative")
            FixedFormat(fbits=self.pbits, mode=self.mode, mbits=self.mbits)

    @property
    def fixed_format(self) -> FixedFormat:
        return FixedFormat(fbits=self.pbits, mode=self.mode, mbits=self.mbits)

    def zero(self) -> Scalar:
        if self.arith == "float":
            return SoftFloat.zero(self.pbits, self.mode)
        return FixedPoint.zero(self.fixed_format)

    def convert(self, value: Union[float, Fraction]) -> Scalar:
        """One rounding from an exact value into the target scalar."""
        exact = Fraction(value) if not isinstance(value, Fraction) else value
        if self.arith == "float":
            return SoftFloat.from_fraction(exact, self.pbits, self.mode)
        return FixedPoint.from_fraction(exact, self.fixed_format)


@dataclass
class PreparedGraph:
    """Graph plus weights converted once into the target scalar type.

    Immutable after construction; concurrent runs over different inputs may
    share one instance.
    """

    graph: Graph
    cfg: BackendConfig
    weights: Dict[str, Tensor]


def _fold_batchnorm(node: Node, graph: Graph) -> tuple[List[Fraction], List[Fraction]]:
    """Per-channel scale g and shift h with y = g*x + h.

    Uses exact rationals with a 120-bit integer square root, so folding
    error is far below any target precision.
    """
    scale, bias, mean, var = (graph.initializers[n] for n in node.inputs[1:5])
    eps = Fraction(float(node.attrs.get("epsilon", 1e-5)))
    gs, hs = [], []
    for s, b, m, v in zip(scale.values, bias.values, mean.values, var.values):
        t = Fraction(v) + eps
        if t <= 0:
            raise ValueError(f"node {node.name}: non-positive variance {float(t)}")
        root = Fraction(isqrt((t.numerator << 240) // t.denominator), 1 << 120)
        g = Fraction(s) / root
        gs.append(g)
        hs.append(Fraction(b) - Fraction(m) * g)
    return gs, hs


def quantize_graph(graph: Graph, cfg: BackendConfig) -> PreparedGraph:
    """Convert every weight once; fold BatchNormalization into scale/shift."""
    weights: Dict[str, Tensor] = {}

    def convert_values(name: str, shape, values: Sequence[Union[float, Fraction]]) -> None:
        out = []
        for v in values:
            try:
                out.append(cfg.convert(v))
            except RangeOverflowError:
                peak = max(abs(Fraction(x)) for x in values)
                raise RangeOverflowError(
                    f"tensor {name!r} does not fit {cfg.arith} format "
                    f"(max |value| {float(peak):g}, m={cfg.mbits} f={cfg.pbits})"
                ) from None
        weights[name] = Tensor(tuple(shape), out)

    folded_inputs = set()
    for node in graph.nodes:
        if node.op == "BatchNormalization":
            gs, hs = _fold_batchnorm(node, graph)
            convert_values(f"{node.name}:scale", (len(gs),), gs)
            convert_values(f"{node.name}:shift", (len(hs),), hs)
            folded_inputs.update(node.inputs[1:5])
    for name, t in graph.initializers.items():
        if name not in folded_inputs:
            convert_values(name, t.shape, t.values)
    return PreparedGraph(graph=graph, cfg=cfg, weights=weights)


def run(
    pg: PreparedGraph,
    sample: Sequence[float],
    workers: int = 1,
) -> Tensor:
    """Execute the graph on one input sample (flat binary32 values)."""
    graph, cfg = pg.graph, pg.cfg
    if len(graph.inputs) != 1:
        raise ValueError("runtime expects exactly one graph input")
    in_name, in_shape = graph.inputs[0]
    expected = 1
    for d in in_shape:
        expected *= d
    if len(sample) != expected:
        raise ValueError(f"input length {len(sample)} != {expected} for shape {in_shape}")

    env: Dict[str, Tensor] = {in_name: Tensor(in_shape, [cfg.convert(v) for v in sample])}
    ex = _Executor(pg, workers)
    for node in graph.nodes:
        ex.run_node(node, env)
    out_name = graph.outputs[0][0]
    return env[out_name]


def run_trace(pg: PreparedGraph, sample: Sequence[float]) -> Dict[str, Tensor]:
    """Like :func:`run` but return every intermediate tensor by name."""
    graph, cfg = pg.graph, pg.cfg
    in_name, in_shape = graph.inputs[0]
    env: Dict[str, Tensor] = {in_name: Tensor(in_shape, [cfg.convert(v) for v in sample])}
    ex = _Executor(pg, 1)
    for node in graph.nodes:
        ex.run_node(node, env)
    return env


class _Executor:
    def __init__(self, pg: PreparedGraph, workers: int = 1):
        self.pg = pg
        self.cfg = pg.cfg
        self.zero = pg.cfg.zero()
        self.workers = max(1, workers)
        self._dot = self._make_dot()

    def _make_dot(self) -> Callable[[list, list], Scalar]:
        cfg, zero = self.cfg, self.zero
        if cfg.arith == "float":
            if cfg.dot == "oro":
                return lambda xs, ys: dot_float_oro(xs, ys, zero)
            reducer = SUM_REDUCERS[cfg.sum]
            return lambda xs, ys: dot_float_naive(xs, ys, zero, reducer)
        if cfg.dot == "accurate":
            return lambda xs, ys: dot_fixed_accurate(xs, ys, zero)
        return lambda xs, ys: dot_fixed_naive(xs, ys, zero)

    def _value(self, name: str, env: Dict[str, Tensor]) -> Tensor:
        if name in env:
            return env[name]
        if name in self.pg.weights:
            return self.pg.weights[name]
        raise KeyError(f"value {name!r} not available")

    def _map_elements(self, fn: Callable[[int], Scalar], n: int) -> list:
        if self.workers == 1:
            return [fn(i) for i in range(n)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, range(n)))

    def run_node(self, node: Node, env: Dict[str, Tensor]) -> None:
        try:
            kernel = getattr(self, "_op_" + node.op.lower())
        except AttributeError:
            raise UnsupportedOpError(f"unsupported op {node.op!r}") from None
        env[node.outputs[0]] = kernel(node, env)

    # -- operators ------------------------------------------------------------

    def _op_conv2d(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        w = self._value(node.inputs[1], env)
        bias = self._value(node.inputs[2], env) if len(node.inputs) > 2 else None
        n, c, h, wd = x.shape
        co, ci, kh, kw = w.shape
        if int(node.attrs.get("groups", 1)) != 1:
            raise UnsupportedOpError(f"node {node.name}: grouped convolution not supported")
        if [int(v) for v in node.attrs.get("dilations", [1, 1])] != [1, 1]:
            raise UnsupportedOpError(f"node {node.name}: dilated convolution not supported")
        if ci != c:
            raise ValueError(f"node {node.name}: channel mismatch {ci} vs {c}")
        sh, sw = (int(v) for v in node.attrs.get("strides", [1, 1]))
        pt, pl, pb, pr = (int(v) for v in node.attrs.get("pads", [0, 0, 0, 0]))
        oh = (h + pt + pb - kh) // sh + 1
        ow = (wd + pl + pr - kw) // sw + 1
        xd, wdata = x.data, w.data

        def one(flat: int) -> Scalar:
            rem, ox = divmod(flat, ow)
            rem, oy = divmod(rem, oh)
            nn, oc = divmod(rem, co)
            ybase = oy * sh - pt
            xbase = ox * sw - pl
            xs, ws = [], []
            # fixed enumeration order: channel, then kernel y, then kernel x;
            # out-of-bounds (padding) positions contribute exact zeros and are skipped
            for cc in range(c):
                for ky in range(kh):
                    iy = ybase + ky
                    if not 0 <= iy < h:
                        continue
                    row_x = ((nn * c + cc) * h + iy) * wd
                    row_w = ((oc * c + cc) * kh + ky) * kw
                    for kx in range(kw):
                        ix = xbase + kx
                        if not 0 <= ix < wd:
                            continue
                        xs.append(xd[row_x + ix])
                        ws.append(wdata[row_w + kx])
            acc = self._dot(xs, ws)
            if bias is not None:
                acc = acc + bias.data[oc]
            return acc

        data = self._map_elements(one, n * co * oh * ow)
        return Tensor((n, co, oh, ow), data)

    def _op_gemm(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        w = self._value(node.inputs[1], env)  # [out, in]
        bias = self._value(node.inputs[2], env) if len(node.inputs) > 2 else None
        rows, inner = x.shape
        out_dim, w_inner = w.shape
        if w_inner != inner:
            raise ValueError(f"node {node.name}: inner dims {inner} vs {w_inner}")

        def one(flat: int) -> Scalar:
            r, o = divmod(flat, out_dim)
            xs = x.data[r * inner : (r + 1) * inner]
            ws = w.data[o * inner : (o + 1) * inner]
            acc = self._dot(xs, ws)
            if bias is not None:
                acc = acc + bias.data[o]
            return acc

        return Tensor((rows, out_dim), self._map_elements(one, rows * out_dim))

    def _op_matmul(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        w = self._value(node.inputs[1], env)  # [in, out]
        if x.rank != 2 or w.rank != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"node {node.name}: cannot multiply {x.shape} by {w.shape}")
        rows, inner = x.shape
        out_dim = w.shape[1]

        def one(flat: int) -> Scalar:
            r, o = divmod(flat, out_dim)
            xs = x.data[r * inner : (r + 1) * inner]
            ws = [w.data[k * out_dim + o] for k in range(inner)]
            return self._dot(xs, ws)

        return Tensor((rows, out_dim), self._map_elements(one, rows * out_dim))

    def _op_add(self, node: Node, env) -> Tensor:
        a = self._value(node.inputs[0], env)
        b = self._value(node.inputs[1], env)
        if a.shape == b.shape:
            return Tensor(a.shape, [x + y for x, y in zip(a.data, b.data)])
        out_shape = broadcast_shapes(a.shape, b.shape)
        out = []
        idx = [0] * len(out_shape)
        total = 1
        for d in out_shape:
            total *= d
        for _ in range(total):
            va = a.data[flat_offset(a.shape, broadcast_index(idx, a.shape))]
            vb = b.data[flat_offset(b.shape, broadcast_index(idx, b.shape))]
            out.append(va + vb)
            for k in range(len(idx) - 1, -1, -1):
                idx[k] += 1
                if idx[k] < out_shape[k]:
                    break
                idx[k] = 0
        return Tensor(out_shape, out)

    def _op_relu(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        zero = self.zero
        return Tensor(x.shape, [v if v > zero else zero for v in x.data])

    def _op_maxpool(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        n, c, h, w = x.shape
        kh, kw = (int(v) for v in node.attrs["kernel"])
        sh, sw = (int(v) for v in node.attrs.get("strides", [kh, kw]))
        pt, pl, pb, pr = (int(v) for v in node.attrs.get("pads", [0, 0, 0, 0]))
        oh = (h + pt + pb - kh) // sh + 1
        ow = (w + pl + pr - kw) // sw + 1
        out = []
        for nn in range(n):
            for cc in range(c):
                base = (nn * c + cc) * h
                for oy in range(oh):
                    for ox in range(ow):
                        best = None
                        for ky in range(kh):
                            iy = oy * sh - pt + ky
                            if not 0 <= iy < h:
                                continue  # padding never wins a max window
                            for kx in range(kw):
                                ix = ox * sw - pl + kx
                                if not 0 <= ix < w:
                                    continue
                                v = x.data[(base + iy) * w + ix]
                                if best is None or v > best:
                                    best = v
                        if best is None:
                            raise ValueError(f"node {node.name}: empty pooling window")
                        out.append(best)
        return Tensor((n, c, oh, ow), out)

    def _op_globalaveragepool(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        n, c, h, w = x.shape
        window = h * w
        out = []
        for nn in range(n):
            for cc in range(c):
                vals = x.data[(nn * c + cc) * window : (nn * c + cc + 1) * window]
                out.append(self._exact_mean(vals, window))
        return Tensor((n, c, 1, 1), out)

    def _exact_mean(self, vals: list, count: int) -> Scalar:
        # exact sum, then a single rounded division by the window size
        if self.cfg.arith == "fixed":
            total = sum_exact(vals, self.zero)
            return total.div_by_int(count)
        acc = ExactAccumulator()
        for v in vals:
            acc.add(v)
        exact = acc.as_fraction() / count
        return SoftFloat.from_fraction(exact, self.cfg.pbits, self.cfg.mode)

    def _op_batchnormalization(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        scale = self.pg.weights[f"{node.name}:scale"]
        shift = self.pg.weights[f"{node.name}:shift"]
        n, c, h, w = x.shape
        out = []
        hw = h * w
        for nn in range(n):
            for cc in range(c):
                g, b = scale.data[cc], shift.data[cc]
                base = (nn * c + cc) * hw
                out.extend(x.data[base + i] * g + b for i in range(hw))
        return Tensor(x.shape, out)

    def _op_flatten(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        axis = int(node.attrs.get("axis", 1))
        lead = 1
        for d in x.shape[:axis]:
            lead *= d
        return x.reshape((lead, x.size // lead))

    def _op_reshape(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        target = [int(d) for d in node.attrs["shape"]]
        if -1 in target:
            known = 1
            for d in target:
                if d != -1:
                    known *= d
            target[target.index(-1)] = x.size // known
        return x.reshape(target)

    def _op_constant(self, node: Node, env) -> Tensor:
        return self.pg.weights[node.attrs["tensor"]]
