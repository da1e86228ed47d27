"""Static worst-case error bounds for fixed-point inference.

The conversion of each value to f fraction bits perturbs it by at most 2^-f,
and every rounded operation adds a perturbation of its own. This module
pushes those perturbations through a network with affine arithmetic: each
form is an interval around an exact rational center whose endpoints are
correlated across elements through shared noise symbols, so linear layers
lose nothing. ReLU and max pooling fall back to interval clamping with the
correlation absorbed into an uncorrelated residual.

Two propagation engines share the same rules:

* exact mode: centers, coefficients and residuals are Fractions, so every
  claim is exact and the soundness property is checkable with no tolerance.
* interval mode: per-element (center, radius) float64 arrays for networks
  whose tensors are too large for per-element symbol maps. All radius
  arithmetic is padded outward by a slack factor that dominates the float64
  rounding of the bookkeeping itself.

The bound reported per layer is against a reference run with unquantized
weights, so weight conversion error shows up as center drift rather than
needing worst-case weight terms: the analysis propagates the quantized
weights exactly and measures the distance to the reference afterwards.
"""

from __future__ import annotations

import csv
import itertools
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import Graph, Node, UnsupportedOpError
from .rounding import RoundingMode
from .runtime import BackendConfig, _fold_batchnorm, quantize_graph, run_trace
from .tensor import Tensor, broadcast_index, broadcast_shapes, flat_offset
from .vectorized import FastEngine, _window_plan, supports

_SYMBOLS = itertools.count(1)

_MAX_TERMS = 64
_AFFINE_ELEMENT_LIMIT = 60_000  # beyond this, auto mode degrades to intervals

# interval mode bookkeeping is float64; every compound radius update is
# padded by this factor, which exceeds the accumulated rounding of any
# realistic operation chain by many orders of magnitude
_SLACK = 1 + 2.0**-30


class AffineForm:
    """center + sum(coeff_i * eps_i) + residual * eps_r, all eps in [-1, 1].

    The concretization [lo, hi] always contains every value the abstracted
    computation can take. residual is the magnitude of the uncorrelated
    part; it only grows."""

    __slots__ = ("center", "terms", "residual")

    def __init__(
        self,
        center: Fraction,
        terms: Optional[Dict[int, Fraction]] = None,
        residual: Fraction = Fraction(0),
    ):
        if residual < 0:
            raise ValueError("residual must be non-negative")
        self.center = Fraction(center)
        self.terms = dict(terms) if terms else {}
        self.residual = Fraction(residual)

    def radius(self) -> Fraction:
        return sum((abs(c) for c in self.terms.values()), Fraction(0)) + self.residual

    def lo(self) -> Fraction:
        return self.center - self.radius()

    def hi(self) -> Fraction:
        return self.center + self.radius()

    def cap(self, limit: int = _MAX_TERMS) -> "AffineForm":
        """Collapse the smallest coefficients into the residual in place."""
        if len(self.terms) > limit:
            ranked = sorted(self.terms.items(), key=lambda kv: abs(kv[1]), reverse=True)
            self.terms = dict(ranked[:limit])
            self.residual += sum(abs(c) for _, c in ranked[limit:])
        return self

    def __add__(self, other) -> "AffineForm":
        if isinstance(other, AffineForm):
            return _combine([(Fraction(1), self), (Fraction(1), other)], Fraction(0))
        return AffineForm(self.center + Fraction(other), self.terms, self.residual)

    __radd__ = __add__

    def __neg__(self) -> "AffineForm":
        return AffineForm(-self.center, {s: -c for s, c in self.terms.items()}, self.residual)

    def __sub__(self, other) -> "AffineForm":
        return self + (-other) if isinstance(other, AffineForm) else self + (-Fraction(other))

    def __mul__(self, k) -> "AffineForm":
        return _combine([(Fraction(k), self)], Fraction(0))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return (
            f"AffineForm({float(self.center):g} ± {float(self.radius()):g},"
            f" {len(self.terms)} terms)"
        )


def seed_error(values: Sequence, fbits: int) -> List[AffineForm]:
    """Wrap exact values in forms carrying one fresh conversion-error symbol
    of magnitude 2^-f each."""
    if fbits < 0:
        raise ValueError("fbits must be non-negative")
    q = Fraction(1, 1 << fbits)
    return [AffineForm(Fraction(v), {next(_SYMBOLS): q}) for v in values]


def _combine(pairs: Sequence[Tuple[Fraction, AffineForm]], const: Fraction) -> AffineForm:
    """Exact affine combination const + sum(w * form)."""
    center = const
    terms: Dict[int, Fraction] = {}
    residual = Fraction(0)
    for w, form in pairs:
        if not w:
            continue
        center += w * form.center
        residual += abs(w) * form.residual
        for sym, cf in form.terms.items():
            acc = terms.get(sym)
            terms[sym] = w * cf if acc is None else acc + w * cf
    out = AffineForm(center, None, residual)
    out.terms = {s: c for s, c in terms.items() if c}
    return out.cap()


def propagate_linear(
    w_rows: Sequence[Sequence],
    b: Optional[Sequence],
    forms: Sequence[AffineForm],
    fbits: int,
    dot: str = "accurate",
) -> List[AffineForm]:
    """Exact affine image of a dense layer plus one fresh rounding symbol
    per output: 2^-f for a single final rounding, n * 2^-f when every
    product is rounded separately."""
    q = Fraction(1, 1 << fbits)
    n = len(forms)
    out = []
    for r, row in enumerate(w_rows):
        if len(row) != n:
            raise ValueError(f"row {r} has {len(row)} weights for {n} inputs")
        const = Fraction(b[r]) if b is not None else Fraction(0)
        form = _combine([(Fraction(w), x) for w, x in zip(row, forms)], const)
        rnd = q if dot == "accurate" else n * q
        if rnd:
            form.terms[next(_SYMBOLS)] = rnd
        out.append(form.cap())
    return out


def propagate_relu(forms: Sequence[AffineForm]) -> List[AffineForm]:
    """Min-range clamp: pass forms that stay non-negative, zero the ones
    that stay non-positive, collapse straddlers to [0, hi]."""
    out = []
    for f in forms:
        lo, hi = f.lo(), f.hi()
        if lo >= 0:
            out.append(f)
        elif hi <= 0:
            out.append(AffineForm(Fraction(0)))
        else:
            out.append(AffineForm(hi / 2, None, hi / 2))
    return out


def propagate_maxpool(windows: Sequence[Sequence[AffineForm]]) -> List[AffineForm]:
    """Interval max per window. If one input dominates every other it passes
    through exactly, otherwise correlations are dropped."""
    out = []
    for window in windows:
        if not window:
            raise ValueError("empty pooling window")
        los = [f.lo() for f in window]
        his = [f.hi() for f in window]
        best = max(range(len(window)), key=lambda i: los[i])
        if all(los[best] >= h for i, h in enumerate(his) if i != best):
            out.append(window[best])
            continue
        lo, hi = max(los), max(his)
        out.append(AffineForm((lo + hi) / 2, None, (hi - lo) / 2))
    return out


@dataclass
class LayerBound:
    """Worst-case and observed error after one node, against the
    unquantized-weight reference."""

    layer_index: int
    op_kind: str
    bound: Fraction
    interval_width: Fraction
    empirical_error: Fraction


def write_bounds_csv(rows: Sequence[LayerBound], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_index", "op_kind", "bound", "empirical_error"])
        for r in rows:
            w.writerow([r.layer_index, r.op_kind, f"{float(r.bound):.6g}", f"{float(r.empirical_error):.6g}"])


def analyze(
    graph: Graph,
    fbits: int,
    sample: Optional[Sequence[float]] = None,
    dot: str = "accurate",
    mode: str = "auto",
    mbits: int = 10,
) -> List[LayerBound]:
    """Per-node static error bound plus the error one fixed-point inference
    actually showed on the same input.

    In affine mode every quantity is an exact rational, the reference run
    is exact real arithmetic, and a violated bound raises. Interval mode
    trades the per-element symbol maps for (center, radius) float64 arrays
    so large networks stay tractable; its reference run is float64 and the
    reported numbers carry a documented outward pad instead of exactness.
    The analysis assumes no intermediate overflows the integer range; the
    fixed-point run itself raises if one does.

    When no sample is given a deterministic pseudo-random input in [0, 1) is
    used, so repeated runs agree.
    """
    if dot not in ("accurate", "naive"):
        raise ValueError(f"dot must be 'accurate' or 'naive', got {dot!r}")
    if mode not in ("auto", "affine", "interval"):
        raise ValueError(f"unknown mode {mode!r}")
    in_name, in_shape = graph.inputs[0]
    in_size = 1
    for d in in_shape:
        in_size *= d
    if sample is None:
        rng = random.Random(1207)
        sample = [rng.uniform(0.0, 1.0) for _ in range(in_size)]
    if len(sample) != in_size:
        raise ValueError(f"input length {len(sample)} != {in_size} for shape {in_shape}")

    cfg = BackendConfig("fixed", fbits, RoundingMode.RNE, dot=dot, mbits=mbits)
    pg = quantize_graph(graph, cfg)

    if mode == "auto":
        sizes = _tensor_sizes(graph)
        mode = (
            "affine"
            if max(sizes) <= 4096 and sum(sizes) <= _AFFINE_ELEMENT_LIMIT
            else "interval"
        )

    if mode == "affine":
        return _analyze_affine(graph, pg, fbits, dot, in_name, in_shape, sample)
    return _analyze_interval(graph, pg, fbits, dot, in_name, in_shape, sample)


def _analyze_affine(graph, pg, fbits, dot, in_name, in_shape, sample) -> List[LayerBound]:
    ref_env = _reference_trace(graph, sample)
    fixed_env = _fixed_trace(pg, sample)
    walker = _AffineWalker(pg, fbits, dot)
    walker.seed(in_name, in_shape, sample)

    rows: List[LayerBound] = []
    for idx, node in enumerate(graph.nodes):
        walker.step(node)
        out = node.outputs[0]
        bound, width = walker.bound_against(out, ref_env[out])
        emp = _max_abs_diff(fixed_env[out], ref_env[out])
        if emp > bound:
            raise AssertionError(
                f"soundness violation at node {node.name}: observed {float(emp):g} "
                f"exceeds bound {float(bound):g}"
            )
        rows.append(LayerBound(idx, node.op, bound, width, emp))
    return rows


def _analyze_interval(graph, pg, fbits, dot, in_name, in_shape, sample) -> List[LayerBound]:
    if pg.cfg.mbits + fbits > 52:
        raise ValueError(
            "interval mode represents quantized values in float64 and needs "
            f"mbits + fbits <= 52, got {pg.cfg.mbits + fbits}; use mode='affine'"
        )
    ref_env = _reference_trace_f64(graph, sample)
    fixed_env = _fixed_trace_f64(pg, sample)
    walker = _IntervalWalker(pg, fbits, dot)
    walker.seed(in_name, in_shape, sample)

    rows: List[LayerBound] = []
    for idx, node in enumerate(graph.nodes):
        walker.step(node)
        out = node.outputs[0]
        bound, width = walker.bound_against(out, ref_env[out])
        emp = Fraction(float(np.max(np.abs(fixed_env[out] - ref_env[out]))))
        rows.append(LayerBound(idx, node.op, bound, width, emp))
    return rows


def _tensor_sizes(graph: Graph) -> List[int]:
    from .model import _node_shape

    shapes: Dict[str, Tuple[int, ...]] = dict(graph.inputs)
    shapes.update({n: t.shape for n, t in graph.initializers.items()})
    sizes = []
    for node in graph.nodes:
        out_shape, _ = _node_shape(node, shapes)
        shapes[node.outputs[0]] = out_shape
        n = 1
        for d in out_shape:
            n *= d
        sizes.append(n)
    return sizes


def _max_abs_diff(fixed: Tensor, ref: Tensor) -> Fraction:
    worst = Fraction(0)
    for a, b in zip(fixed.data, ref.data):
        d = abs(a.as_fraction() - b)
        if d > worst:
            worst = d
    return worst


# -- exact reference (unquantized weights, real arithmetic) ------------------------


def _reference_trace(graph: Graph, sample: Sequence[float]) -> Dict[str, Tensor]:
    """Exact rational inference. BatchNormalization uses the same folded
    rational scale/shift as the runtime (derivation error below 2^-119), so
    the reference is exact relative to that folding."""
    weights: Dict[str, Tensor] = {}
    folded = set()
    for node in graph.nodes:
        if node.op == "BatchNormalization":
            gs, hs = _fold_batchnorm(node, graph)
            weights[f"{node.name}:scale"] = Tensor((len(gs),), gs)
            weights[f"{node.name}:shift"] = Tensor((len(hs),), hs)
            folded.update(node.inputs[1:5])
    for name, t in graph.initializers.items():
        if name not in folded:
            weights[name] = Tensor(t.shape, [Fraction(v) for v in t.values])

    in_name, in_shape = graph.inputs[0]
    env = {in_name: Tensor(in_shape, [Fraction(v) for v in sample])}
    walker = _ExactWalker(weights)
    for node in graph.nodes:
        env[node.outputs[0]] = walker.step(node, env)
    return env


class _GraphWalker:
    """Shared node plumbing: fetch inputs from env or the weight store."""

    def __init__(self, weights: Dict[str, Tensor]):
        self.weights = weights

    def _value(self, name: str, env: Dict[str, Tensor]) -> Tensor:
        if name in env:
            return env[name]
        return self.weights[name]

    def step(self, node: Node, env: Dict[str, Tensor]) -> Tensor:
        try:
            kernel = getattr(self, "_op_" + node.op.lower())
        except AttributeError:
            raise UnsupportedOpError(f"unsupported op {node.op!r}") from None
        return kernel(node, env)

    @staticmethod
    def _conv_geometry(node: Node, x_shape, w_shape):
        n, c, h, wd = x_shape
        co, ci, kh, kw = w_shape
        if int(node.attrs.get("groups", 1)) != 1:
            raise UnsupportedOpError(f"node {node.name}: grouped convolution not supported")
        if [int(v) for v in node.attrs.get("dilations", [1, 1])] != [1, 1]:
            raise UnsupportedOpError(f"node {node.name}: dilated convolution not supported")
        sh, sw = (int(v) for v in node.attrs.get("strides", [1, 1]))
        pt, pl, pb, pr = (int(v) for v in node.attrs.get("pads", [0, 0, 0, 0]))
        oh = (h + pt + pb - kh) // sh + 1
        ow = (wd + pl + pr - kw) // sw + 1
        return n, c, h, wd, co, kh, kw, sh, sw, pt, pl, oh, ow

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
        return self.weights[node.attrs["tensor"]]


class _ExactWalker(_GraphWalker):
    """Real-number semantics over Fractions."""

    def _dot_window(self, node, env, with_bias):
        x = self._value(node.inputs[0], env)
        w = self._value(node.inputs[1], env)
        bias = self._value(node.inputs[2], env) if with_bias and len(node.inputs) > 2 else None
        return x, w, bias

    def _op_conv2d(self, node: Node, env) -> Tensor:
        x, w, bias = self._dot_window(node, env, True)
        n, c, h, wd, co, kh, kw, sh, sw, pt, pl, oh, ow = self._conv_geometry(
            node, x.shape, w.shape
        )
        out = []
        for nn in range(n):
            for oc in range(co):
                for oy in range(oh):
                    for ox in range(ow):
                        acc = Fraction(bias.data[oc]) if bias is not None else Fraction(0)
                        for cc in range(c):
                            for ky in range(kh):
                                iy = oy * sh - pt + ky
                                if not 0 <= iy < h:
                                    continue
                                for kx in range(kw):
                                    ix = ox * sw - pl + kx
                                    if not 0 <= ix < wd:
                                        continue
                                    acc += (
                                        x.data[((nn * c + cc) * h + iy) * wd + ix]
                                        * w.data[((oc * c + cc) * kh + ky) * kw + kx]
                                    )
                        out.append(acc)
        return Tensor((n, co, oh, ow), out)

    def _op_gemm(self, node: Node, env) -> Tensor:
        x, w, bias = self._dot_window(node, env, True)
        rows, inner = x.shape
        out_dim = w.shape[0]
        out = []
        for r in range(rows):
            for o in range(out_dim):
                acc = sum(
                    (x.data[r * inner + k] * w.data[o * inner + k] for k in range(inner)),
                    Fraction(bias.data[o]) if bias is not None else Fraction(0),
                )
                out.append(acc)
        return Tensor((rows, out_dim), out)

    def _op_matmul(self, node: Node, env) -> Tensor:
        x, w, _ = self._dot_window(node, env, False)
        rows, inner = x.shape
        out_dim = w.shape[1]
        out = [
            sum(
                (x.data[r * inner + k] * w.data[k * out_dim + o] for k in range(inner)),
                Fraction(0),
            )
            for r in range(rows)
            for o in range(out_dim)
        ]
        return Tensor((rows, out_dim), out)

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
        return Tensor(x.shape, [v if v > 0 else Fraction(0) for v in x.data])

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
                        vals = [
                            x.data[(base + iy) * w + ix]
                            for iy in range(oy * sh - pt, oy * sh - pt + kh)
                            for ix in range(ox * sw - pl, ox * sw - pl + kw)
                            if 0 <= iy < h and 0 <= ix < w
                        ]
                        if not vals:
                            raise ValueError(f"node {node.name}: empty pooling window")
                        out.append(max(vals))
        return Tensor((n, c, oh, ow), out)

    def _op_globalaveragepool(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        n, c, h, w = x.shape
        window = h * w
        out = []
        for i in range(n * c):
            out.append(sum(x.data[i * window : (i + 1) * window], Fraction(0)) / window)
        return Tensor((n, c, 1, 1), out)

    def _op_batchnormalization(self, node: Node, env) -> Tensor:
        x = self._value(node.inputs[0], env)
        g = self.weights[f"{node.name}:scale"]
        b = self.weights[f"{node.name}:shift"]
        n, c, h, w = x.shape
        hw = h * w
        out = []
        for nn in range(n):
            for cc in range(c):
                base = (nn * c + cc) * hw
                out.extend(x.data[base + i] * g.data[cc] + b.data[cc] for i in range(hw))
        return Tensor(x.shape, out)


def _fixed_trace(pg, sample) -> Dict[str, Tensor]:
    """One fixed-point inference keeping all intermediates; array engine
    when available."""
    if supports(pg.graph, pg.cfg):
        eng = FastEngine(pg)
        env = eng.run_env(sample)
        return {name: eng._to_tensor(arr) for name, arr in env.items()}
    return run_trace(pg, sample)


# -- affine propagation over the graph ----------------------------------------------


class _AffineWalker(_GraphWalker):
    """Exact-mode propagation; tensors hold AffineForm elements. Weight
    tensors hold the quantized rational values the fixed engine actually
    multiplies by."""

    def __init__(self, pg, fbits: int, dot: str):
        weights = {
            name: Tensor(t.shape, [v.as_fraction() for v in t.data])
            for name, t in pg.weights.items()
        }
        super().__init__(weights)
        self.env: Dict[str, Tensor] = {}
        self.q = Fraction(1, 1 << fbits)
        self.naive = dot == "naive"

    def seed(self, in_name: str, in_shape, sample: Sequence[float]) -> None:
        self.env[in_name] = Tensor(
            tuple(in_shape),
            [AffineForm(Fraction(v), {next(_SYMBOLS): self.q}) for v in sample],
        )

    def step(self, node: Node) -> None:
        self.env[node.outputs[0]] = super().step(node, self.env)

    def bound_against(self, name: str, ref: Tensor) -> Tuple[Fraction, Fraction]:
        worst = Fraction(0)
        width = Fraction(0)
        for form, r in zip(self.env[name].data, ref.data):
            lo, hi = form.lo(), form.hi()
            worst = max(worst, abs(hi - r), abs(r - lo))
            width = max(width, hi - lo)
        return worst, width

    # weights participate as degenerate forms
    def _value(self, name: str, env) -> Tensor:
        if name in env:
            return env[name]
        t = self.weights[name]
        return Tensor(t.shape, [AffineForm(v) for v in t.data])

    def _rounded(self, form: AffineForm, count: int) -> AffineForm:
        rnd = (count * self.q) if self.naive else self.q
        form.terms[next(_SYMBOLS)] = rnd
        return form.cap()

    def _op_conv2d(self, node: Node, env) -> Tensor:
        x = env[node.inputs[0]]
        w = self.weights[node.inputs[1]]
        bias = self.weights.get(node.inputs[2]) if len(node.inputs) > 2 else None
        n, c, h, wd, co, kh, kw, sh, sw, pt, pl, oh, ow = self._conv_geometry(
            node, x.shape, w.shape
        )
        out = []
        for nn in range(n):
            for oc in range(co):
                for oy in range(oh):
                    for ox in range(ow):
                        pairs = []
                        for cc in range(c):
                            for ky in range(kh):
                                iy = oy * sh - pt + ky
                                if not 0 <= iy < h:
                                    continue
                                for kx in range(kw):
                                    ix = ox * sw - pl + kx
                                    if not 0 <= ix < wd:
                                        continue
                                    pairs.append(
                                        (
                                            w.data[((oc * c + cc) * kh + ky) * kw + kx],
                                            x.data[((nn * c + cc) * h + iy) * wd + ix],
                                        )
                                    )
                        const = bias.data[oc] if bias is not None else Fraction(0)
                        out.append(self._rounded(_combine(pairs, const), len(pairs)))
        return Tensor((n, co, oh, ow), out)

    def _op_gemm(self, node: Node, env) -> Tensor:
        x = env[node.inputs[0]]
        w = self.weights[node.inputs[1]]
        bias = self.weights.get(node.inputs[2]) if len(node.inputs) > 2 else None
        rows, inner = x.shape
        out_dim = w.shape[0]
        out = []
        for r in range(rows):
            row_forms = x.data[r * inner : (r + 1) * inner]
            for o in range(out_dim):
                pairs = list(zip(w.data[o * inner : (o + 1) * inner], row_forms))
                const = bias.data[o] if bias is not None else Fraction(0)
                out.append(self._rounded(_combine(pairs, const), inner))
        return Tensor((rows, out_dim), out)

    def _op_matmul(self, node: Node, env) -> Tensor:
        x = env[node.inputs[0]]
        w = self.weights[node.inputs[1]]
        rows, inner = x.shape
        out_dim = w.shape[1]
        out = []
        for r in range(rows):
            row_forms = x.data[r * inner : (r + 1) * inner]
            for o in range(out_dim):
                pairs = [(w.data[k * out_dim + o], row_forms[k]) for k in range(inner)]
                out.append(self._rounded(_combine(pairs, Fraction(0)), inner))
        return Tensor((rows, out_dim), out)

    def _op_add(self, node: Node, env) -> Tensor:
        a = self._value(node.inputs[0], env)
        b = self._value(node.inputs[1], env)
        if a.shape == b.shape:
            data = [
                _combine([(Fraction(1), x), (Fraction(1), y)], Fraction(0))
                for x, y in zip(a.data, b.data)
            ]
            return Tensor(a.shape, data)
        out_shape = broadcast_shapes(a.shape, b.shape)
        out = []
        idx = [0] * len(out_shape)
        total = 1
        for d in out_shape:
            total *= d
        for _ in range(total):
            va = a.data[flat_offset(a.shape, broadcast_index(idx, a.shape))]
            vb = b.data[flat_offset(b.shape, broadcast_index(idx, b.shape))]
            out.append(_combine([(Fraction(1), va), (Fraction(1), vb)], Fraction(0)))
            for k in range(len(idx) - 1, -1, -1):
                idx[k] += 1
                if idx[k] < out_shape[k]:
                    break
                idx[k] = 0
        return Tensor(out_shape, out)

    def _op_relu(self, node: Node, env) -> Tensor:
        x = env[node.inputs[0]]
        return Tensor(x.shape, propagate_relu(x.data))

    def _op_maxpool(self, node: Node, env) -> Tensor:
        x = env[node.inputs[0]]
        n, c, h, w = x.shape
        kh, kw = (int(v) for v in node.attrs["kernel"])
        sh, sw = (int(v) for v in node.attrs.get("strides", [kh, kw]))
        pt, pl, pb, pr = (int(v) for v in node.attrs.get("pads", [0, 0, 0, 0]))
        oh = (h + pt + pb - kh) // sh + 1
        ow = (w + pl + pr - kw) // sw + 1
        windows = []
        for nn in range(n):
            for cc in range(c):
                base = (nn * c + cc) * h
                for oy in range(oh):
                    for ox in range(ow):
                        windows.append(
                            [
                                x.data[(base + iy) * w + ix]
                                for iy in range(oy * sh - pt, oy * sh - pt + kh)
                                for ix in range(ox * sw - pl, ox * sw - pl + kw)
                                if 0 <= iy < h and 0 <= ix < w
                            ]
                        )
        return Tensor((n, c, oh, ow), propagate_maxpool(windows))

    def _op_globalaveragepool(self, node: Node, env) -> Tensor:
        x = env[node.inputs[0]]
        n, c, h, w = x.shape
        window = h * w
        coeff = Fraction(1, window)
        out = []
        for i in range(n * c):
            form = _combine(
                [(coeff, f) for f in x.data[i * window : (i + 1) * window]], Fraction(0)
            )
            form.terms[next(_SYMBOLS)] = self.q  # single rounded division
            out.append(form.cap())
        return Tensor((n, c, 1, 1), out)

    def _op_batchnormalization(self, node: Node, env) -> Tensor:
        x = env[node.inputs[0]]
        g = self.weights[f"{node.name}:scale"]
        b = self.weights[f"{node.name}:shift"]
        n, c, h, w = x.shape
        hw = h * w
        out = []
        for nn in range(n):
            for cc in range(c):
                base = (nn * c + cc) * hw
                for i in range(hw):
                    form = _combine([(g.data[cc], x.data[base + i])], b.data[cc])
                    form.terms[next(_SYMBOLS)] = self.q  # rounded product
                    out.append(form.cap())
        return Tensor(x.shape, out)

    def _op_constant(self, node: Node, env) -> Tensor:
        t = self.weights[node.attrs["tensor"]]
        return Tensor(t.shape, [AffineForm(v) for v in t.data])


# -- interval propagation (float64, outward-padded) ---------------------------------


def _pad_out(r: np.ndarray) -> np.ndarray:
    """Push a computed radius outward past its own float64 rounding."""
    return np.nextafter(r * _SLACK, np.inf)


def _fixed_trace_f64(pg, sample) -> Dict[str, np.ndarray]:
    """Fixed-point intermediates as exact float64 values (raw * 2^-f is
    exact whenever mbits + fbits <= 52, checked by the caller)."""
    scale = 2.0 ** -pg.cfg.pbits
    if supports(pg.graph, pg.cfg):
        env = FastEngine(pg).run_env(sample)
        return {name: arr.astype(np.float64) * scale for name, arr in env.items()}
    env = run_trace(pg, sample)
    return {
        name: np.array([v.raw for v in t.data], dtype=np.float64).reshape(t.shape or (1,))
        * scale
        for name, t in env.items()
    }


def _reference_trace_f64(graph: Graph, sample: Sequence[float]) -> Dict[str, np.ndarray]:
    """Float64 stand-in for the exact reference. Its own rounding error is
    orders of magnitude below the fixed-point quantization this mode is
    used to bound, and the bounds are padded outward to absorb it."""
    weights: Dict[str, np.ndarray] = {}
    folded = set()
    for node in graph.nodes:
        if node.op == "BatchNormalization":
            gs, hs = _fold_batchnorm(node, graph)
            weights[f"{node.name}:scale"] = np.array([float(g) for g in gs])
            weights[f"{node.name}:shift"] = np.array([float(h) for h in hs])
            folded.update(node.inputs[1:5])
    for name, t in graph.initializers.items():
        if name not in folded:
            weights[name] = np.array(t.values, dtype=np.float64).reshape(t.shape or (1,))

    in_name, in_shape = graph.inputs[0]
    env = {in_name: np.asarray(sample, dtype=np.float64).reshape(in_shape)}
    walker = _F64Walker(weights)
    for node in graph.nodes:
        env[node.outputs[0]] = walker.step(node, env)
    return env


class _F64Walker:
    """Plain float64 executor over the true weights."""

    def __init__(self, weights: Dict[str, np.ndarray]):
        self.weights = weights

    def step(self, node: Node, env: Dict[str, np.ndarray]) -> np.ndarray:
        try:
            kernel = getattr(self, "_op_" + node.op.lower())
        except AttributeError:
            raise UnsupportedOpError(f"unsupported op {node.op!r}") from None
        return kernel(node, env)

    def _value(self, name, env):
        return env[name] if name in env else self.weights[name]

    def _conv_patches(self, node: Node, x: np.ndarray, w_shape):
        n, c, h, wd = x.shape
        co, ci, kh, kw = w_shape
        if int(node.attrs.get("groups", 1)) != 1:
            raise UnsupportedOpError(f"node {node.name}: grouped convolution not supported")
        if [int(v) for v in node.attrs.get("dilations", [1, 1])] != [1, 1]:
            raise UnsupportedOpError(f"node {node.name}: dilated convolution not supported")
        sh, sw = (int(v) for v in node.attrs.get("strides", [1, 1]))
        pads = node.attrs.get("pads", [0, 0, 0, 0])
        idx, ok, oh, ow = _window_plan(h, wd, kh, kw, sh, sw, pads)
        # gather with a zero slot at index -1: append one zero per plane
        flat = x.reshape(n, c, h * wd)
        padded = np.concatenate([flat, np.zeros((n, c, 1))], axis=2)
        pats = padded[:, :, idx]  # [n, c, oh*ow, kh*kw]
        pats = pats.transpose(0, 2, 1, 3).reshape(n, oh * ow, c * kh * kw)
        return pats, ok, oh, ow, co, c * kh * kw

    def _op_conv2d(self, node, env):
        x = self._value(node.inputs[0], env)
        w = self.weights[node.inputs[1]]
        bias = self.weights.get(node.inputs[2]) if len(node.inputs) > 2 else None
        pats, ok, oh, ow, co, k = self._conv_patches(node, x, w.shape)
        wmat = w.reshape(co, k)
        out = np.einsum("nsk,ok->nos", pats, wmat)
        if bias is not None:
            out = out + bias[None, :, None]
        return out.reshape(x.shape[0], co, oh, ow)

    def _op_gemm(self, node, env):
        x = self._value(node.inputs[0], env)
        w = self.weights[node.inputs[1]]
        out = x @ w.T
        if len(node.inputs) > 2:
            out = out + self.weights[node.inputs[2]][None, :]
        return out

    def _op_matmul(self, node, env):
        return self._value(node.inputs[0], env) @ self.weights[node.inputs[1]]

    def _op_add(self, node, env):
        return self._value(node.inputs[0], env) + self._value(node.inputs[1], env)

    def _op_relu(self, node, env):
        return np.maximum(self._value(node.inputs[0], env), 0.0)

    def _op_maxpool(self, node, env):
        x = self._value(node.inputs[0], env)
        n, c, h, w = x.shape
        kh, kw = (int(v) for v in node.attrs["kernel"])
        sh, sw = (int(v) for v in node.attrs.get("strides", [kh, kw]))
        pads = node.attrs.get("pads", [0, 0, 0, 0])
        idx, ok, oh, ow = _window_plan(h, w, kh, kw, sh, sw, pads)
        if not ok.any(axis=1).all():
            raise ValueError(f"node {node.name}: empty pooling window")
        flat = x.reshape(n, c, h * w)
        padded = np.concatenate([flat, np.full((n, c, 1), -np.inf)], axis=2)
        return padded[:, :, idx].max(axis=3).reshape(n, c, oh, ow)

    def _op_globalaveragepool(self, node, env):
        x = self._value(node.inputs[0], env)
        return x.mean(axis=(2, 3), keepdims=True)

    def _op_batchnormalization(self, node, env):
        x = self._value(node.inputs[0], env)
        g = self.weights[f"{node.name}:scale"].reshape(1, -1, 1, 1)
        b = self.weights[f"{node.name}:shift"].reshape(1, -1, 1, 1)
        return x * g + b

    def _op_flatten(self, node, env):
        x = self._value(node.inputs[0], env)
        axis = int(node.attrs.get("axis", 1))
        lead = 1
        for d in x.shape[:axis]:
            lead *= d
        return x.reshape(lead, x.size // lead)

    def _op_reshape(self, node, env):
        x = self._value(node.inputs[0], env)
        target = [int(d) for d in node.attrs["shape"]]
        if -1 in target:
            known = 1
            for d in target:
                if d != -1:
                    known *= d
            target[target.index(-1)] = x.size // known
        return x.reshape(target)

    def _op_constant(self, node, env):
        return self.weights[node.attrs["tensor"]]


class _IntervalWalker(_F64Walker):
    """Per-element (center, radius) in float64 over the quantized weights.

    Every compound radius carries a slop term covering the float64 error of
    computing the center itself, bounded through the sum of absolute
    operands, then the whole radius is padded outward. env values are
    (center, radius) array pairs."""

    def __init__(self, pg, fbits: int, dot: str):
        weights = {
            name: np.array([float(v.as_fraction()) for v in t.data], dtype=np.float64).reshape(
                t.shape or (1,)
            )
            for name, t in pg.weights.items()
        }
        super().__init__(weights)
        self.env: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.q = 2.0 ** -fbits
        self.naive = dot == "naive"

    def seed(self, in_name, in_shape, sample) -> None:
        c = np.asarray(sample, dtype=np.float64).reshape(in_shape)
        self.env[in_name] = (c, np.full_like(c, self.q))

    def step(self, node: Node) -> None:
        self.env[node.outputs[0]] = _F64Walker.step(self, node, self.env)

    def bound_against(self, name: str, ref: np.ndarray) -> Tuple[Fraction, Fraction]:
        c, r = self.env[name]
        lo = np.nextafter(c - r, -np.inf)
        hi = np.nextafter(c + r, np.inf)
        worst = float(max(np.max(hi - ref), np.max(ref - lo)))
        # absorb the float64 reference's own drift
        pad = float(np.max(np.abs(ref))) * 2.0**-30 + 2.0**-300
        return Fraction(worst * _SLACK + pad), Fraction(float(np.max(hi - lo)) * _SLACK)

    def _value(self, name, env):
        if name in env:
            return env[name]
        w = self.weights[name]
        return (w, np.zeros_like(w))

    def _op_conv2d(self, node, env):
        xc, xr = env[node.inputs[0]]
        w = self.weights[node.inputs[1]]
        bias = self.weights.get(node.inputs[2]) if len(node.inputs) > 2 else None
        pats_c, ok, oh, ow, co, k = self._conv_patches(node, xc, w.shape)
        pats_r, *_ = self._conv_patches(node, xr, w.shape)
        wmat = w.reshape(co, k)
        awmat = np.abs(wmat)
        n = xc.shape[0]

        c = np.einsum("nsk,ok->nos", pats_c, wmat)
        absmix = np.einsum("nsk,ok->nos", np.abs(pats_c), awmat)
        r = np.einsum("nsk,ok->nos", pats_r, awmat)
        if bias is not None:
            c = c + bias[None, :, None]
            absmix = absmix + np.abs(bias)[None, :, None]
        slop = absmix * (k * 2.0**-50)
        if self.naive:
            channels = w.shape[1]
            counts = ok.sum(axis=1) * channels  # products actually rounded
            rnd = counts[None, None, :] * self.q
        else:
            rnd = self.q
        r = _pad_out(r + slop + rnd)
        return (
            c.reshape(n, co, oh, ow),
            r.reshape(n, co, oh, ow),
        )

    def _dense(self, xc, xr, wmat, bias, inner):
        """Shared Gemm/MatMul propagation; wmat is [out, in]."""
        awmat = np.abs(wmat)
        c = xc @ wmat.T
        absmix = np.abs(xc) @ awmat.T
        r = xr @ awmat.T
        if bias is not None:
            c = c + bias[None, :]
            absmix = absmix + np.abs(bias)[None, :]
        slop = absmix * (inner * 2.0**-50)
        rnd = (inner * self.q) if self.naive else self.q
        return c, _pad_out(r + slop + rnd)

    def _op_gemm(self, node, env):
        xc, xr = env[node.inputs[0]]
        w = self.weights[node.inputs[1]]
        bias = self.weights.get(node.inputs[2]) if len(node.inputs) > 2 else None
        return self._dense(xc, xr, w, bias, xc.shape[1])

    def _op_matmul(self, node, env):
        xc, xr = env[node.inputs[0]]
        w = self.weights[node.inputs[1]]
        return self._dense(xc, xr, w.T, None, xc.shape[1])

    def _op_add(self, node, env):
        ac, ar = self._value(node.inputs[0], env)
        bc, br = self._value(node.inputs[1], env)
        c = ac + bc
        slop = (np.abs(ac) + np.abs(bc)) * 2.0**-50
        return c, _pad_out(ar + br + slop)

    def _op_relu(self, node, env):
        c, r = env[node.inputs[0]]
        lo = np.nextafter(c - r, -np.inf)
        hi = np.nextafter(c + r, np.inf)
        dead = hi <= 0
        live = lo >= 0
        oc = np.where(live, c, np.where(dead, 0.0, hi * 0.5))
        orr = np.where(live, r, np.where(dead, 0.0, hi * 0.5))
        return oc, orr

    def _op_maxpool(self, node, env):
        xc, xr = env[node.inputs[0]]
        n, ch, h, w = xc.shape
        kh, kw = (int(v) for v in node.attrs["kernel"])
        sh, sw = (int(v) for v in node.attrs.get("strides", [kh, kw]))
        pads = node.attrs.get("pads", [0, 0, 0, 0])
        idx, ok, oh, ow = _window_plan(h, w, kh, kw, sh, sw, pads)
        if not ok.any(axis=1).all():
            raise ValueError(f"node {node.name}: empty pooling window")
        lo = np.nextafter(xc - xr, -np.inf).reshape(n, ch, h * w)
        hi = np.nextafter(xc + xr, np.inf).reshape(n, ch, h * w)
        lo = np.concatenate([lo, np.full((n, ch, 1), -np.inf)], axis=2)[:, :, idx].max(axis=3)
        hi = np.concatenate([hi, np.full((n, ch, 1), -np.inf)], axis=2)[:, :, idx].max(axis=3)
        c = (lo + hi) * 0.5
        r = _pad_out(np.nextafter((hi - lo) * 0.5, np.inf))
        return c.reshape(n, ch, oh, ow), r.reshape(n, ch, oh, ow)

    def _op_globalaveragepool(self, node, env):
        xc, xr = env[node.inputs[0]]
        window = xc.shape[2] * xc.shape[3]
        c = xc.mean(axis=(2, 3), keepdims=True)
        absmean = np.abs(xc).mean(axis=(2, 3), keepdims=True)
        slop = absmean * ((window + 2) * 2.0**-50)
        r = xr.mean(axis=(2, 3), keepdims=True) * _SLACK
        return c, _pad_out(r + slop + self.q)

    def _op_batchnormalization(self, node, env):
        xc, xr = env[node.inputs[0]]
        g = self.weights[f"{node.name}:scale"].reshape(1, -1, 1, 1)
        b = self.weights[f"{node.name}:shift"].reshape(1, -1, 1, 1)
        c = xc * g + b
        slop = (np.abs(xc * g) + np.abs(b)) * 2.0**-50
        return c, _pad_out(xr * np.abs(g) + slop + self.q)

    def _op_flatten(self, node, env):
        c, r = env[node.inputs[0]]
        axis = int(node.attrs.get("axis", 1))
        lead = 1
        for d in c.shape[:axis]:
            lead *= d
        shape = (lead, c.size // lead)
        return c.reshape(shape), r.reshape(shape)

    def _op_reshape(self, node, env):
        c, r = env[node.inputs[0]]
        target = [int(d) for d in node.attrs["shape"]]
        if -1 in target:
            known = 1
            for d in target:
                if d != -1:
                    known *= d
            target[target.index(-1)] = c.size // known
        return c.reshape(target), r.reshape(target)

    def _op_constant(self, node, env):
        w = self.weights[node.attrs["tensor"]]
        return w, np.zeros_like(w)
