"""Array execution engine, bit-identical to the scalar reference runtime.

The scalar engine in :mod:`certinfer.runtime` is the semantic authority but
runs every multiply-accumulate through Python objects. This module reproduces
the exact same sequence of roundings with numpy, under conditions where the
emulation is provably exact:

* fixed point: raw values are machine integers. All products and exact sums
  fit in int64 when ``2*(mbits+fbits) + log2(max inner length)`` stays below
  62 bits, which :func:`supports` checks up front.
* float, round-to-nearest-even, total precision at most 25 bits: a p-bit
  operation emulated as (binary64 op, then round to p bits) is correctly
  rounded, because double rounding through 53 bits is innocuous whenever
  53 >= 2p + 2. Products of p-bit operands are exact in binary64 outright.

Anything outside those conditions (other float rounding modes, wide floats,
values escaping the exponent guard band) is refused and the caller falls
back to the scalar engine. ``tests/test_vectorized.py`` drives both engines
over the same graphs and asserts bit equality, which is the actual evidence
for the claims above.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import RangeOverflowError
from .fixedpoint import FixedPoint
from .model import Graph, Node, UnsupportedOpError, _node_shape
from .rounding import RoundingMode, round_ratio_signed
from .runtime import BackendConfig, PreparedGraph, run as scalar_run
from .softfloat import SoftFloat
from .tensor import Tensor

try:
    import gmpy2

    _HAVE_GMPY2 = True
except ImportError:  # pragma: no cover - present in the supported environment
    gmpy2 = None
    _HAVE_GMPY2 = False


class FastPathUnavailable(RuntimeError):
    """The array engine cannot guarantee bit-identical results here."""


# binary64 emulation stays exact while every value (weights, activations,
# inputs) is zero or has magnitude in [2^-400, 2^400]: products then stay
# normal, residuals of error-free transforms stay normal, and sums cannot
# overflow. Real networks sit many decades inside this band.
_GUARD_LO = 2.0**-400
_GUARD_HI = 2.0**400

_MAX_CHUNK_BYTES = 32 << 20
_FLOAT_MAX_PBITS = 25  # 53 >= 2p + 2


def _round_bits(a: np.ndarray, pbits: int) -> np.ndarray:
    """Round binary64 values to pbits significant bits, ties to even."""
    m, e = np.frexp(a)
    return np.ldexp(np.rint(np.ldexp(m, pbits)), e - pbits)


def _shift_round_int(a: np.ndarray, fbits: int, mode: RoundingMode) -> np.ndarray:
    """Vector version of rounding.round_shift_signed for int64 arrays."""
    if fbits == 0:
        return a.copy()
    mag = np.abs(a)
    sign = np.sign(a)
    q = mag >> fbits
    rem = mag & ((1 << fbits) - 1)
    if mode is RoundingMode.RTZ:
        pass
    elif mode is RoundingMode.RNA:
        q = q + (rem >= (1 << (fbits - 1)))
    else:
        half = 1 << (fbits - 1)
        q = q + ((rem > half) | ((rem == half) & ((q & 1) == 1)))
    return sign * q


def _window_plan(
    h: int, w: int, kh: int, kw: int, sh: int, sw: int, pads: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray, int, int]:
    """Gather indices for one spatial plane: [oh*ow, kh*kw] positions, -1
    where the window pokes outside the input."""
    pt, pl, pb, pr = (int(v) for v in pads)
    oh = (h + pt + pb - kh) // sh + 1
    ow = (w + pl + pr - kw) // sw + 1
    iy = (np.arange(oh) * sh - pt)[:, None] + np.arange(kh)[None, :]
    ix = (np.arange(ow) * sw - pl)[:, None] + np.arange(kw)[None, :]
    pos = iy[:, None, :, None] * w + ix[None, :, None, :]
    ok = ((iy >= 0) & (iy < h))[:, None, :, None] & ((ix >= 0) & (ix < w))[None, :, None, :]
    idx = np.where(ok, pos, -1).reshape(oh * ow, kh * kw)
    return idx, ok.reshape(oh * ow, kh * kw), oh, ow


def supports(graph: Graph, cfg: BackendConfig) -> bool:
    """Static check: can the array engine reproduce the scalar engine
    bit for bit on this graph and configuration?"""
    try:
        shapes: Dict[str, Tuple[int, ...]] = dict(graph.inputs)
        shapes.update({n: t.shape for n, t in graph.initializers.items()})
        inner_lengths = [1]
        padded_conv = False
        for node in graph.nodes:
            out_shape, inner = _node_shape(node, shapes)
            shapes[node.outputs[0]] = out_shape
            if inner:
                inner_lengths.append(inner)
            if node.op == "Conv2D" and any(int(p) for p in node.attrs.get("pads", [0] * 4)):
                padded_conv = True
            if node.op == "GlobalAveragePool":
                n, c, hh, ww = shapes[node.inputs[0]]
                inner_lengths.append(hh * ww)
    except Exception:
        return False  # let the scalar engine produce the authoritative error

    if cfg.arith == "float":
        if cfg.mode is not RoundingMode.RNE or cfg.pbits > _FLOAT_MAX_PBITS:
            return False
        if cfg.dot == "naive" and cfg.sum == "exact" and not _HAVE_GMPY2:
            return False
        # pairwise summation builds a different tree when border windows drop
        # padded positions, so padded convolutions stay on the scalar path
        if cfg.dot == "naive" and cfg.sum == "pairwise" and padded_conv:
            return False
        return True

    # fixed: every exact accumulation must fit in int64
    worst = 2 * (cfg.mbits + cfg.pbits) + max(k.bit_length() for k in inner_lengths) + 1
    return worst < 62


def make_engine(pg: PreparedGraph) -> Callable[[Sequence[float]], Tensor]:
    """Fastest available runner for this prepared graph.

    Returns the array engine when it is guaranteed bit-identical, otherwise
    (or if the guard band is violated mid-run) the scalar engine."""
    if supports(pg.graph, pg.cfg):
        try:
            eng = FastEngine(pg)
        except FastPathUnavailable:
            return lambda sample: scalar_run(pg, sample)

        def runner(sample: Sequence[float]) -> Tensor:
            try:
                return eng.run(sample)
            except FastPathUnavailable:
                return scalar_run(pg, sample)

        return runner
    return lambda sample: scalar_run(pg, sample)


class FastEngine:
    def __init__(self, pg: PreparedGraph):
        self.pg = pg
        self.cfg = pg.cfg
        self.is_float = pg.cfg.arith == "float"
        if self.is_float:
            self.weights = {
                name: np.array([v.to_float() for v in t.data], dtype=np.float64).reshape(
                    t.shape or (1,)
                )
                for name, t in pg.weights.items()
            }
            for name, arr in self.weights.items():
                self._guard(arr)
        else:
            self.fmt = pg.cfg.fixed_format
            self.limit = self.fmt.raw_limit
            self.weights = {
                name: np.array([v.raw for v in t.data], dtype=np.int64).reshape(t.shape or (1,))
                for name, t in pg.weights.items()
            }
        self._plans: Dict[str, tuple] = {}

    # -- shared helpers ---------------------------------------------------------

    def _guard(self, a: np.ndarray) -> None:
        mag = np.abs(a)
        if not np.all((a == 0) | ((mag >= _GUARD_LO) & (mag <= _GUARD_HI))):
            raise FastPathUnavailable("values left the binary64 emulation guard band")

    def _guarded(self, a: np.ndarray) -> np.ndarray:
        if self.is_float:
            self._guard(a)
        return a

    def _check_fixed(self, a: np.ndarray) -> np.ndarray:
        if np.any(np.abs(a) >= self.limit):
            raise RangeOverflowError(
                f"fixed value exceeds {self.fmt.mbits} integer bits at f={self.fmt.fbits}"
            )
        return a

    def _rnd(self, a: np.ndarray) -> np.ndarray:
        return _round_bits(a, self.cfg.pbits)

    # -- entry point -------------------------------------------------------------

    def run(self, sample: Sequence[float]) -> Tensor:
        env = self.run_env(sample)
        return self._to_tensor(env[self.pg.graph.outputs[0][0]])

    def run_env(self, sample: Sequence[float]) -> Dict[str, np.ndarray]:
        """Execute and return every intermediate as a raw array (float64
        values for float arithmetic, int64 raws for fixed)."""
        graph = self.pg.graph
        if len(graph.inputs) != 1:
            raise ValueError("runtime expects exactly one graph input")
        in_name, in_shape = graph.inputs[0]
        expected = 1
        for d in in_shape:
            expected *= d
        if len(sample) != expected:
            raise ValueError(f"input length {len(sample)} != {expected} for shape {in_shape}")

        arr = np.asarray(sample, dtype=np.float64).reshape(in_shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("input sample contains a non-finite value")
        env: Dict[str, np.ndarray] = {in_name: self._quantize_input(arr)}
        for node in graph.nodes:
            try:
                kernel = getattr(self, "_op_" + node.op.lower())
            except AttributeError:
                raise UnsupportedOpError(f"unsupported op {node.op!r}") from None
            env[node.outputs[0]] = kernel(node, env)
        return env

    def _quantize_input(self, arr: np.ndarray) -> np.ndarray:
        if self.is_float:
            self._guard(arr)
            return self._rnd(arr)
        scaled = arr * float(1 << self.cfg.pbits)  # power-of-two scale, exact
        mode = self.cfg.mode
        if mode is RoundingMode.RNE:
            raw = np.rint(scaled)
        elif mode is RoundingMode.RTZ:
            raw = np.trunc(scaled)
        else:
            raw = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
        return self._check_fixed(raw.astype(np.int64))

    def _to_tensor(self, arr: np.ndarray) -> Tensor:
        if self.is_float:
            data = [
                SoftFloat.from_float(float(v), self.cfg.pbits, self.cfg.mode) for v in arr.flat
            ]
        else:
            data = [FixedPoint(int(v), self.fmt) for v in arr.flat]
        return Tensor(arr.shape, data)

    def _value(self, name: str, env: Dict[str, np.ndarray]) -> np.ndarray:
        if name in env:
            return env[name]
        if name in self.weights:
            return self.weights[name]
        raise KeyError(f"value {name!r} not available")

    # -- dot product dispatch -----------------------------------------------------

    def _dot_many(self, pats: np.ndarray, wmat: np.ndarray) -> np.ndarray:
        """All dot products of pats [S, K] against wmat [M, K] -> [M, S],
        following the configured algorithm exactly."""
        cfg = self.cfg
        m, k = wmat.shape
        s = pats.shape[0]
        if not self.is_float:
            if cfg.dot == "accurate":
                wide = wmat @ pats.T  # exact in int64 by the supports() bound
                return self._check_fixed(_shift_round_int(wide, cfg.pbits, cfg.mode))
            out = np.empty((m, s), dtype=np.int64)
            for lo, hi in self._chunks(m, s * k * 8):
                prod = wmat[lo:hi, None, :] * pats[None, :, :]
                out[lo:hi] = _shift_round_int(prod, cfg.pbits, cfg.mode).sum(axis=-1)
            return self._check_fixed(out)

        out = np.empty((m, s), dtype=np.float64)
        per_row = s * k * 8 * (3 if cfg.dot == "oro" else 1)
        for lo, hi in self._chunks(m, per_row):
            if cfg.dot == "oro":
                out[lo:hi] = self._dot_oro(pats, wmat[lo:hi])
            else:
                prods = self._rnd(wmat[lo:hi, None, :] * pats[None, :, :])
                out[lo:hi] = self._reduce(prods)
        return out

    @staticmethod
    def _chunks(m: int, bytes_per_row: int):
        step = max(1, _MAX_CHUNK_BYTES // max(1, bytes_per_row))
        for lo in range(0, m, step):
            yield lo, min(m, lo + step)

    def _reduce(self, prods: np.ndarray) -> np.ndarray:
        """Reduce the last axis of rounded products with the configured sum."""
        name = self.cfg.sum
        k = prods.shape[-1]
        if k == 0:
            return np.zeros(prods.shape[:-1])
        if name == "naive":
            acc = prods[..., 0]
            for i in range(1, k):
                acc = self._rnd(acc + prods[..., i])
            return acc
        if name == "pairwise":

            def rec(lo: int, hi: int) -> np.ndarray:
                if hi - lo == 1:
                    return prods[..., lo]
                mid = lo + (hi - lo + 1) // 2
                return self._rnd(rec(lo, mid) + rec(mid, hi))

            return rec(0, k)
        if name == "kn":
            total = prods[..., 0]
            comp = np.zeros_like(total)
            for i in range(1, k):
                v = prods[..., i]
                t = self._rnd(total + v)
                d_big = self._rnd(self._rnd(total - t) + v)
                d_small = self._rnd(self._rnd(v - t) + total)
                comp = self._rnd(comp + np.where(np.abs(total) >= np.abs(v), d_big, d_small))
                total = t
            return self._rnd(total + comp)
        return self._sum_exact_rows(prods)

    def _sum_exact_rows(self, prods: np.ndarray) -> np.ndarray:
        """Correctly rounded exact sum along the last axis via mpfr.

        Inputs are p-bit values, so their conversion to mpfr at precision p
        is exact and fsum rounds the true sum exactly once."""
        flat = prods.reshape(-1, prods.shape[-1])
        out = np.empty(flat.shape[0], dtype=np.float64)
        with gmpy2.context(precision=self.cfg.pbits, round=gmpy2.RoundToNearest):
            for i in range(flat.shape[0]):
                out[i] = float(gmpy2.fsum(flat[i].tolist()))
        return out.reshape(prods.shape[:-1])

    def _dot_oro(self, pats: np.ndarray, wmat: np.ndarray) -> np.ndarray:
        """Compensated dot products, mirroring reducers.dot_float_oro."""
        exact = wmat[:, None, :] * pats[None, :, :]  # <= 2p bits, exact in f64
        hi = self._rnd(exact)
        res = exact - hi  # representable residual, exact subtraction
        p = hi[..., 0]
        s = res[..., 0]
        for i in range(1, hi.shape[-1]):
            p, q = self._two_sum(p, hi[..., i])
            s = self._rnd(s + self._rnd(q + res[..., i]))
        return self._rnd(p + s)

    def _two_sum(self, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        s = self._rnd(a + b)
        bv = self._rnd(s - a)
        t1 = self._rnd(s - bv)
        t2 = self._rnd(a - t1)
        t3 = self._rnd(b - bv)
        return s, self._rnd(t2 + t3)

    def _add_bias(self, acc: np.ndarray, bias: np.ndarray) -> np.ndarray:
        if self.is_float:
            return self._rnd(acc + bias)
        return self._check_fixed(acc + bias)

    # -- operators ----------------------------------------------------------------

    def _op_conv2d(self, node: Node, env) -> np.ndarray:
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

        plan = self._plans.get(node.name)
        if plan is None:
            sh, sw = (int(v) for v in node.attrs.get("strides", [1, 1]))
            idx, ok, oh, ow = _window_plan(
                h, wd, kh, kw, sh, sw, node.attrs.get("pads", [0, 0, 0, 0])
            )
            # absolute index per channel into the flattened (c,h,w) block,
            # K axis ordered (channel, ky, kx); out-of-bounds -> sentinel slot
            chan = (np.arange(c) * (h * wd))[None, :, None]
            sentinel = c * h * wd
            full = np.where(ok[:, None, :], idx[:, None, :] + chan, sentinel)
            plan = (full.reshape(oh * ow, c * kh * kw), oh, ow)
            self._plans[node.name] = plan
        idx_full, oh, ow = plan

        wmat = w.reshape(co, c * kh * kw)
        fill = np.zeros((n, 1), dtype=x.dtype)
        xg = np.concatenate([x.reshape(n, c * h * wd), fill], axis=1)
        outs = []
        for nn in range(n):
            pats = xg[nn][idx_full]  # [oh*ow, K] with padded positions = 0
            acc = self._dot_many(pats, wmat)  # [co, oh*ow]
            if bias is not None:
                acc = self._add_bias(acc, bias.reshape(co, 1))
            outs.append(acc.reshape(co, oh, ow))
        return self._guarded(np.stack(outs))

    def _op_gemm(self, node: Node, env) -> np.ndarray:
        x = self._value(node.inputs[0], env)
        w = self._value(node.inputs[1], env)  # [out, in]
        bias = self._value(node.inputs[2], env) if len(node.inputs) > 2 else None
        if x.shape[1] != w.shape[1]:
            raise ValueError(f"node {node.name}: inner dims {x.shape[1]} vs {w.shape[1]}")
        acc = self._dot_many(x, w).T  # [rows, out]
        if bias is not None:
            acc = self._add_bias(acc, bias.reshape(1, -1))
        return self._guarded(acc)

    def _op_matmul(self, node: Node, env) -> np.ndarray:
        x = self._value(node.inputs[0], env)
        w = self._value(node.inputs[1], env)  # [in, out]
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ValueError(f"node {node.name}: cannot multiply {x.shape} by {w.shape}")
        return self._guarded(self._dot_many(x, np.ascontiguousarray(w.T)).T)

    def _op_add(self, node: Node, env) -> np.ndarray:
        a = self._value(node.inputs[0], env)
        b = self._value(node.inputs[1], env)
        if self.is_float:
            return self._guarded(self._rnd(a + b))
        return self._check_fixed(a + b)

    def _op_relu(self, node: Node, env) -> np.ndarray:
        a = self._value(node.inputs[0], env)
        return np.where(a > 0, a, np.zeros((), dtype=a.dtype))

    def _op_maxpool(self, node: Node, env) -> np.ndarray:
        x = self._value(node.inputs[0], env)
        n, c, h, w = x.shape
        plan = self._plans.get(node.name)
        if plan is None:
            kh, kw = (int(v) for v in node.attrs["kernel"])
            sh, sw = (int(v) for v in node.attrs.get("strides", [kh, kw]))
            idx, ok, oh, ow = _window_plan(
                h, w, kh, kw, sh, sw, node.attrs.get("pads", [0, 0, 0, 0])
            )
            plan = (np.where(ok, idx, h * w), oh, ow)
            self._plans[node.name] = plan
        idx, oh, ow = plan
        sentinel = np.iinfo(np.int64).min if not self.is_float else -np.inf
        planes = np.concatenate(
            [x.reshape(n * c, h * w), np.full((n * c, 1), sentinel, dtype=x.dtype)], axis=1
        )
        best = planes[:, idx].max(axis=-1)
        if np.any(best == sentinel):
            raise ValueError(f"node {node.name}: empty pooling window")
        return best.reshape(n, c, oh, ow)

    def _op_globalaveragepool(self, node: Node, env) -> np.ndarray:
        x = self._value(node.inputs[0], env)
        n, c, h, w = x.shape
        window = h * w
        planes = x.reshape(n * c, window)
        if not self.is_float:
            totals = self._check_fixed(planes.sum(axis=1))
            mode = self.cfg.mode
            raws = [round_ratio_signed(int(t), window, mode) for t in totals]
            out = self._check_fixed(np.array(raws, dtype=np.int64))
            return out.reshape(n, c, 1, 1)
        out = np.empty(n * c, dtype=np.float64)
        for i in range(n * c):
            exact = sum(Fraction(float(v)) for v in planes[i]) / window
            out[i] = SoftFloat.from_fraction(exact, self.cfg.pbits, self.cfg.mode).to_float()
        return self._guarded(out.reshape(n, c, 1, 1))

    def _op_batchnormalization(self, node: Node, env) -> np.ndarray:
        x = self._value(node.inputs[0], env)
        g = self.weights[f"{node.name}:scale"].reshape(1, -1, 1, 1)
        b = self.weights[f"{node.name}:shift"].reshape(1, -1, 1, 1)
        if self.is_float:
            return self._guarded(self._rnd(self._rnd(x * g) + b))
        scaled = self._check_fixed(_shift_round_int(x * g, self.cfg.pbits, self.cfg.mode))
        return self._check_fixed(scaled + b)

    def _op_flatten(self, node: Node, env) -> np.ndarray:
        x = self._value(node.inputs[0], env)
        axis = int(node.attrs.get("axis", 1))
        lead = 1
        for d in x.shape[:axis]:
            lead *= d
        return x.reshape(lead, x.size // lead)

    def _op_reshape(self, node: Node, env) -> np.ndarray:
        x = self._value(node.inputs[0], env)
        target = [int(d) for d in node.attrs["shape"]]
        if -1 in target:
            known = 1
            for d in target:
                if d != -1:
                    known *= d
            target[target.index(-1)] = x.size // known
        return x.reshape(target)

    def _op_constant(self, node: Node, env) -> np.ndarray:
        return self.weights[node.attrs["tensor"]]
