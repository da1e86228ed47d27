"""Single-precision evaluator for converted graphs.

Stands in for the reference inference runtime when exporting labels and
golden logits in environments where that runtime is not installed. All
tensor arithmetic is numpy float32; accumulation order inside a matmul
or convolution is whatever BLAS does, which is the same stance a real
runtime takes. The exported labels freeze whichever engine produced
them, and labels.json records which one that was.
"""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from .errors import ReferenceExportError
from .portable import PortableGraph, PortableNode


def _pool_windows(x: np.ndarray, kernel, strides, pads, fill: float) -> np.ndarray:
    """Stacked sliding windows over NCHW, one slab per kernel offset."""
    kh, kw = kernel
    sh, sw = strides
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                constant_values=np.float32(fill))
    oh = (xp.shape[2] - kh) // sh + 1
    ow = (xp.shape[3] - kw) // sw + 1
    slabs = []
    for i in range(kh):
        for j in range(kw):
            slabs.append(xp[:, :, i:i + (oh - 1) * sh + 1:sh, j:j + (ow - 1) * sw + 1:sw])
    return np.stack(slabs)


class Evaluator:
    def __init__(self, graph: PortableGraph):
        self.graph = graph
        self.weights: Dict[str, np.ndarray] = {
            name: np.frombuffer(t.data, dtype="<f4").reshape(t.shape or (1,))
            for name, t in graph.initializers.items()
        }
        if len(graph.inputs) != 1 or len(graph.outputs) != 1:
            raise ReferenceExportError(
                f"graph {graph.name!r} must have one input and one output"
            )

    def run(self, flat_sample: np.ndarray) -> np.ndarray:
        in_name, in_shape = self.graph.inputs[0]
        n = int(np.prod(in_shape))
        if flat_sample.size != n:
            raise ReferenceExportError(
                f"sample holds {flat_sample.size} values, input {in_shape} needs {n}"
            )
        env = {in_name: flat_sample.astype(np.float32).reshape(in_shape)}
        for node in self.graph.nodes:
            env[node.outputs[0]] = self._step(node, env)
        out = env[self.graph.outputs[0][0]]
        if not np.all(np.isfinite(out)):
            raise ReferenceExportError(
                f"non-finite value in output of graph {self.graph.name!r}"
            )
        return np.asarray(out, dtype=np.float32).reshape(-1)

    def _value(self, env: Dict[str, np.ndarray], name: str) -> np.ndarray:
        if name in env:
            return env[name]
        if name in self.weights:
            return self.weights[name]
        raise ReferenceExportError(f"value {name!r} was never produced")

    def _step(self, node: PortableNode, env: Dict[str, np.ndarray]) -> np.ndarray:
        op = node.op
        v = lambda i: self._value(env, node.inputs[i])
        if op == "Conv2D":
            x, w = v(0), v(1)
            co, ci, kh, kw = w.shape
            windows = _pool_windows(
                x,
                (kh, kw),
                [int(s) for s in node.attrs.get("strides", [1, 1])],
                [int(p) for p in node.attrs.get("pads", [0, 0, 0, 0])],
                0.0,
            )
            # windows: (kh*kw, n, ci, oh, ow); contract channel and offset
            out = np.einsum(
                "knchw,okc->nohw",
                windows,
                w.reshape(co, ci, kh * kw).transpose(0, 2, 1),
                optimize=True,
            ).astype(np.float32)
            if len(node.inputs) > 2:
                out = out + v(2).reshape(1, -1, 1, 1)
            return out
        if op == "MaxPool":
            kernel = [int(k) for k in node.attrs["kernel"]]
            strides = [int(s) for s in node.attrs.get("strides", kernel)]
            pads = [int(p) for p in node.attrs.get("pads", [0, 0, 0, 0])]
            windows = _pool_windows(v(0), kernel, strides, pads, -np.inf)
            return windows.max(axis=0).astype(np.float32)
        if op == "ReLU":
            return np.maximum(v(0), np.float32(0.0))
        if op == "Add":
            return v(0) + v(1)
        if op == "BatchNormalization":
            x, g, b, mu, var = (v(i) for i in range(5))
            eps = np.float32(node.attrs.get("epsilon", 1e-5))
            shp = (1, -1) + (1,) * (x.ndim - 2)
            inv = np.float32(1.0) / np.sqrt(var.reshape(shp) + eps)
            return (x - mu.reshape(shp)) * inv * g.reshape(shp) + b.reshape(shp)
        if op == "GlobalAveragePool":
            x = v(0)
            return x.mean(axis=tuple(range(2, x.ndim)), keepdims=True, dtype=np.float32)
        if op == "Flatten":
            x = v(0)
            axis = int(node.attrs.get("axis", 1))
            lead = int(np.prod(x.shape[:axis])) if axis else 1
            return x.reshape(lead, -1)
        if op == "Reshape":
            return v(0).reshape([int(d) for d in node.attrs["shape"]])
        if op == "Gemm":
            out = v(0) @ v(1).T
            if len(node.inputs) > 2:
                out = out + v(2)
            return out.astype(np.float32)
        if op == "MatMul":
            return (v(0) @ v(1)).astype(np.float32)
        if op == "Constant":
            return self.weights[node.attrs["tensor"]]
        raise ReferenceExportError(f"evaluator cannot execute op {op!r}")


def logits(graph: PortableGraph, flat_samples: List[np.ndarray]) -> np.ndarray:
    """Float32 logits for every sample, shape (count, classes)."""
    ev = Evaluator(graph)
    rows = []
    for i, s in enumerate(flat_samples):
        try:
            rows.append(ev.run(np.asarray(s)))
        except ReferenceExportError as exc:
            raise ReferenceExportError(f"sample {i}: {exc}") from exc
    if not rows:
        raise ReferenceExportError("empty dataset: nothing to export")
    width = {r.size for r in rows}
    if len(width) != 1:
        raise ReferenceExportError(f"inconsistent logit widths {sorted(width)}")
    return np.stack(rows)
