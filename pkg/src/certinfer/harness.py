"""Precision sweep orchestration.

Runs a model over a dataset at every point of a (rounding mode, dot
algorithm, sum algorithm, precision) grid, scores top-1 agreement against
the dataset's reference labels, and streams one CSV row per grid point so
an interrupted sweep can resume where it stopped.

Failed samples (range overflow, invalid operation) count as disagreements
and are tallied in the row's failure column; a configuration whose weights
do not even quantize is recorded as a row with every sample failed.

Combination filtering: dot 'oro' exists only for float at round-to-nearest
(its compensation identities need it); it carries its own compensation
chain, so the sum algorithm does not change its numbers, but rows are still
keyed per requested sum so tables line up. Fixed point accumulates exactly,
so only sum 'naive' is meaningful there. Structurally impossible grid
points are skipped, not reported as failures.
"""

from __future__ import annotations

import csv
import datetime
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import InvalidOperationError, RangeOverflowError
from .model import Dataset, Graph, count_macs
from .rounding import RoundingMode
from .runtime import BackendConfig, quantize_graph
from .tensor import Tensor
from .vectorized import make_engine

CSV_COLUMNS = [
    "arith",
    "dot",
    "sum",
    "round",
    "pbits",
    "samples",
    "failures",
    "agreement_pct",
    "macs",
    "est_inf_per_s",
]

_MODE_NAMES = {"rne": RoundingMode.RNE, "rtz": RoundingMode.RTZ, "rna": RoundingMode.RNA}


class NotReached(ValueError):
    """No sweep row for the requested configuration hit 100% agreement."""


@dataclass
class SweepSpec:
    model: str
    dataset: str
    arith: str
    pbits_lo: int
    pbits_hi: int
    rounds: Sequence[str] = ("rne",)
    sums: Sequence[str] = ("naive",)
    dots: Sequence[str] = ("naive",)
    samples: Optional[int] = None
    workers: int = 1
    mbits: int = 10

    def __post_init__(self):
        if self.arith not in ("float", "fixed"):
            raise ValueError(f"arith must be 'float' or 'fixed', got {self.arith!r}")
        if self.pbits_lo < 1 or self.pbits_hi < self.pbits_lo:
            raise ValueError(f"bad pbits range {self.pbits_lo}..{self.pbits_hi}")
        if self.samples is not None and self.samples < 1:
            raise ValueError("sample limit must be at least 1")
        for r in self.rounds:
            if r not in _MODE_NAMES:
                raise ValueError(f"unknown rounding mode {r!r}")


@dataclass
class SweepRow:
    arith: str
    dot: str
    sum: str
    round: str
    pbits: int
    samples: int
    failures: int
    agreement_pct: float
    macs: int
    est_inf_per_s: Optional[float] = None

    def key(self) -> Tuple[str, str, str, str, int]:
        return (self.arith, self.dot, self.sum, self.round, self.pbits)

    def csv_values(self) -> List[str]:
        return [
            self.arith,
            self.dot,
            self.sum,
            self.round,
            str(self.pbits),
            str(self.samples),
            str(self.failures),
            f"{self.agreement_pct:.2f}",
            str(self.macs),
            "" if self.est_inf_per_s is None else f"{self.est_inf_per_s:.6g}",
        ]


def top1(logits: Tensor) -> int:
    """Argmax over the flat logits; ties go to the lowest index."""
    best = 0
    for i in range(1, len(logits.data)):
        if logits.data[i] > logits.data[best]:
            best = i
    return best


def top1_agreement(outputs: Sequence[Tensor], reference_top1: Sequence[int]) -> float:
    """Percent of samples whose argmax matches the reference, to 2 decimals."""
    if not outputs:
        raise ValueError("no outputs to score")
    if len(outputs) != len(reference_top1):
        raise ValueError(f"{len(outputs)} outputs vs {len(reference_top1)} labels")
    hits = sum(1 for out, ref in zip(outputs, reference_top1) if top1(out) == int(ref))
    return round(100.0 * hits / len(outputs), 2)


def valid_combo(arith: str, dot: str, sum_alg: str, round_name: str) -> bool:
    if arith == "float":
        if sum_alg not in ("naive", "pairwise", "kn", "exact"):
            return False
        if dot == "naive":
            return True
        return dot == "oro" and round_name == "rne"
    if dot in ("naive", "accurate"):
        return sum_alg == "naive"
    return False


def sweep_points(spec: SweepSpec) -> List[Tuple[str, str, str, int]]:
    """Grid points as (round, dot, sum, pbits), invalid combos dropped,
    in a fixed deterministic order."""
    pts = []
    for r in spec.rounds:
        for d in spec.dots:
            for s in spec.sums:
                if not valid_combo(spec.arith, d, s, r):
                    continue
                for p in range(spec.pbits_lo, spec.pbits_hi + 1):
                    pts.append((r, d, s, p))
    return pts


def _score_point(
    graph: Graph,
    dataset: Dataset,
    spec: SweepSpec,
    point: Tuple[str, str, str, int],
    macs: int,
) -> SweepRow:
    round_name, dot, sum_alg, pbits = point
    n = len(dataset.samples)
    cfg = BackendConfig(
        spec.arith, pbits, _MODE_NAMES[round_name], dot=dot, sum=sum_alg, mbits=spec.mbits
    )
    try:
        pg = quantize_graph(graph, cfg)
    except RangeOverflowError:
        return SweepRow(spec.arith, dot, sum_alg, round_name, pbits, n, n, 0.0, macs)

    engine = make_engine(pg)
    hits = 0
    failures = 0
    for sample, label in zip(dataset.samples, dataset.labels):
        try:
            logits = engine(sample)
        except (RangeOverflowError, InvalidOperationError):
            failures += 1
            continue
        if top1(logits) == label:
            hits += 1
    pct = round(100.0 * hits / n, 2)
    return SweepRow(spec.arith, dot, sum_alg, round_name, pbits, n, failures, pct, macs)


def run_sweep(
    spec: SweepSpec,
    out_path: str | Path,
    resume: bool = False,
    progress=None,
) -> List[SweepRow]:
    """Execute every grid point, appending each finished row to out_path.

    With resume=True, rows already present in the file keep their results
    and only missing points run. Returns all rows for the grid in order.
    """
    from .model import load_dataset, load_model

    graph = load_model(spec.model)
    dataset = load_dataset(spec.dataset, limit=spec.samples)
    if not dataset.samples:
        raise ValueError("dataset is empty")
    macs = count_macs(graph)

    out_path = Path(out_path)
    done: Dict[tuple, SweepRow] = {}
    if resume and out_path.exists():
        for row in read_report(out_path):
            done[
                (row["arith"], row["dot"], row["sum"], row["round"], int(row["pbits"]))
            ] = SweepRow(
                row["arith"],
                row["dot"],
                row["sum"],
                row["round"],
                int(row["pbits"]),
                int(row["samples"]),
                int(row["failures"]),
                float(row["agreement_pct"]),
                int(row["macs"]),
                float(row["est_inf_per_s"]) if row["est_inf_per_s"] else None,
            )
        fh = out_path.open("a", newline="")
        writer = csv.writer(fh)
    else:
        fh = out_path.open("w", newline="")
        fh.write(f"# certinfer sweep {datetime.datetime.now().isoformat()}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        fh.flush()

    rows: List[SweepRow] = []
    try:
        for point in sweep_points(spec):
            key = (spec.arith, point[1], point[2], point[0], point[3])
            if key in done:
                rows.append(done[key])
                continue
            row = _score_point(graph, dataset, spec, point, macs)
            writer.writerow(row.csv_values())
            fh.flush()
            rows.append(row)
            if progress is not None:
                progress(row)
    finally:
        fh.close()
    return rows


def read_report(path: str | Path) -> List[Dict[str, str]]:
    """Parse a sweep CSV back into row dicts, skipping comment lines."""
    out = []
    with open(path, newline="") as fh:
        clean = (line for line in fh if not line.startswith("#"))
        for row in csv.DictReader(clean):
            out.append(row)
    return out


def min_pbits(
    rows: Iterable[SweepRow | Dict[str, str]],
    arith: str,
    dot: str,
    sum_alg: str,
    round_name: str,
) -> int:
    """Smallest tested precision reaching 100% agreement such that every
    larger tested precision also reaches 100%. Warns when the agreement
    curve is non-monotone around the answer."""
    curve = []
    for r in rows:
        if isinstance(r, dict):
            r = SweepRow(
                r["arith"],
                r["dot"],
                r["sum"],
                r["round"],
                int(r["pbits"]),
                int(r["samples"]),
                int(r["failures"]),
                float(r["agreement_pct"]),
                int(r["macs"]),
            )
        if (r.arith, r.dot, r.sum, r.round) == (arith, dot, sum_alg, round_name):
            curve.append((r.pbits, r.agreement_pct))
    if not curve:
        raise NotReached(f"no rows for {arith}/{dot}/{sum_alg}/{round_name}")
    curve.sort()
    full = [p for p, pct in curve if pct >= 100.0]
    if not full:
        raise NotReached(
            f"agreement never reached 100% for {arith}/{dot}/{sum_alg}/{round_name} "
            f"(best {max(pct for _, pct in curve):.2f})"
        )
    # walk down from the top of the tested range while agreement stays 100%
    answer = None
    for p, pct in reversed(curve):
        if pct >= 100.0:
            answer = p
        else:
            break
    if answer > full[0]:
        warnings.warn(
            f"agreement is non-monotone for {arith}/{dot}/{sum_alg}/{round_name}: "
            f"100% at {full[0]} bits but not at every larger width; reporting {answer}",
            stacklevel=2,
        )
    return answer


def estimate_inferences_per_sec(ops_budget: float, macs: int) -> float:
    """One multiply-accumulate spends two operations from the budget."""
    if macs <= 0:
        raise ValueError("macs must be positive")
    if ops_budget < 0:
        raise ValueError("ops budget must be non-negative")
    return ops_budget / (2 * macs)


def load_budget_table(path: str | Path) -> List[Dict[str, str]]:
    """Budget tables are user-supplied CSV with the sweep's config columns
    plus an ops_budget column; they are never computed by this package."""
    with open(path, newline="") as fh:
        clean = (line for line in fh if not line.startswith("#"))
        rows = list(csv.DictReader(clean))
    for row in rows:
        if "ops_budget" not in row or row["ops_budget"] in (None, ""):
            raise ValueError(f"budget table {path}: row missing ops_budget: {row}")
    return rows
