"""Figure rendering for sweep reports and bound tables.

Renders next to the CSV so a report directory is self-contained: the
delimited data for machines, a PNG of the same rows for people.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def plot_sweep(rows: Sequence[Dict[str, str]], out_path: str | Path) -> Path:
    """Agreement curves, one line per configuration, over precision."""
    if not rows:
        raise ValueError("no rows to plot")
    out_path = Path(out_path)
    curves: Dict[tuple, List[tuple]] = {}
    for r in rows:
        key = (r["arith"], r["dot"], r["sum"], r["round"])
        curves.setdefault(key, []).append((int(r["pbits"]), float(r["agreement_pct"])))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in sorted(curves):
        pts = sorted(curves[key])
        label = "{1}/{2}/{3}".format(*key)
        ax.plot([p for p, _ in pts], [a for _, a in pts], marker="o", label=label)
    ax.axhline(100.0, color="gray", linewidth=0.8, linestyle=":")
    arith = rows[0]["arith"]
    ax.set_xlabel("fraction bits" if arith == "fixed" else "mantissa bits")
    ax.set_ylabel("top-1 agreement (%)")
    ax.set_title(f"{arith} precision sweep")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_bounds(rows, out_path: str | Path) -> Path:
    """Static bound vs observed error per layer, log scale."""
    if not rows:
        raise ValueError("no rows to plot")
    out_path = Path(out_path)
    idx = [r.layer_index for r in rows]
    bounds = [max(float(r.bound), 1e-300) for r in rows]
    emp = [max(float(r.empirical_error), 1e-300) for r in rows]

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(idx, bounds, marker="o", label="static bound")
    ax.plot(idx, emp, marker="s", label="observed error")
    ax.set_yscale("log")
    ax.set_xlabel("layer index")
    ax.set_ylabel("max abs output error")
    ax.set_title("error growth through the network")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
