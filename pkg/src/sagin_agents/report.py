"""Summary tables and figures from a results directory.

Reads whatever the other verbs left behind (``costs_*.csv``, ``sweep.csv``,
``curve.csv``, ``rounds.csv``) and writes one aggregated CSV per kind, each
with a matching PNG.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COST_PARTS = ("switching", "transmission", "compute", "accuracy", "cloud")


def _read(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return path


def _mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else math.nan


def cost_summary(directory: Path) -> list[Path]:
    files = sorted(directory.glob("costs_*.csv"))
    if not files:
        return []
    rows = []
    for f in files:
        data = _read(f)
        policy = data[0]["policy"] if data else f.stem[len("costs_"):]
        rows.append([policy] + [_mean(float(r[c]) for r in data) for c in COST_PARTS + ("total",)])
    out = [_write(directory / "report_costs.csv", ("policy",) + COST_PARTS + ("total",), rows)]

    fig, ax = plt.subplots(figsize=(5, 3.5))
    bottom = [0.0] * len(rows)
    for j, part in enumerate(COST_PARTS):
        vals = [r[1 + j] for r in rows]
        ax.bar([r[0] for r in rows], vals, bottom=bottom, label=part)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_ylabel("mean cost per slot")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(directory / "report_costs.png", dpi=120)
    plt.close(fig)
    return out + [directory / "report_costs.png"]


def sweep_summary(directory: Path) -> list[Path]:
    path = directory / "sweep.csv"
    if not path.exists():
        return []
    acc: dict[tuple[str, int, str], list[float]] = defaultdict(list)
    for r in _read(path):
        acc[(r["axis"], int(r["value"]), r["policy"])].append(float(r["mean_total_cost"]))
    rows = [[a, v, p, _mean(xs), len(xs)] for (a, v, p), xs in sorted(acc.items())]
    out = [_write(directory / "report_sweep.csv",
                  ("axis", "value", "policy", "mean_total_cost", "replicates"), rows)]
    for axis in sorted({r[0] for r in rows}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for policy in sorted({r[2] for r in rows if r[0] == axis}):
            pts = [(r[1], r[3]) for r in rows if r[0] == axis and r[2] == policy]
            ax.plot([x for x, _ in pts], [y for _, y in pts], marker="o", label=policy)
        ax.set_xlabel(axis)
        ax.set_ylabel("mean total cost")
        ax.legend(fontsize=7)
        fig.tight_layout()
        name = directory / f"report_sweep_{axis}.png"
        fig.savefig(name, dpi=120)
        plt.close(fig)
        out.append(name)
    return out


def curve_summary(directory: Path) -> list[Path]:
    path = directory / "curve.csv"
    if not path.exists():
        return []
    data = _read(path)
    ep = [int(r["episode"]) for r in data]
    y = [float(r["mean_reward"]) for r in data]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, y)
    ax.set_xlabel("episode")
    ax.set_ylabel("mean total surplus")
    fig.tight_layout()
    fig.savefig(directory / "report_curve.png", dpi=120)
    plt.close(fig)
    return [directory / "report_curve.png"]


def auction_summary(directory: Path) -> list[Path]:
    path = directory / "rounds.csv"
    if not path.exists():
        return []
    acc: dict[str, list[float]] = defaultdict(list)
    for r in _read(path):
        acc[r["mechanism"]].append(float(r["total_surplus"]))
    rows = [[m, _mean(xs), len(xs)] for m, xs in acc.items()]
    out = [_write(directory / "report_auction.csv", ("mechanism", "mean_total_surplus", "rounds"),
                  rows)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([r[0] for r in rows], [r[1] for r in rows])
    ax.set_ylabel("mean total surplus")
    ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    fig.savefig(directory / "report_auction.png", dpi=120)
    plt.close(fig)
    return out + [directory / "report_auction.png"]


def build_report(directory) -> list[Path]:
    """Every summary the directory supports; empty if it holds no results."""
    d = Path(directory)
    out: list[Path] = []
    for part in (cost_summary, sweep_summary, curve_summary, auction_summary):
        out.extend(part(d))
    return out
