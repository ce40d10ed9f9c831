"""Edge and cloud inference costs.

``b`` below is the offloaded share of an entry's requests; ``1 - b`` runs at
the edge. Unless stated otherwise costs are in dimensionless cost units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from . import cot
from .caching import CacheDecision, Key
from .domain import DomainError

BITS_PER_MB = 8e6

COST_COLUMNS = ("slot", "operator", "policy", "switching", "transmission", "compute",
                "accuracy", "cloud", "total")


@dataclass(frozen=True)
class CostBreakdown:
    switching: float = 0.0
    transmission: float = 0.0
    compute: float = 0.0
    accuracy: float = 0.0
    cloud: float = 0.0

    @property
    def edge(self) -> float:
        return self.switching + self.transmission + self.compute + self.accuracy

    @property
    def total(self) -> float:
        return self.edge + self.cloud

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            self.switching + other.switching,
            self.transmission + other.transmission,
            self.compute + other.compute,
            self.accuracy + other.accuracy,
            self.cloud + other.cloud,
        )

    def scaled(self, factor: float) -> "CostBreakdown":
        return CostBreakdown(self.switching * factor, self.transmission * factor,
                             self.compute * factor, self.accuracy * factor,
                             self.cloud * factor)


def switching_cost(prev: CacheDecision, decision: CacheDecision, lam: float) -> float:
    """``lam`` per entry loaded this slot (evictions are free)."""
    loads = sum(1 for k, a in decision.cache.items() if a and not prev.a(k))
    return lam * loads


def transmission_cost(decision: CacheDecision, requests: Mapping[Key, int],
                      input_bits: Mapping[int, float], mean_rate: float, core_rate: float,
                      edge_access: float = 1.0, cloud_access: float = 1.0) -> float:
    """Uplink time of every request plus backhaul time of the offloaded share.

    The access-cost multipliers weight the uplink and backhaul seconds.
    """
    if not (mean_rate > 0 and core_rate > 0):
        raise DomainError("rates must be positive")
    uplink = backhaul = 0.0
    for k, r in requests.items():
        if r <= 0:
            continue
        d = input_bits[k[0]]
        uplink += r * d / mean_rate
        backhaul += r * d / core_rate * decision.b(k)
    return edge_access * uplink + cloud_access * backhaul


def compute_cost(decision: CacheDecision, requests: Mapping[Key, int],
                 energy: Mapping[int, float], tokens: Mapping[int, float],
                 compute_rate: float) -> float:
    """Edge inference latency: edge-served tokens times GFLOP/token over GFLOP/s."""
    if not compute_rate > 0:
        raise DomainError("compute rate must be positive")
    total = 0.0
    for k, r in requests.items():
        delta = cot.delta_tokens(decision.a(k), decision.b(k), r, tokens[k[0]])
        total += delta * energy[k[1]] / compute_rate
    return total


def accuracy_cost(decision: CacheDecision, requests: Mapping[Key, int],
                  unit_costs: Mapping[Key, float]) -> float:
    total = 0.0
    for k, r in requests.items():
        share = decision.a(k) * (1.0 - decision.b(k))
        if share and r:
            total += unit_costs[k] * r * share
    return total


def cloud_cost(decision: CacheDecision, requests: Mapping[Key, int],
               unit_cost: Mapping[int, float] | float) -> float:
    """Pay-per-request cloud processing of the offloaded share."""
    total = 0.0
    for k, r in requests.items():
        l0 = unit_cost if isinstance(unit_cost, (int, float)) else unit_cost[k[1]]
        total += l0 * decision.b(k) * r
    return total


def total_cloud_cost(per_operator: Iterable[float]) -> float:
    return math.fsum(per_operator)


def total_cost(breakdowns: Sequence[CostBreakdown]) -> float:
    """Time average of per-slot edge plus cloud cost."""
    if not breakdowns:
        raise DomainError("horizon must contain at least one slot")
    return math.fsum(b.total for b in breakdowns) / len(breakdowns)


def average_breakdown(breakdowns: Sequence[CostBreakdown]) -> CostBreakdown:
    if not breakdowns:
        raise DomainError("horizon must contain at least one slot")
    n = len(breakdowns)
    return CostBreakdown(
        math.fsum(b.switching for b in breakdowns) / n,
        math.fsum(b.transmission for b in breakdowns) / n,
        math.fsum(b.compute for b in breakdowns) / n,
        math.fsum(b.accuracy for b in breakdowns) / n,
        math.fsum(b.cloud for b in breakdowns) / n,
    )


def write_cost_log(path, rows: Iterable[tuple[int, int, str, CostBreakdown]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COST_COLUMNS)
        for slot, op, policy, b in rows:
            w.writerow([slot, op, policy, repr(b.switching), repr(b.transmission),
                        repr(b.compute), repr(b.accuracy), repr(b.cloud), repr(b.total)])
