"""Auction layer: valuations, second-price and modified second-bid mechanisms.

Operator 0 is the relaying satellite, which takes part through a fixed
contract price ``x_0``. Ground base stations ``1..N`` bid their valuations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .cost import CostBreakdown
from .domain import DomainError


@dataclass(frozen=True)
class Valuation:
    common: float
    match: float

    @property
    def value(self) -> float:
        return self.common * self.match


def valuation_from_trace(costs: Sequence[CostBreakdown], match_gains: Sequence[float]) -> Valuation:
    """Common value ``E[L_total - l_acc]`` times match gain ``E[kappa ln(1/beta)]``."""
    if not costs or len(costs) != len(match_gains):
        raise DomainError("traces must be nonempty and of equal length")
    n = len(costs)
    common = math.fsum(c.total - c.accuracy for c in costs) / n
    match = math.fsum(match_gains) / n
    return Valuation(common, match)


@dataclass(frozen=True)
class BidProfile:
    satellite: float
    ground: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.satellite < 0 or any(x < 0 for x in self.ground):
            raise DomainError("bids must be nonnegative")

    @property
    def all(self) -> tuple[float, ...]:
        return (self.satellite, *self.ground)

    def scaled(self, c: float) -> "BidProfile":
        return BidProfile(self.satellite * c, tuple(x * c for x in self.ground))


@dataclass(frozen=True)
class MechanismOutcome:
    winners: tuple[int, ...]
    payments: tuple[float, ...]
    rho: float = 1.0

    @property
    def winner(self) -> int | None:
        for n, z in enumerate(self.winners):
            if z:
                return n
        return None

    @property
    def payment(self) -> float:
        w = self.winner
        return 0.0 if w is None else self.payments[w]


def _second_highest(xs: Sequence[float]) -> float:
    if len(xs) < 2:
        return 0.0
    top = sorted(xs, reverse=True)
    return top[1]


def critical_payment(competing_bids: Sequence[float], rho: float) -> float:
    """Smallest winning bid is anything above ``rho * max(competing)``."""
    if rho < 1:
        raise DomainError("rho must be >= 1")
    if len(competing_bids) == 0:
        raise DomainError("critical payment needs at least one competitor")
    return rho * max(competing_bids)


def msb(bids: BidProfile, rho: float, satellite_fallback: bool = True) -> MechanismOutcome:
    """Modified second-bid auction.

    Ground BS ``n`` wins iff ``x_n > rho * max(x_-n)`` where the competitors
    include the satellite contract price; it pays that threshold. If no
    ground BS clears its threshold the satellite wins at its contract price.
    """
    if rho < 1:
        raise DomainError("rho must be >= 1")
    xs = bids.all
    n_all = len(xs)
    z = [0] * n_all
    p = [0.0] * n_all
    for n in range(1, n_all):
        chi = critical_payment(xs[:n] + xs[n + 1:], rho)
        if xs[n] > chi:
            z[n] = 1
            p[n] = chi
            break  # rho >= 1 admits at most one winner
    if satellite_fallback and not any(z):
        z[0] = 1
        p[0] = bids.satellite
    return MechanismOutcome(tuple(z), tuple(p), rho)


def spa(bids: BidProfile | Sequence[float]) -> MechanismOutcome:
    """Second-price auction; ties go to the lowest index.

    For a :class:`BidProfile` the satellite transacts at its contract price
    when it wins.
    """
    profile = bids if isinstance(bids, BidProfile) else None
    xs = profile.all if profile is not None else tuple(bids)
    if len(xs) < 2:
        raise DomainError("second-price auction needs at least two bids")
    best = max(range(len(xs)), key=lambda n: (xs[n], -n))
    z = [0] * len(xs)
    p = [0.0] * len(xs)
    z[best] = 1
    if profile is not None and best == 0:
        p[0] = profile.satellite
    else:
        p[best] = max(x for n, x in enumerate(xs) if n != best)
    return MechanismOutcome(tuple(z), tuple(p), 1.0)


def first_price(bids: BidProfile) -> MechanismOutcome:
    """Highest bidder wins and pays its own bid (not strategy-proof)."""
    xs = bids.all
    best = max(range(len(xs)), key=lambda n: (xs[n], -n))
    z = [0] * len(xs)
    p = [0.0] * len(xs)
    z[best] = 1
    p[best] = xs[best]
    return MechanismOutcome(tuple(z), tuple(p), 1.0)


def myopic_rho(bids: BidProfile) -> float:
    """``max(1, x_0 / x_(2))`` with ``x_(2)`` the second-highest ground bid."""
    x2 = _second_highest(bids.ground)
    if x2 <= 0:
        return 1.0
    return max(1.0, bids.satellite / x2)


def optimal_rho(history: Iterable[BidProfile]) -> float:
    """``max(1, E[x_0] / E[x_(2)])`` over past profiles."""
    history = list(history)
    if not history:
        return 1.0
    x0 = math.fsum(b.satellite for b in history) / len(history)
    x2 = math.fsum(_second_highest(b.ground) for b in history) / len(history)
    if x2 <= 0:
        return 1.0
    return max(1.0, x0 / x2)


def contract_price(v0: float, samples: Sequence[float]) -> float:
    """Satellite contract price maximising ``E[(v0 - x) 1(v_(1) <= x)]``.

    Candidates are the sample values themselves; ties go to the lowest price.
    """
    if len(samples) == 0:
        raise DomainError("contract price needs at least one sample")
    s = np.sort(np.asarray(samples, dtype=float))
    n = s.size
    best_x, best_profit = None, -math.inf
    for x in np.unique(s):
        frac = np.searchsorted(s, x, side="right") / n
        profit = (v0 - x) * frac
        if profit > best_profit:
            best_x, best_profit = float(x), profit
    return best_x


def surplus(outcome: MechanismOutcome, values: Sequence[float]) -> tuple[float, float, float]:
    """(total, ground, satellite) surplus ``sum v z``."""
    sat = values[0] * outcome.winners[0]
    ground = math.fsum(v * z for v, z in zip(values[1:], outcome.winners[1:]))
    return sat + ground, ground, sat


def utility(outcome: MechanismOutcome, n: int, value: float) -> float:
    return outcome.winners[n] * (value - outcome.payments[n])


@dataclass(frozen=True)
class FalseNameWitness:
    bids: BidProfile
    rho: float
    satellite_value: float
    shill_bid: float
    honest: MechanismOutcome
    with_shill: MechanismOutcome

    @property
    def outcome_changed(self) -> bool:
        return self.honest.winner != self.with_shill.winner

    @property
    def satellite_gain(self) -> float:
        before = utility(self.honest, 0, self.satellite_value)
        after = utility(self.with_shill, 0, self.satellite_value)
        return after - before


def false_name_witness(rho: float = 2.0, bids: BidProfile | None = None,
                       satellite_value: float | None = None) -> FalseNameWitness:
    """A profile where an extra identity flips the outcome profitably.

    The satellite registers a fake ground identity bidding between the second
    and the top ground bid. The top bidder's threshold rises above its bid,
    the fake bid cannot clear its own threshold, and the satellite wins at its
    contract price.
    """
    if bids is None:
        bids = BidProfile(1.0, (10.0, 4.0))
    top = max(bids.ground)
    shill = top / rho * 1.2
    shill = min(shill, top * 0.999)
    if satellite_value is None:
        satellite_value = bids.satellite * 5.0
    honest = msb(bids, rho)
    augmented = BidProfile(bids.satellite, bids.ground + (shill,))
    with_shill = msb(augmented, rho)
    return FalseNameWitness(bids, rho, satellite_value, shill, honest, with_shill)


ROUND_COLUMNS = ("round", "mechanism", "rho", "winner", "payment", "total_surplus",
                 "bs_surplus", "satellite_surplus", "v_1", "v_2")


def round_row(k: int, mechanism: str, outcome: MechanismOutcome,
              values: Sequence[float]) -> list:
    total, ground, sat = surplus(outcome, values)
    order = sorted(values, reverse=True)
    w = outcome.winner
    return [k, mechanism, repr(outcome.rho), -1 if w is None else w, repr(outcome.payment),
            repr(total), repr(ground), repr(sat), repr(order[0]),
            repr(order[1] if len(order) > 1 else 0.0)]


def write_rounds(path, rows: Iterable[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUND_COLUMNS)
        w.writerows(rows)
