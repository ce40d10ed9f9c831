"""Satellite pass geometry and uplink rate computation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .domain import DomainError, Operator, SatelliteGeometry, User


@dataclass(frozen=True)
class LinkBudget:
    bandwidth_hz: float
    noise_power: float
    powers: tuple[float, ...]
    gains: tuple[float, ...]

    @classmethod
    def for_operator(cls, op: Operator, noise_power: float) -> "LinkBudget":
        return cls(
            bandwidth_hz=op.bandwidth_hz,
            noise_power=noise_power,
            powers=tuple(u.transmit_power_w for u in op.users),
            gains=tuple(u.mean_channel_gain for u in op.users),
        )


def _check_geometry(geom: SatelliteGeometry) -> None:
    if not (geom.altitude_km > 0 and geom.earth_radius_km > 0 and geom.velocity_km_s > 0):
        raise DomainError("altitude, earth radius and velocity must be positive")
    if not (0 <= geom.min_elevation_rad < math.pi / 2):
        raise DomainError("min elevation must lie in [0, pi/2)")


def geocentric_angle(geom: SatelliteGeometry) -> float:
    """Half-angle at the Earth's centre of the region that sees the satellite.

    ``arccos(E / (E + l) * cos(elev)) - elev``, clamped at zero.
    """
    _check_geometry(geom)
    e, l, elev = geom.earth_radius_km, geom.altitude_km, geom.min_elevation_rad
    angle = math.acos(e / (e + l) * math.cos(elev)) - elev
    return max(angle, 0.0)


def coverage_time(geom: SatelliteGeometry) -> float:
    """Seconds a ground user stays in view during one pass."""
    arc_km = 2.0 * geocentric_angle(geom) * (geom.earth_radius_km + geom.altitude_km)
    return arc_km / geom.velocity_km_s


def uplink_rate(budget: LinkBudget, user: int, cohort: Sequence[int] | None = None) -> float:
    """Shannon rate of ``user`` against the co-channel interference of ``cohort``.

    ``cohort`` indexes into ``budget.gains``/``budget.powers`` and defaults to
    every user of the budget.
    """
    if cohort is None:
        cohort = range(len(budget.gains))
    cohort = list(cohort)
    if user not in cohort:
        raise DomainError(f"user {user} is not part of the cohort")
    others = math.fsum(budget.gains[j] * budget.powers[j] for j in cohort if j != user)
    own = budget.gains[user] * budget.powers[user]
    return budget.bandwidth_hz * math.log2(1.0 + own / (others + budget.noise_power))


def mean_uplink_rate(budget: LinkBudget, cohort: Sequence[int] | None = None) -> float:
    if cohort is None:
        cohort = range(len(budget.gains))
    cohort = list(cohort)
    if not cohort:
        raise DomainError("mean uplink rate of an empty cohort is undefined")
    return math.fsum(uplink_rate(budget, u, cohort) for u in cohort) / len(cohort)


def operator_mean_rate(op: Operator, noise_power: float) -> float:
    """Mean uplink rate over all users attached to ``op``."""
    return mean_uplink_rate(LinkBudget.for_operator(op, noise_power))


def users_budget(users: Sequence[User], bandwidth_hz: float, noise_power: float) -> LinkBudget:
    return LinkBudget(
        bandwidth_hz=bandwidth_hz,
        noise_power=noise_power,
        powers=tuple(u.transmit_power_w for u in users),
        gains=tuple(u.mean_channel_gain for u in users),
    )
