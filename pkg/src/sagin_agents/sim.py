"""Discrete-time scenario engine.

Each slot draws Poisson requests, lets every ground base station run its
caching policy, costs the slot, and records a :class:`SlotTrace`. The
satellite never caches: all of its traffic is relayed to the cloud.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import caching, cost, cot, linkmodel, market
from .domain import (DEMAND_SESSIONS, GPU_GFLOPS_PER_WATT, GPU_MEMORY_GB, GPU_POWER_W, DomainError,
                     Operator, RequestMatrix, ScenarioConfig, Service, User,
                     default_config, validate_config)

Key = caching.Key

_REQUEST_TAG = 7
_POPULARITY_TAG = 200
_MARKET_TAG = 11
_CONTRACT_TAG = 12
_EVAL_TAG = 98
_HISTORY_TAG = 99


# ---------------------------------------------------------------------------
# requests

def popularity(cfg: ScenarioConfig) -> dict[int, np.ndarray]:
    """Per-operator service popularity weights with mean one.

    Zipf weights ``(rank + 1) ** -skew`` are shuffled independently for every
    operator, so each one sees a different favourite service.
    """
    n_s = len(cfg.services)
    out = {}
    if n_s == 0:
        return {op.id: np.zeros(0) for op in cfg.operators}
    base = (np.arange(n_s) + 1.0) ** -cfg.popularity_skew
    base = base * n_s / base.sum()
    for op in cfg.operators:
        perm = np.random.default_rng([cfg.rng_seed, _POPULARITY_TAG + op.id]).permutation(n_s)
        out[op.id] = base[perm]
    return out


def request_intensity(cfg: ScenarioConfig) -> dict[int, np.ndarray]:
    """Poisson intensity per (operator, service): user rates times popularity."""
    pop = popularity(cfg)
    return {op.id: sum(u.request_rate for u in op.users) * pop[op.id] for op in cfg.operators}


def generate_requests(rng: np.random.Generator, operators: Sequence[Operator],
                      services: Sequence[Service], slot: int,
                      intensity: Mapping[int, np.ndarray] | None = None) -> RequestMatrix:
    """One slot of requests routed to each service's affinity model.

    Without ``intensity`` every service receives the summed user rate of its
    operator.
    """
    entries: dict[int, dict[Key, int]] = {}
    for op in operators:
        if intensity is None:
            lam = np.full(len(services), sum(u.request_rate for u in op.users))
        else:
            lam = intensity[op.id]
        draws = rng.poisson(lam) if len(services) else np.zeros(0, dtype=int)
        row = {(s.id, s.model): int(r) for s, r in zip(services, draws) if r > 0}
        entries[op.id] = row
    return RequestMatrix(slot, entries)


class SessionDemand:
    """Requests from users that each attend to one service at a time.

    Every slot a user re-draws its active service from the operator's
    popularity weights with probability ``switch_prob``, then issues
    ``Poisson(rate * I)`` requests to it, so the expected volume matches
    independent demand while hot services persist across slots.
    """

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.switch_prob = cfg.attention_switch_prob
        n_s = len(cfg.services)
        pop = popularity(cfg)
        self.weights = {op.id: pop[op.id] / pop[op.id].sum() for op in cfg.operators}
        self.rates = {op.id: np.array([u.request_rate * n_s for u in op.users])
                      for op in cfg.operators}
        self.active = {op.id: rng.choice(n_s, size=len(op.users), p=self.weights[op.id])
                       for op in cfg.operators}

    def next(self, slot: int) -> RequestMatrix:
        cfg, rng = self.cfg, self.rng
        n_s = len(cfg.services)
        entries: dict[int, dict[Key, int]] = {}
        for op in cfg.operators:
            act = self.active[op.id]
            moved = rng.random(act.size) < self.switch_prob
            if moved.any():
                act[moved] = rng.choice(n_s, size=int(moved.sum()), p=self.weights[op.id])
            lam = np.bincount(act, weights=self.rates[op.id], minlength=n_s)
            draws = rng.poisson(lam)
            entries[op.id] = {(s.id, s.model): int(r)
                              for s, r in zip(cfg.services, draws) if r > 0}
        return RequestMatrix(slot, entries)


def request_stream(cfg: ScenarioConfig) -> Iterator[RequestMatrix]:
    rng = np.random.default_rng([cfg.rng_seed, _REQUEST_TAG])
    if cfg.demand_model == DEMAND_SESSIONS:
        demand = SessionDemand(cfg, rng)
        for t in range(cfg.horizon_slots):
            yield demand.next(t)
        return
    lam = request_intensity(cfg)
    for t in range(cfg.horizon_slots):
        yield generate_requests(rng, cfg.operators, cfg.services, t, lam)


# ---------------------------------------------------------------------------
# scenario

@dataclass
class SlotTrace:
    slot: int
    costs: dict[int, cost.CostBreakdown]
    events: list[caching.CacheEvent]
    contexts: dict[int, dict[Key, cot.ContextState]]
    requests: RequestMatrix
    match_gain: dict[int, float] = field(default_factory=dict)
    gain_sum: dict[int, float] = field(default_factory=dict)
    edge_requests: dict[int, float] = field(default_factory=dict)


@dataclass
class ScenarioResult:
    policy: str
    seed: int
    traces: list[SlotTrace]
    averages: dict[int, cost.CostBreakdown]
    valuations: dict[int, market.Valuation]
    ground_ids: tuple[int, ...]
    satellite_id: int | None

    @property
    def mean_total_cost(self) -> float:
        """Mean over ground base stations of the time-averaged total cost."""
        return math.fsum(self.averages[n].total for n in self.ground_ids) / len(self.ground_ids)

    @property
    def mean_accuracy_cost(self) -> float:
        return math.fsum(self.averages[n].accuracy for n in self.ground_ids) / len(self.ground_ids)

    def mean_breakdown(self) -> cost.CostBreakdown:
        acc = cost.CostBreakdown()
        for n in self.ground_ids:
            acc = acc + self.averages[n]
        return acc.scaled(1.0 / len(self.ground_ids))

    @property
    def mean_performance_gain(self) -> float:
        """Mean ``alpha * kappa * ln(1/beta)`` per edge-served request."""
        g = math.fsum(tr.gain_sum.get(n, 0.0) for tr in self.traces for n in self.ground_ids)
        r = math.fsum(tr.edge_requests.get(n, 0.0) for tr in self.traces for n in self.ground_ids)
        return g / r if r > 0 else 0.0

    def recomputed_averages(self) -> dict[int, cost.CostBreakdown]:
        ops = list(self.averages)
        return {n: cost.average_breakdown([tr.costs[n] for tr in self.traces]) for n in ops}

    def events(self) -> list[caching.CacheEvent]:
        return [e for tr in self.traces for e in tr.events]


@dataclass(frozen=True)
class _OperatorTables:
    mean_rate: float
    input_bits: dict[int, float]
    unit_cloud: dict[int, float]


def _tables(cfg: ScenarioConfig, op: Operator) -> _OperatorTables:
    rate = linkmodel.operator_mean_rate(op, cfg.noise_power) if op.users else 1.0
    return _OperatorTables(
        mean_rate=rate,
        input_bits={s.id: s.input_size_mb * cost.BITS_PER_MB for s in cfg.services},
        unit_cloud={m.id: op.cloud_access_cost * cfg.cloud_cost(m.id) for m in cfg.models},
    )


def _check(cfg: ScenarioConfig) -> None:
    problems = validate_config(cfg)
    if problems:
        raise DomainError("invalid config: " + "; ".join(problems))


def simulate(cfg: ScenarioConfig, policy: str, requests: Iterable[RequestMatrix],
             check: bool = True) -> ScenarioResult:
    """Run ``policy`` against an explicit request sequence."""
    if policy not in caching.POLICIES:
        raise DomainError(f"unknown policy {policy!r}")
    _check(cfg)
    cat = caching.Catalog.from_config(cfg)
    models = {m.id: m for m in cfg.models}
    services = {s.id: s for s in cfg.services}
    lgain = {m: cot.log_gain(mod.beta) for m, mod in models.items()}
    tables = {op.id: _tables(cfg, op) for op in cfg.operators}
    states = {op.id: caching.OperatorCacheState() for op in cfg.operators if not op.is_satellite}
    # the cloud answers from one common CoT example per request, so the
    # relay's match gain is the popularity-weighted single-example gain
    sat_match = 0.0
    if cfg.satellite is not None:
        w = popularity(cfg)[cfg.satellite.id]
        sat_match = math.fsum(wi * s.cot_example_tokens * lgain[s.model]
                              for wi, s in zip(w, cfg.services)) / math.fsum(w)

    traces: list[SlotTrace] = []
    for t, req in enumerate(requests):
        costs: dict[int, cost.CostBreakdown] = {}
        events: list[caching.CacheEvent] = []
        contexts: dict[int, dict[Key, cot.ContextState]] = {}
        match: dict[int, float] = {}
        gsum: dict[int, float] = {}
        edge_req: dict[int, float] = {}
        for op in cfg.operators:
            row = req.row(op.id)
            tab = tables[op.id]
            if op.is_satellite:
                dec = caching.policy_step(policy, caching.OperatorCacheState(), row, op, cat)
                costs[op.id] = cost.CostBreakdown(
                    transmission=cost.transmission_cost(
                        dec, row, tab.input_bits, tab.mean_rate, op.core_rate,
                        op.edge_access_cost, op.cloud_access_cost),
                    cloud=cost.cloud_cost(dec, row, tab.unit_cloud),
                )
                match[op.id] = sat_match
                continue
            state = states[op.id]
            prev = state.prev_decision
            dec = caching.policy_step(policy, state, row, op, cat)
            caching.apply_decision(state, dec, row, op, cat, check=check)
            unit = {}
            g = er = 0.0
            for k in row:
                kappa = state.context(k).aot
                mod = models[k[1]]
                alpha = services[k[0]].zero_shot_accuracy[k[1]]
                unit[k] = cot.unit_accuracy_cost(alpha, mod.beta, kappa)
                served = row[k] * dec.a(k) * (1.0 - dec.b(k))
                if served:
                    g += served * cot.accuracy(alpha, mod.beta, kappa)
                    er += served
            costs[op.id] = cost.CostBreakdown(
                switching=cost.switching_cost(prev, dec, op.switch_coeff),
                transmission=cost.transmission_cost(
                    dec, row, tab.input_bits, tab.mean_rate, op.core_rate,
                    op.edge_access_cost, op.cloud_access_cost),
                compute=cost.compute_cost(dec, row, cat.energy, cat.tokens, op.compute_rate)
                if op.compute_rate > 0 else 0.0,
                accuracy=cost.accuracy_cost(dec, row, unit),
                cloud=cost.cloud_cost(dec, row, tab.unit_cloud),
            )
            events.extend(dec.events)
            contexts[op.id] = dict(state.contexts)
            resident = state.contexts
            match[op.id] = (math.fsum(c.aot * lgain[k[1]] for k, c in resident.items()) / len(resident)
                            if resident else 0.0)
            gsum[op.id] = g
            edge_req[op.id] = er
        traces.append(SlotTrace(t, costs, events, contexts, req, match, gsum, edge_req))

    if not traces:
        raise DomainError("horizon must contain at least one slot")
    averages = {op.id: cost.average_breakdown([tr.costs[op.id] for tr in traces])
                for op in cfg.operators}
    valuations = {op.id: market.valuation_from_trace(
        [tr.costs[op.id] for tr in traces], [tr.match_gain[op.id] for tr in traces])
        for op in cfg.operators}
    if cfg.satellite is not None:
        # the relay gets no cost feedback and values its slot ex ante
        sat = cfg.satellite
        valuations[sat.id] = market.Valuation(expected_relay_cost(cfg, tables[sat.id]), sat_match)
    sat = cfg.satellite
    return ScenarioResult(policy, cfg.rng_seed, traces, averages, valuations,
                          tuple(op.id for op in cfg.ground_stations),
                          None if sat is None else sat.id)


def expected_relay_cost(cfg: ScenarioConfig, tab: _OperatorTables | None = None) -> float:
    """Expected per-slot cost of relaying all satellite traffic to the cloud."""
    sat = cfg.satellite
    if sat is None:
        raise DomainError("scenario has no satellite")
    tab = tab if tab is not None else _tables(cfg, sat)
    lam = request_intensity(cfg)[sat.id]
    per = [tab.input_bits[s.id] * (sat.edge_access_cost / tab.mean_rate
                                   + sat.cloud_access_cost / sat.core_rate)
           + tab.unit_cloud[s.model] for s in cfg.services]
    return math.fsum(l * c for l, c in zip(lam, per))


def run_scenario(cfg: ScenarioConfig, policy: str = "least_aot", check: bool = True) -> ScenarioResult:
    return simulate(cfg, policy, request_stream(cfg), check=check)


SLOT_COLUMNS = cost.COST_COLUMNS


def slot_rows(result: ScenarioResult) -> Iterator[tuple[int, int, str, cost.CostBreakdown]]:
    for tr in result.traces:
        for n, b in sorted(tr.costs.items()):
            yield tr.slot, n, result.policy, b


# ---------------------------------------------------------------------------
# satellite relay

def satellite_relay_feasible(cfg: ScenarioConfig, traces: Sequence[SlotTrace]) -> tuple[bool, float]:
    """Relay time of all satellite traffic against one coverage pass.

    Returns ``(feasible, slack_seconds)``.
    """
    sat = cfg.satellite
    if sat is None:
        raise DomainError("scenario has no satellite")
    pass_time = linkmodel.coverage_time(cfg.geometry)
    rate = linkmodel.operator_mean_rate(sat, cfg.noise_power) + sat.core_rate
    bits = {s.id: s.input_size_mb * cost.BITS_PER_MB for s in cfg.services}
    used = math.fsum(bits[k[0]] * r / rate
                     for tr in traces for k, r in tr.requests.row(sat.id).items())
    slack = pass_time - used
    return slack >= 0, slack


# ---------------------------------------------------------------------------
# sweeps

AXES = ("slots", "services", "gpus", "users")
_BUILDER_KEY = {"slots": "horizon_slots", "services": "n_services", "gpus": "n_gpus",
                "users": "n_users"}


def derive_config(cfg: ScenarioConfig, axis: str, value: int) -> ScenarioConfig:
    """Structural edit of ``cfg`` along one sweep axis.

    Growing the service or user count cycles through the existing entries.
    """
    if axis == "slots":
        return replace(cfg, horizon_slots=int(value))
    if axis == "gpus":
        flops = value * GPU_GFLOPS_PER_WATT * GPU_POWER_W
        ops = tuple(op if op.is_satellite else replace(
            op, gpu_memory_gb=value * GPU_MEMORY_GB, gpu_energy_budget=flops, compute_rate=flops)
            for op in cfg.operators)
        return replace(cfg, operators=ops)
    if axis == "users":
        ops = []
        for op in cfg.operators:
            base = op.users
            users = tuple(User(u, base[u % len(base)].transmit_power_w,
                               base[u % len(base)].mean_channel_gain,
                               base[u % len(base)].request_rate) for u in range(value)) if base else ()
            ops.append(replace(op, users=users))
        return replace(cfg, operators=tuple(ops))
    if axis == "services":
        base = cfg.services
        n_models = len(cfg.models)
        svcs = tuple(replace(base[i % len(base)], id=i, model=cfg.models[i % n_models].id)
                     for i in range(value))
        return replace(cfg, services=svcs)
    raise DomainError(f"unknown sweep axis {axis!r}")


@dataclass(frozen=True)
class DefaultBuilder:
    """Rebuild the reference scenario with one axis overridden."""

    params: tuple[tuple[str, object], ...] = ()

    def __call__(self, axis: str, value: int, seed: int) -> ScenarioConfig:
        kw = dict(self.params)
        kw[_BUILDER_KEY[axis]] = int(value)
        kw["seed"] = seed
        return default_config(**kw)


SWEEP_COLUMNS = ("axis", "value", "policy", "replicate", "seed", "mean_total_cost",
                 "switching", "transmission", "compute", "accuracy", "cloud",
                 "performance_gain")


def _sweep_job(job) -> list:
    source, axis, value, policy, rep, seed = job
    if isinstance(source, ScenarioConfig):
        cfg = derive_config(source.with_seed(seed), axis, value)
    else:
        cfg = source(axis, value, seed)
    res = run_scenario(cfg, policy)
    b = res.mean_breakdown()
    return [axis, value, policy, rep, seed, res.mean_total_cost, b.switching, b.transmission,
            b.compute, b.accuracy, b.cloud, res.mean_performance_gain]


def sweep(source: ScenarioConfig | Callable[[str, int, int], ScenarioConfig], axis: str,
          values: Sequence[int], policies: Sequence[str], replicates: int = 1,
          base_seed: int | None = None, workers: int = 1) -> list[list]:
    """One scenario per (value, policy, replicate); rows in that order.

    Replicate ``r`` runs with seed ``base_seed ^ r`` for every value and
    policy, so comparisons along the axis share random numbers.
    """
    if axis not in AXES:
        raise DomainError(f"unknown sweep axis {axis!r}")
    if not values:
        raise DomainError("sweep needs at least one value")
    if base_seed is None:
        base_seed = source.rng_seed if isinstance(source, ScenarioConfig) else 0
    jobs = [(source, axis, v, p, r, base_seed ^ r)
            for v in values for p in policies for r in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def sweep_means(rows: Sequence[list]) -> dict[tuple[int, str], float]:
    """Mean total cost per (value, policy) over replicates."""
    acc: dict[tuple[int, str], list[float]] = {}
    for row in rows:
        acc.setdefault((row[1], row[2]), []).append(row[5])
    return {k: math.fsum(v) / len(v) for k, v in acc.items()}


def write_sweep(path, rows: Iterable[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


# ---------------------------------------------------------------------------
# market

@dataclass(frozen=True)
class MarketRound:
    bids: market.BidProfile
    values: tuple[float, ...]  # v_0 .. v_N


class MarketSource:
    """Seeded stream of auction rounds built from scenario valuations.

    Ground common values share a per-round log-normal shock, which makes
    their values positively correlated; every match component carries an
    independent log-normal jitter. Ground operators bid truthfully and the
    satellite bids its contract price.
    """

    def __init__(self, satellite: market.Valuation, ground: Sequence[market.Valuation],
                 rng: np.random.Generator, jitter: float = 0.1, common_shock: float = 0.3,
                 contract_samples: int = 2000, contract_rng: np.random.Generator | None = None,
                 contract: float | None = None):
        if not ground:
            raise DomainError("market needs at least one ground operator")
        self.satellite = satellite
        self.ground = tuple(ground)
        self.rng = rng
        self.jitter = jitter
        self.common_shock = common_shock
        if contract is None:
            crng = contract_rng if contract_rng is not None else np.random.default_rng(0)
            samples = [max(self._draw(crng)[1:]) for _ in range(contract_samples)]
            contract = market.contract_price(satellite.value, samples)
        self.contract = contract

    def _draw(self, rng: np.random.Generator) -> tuple[float, ...]:
        n = len(self.ground)
        shock = math.exp(self.common_shock * rng.standard_normal()) if self.common_shock else 1.0
        jit = np.exp(self.jitter * rng.standard_normal(n + 1)) if self.jitter else np.ones(n + 1)
        v0 = self.satellite.common * self.satellite.match * float(jit[0])
        vg = [g.common * shock * g.match * float(j) for g, j in zip(self.ground, jit[1:])]
        return (v0, *vg)

    def next_round(self) -> MarketRound:
        values = self._draw(self.rng)
        return MarketRound(market.BidProfile(self.contract, tuple(values[1:])), values)

    def rounds(self, count: int) -> list[MarketRound]:
        return [self.next_round() for _ in range(count)]

    @property
    def n_ground(self) -> int:
        return len(self.ground)


def market_episode_source(cfg: ScenarioConfig, rng: np.random.Generator | None = None,
                          result: ScenarioResult | None = None,
                          valuations: Mapping[int, market.Valuation] | None = None) -> MarketSource:
    """Market stream whose valuations come from a least-AoT scenario run."""
    if valuations is None:
        if result is None:
            result = run_scenario(cfg, "least_aot")
        valuations = result.valuations
    sat = cfg.satellite
    if sat is None:
        raise DomainError("market needs a satellite")
    ground = [valuations[op.id] for op in cfg.ground_stations]
    if rng is None:
        rng = np.random.default_rng([cfg.rng_seed, _MARKET_TAG])
    return MarketSource(valuations[sat.id], ground, rng, cfg.market_jitter,
                        cfg.market_common_shock,
                        contract_rng=np.random.default_rng([cfg.rng_seed, _CONTRACT_TAG]))


def evaluation_rounds(cfg: ScenarioConfig, count: int, result: ScenarioResult | None = None,
                      history: int = 1000) -> tuple[list[MarketRound], float]:
    """Shared evaluation rounds plus the optimal-MSB factor from a separate history.

    Every mechanism compared on ``cfg`` sees the same rounds; the history
    stream is disjoint from both training and evaluation.
    """
    if result is None:
        result = run_scenario(cfg, "least_aot")
    past = market_episode_source(cfg, np.random.default_rng([cfg.rng_seed, _HISTORY_TAG]), result)
    rho = market.optimal_rho(r.bids for r in past.rounds(history))
    src = market_episode_source(cfg, np.random.default_rng([cfg.rng_seed, _EVAL_TAG]), result)
    return src.rounds(count), rho
