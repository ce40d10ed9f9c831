"""Per-operator model cache and replacement policies.

A cache entry is a (service, model) pair: every service keeps its own copy of
the model it uses, with its own context. All three policies share one
admission path and differ only in how they choose an eviction victim:

* ``least_aot`` evicts the resident entry with the smallest age of thought;
* ``fifo`` evicts the entry loaded first;
* ``lfu`` evicts the entry with the fewest hits since it was loaded.

Offload values in a :class:`CacheDecision` are the share of an entry's
requests sent to the cloud (``1 - offload`` runs at the edge). In the
default binary mode a cached entry runs its whole batch at the edge or none
of it. The fractional mode instead runs the cost-minimising edge share that
the remaining context window and energy budget allow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from . import cot
from .domain import OFFLOAD_BINARY, OFFLOAD_FRACTIONAL, DomainError, Operator, ScenarioConfig

Key = tuple[int, int]  # (service, model)

ADMIT = "admit"
EVICT = "evict"
REJECT = "reject"

POLICIES = ("least_aot", "fifo", "lfu")


@dataclass(frozen=True)
class Catalog:
    """Flat per-entry lookup tables derived from a config."""

    size: Mapping[int, float]
    energy: Mapping[int, float]
    window: Mapping[int, int]
    tokens: Mapping[int, int]
    aot_vanish: float
    aot_mode: str
    offload_mode: str = OFFLOAD_BINARY
    # cost constants for choosing the edge share; without them the largest
    # feasible share is served
    alpha: Mapping[Key, float] = field(default_factory=dict)
    beta: Mapping[int, float] = field(default_factory=dict)
    input_bits: Mapping[int, float] = field(default_factory=dict)
    cloud_unit: Mapping[int, float] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "Catalog":
        return cls(
            size={m.id: m.size_gb for m in cfg.models},
            energy={m.id: m.energy_per_token for m in cfg.models},
            window={m.id: m.context_window for m in cfg.models},
            tokens={s.id: s.cot_example_tokens for s in cfg.services},
            aot_vanish=cfg.aot_vanish,
            aot_mode=cfg.aot_mode,
            offload_mode=cfg.offload_mode,
            alpha={(s.id, m): a for s in cfg.services for m, a in s.zero_shot_accuracy.items()},
            beta={m.id: m.beta for m in cfg.models},
            input_bits={s.id: s.input_size_mb * 8e6 for s in cfg.services},
            cloud_unit={m.id: cfg.cloud_cost(m.id) for m in cfg.models},
        )

    @property
    def priced(self) -> bool:
        return bool(self.alpha)


def _catalog(c: Catalog | ScenarioConfig) -> Catalog:
    return c if isinstance(c, Catalog) else Catalog.from_config(c)


@dataclass(frozen=True)
class CacheEvent:
    slot: int
    operator: int
    policy: str
    event: str
    service: int
    model: int
    kappa: float
    tokens: float
    reason: str = ""


@dataclass
class CacheDecision:
    cache: dict[Key, int] = field(default_factory=dict)
    offload: dict[Key, float] = field(default_factory=dict)
    uncacheable: set[Key] = field(default_factory=set)
    events: list[CacheEvent] = field(default_factory=list)

    def a(self, key: Key) -> int:
        return self.cache.get(key, 0)

    def b(self, key: Key) -> float:
        """Offloaded share; entries without an explicit value go to the cloud."""
        return self.offload.get(key, 1.0)

    def resident(self) -> set[Key]:
        return {k for k, v in self.cache.items() if v}


@dataclass
class OperatorCacheState:
    contexts: dict[Key, cot.ContextState] = field(default_factory=dict)
    cached: set[Key] = field(default_factory=set)
    used_memory_gb: float = 0.0
    insertion_order: list[Key] = field(default_factory=list)
    hit_counts: dict[Key, int] = field(default_factory=dict)
    slot: int = 0
    prev_decision: CacheDecision = field(default_factory=CacheDecision)

    def context(self, key: Key) -> cot.ContextState:
        return self.contexts.get(key, cot.EMPTY_CONTEXT)


class InfeasibleDecision(DomainError):
    pass


def check_feasible(decision: CacheDecision, state: OperatorCacheState,
                   requests: Mapping[Key, int], operator: Operator,
                   catalog: Catalog | ScenarioConfig) -> list[str]:
    """Every violated caching constraint (memory, placement, energy, window)."""
    cat = _catalog(catalog)
    out: list[str] = []
    keys = set(decision.cache) | set(requests)
    if operator.is_satellite and any(decision.a(k) for k in keys):
        out.append("satellite caches nothing")
    memory = sum(cat.size[k[1]] for k in keys if decision.a(k))
    if memory > operator.gpu_memory_gb + 1e-9:
        out.append(f"memory: {memory:g} GB exceeds {operator.gpu_memory_gb:g} GB")
    energy = 0.0
    for k in sorted(keys):
        r = requests.get(k, 0)
        a = decision.a(k)
        edge = 1.0 - decision.b(k)
        if not (0.0 <= decision.b(k) <= 1.0):
            out.append(f"offload share of {k} outside [0, 1]")
        if r > 0 and edge > a:
            out.append(f"placement: {k} served at the edge without being cached")
        energy += cat.energy[k[1]] * a * edge * r
        delta = cot.delta_tokens(a, decision.b(k), r, cat.tokens[k[0]])
        tokens = cot.update_tokens(state.context(k), a, delta)
        if tokens > cat.window[k[1]] * (1 + 1e-12):
            out.append(f"window: {k} holds {tokens:g} tokens > {cat.window[k[1]]}")
    if energy > operator.gpu_energy_budget + 1e-9:
        out.append(f"energy: {energy:g} GFLOP exceeds {operator.gpu_energy_budget:g}")
    return out


def edge_share(k: Key, r: int, ctx: cot.ContextState, energy_left: float,
               operator: Operator, catalog: Catalog | ScenarioConfig) -> float:
    """Cost-minimising share of ``r`` requests to run at the edge on a cached entry.

    The share is capped by the room left in the context window and by the
    remaining energy. The slot cost is concave in the share, so only the two
    ends and the point where the age of thought reaches one are candidates;
    ties go to the larger share.
    """
    cat = _catalog(catalog)
    if r <= 0:
        return 0.0
    k_tok = cat.tokens[k[0]]
    e = cat.energy[k[1]]
    cap = min(1.0, max(cat.window[k[1]] - ctx.tokens, 0.0) / (r * k_tok),
              max(energy_left, 0.0) / (e * r) if e > 0 else 1.0)
    if cap <= 0.0 or not cat.priced:
        return cap
    cloud = (operator.cloud_access_cost * cat.input_bits[k[0]] / operator.core_rate
             + operator.cloud_access_cost * cat.cloud_unit[k[1]])
    edge = k_tok * e / operator.compute_rate
    alpha, beta = cat.alpha[k], cat.beta[k[1]]

    def slot_cost(s: float) -> float:
        kappa = cot.update_aot(ctx, 1, s * r * k_tok, cat.aot_vanish, cat.aot_mode)
        acc = cot.unit_accuracy_cost(alpha, beta, kappa)
        return r * (s * (edge + acc) + (1.0 - s) * cloud)

    candidates = [cap, 0.0]
    kink = (1.0 - cot.update_aot(ctx, 1, 0.0, cat.aot_vanish, cat.aot_mode)) / (r * k_tok)
    if 0.0 < kink < cap:
        candidates.append(kink)
    return min(candidates, key=lambda s: (slot_cost(s), -s))


VictimRule = Callable[[OperatorCacheState, list[Key]], Key]


def _least_aot_victim(state: OperatorCacheState, candidates: list[Key]) -> Key:
    return min(candidates, key=lambda k: (state.context(k).aot, k))


def _fifo_victim(state: OperatorCacheState, candidates: list[Key]) -> Key:
    pos = {k: i for i, k in enumerate(state.insertion_order)}
    return min(candidates, key=lambda k: pos[k])


def _lfu_victim(state: OperatorCacheState, candidates: list[Key]) -> Key:
    pos = {k: i for i, k in enumerate(state.insertion_order)}
    return min(candidates, key=lambda k: (state.hit_counts.get(k, 0), pos[k]))


VICTIM_RULES: dict[str, VictimRule] = {
    "least_aot": _least_aot_victim,
    "fifo": _fifo_victim,
    "lfu": _lfu_victim,
}


def policy_step(policy: str, state: OperatorCacheState, requests: Mapping[Key, int],
                operator: Operator, catalog: Catalog | ScenarioConfig,
                operator_id: int | None = None) -> CacheDecision:
    """Caching and offloading decision for one slot.

    Requested entries are visited busiest first. Entries already resident
    are kept. New entries are admitted while memory allows; otherwise
    unrequested residents are evicted in victim-rule order until the new
    model fits. An entry is offloaded without touching the cache if its
    model cannot fit even after every possible eviction, or if a fresh copy
    could not run its batch.

    Binary mode then runs each cached requested batch at the edge while the
    energy budget admits it; a batch that would overflow the context window
    evicts its entry and goes to the cloud. Fractional mode runs each cached
    entry's :func:`edge_share` instead and evicts only entries whose window
    cannot take another request.
    """
    cat = _catalog(catalog)
    pick = VICTIM_RULES[policy]
    slot = state.slot
    op_id = operator.id if operator_id is None else operator_id
    dec = CacheDecision()

    def event(kind: str, k: Key, reason: str = "") -> None:
        ctx = state.context(k)
        dec.events.append(CacheEvent(slot, op_id, policy, kind, k[0], k[1],
                                     ctx.aot, ctx.tokens, reason))

    if operator.is_satellite:
        for k, r in requests.items():
            if r > 0:
                dec.offload[k] = 1.0
        return dec

    capacity = operator.gpu_memory_gb
    for k in state.cached:
        dec.cache[k] = 1
    used = state.used_memory_gb
    fractional = cat.offload_mode == OFFLOAD_FRACTIONAL
    requested = sorted((k for k, r in requests.items() if r > 0), key=lambda k: (-requests[k], k))
    claimed = {k for k in requested if k in state.cached}

    for k in requested:
        if k in claimed:
            continue
        size = cat.size[k[1]]
        if size > capacity:
            dec.uncacheable.add(k)
            event(REJECT, k, "larger than GPU memory")
            continue
        # loading is pointless if a fresh copy could not run the batch
        batch = 1 if fractional else requests[k]
        if cat.energy[k[1]] * batch > operator.gpu_energy_budget:
            event(REJECT, k, "energy budget")
            continue
        if batch * cat.tokens[k[0]] > cat.window[k[1]]:
            event(REJECT, k, "context window")
            continue
        if fractional and edge_share(k, requests[k], cot.EMPTY_CONTEXT,
                                     operator.gpu_energy_budget, operator, cat) <= 0.0:
            event(REJECT, k, "cloud cheaper")
            continue
        if used + size > capacity + 1e-9:
            candidates = [c for c in dec.cache if dec.cache[c] and c not in claimed]
            freeable = sum(cat.size[c[1]] for c in candidates)
            if used - freeable + size > capacity + 1e-9:
                event(REJECT, k, "no evictable memory")
                continue
            while used + size > capacity + 1e-9:
                victim = pick(state, candidates)
                candidates.remove(victim)
                dec.cache[victim] = 0
                used -= cat.size[victim[1]]
                event(EVICT, victim, "memory")
        dec.cache[k] = 1
        used += size
        claimed.add(k)
        event(ADMIT, k)

    energy = 0.0
    for k in requested:
        if not dec.cache.get(k):
            dec.offload[k] = 1.0
            continue
        r = requests[k]
        ctx = state.context(k)
        if ctx.tokens + (1 if fractional else r) * cat.tokens[k[0]] > cat.window[k[1]]:
            dec.cache[k] = 0
            dec.offload[k] = 1.0
            event(EVICT, k, "context window")
            continue
        if fractional:
            share = edge_share(k, r, ctx, operator.gpu_energy_budget - energy, operator, cat)
        else:
            share = 1.0 if energy + cat.energy[k[1]] * r <= operator.gpu_energy_budget else 0.0
        dec.offload[k] = 1.0 - share
        energy += cat.energy[k[1]] * r * share
    return dec


def least_aot_step(state, requests, operator, catalog, operator_id=None) -> CacheDecision:
    return policy_step("least_aot", state, requests, operator, catalog, operator_id)


def fifo_step(state, requests, operator, catalog, operator_id=None) -> CacheDecision:
    return policy_step("fifo", state, requests, operator, catalog, operator_id)


def lfu_step(state, requests, operator, catalog, operator_id=None) -> CacheDecision:
    return policy_step("lfu", state, requests, operator, catalog, operator_id)


def apply_decision(state: OperatorCacheState, decision: CacheDecision,
                   requests: Mapping[Key, int], operator: Operator,
                   catalog: Catalog | ScenarioConfig, check: bool = True) -> OperatorCacheState:
    """Advance ``state`` in place by one slot and return it.

    Contexts of entries that stay cached grow by their edge-served tokens
    and their age of thought decays; every other context is reset.
    """
    cat = _catalog(catalog)
    if check:
        problems = check_feasible(decision, state, requests, operator, cat)
        if problems:
            raise InfeasibleDecision("; ".join(problems))
    new_contexts: dict[Key, cot.ContextState] = {}
    for k, a in decision.cache.items():
        if not a:
            continue
        r = requests.get(k, 0)
        prev = state.context(k)
        delta = cot.delta_tokens(a, decision.b(k), r, cat.tokens[k[0]])
        new_contexts[k] = cot.ContextState(
            tokens=cot.update_tokens(prev, a, delta),
            aot=cot.update_aot(prev, a, delta, cat.aot_vanish, cat.aot_mode),
        )
    resident = set(new_contexts)
    order = [k for k in state.insertion_order if k in resident]
    order += sorted(k for k in resident if k not in state.cached)
    hits = {k: state.hit_counts.get(k, 0) if k in state.cached else 0 for k in resident}
    for k in resident:
        hits[k] += requests.get(k, 0)

    state.contexts = new_contexts
    state.cached = resident
    state.used_memory_gb = sum(cat.size[k[1]] for k in resident)
    state.insertion_order = order
    state.hit_counts = hits
    state.prev_decision = decision
    state.slot += 1
    return state


EVENT_COLUMNS = ("slot", "operator", "policy", "event", "service", "model", "kappa", "tokens")


def write_event_log(path, events: Iterable[CacheEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for e in events:
            w.writerow([e.slot, e.operator, e.policy, e.event, e.service, e.model,
                        repr(e.kappa), repr(e.tokens)])
