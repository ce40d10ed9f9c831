"""Core entities and scenario configuration.

All values are frozen dataclasses so a config can be shared between
concurrent runs without copying. ``default_config`` builds the reference
scenario (5 ground BSs with 80 GB GPUs, one LEO relay, 10 reasoning LLMs);
``load_config``/``dump_config`` read and write the plain-text config format.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

SATELLITE = "satellite"
GROUND_BS = "ground_bs"

AOT_PROPORTIONAL = "proportional"
AOT_SUBTRACTIVE = "subtractive"

DEMAND_SESSIONS = "sessions"
DEMAND_INDEPENDENT = "independent"

OFFLOAD_BINARY = "binary"
OFFLOAD_FRACTIONAL = "fractional"

# Per-GPU constants of the reference deployment.
GPU_MEMORY_GB = 80.0
GPU_GFLOPS_PER_WATT = 810.0
GPU_POWER_W = 300.0

# ImageBind zero-shot accuracies (image, video, infrared, depth, audio, IMU).
IMAGEBIND_ACCURACY = (0.777, 0.500, 0.634, 0.540, 0.669, 0.250)

MAX_COT_TOKENS = 200


class DomainError(ValueError):
    """Raised when an argument falls outside an operation's domain."""


def derive_beta(sigma: float) -> float:
    """CoT gain ``sigma / (1 - sigma)`` for an ambiguity level in [0, 0.5)."""
    if not (0.0 <= sigma < 0.5) or math.isnan(sigma):
        raise DomainError(f"sigma must lie in [0, 0.5), got {sigma!r}")
    return sigma / (1.0 - sigma)


@dataclass(frozen=True)
class LlmModel:
    id: int
    name: str
    param_count: float
    size_gb: float
    energy_per_token: float  # GFLOP per token
    context_window: int  # tokens
    cot_noise_sigma: float

    @property
    def beta(self) -> float:
        return derive_beta(self.cot_noise_sigma)


@dataclass(frozen=True)
class Service:
    id: int
    input_size_mb: float
    cot_example_tokens: int
    zero_shot_accuracy: Mapping[int, float]
    model: int  # affinity: the model this service requests


@dataclass(frozen=True)
class User:
    id: int
    transmit_power_w: float
    mean_channel_gain: float
    request_rate: float  # Poisson intensity per service per slot


@dataclass(frozen=True)
class Operator:
    id: int
    kind: str
    bandwidth_hz: float
    gpu_memory_gb: float
    gpu_energy_budget: float  # GFLOP per slot
    compute_rate: float  # GFLOP/s
    core_rate: float  # bit/s towards the cloud
    edge_access_cost: float
    cloud_access_cost: float
    switch_coeff: float
    users: tuple[User, ...] = ()

    @property
    def is_satellite(self) -> bool:
        return self.kind == SATELLITE


@dataclass(frozen=True)
class SatelliteGeometry:
    altitude_km: float = 780.0
    earth_radius_km: float = 6371.0
    velocity_km_s: float = 7.46
    min_elevation_rad: float = 0.0
    slant_distance_km: float | None = None


@dataclass
class RequestMatrix:
    """Request counts ``R[n][(i, m)]`` for one slot; zero entries omitted."""

    slot: int
    entries: dict[int, dict[tuple[int, int], int]] = field(default_factory=dict)

    def row(self, operator_id: int) -> dict[tuple[int, int], int]:
        return self.entries.get(operator_id, {})

    def total(self) -> int:
        return sum(sum(r.values()) for r in self.entries.values())


@dataclass(frozen=True)
class ScenarioConfig:
    operators: tuple[Operator, ...]
    services: tuple[Service, ...]
    models: tuple[LlmModel, ...]
    horizon_slots: int = 100
    noise_power: float = 8e-14  # W over 20 MHz (-101 dBm)
    aot_vanish: float = 0.6
    aot_mode: str = AOT_PROPORTIONAL
    cloud_unit_cost: Mapping[int, float] = field(default_factory=dict)
    rng_seed: int = 0
    geometry: SatelliteGeometry = SatelliteGeometry()
    popularity_skew: float = 0.5
    demand_model: str = DEMAND_SESSIONS
    attention_switch_prob: float = 0.1
    offload_mode: str = OFFLOAD_BINARY
    market_jitter: float = 0.1
    market_common_shock: float = 0.3
    optimality_gap_tripwire: float = 0.25
    unknown_keys: tuple[str, ...] = ()

    @property
    def ground_stations(self) -> tuple[Operator, ...]:
        return tuple(op for op in self.operators if not op.is_satellite)

    @property
    def satellite(self) -> Operator | None:
        for op in self.operators:
            if op.is_satellite:
                return op
        return None

    def model(self, model_id: int) -> LlmModel:
        return self._models_by_id()[model_id]

    def service(self, service_id: int) -> Service:
        return self._services_by_id()[service_id]

    def _models_by_id(self) -> dict[int, LlmModel]:
        return {m.id: m for m in self.models}

    def _services_by_id(self) -> dict[int, Service]:
        return {s.id: s for s in self.services}

    def cloud_cost(self, model_id: int) -> float:
        return self.cloud_unit_cost.get(model_id, 1.0)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, rng_seed=seed)


def validate_config(cfg: ScenarioConfig) -> list[str]:
    """Return every violated invariant of ``cfg`` (empty means valid)."""
    out: list[str] = []
    for key in cfg.unknown_keys:
        out.append(f"unknown config key {key!r}")
    if cfg.horizon_slots < 1:
        out.append("horizon_slots must be >= 1")
    if not cfg.noise_power > 0:
        out.append("noise_power must be > 0")
    if cfg.aot_vanish < 0:
        out.append("aot_vanish must be >= 0")
    if cfg.aot_mode not in (AOT_PROPORTIONAL, AOT_SUBTRACTIVE):
        out.append(f"aot_mode must be {AOT_PROPORTIONAL!r} or {AOT_SUBTRACTIVE!r}")
    elif cfg.aot_mode == AOT_PROPORTIONAL and cfg.aot_vanish > 1:
        out.append("proportional aot_vanish must be <= 1")
    if cfg.popularity_skew < 0:
        out.append("popularity_skew must be >= 0")
    if cfg.demand_model not in (DEMAND_SESSIONS, DEMAND_INDEPENDENT):
        out.append(f"demand_model must be {DEMAND_SESSIONS!r} or {DEMAND_INDEPENDENT!r}")
    if cfg.offload_mode not in (OFFLOAD_BINARY, OFFLOAD_FRACTIONAL):
        out.append(f"offload_mode must be {OFFLOAD_BINARY!r} or {OFFLOAD_FRACTIONAL!r}")
    if not (0 <= cfg.attention_switch_prob <= 1):
        out.append("attention_switch_prob must lie in [0, 1]")
    if cfg.market_jitter < 0 or cfg.market_common_shock < 0:
        out.append("market jitter parameters must be >= 0")

    geom = cfg.geometry
    if not geom.altitude_km > 0:
        out.append("satellite altitude must be > 0")
    if not geom.earth_radius_km > 0:
        out.append("earth radius must be > 0")
    if not geom.velocity_km_s > 0:
        out.append("satellite velocity must be > 0")
    if not (0 <= geom.min_elevation_rad < math.pi / 2):
        out.append("min elevation must lie in [0, pi/2)")

    model_ids = set()
    for m in cfg.models:
        if m.id in model_ids:
            out.append(f"duplicate model id {m.id}")
        model_ids.add(m.id)
        if not m.size_gb > 0:
            out.append(f"model {m.id}: size_gb must be > 0")
        if not m.energy_per_token > 0:
            out.append(f"model {m.id}: energy_per_token must be > 0")
        if not m.context_window > 0:
            out.append(f"model {m.id}: context_window must be > 0")
        if not (0 <= m.cot_noise_sigma < 0.5):
            out.append(f"model {m.id}: σ must be < 0.5 and >= 0")
    if not cfg.models:
        out.append("at least one model is required")

    service_ids = set()
    for s in cfg.services:
        if s.id in service_ids:
            out.append(f"duplicate service id {s.id}")
        service_ids.add(s.id)
        if not s.input_size_mb > 0:
            out.append(f"service {s.id}: input_size_mb must be > 0")
        if not (0 < s.cot_example_tokens <= MAX_COT_TOKENS):
            out.append(f"service {s.id}: cot_example_tokens must lie in (0, {MAX_COT_TOKENS}]")
        if s.model not in model_ids:
            out.append(f"service {s.id}: affinity model {s.model} does not exist")
        for mid, acc in s.zero_shot_accuracy.items():
            if not (0 < acc <= 1):
                out.append(f"service {s.id}: zero-shot accuracy for model {mid} must lie in (0, 1]")
        if s.model in model_ids and s.model not in s.zero_shot_accuracy:
            out.append(f"service {s.id}: no zero-shot accuracy for its model {s.model}")
    if not cfg.services:
        out.append("at least one service is required")

    for mid, c in cfg.cloud_unit_cost.items():
        if c < 0:
            out.append(f"cloud_unit_cost for model {mid} must be >= 0")

    op_ids = set()
    n_sat = 0
    for op in cfg.operators:
        if op.id in op_ids:
            out.append(f"duplicate operator id {op.id}")
        op_ids.add(op.id)
        if op.kind not in (SATELLITE, GROUND_BS):
            out.append(f"operator {op.id}: unknown kind {op.kind!r}")
        if op.is_satellite:
            n_sat += 1
            if op.id != 0:
                out.append("satellite must be operator 0")
            if op.gpu_memory_gb != 0:
                out.append("satellite caches nothing: gpu_memory_gb must be 0")
        else:
            if not op.compute_rate > 0:
                out.append(f"operator {op.id}: compute_rate must be > 0")
        if not op.bandwidth_hz > 0:
            out.append(f"operator {op.id}: bandwidth_hz must be > 0")
        if not op.core_rate > 0:
            out.append(f"operator {op.id}: core_rate must be > 0")
        for name in ("gpu_memory_gb", "gpu_energy_budget", "compute_rate",
                     "edge_access_cost", "cloud_access_cost", "switch_coeff"):
            if getattr(op, name) < 0:
                out.append(f"operator {op.id}: {name} must be >= 0")
        if not op.users:
            out.append(f"operator {op.id}: at least one user is required")
        for u in op.users:
            if not u.transmit_power_w > 0:
                out.append(f"operator {op.id} user {u.id}: transmit power must be > 0")
            if u.mean_channel_gain < 0:
                out.append(f"operator {op.id} user {u.id}: channel gain must be >= 0")
            if u.request_rate < 0:
                out.append(f"operator {op.id} user {u.id}: request rate must be >= 0")
    if n_sat > 1:
        out.append("at most one satellite is supported")
    if not any(not op.is_satellite for op in cfg.operators):
        out.append("at least one ground BS is required")
    return out


# ---------------------------------------------------------------------------
# reference scenario


def reference_models(count: int = 10) -> tuple[LlmModel, ...]:
    """Alternate LLaMA-65B and GPT3-174B variants (fp16 sizes, 2N FLOP/token)."""
    out = []
    for j in range(count):
        if j % 2 == 0:
            params, window, sigma, base = 65e9, 2048, 0.3, "LLaMA-65B"
        else:
            params, window, sigma, base = 174e9, 8192, 0.2, "GPT3-174B"
        out.append(LlmModel(
            id=j,
            name=f"{base}-{j // 2}",
            param_count=params,
            size_gb=2.0 * params / 1e9,
            energy_per_token=2.0 * params * 1e-9,
            context_window=window,
            cot_noise_sigma=sigma,
        ))
    return tuple(out)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag])


def default_config(
    *,
    n_services: int = 10,
    n_gpus: int = 24,
    n_users: int = 10,
    n_bs: int = 5,
    n_models: int = 10,
    horizon_slots: int = 100,
    seed: int = 0,
    aot_vanish: float = 0.6,
    aot_mode: str = AOT_PROPORTIONAL,
    request_rate: float = 0.03,
    satellite_request_rate: float = 0.0009,
    switch_coeff: float = 0.5,
    popularity_skew: float = 0.5,
    demand_model: str = DEMAND_SESSIONS,
    attention_switch_prob: float = 0.1,
    bs_core_rate: float = 1e9,
    sat_core_rate: float = 1e9,
    bs_pathloss_exponent: float = 3.5,
    bs_ref_gain: float = 1e-3,
    sat_ref_gain: float = 1.0,
    user_distance_m: tuple[float, float] = (50.0, 500.0),
) -> ScenarioConfig:
    """Build the reference scenario.

    Structural draws (input sizes, CoT lengths, user positions) use their own
    seeded streams so that changing one axis (e.g. the user count) leaves the
    other draws untouched.
    """
    models = reference_models(n_models)
    svc_rng = _stream(seed, 1)
    sizes = svc_rng.uniform(100.0, 200.0, size=max(n_services, 1))
    tokens = svc_rng.integers(50, MAX_COT_TOKENS + 1, size=max(n_services, 1))
    services = tuple(
        Service(
            id=i,
            input_size_mb=float(sizes[i]),
            cot_example_tokens=int(tokens[i]),
            zero_shot_accuracy={m.id: IMAGEBIND_ACCURACY[i % len(IMAGEBIND_ACCURACY)] for m in models},
            model=i % n_models,
        )
        for i in range(n_services)
    )

    geom = SatelliteGeometry()
    operators = []
    for n in range(n_bs + 1):
        urng = _stream(seed, 100 + n)
        if n == 0:
            # slant range at zenith; free-space decay
            dist = np.full(n_users, geom.altitude_km * 1e3)
            gains = sat_ref_gain * dist ** -2.0
            gains = gains * urng.uniform(0.5, 1.5, size=n_users)
            rate = satellite_request_rate
        else:
            dist = urng.uniform(*user_distance_m, size=n_users)
            gains = bs_ref_gain * dist ** -bs_pathloss_exponent
            rate = request_rate
        users = tuple(
            User(id=u, transmit_power_w=0.2, mean_channel_gain=float(gains[u]), request_rate=rate)
            for u in range(n_users)
        )
        if n == 0:
            operators.append(Operator(
                id=0, kind=SATELLITE, bandwidth_hz=20e6, gpu_memory_gb=0.0,
                gpu_energy_budget=0.0, compute_rate=0.0, core_rate=sat_core_rate,
                edge_access_cost=0.005, cloud_access_cost=0.025,
                switch_coeff=switch_coeff, users=users,
            ))
        else:
            flops = n_gpus * GPU_GFLOPS_PER_WATT * GPU_POWER_W
            operators.append(Operator(
                id=n, kind=GROUND_BS, bandwidth_hz=20e6,
                gpu_memory_gb=n_gpus * GPU_MEMORY_GB,
                gpu_energy_budget=flops,  # one-second slots
                compute_rate=flops, core_rate=bs_core_rate,
                edge_access_cost=0.0001, cloud_access_cost=0.04,
                switch_coeff=switch_coeff, users=users,
            ))

    return ScenarioConfig(
        operators=tuple(operators),
        services=services,
        models=models,
        horizon_slots=horizon_slots,
        aot_vanish=aot_vanish,
        aot_mode=aot_mode,
        cloud_unit_cost={m.id: 1.0 for m in models},
        rng_seed=seed,
        geometry=geom,
        popularity_skew=popularity_skew,
        demand_model=demand_model,
        attention_switch_prob=attention_switch_prob,
    )


# ---------------------------------------------------------------------------
# plain-text config file
#
# [scenario]            horizon_slots, noise_power, aot_vanish, aot_mode,
#                       rng_seed, popularity_skew, demand_model,
#                       attention_switch_prob, offload_mode, market_jitter,
#                       market_common_shock, optimality_gap_tripwire
# [geometry]            altitude_km, earth_radius_km, velocity_km_s,
#                       min_elevation_rad, slant_distance_km
# [model:<id>]          name, param_count, size_gb, energy_per_token,
#                       context_window, cot_noise_sigma, cloud_unit_cost
# [service:<id>]        input_size_mb, cot_example_tokens, model,
#                       zero_shot_accuracy (``model:acc, model:acc``)
# [operator:<id>]       kind, bandwidth_hz, gpu_memory_gb, gpu_energy_budget,
#                       compute_rate, core_rate, edge_access_cost,
#                       cloud_access_cost, switch_coeff
# [user:<op>:<id>]      transmit_power_w, mean_channel_gain, request_rate

_SCENARIO_KEYS = {
    "horizon_slots": int, "noise_power": float, "aot_vanish": float, "aot_mode": str,
    "rng_seed": int, "popularity_skew": float, "demand_model": str,
    "attention_switch_prob": float, "offload_mode": str, "market_jitter": float,
    "market_common_shock": float, "optimality_gap_tripwire": float,
}
_GEOMETRY_KEYS = {
    "altitude_km": float, "earth_radius_km": float, "velocity_km_s": float,
    "min_elevation_rad": float, "slant_distance_km": float,
}
_MODEL_KEYS = {
    "name": str, "param_count": float, "size_gb": float, "energy_per_token": float,
    "context_window": int, "cot_noise_sigma": float, "cloud_unit_cost": float,
}
_SERVICE_KEYS = {
    "input_size_mb": float, "cot_example_tokens": int, "model": int, "zero_shot_accuracy": str,
}
_OPERATOR_KEYS = {
    "kind": str, "bandwidth_hz": float, "gpu_memory_gb": float, "gpu_energy_budget": float,
    "compute_rate": float, "core_rate": float, "edge_access_cost": float,
    "cloud_access_cost": float, "switch_coeff": float,
}
_USER_KEYS = {"transmit_power_w": float, "mean_channel_gain": float, "request_rate": float}

CONFIG_KEYS = {
    "scenario": _SCENARIO_KEYS, "geometry": _GEOMETRY_KEYS, "model": _MODEL_KEYS,
    "service": _SERVICE_KEYS, "operator": _OPERATOR_KEYS, "user": _USER_KEYS,
}


class ConfigFormatError(ValueError):
    pass


def _parse_section(section: configparser.SectionProxy, keys: dict, label: str,
                   unknown: list[str]) -> dict:
    out = {}
    for key, raw in section.items():
        if key not in keys:
            unknown.append(f"{label}.{key}")
            continue
        try:
            out[key] = keys[key](raw) if keys[key] is not int else int(float(raw))
        except ValueError as exc:
            raise ConfigFormatError(f"{label}.{key}: cannot parse {raw!r}") from exc
    return out


def _parse_accuracy(text: str) -> dict[int, float]:
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        mid, acc = part.split(":")
        out[int(mid)] = float(acc)
    return out


def loads_config(text: str) -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigFormatError(str(exc)) from exc

    unknown: list[str] = []
    scenario: dict = {}
    geometry: dict = {}
    models, services, ops = {}, {}, {}
    users: dict[int, dict[int, dict]] = {}
    for name in parser.sections():
        sec = parser[name]
        kind, _, rest = name.partition(":")
        try:
            if kind == "scenario":
                scenario = _parse_section(sec, _SCENARIO_KEYS, name, unknown)
            elif kind == "geometry":
                geometry = _parse_section(sec, _GEOMETRY_KEYS, name, unknown)
            elif kind == "model":
                models[int(rest)] = _parse_section(sec, _MODEL_KEYS, name, unknown)
            elif kind == "service":
                services[int(rest)] = _parse_section(sec, _SERVICE_KEYS, name, unknown)
            elif kind == "operator":
                ops[int(rest)] = _parse_section(sec, _OPERATOR_KEYS, name, unknown)
            elif kind == "user":
                op_id, uid = (int(x) for x in rest.split(":"))
                users.setdefault(op_id, {})[uid] = _parse_section(sec, _USER_KEYS, name, unknown)
            else:
                unknown.append(name)
        except ValueError as exc:
            if isinstance(exc, ConfigFormatError):
                raise
            raise ConfigFormatError(f"bad section name {name!r}") from exc

    cloud_cost = {}
    model_objs = []
    for mid in sorted(models):
        d = dict(models[mid])
        if "cloud_unit_cost" in d:
            cloud_cost[mid] = d.pop("cloud_unit_cost")
        try:
            model_objs.append(LlmModel(id=mid, **d))
        except TypeError as exc:
            raise ConfigFormatError(f"model:{mid}: {exc}") from exc

    service_objs = []
    for sid in sorted(services):
        d = dict(services[sid])
        d["zero_shot_accuracy"] = _parse_accuracy(d.get("zero_shot_accuracy", ""))
        try:
            service_objs.append(Service(id=sid, **d))
        except TypeError as exc:
            raise ConfigFormatError(f"service:{sid}: {exc}") from exc

    op_objs = []
    for oid in sorted(ops):
        us = tuple(User(id=uid, **users.get(oid, {})[uid]) for uid in sorted(users.get(oid, {})))
        try:
            op_objs.append(Operator(id=oid, users=us, **ops[oid]))
        except TypeError as exc:
            raise ConfigFormatError(f"operator:{oid}: {exc}") from exc
    for oid in users:
        if oid not in ops:
            unknown.append(f"user:{oid}:* (no such operator)")

    return ScenarioConfig(
        operators=tuple(op_objs),
        services=tuple(service_objs),
        models=tuple(model_objs),
        cloud_unit_cost=cloud_cost,
        geometry=SatelliteGeometry(**geometry),
        unknown_keys=tuple(unknown),
        **scenario,
    )


def load_config(path: str | Path) -> ScenarioConfig:
    return loads_config(Path(path).read_text())


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def dumps_config(cfg: ScenarioConfig) -> str:
    lines = ["[scenario]"]
    for key in _SCENARIO_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    lines += ["", "[geometry]"]
    for key in _GEOMETRY_KEYS:
        val = getattr(cfg.geometry, key)
        if val is not None:
            lines.append(f"{key} = {_fmt(val)}")
    for m in cfg.models:
        lines += ["", f"[model:{m.id}]"]
        for key in _MODEL_KEYS:
            val = cfg.cloud_cost(m.id) if key == "cloud_unit_cost" else getattr(m, key)
            lines.append(f"{key} = {_fmt(val)}")
    for s in cfg.services:
        lines += ["", f"[service:{s.id}]"]
        lines.append(f"input_size_mb = {_fmt(s.input_size_mb)}")
        lines.append(f"cot_example_tokens = {s.cot_example_tokens}")
        lines.append(f"model = {s.model}")
        acc = ", ".join(f"{k}:{_fmt(v)}" for k, v in sorted(s.zero_shot_accuracy.items()))
        lines.append(f"zero_shot_accuracy = {acc}")
    for op in cfg.operators:
        lines += ["", f"[operator:{op.id}]"]
        for key in _OPERATOR_KEYS:
            lines.append(f"{key} = {_fmt(getattr(op, key))}")
        for u in op.users:
            lines += ["", f"[user:{op.id}:{u.id}]"]
            for key in _USER_KEYS:
                lines.append(f"{key} = {_fmt(getattr(u, key))}")
    return "\n".join(lines) + "\n"


def dump_config(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))
