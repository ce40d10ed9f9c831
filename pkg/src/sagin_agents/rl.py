"""Deep Q-network that picks the price scaling factor of the MSB auction.

Everything is plain numpy: a rectifier MLP with exact backpropagation, a FIFO
replay buffer, a periodically synchronised target network and SGD with
momentum.

Checkpoint layout (all integers uint32, all reals float64, little-endian)::

    offset 0   8 bytes   magic b"DQMSBQN\\x00"
    offset 8   uint32    format version (1)
    offset 12  uint32    L, number of layer sizes
    offset 16  L*uint32  layer sizes n_0 .. n_{L-1}
    then for each layer l = 0 .. L-2:
               n_l*n_{l+1} float64  weight matrix, row-major (input-major)
               n_{l+1}     float64  bias vector
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import market
from .domain import DomainError

MAGIC = b"DQMSBQN\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.5
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 5000
    batch_size: int = 64
    buffer_capacity: int = 10_000
    target_sync_period: int = 100
    action_count: int = 10
    hidden: tuple[int, ...] = (64, 64)
    episodes: int = 500
    iterations: int = 100

    def __post_init__(self) -> None:
        if not (0 <= self.gamma < 1):
            raise DomainError("gamma must lie in [0, 1)")
        if not (0 <= self.epsilon_end <= 1 and 0 <= self.epsilon_start <= 1):
            raise DomainError("epsilon must lie in [0, 1]")
        if self.action_count < 2:
            raise DomainError("at least two actions are required")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise DomainError("buffer must hold at least one batch")
        if self.target_sync_period < 1 or self.epsilon_decay_steps < 0:
            raise DomainError("sync period must be >= 1 and decay steps >= 0")
        if self.learning_rate < 0:
            raise DomainError("learning rate must be >= 0")

    def epsilon(self, step: int) -> float:
        if self.epsilon_decay_steps == 0 or step >= self.epsilon_decay_steps:
            return self.epsilon_end
        frac = step / self.epsilon_decay_steps
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


# ---------------------------------------------------------------------------
# state and action maps

def encode_state(bids: market.BidProfile, max_bidders: int) -> np.ndarray:
    """``[x_0, ground bids sorted descending]`` over the profile maximum, zero-padded."""
    n = 1 + len(bids.ground)
    if n > max_bidders:
        raise DomainError(f"{n} bidders exceed the state size {max_bidders}")
    out = np.zeros(max_bidders)
    out[0] = bids.satellite
    out[1:n] = sorted(bids.ground, reverse=True)
    top = out.max()
    if top > 0:
        out /= top
    return out


def action_to_rho(action: int, action_count: int) -> float:
    if not (0 <= action < action_count):
        raise DomainError(f"action {action} outside [0, {action_count})")
    return 10.0 ** (action / action_count)


# ---------------------------------------------------------------------------
# network

class QNetwork:
    """Fully connected rectifier network; the output layer is linear."""

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator | None = None):
        if len(layer_sizes) < 2 or any(n < 1 for n in layer_sizes):
            raise DomainError("need at least input and output layers of positive width")
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = math.sqrt(6.0 / n_in)
            self.weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "QNetwork":
        twin = QNetwork.__new__(QNetwork)
        twin.layer_sizes = self.layer_sizes
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def load_from(self, other: "QNetwork") -> None:
        if other.layer_sizes != self.layer_sizes:
            raise DomainError("layer sizes differ")
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if l < last:
                h = np.maximum(h, 0.0)
        return h

    def _forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        acts = [x]
        pres = []
        h = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pres.append(z)
            h = np.maximum(z, 0.0) if l < last else z
            acts.append(h)
        return h, acts, pres

    def loss_and_gradients(self, states: np.ndarray, actions: np.ndarray,
                           targets: np.ndarray) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
        """Mean squared TD error and its exact gradient w.r.t. every parameter."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        k = states.shape[0]
        q, acts, pres = self._forward_cache(states)
        rows = np.arange(k)
        err = q[rows, actions] - targets
        loss = float(np.mean(err ** 2))
        grad = np.zeros_like(q)
        grad[rows, actions] = 2.0 * err / k
        gw: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * len(self.biases)  # type: ignore[list-item]
        for l in range(len(self.weights) - 1, -1, -1):
            gw[l] = acts[l].T @ grad
            gb[l] = grad.sum(axis=0)
            if l > 0:
                grad = (grad @ self.weights[l].T) * (pres[l - 1] > 0)
        return loss, gw, gb


# ---------------------------------------------------------------------------
# replay

@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool = False


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def of(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            np.array([t.state for t in transitions], dtype=float),
            np.array([t.action for t in transitions], dtype=int),
            np.array([t.reward for t in transitions], dtype=float),
            np.array([t.next_state for t in transitions], dtype=float),
            np.array([t.done for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first."""

    def __init__(self, capacity: int, state_size: int):
        if capacity < 1:
            raise DomainError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_size))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_size))
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        i = self._next
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.dones[i] = t.done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        return [Transition(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                           self.next_states[i].copy(), bool(self.dones[i]))
                for i in self._order()]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = rng.choice(self._size, size=batch_size, replace=False)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


# ---------------------------------------------------------------------------
# learning

def td_target(t: Transition, target_net: QNetwork, gamma: float) -> float:
    """``r + gamma * max_a Q'(S', a)``; terminal transitions do not bootstrap."""
    if t.done:
        return float(t.reward)
    return float(t.reward + gamma * np.max(target_net.forward(t.next_state)))


def td_targets(batch: Batch, target_net: QNetwork, gamma: float) -> np.ndarray:
    boot = np.max(target_net.forward(batch.next_states), axis=1)
    return batch.rewards + gamma * boot * (~batch.dones)


def batch_loss(batch: Batch | Sequence[Transition], net: QNetwork, target_net: QNetwork,
               gamma: float) -> float:
    if not isinstance(batch, Batch):
        if len(batch) == 0:
            raise DomainError("empty batch")
        batch = Batch.of(batch)
    if len(batch) == 0:
        raise DomainError("empty batch")
    y = td_targets(batch, target_net, gamma)
    q = net.forward(batch.states)[np.arange(len(batch)), batch.actions]
    return float(np.mean((y - q) ** 2))


class DqnAgent:
    """Online and target networks, replay buffer and optimiser state."""

    def __init__(self, n_bidders: int, cfg: TrainConfig = TrainConfig(), seed: int = 0):
        self.cfg = cfg
        self.n_bidders = n_bidders
        self.rng = np.random.default_rng([seed, 31])
        sizes = (n_bidders, *cfg.hidden, cfg.action_count)
        self.net = QNetwork(sizes, np.random.default_rng([seed, 37]))
        self.target = self.net.copy()
        self.buffer = ReplayBuffer(cfg.buffer_capacity, n_bidders)
        self.velocity = [np.zeros_like(p) for p in self.net.params()]
        self.steps = 0
        self.updates = 0

    def act(self, state: np.ndarray, epsilon: float) -> int:
        if self.rng.random() < epsilon:
            return int(self.rng.integers(self.cfg.action_count))
        return greedy_action(self.net, state)

    def train_step(self) -> float | None:
        return train_step(self.net, self.target, self.buffer, self.cfg, self.rng, self)


def greedy_action(net: QNetwork, state: np.ndarray) -> int:
    return int(np.argmax(net.forward(state)))


def train_step(net: QNetwork, target_net: QNetwork, buffer: ReplayBuffer, cfg: TrainConfig,
               rng: np.random.Generator, agent: DqnAgent | None = None) -> float | None:
    """One momentum-SGD step on a sampled batch; ``None`` if the buffer is short.

    Velocities and the update counter live on ``agent`` when given; the target
    network is overwritten with the online parameters every
    ``target_sync_period`` updates.
    """
    if len(buffer) < cfg.batch_size:
        return None
    batch = buffer.sample(cfg.batch_size, rng)
    y = td_targets(batch, target_net, cfg.gamma)
    loss, gw, gb = net.loss_and_gradients(batch.states, batch.actions, y)
    grads = [g for pair in zip(gw, gb) for g in pair]
    velocity = agent.velocity if agent is not None else [np.zeros_like(p) for p in net.params()]
    for p, v, g in zip(net.params(), velocity, grads):
        v *= cfg.momentum
        v += g
        p -= cfg.learning_rate * v
    updates = 1
    if agent is not None:
        agent.updates += 1
        updates = agent.updates
    if updates % cfg.target_sync_period == 0:
        target_net.load_from(net)
    return loss


# ---------------------------------------------------------------------------
# episodes

class MarketEnv(Protocol):
    def next_round(self): ...


@dataclass
class EpisodeTrace:
    episode: int
    surplus: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    epsilon: float = 0.0

    @property
    def mean_surplus(self) -> float:
        return math.fsum(self.surplus) / len(self.surplus) if self.surplus else 0.0

    @property
    def mean_loss(self) -> float:
        return math.fsum(self.losses) / len(self.losses) if self.losses else math.nan


def run_dqmsb_episode(env: MarketEnv, agent: DqnAgent, episode: int = 0,
                      iterations: int | None = None, learn: bool = True,
                      epsilon: float | None = None) -> EpisodeTrace:
    """One pass of ``iterations`` auction rounds with epsilon-greedy pricing.

    The stored reward is the realised total surplus divided by the round's
    largest bid, which keeps Q-values of order one across markets.
    """
    cfg = agent.cfg
    k_max = cfg.iterations if iterations is None else iterations
    trace = EpisodeTrace(episode)
    rnd = env.next_round()
    state = encode_state(rnd.bids, agent.n_bidders)
    for k in range(k_max):
        eps = cfg.epsilon(agent.steps) if epsilon is None else epsilon
        a = agent.act(state, eps)
        out = market.msb(rnd.bids, action_to_rho(a, cfg.action_count))
        total, _, _ = market.surplus(out, rnd.values)
        scale = max(rnd.bids.all) or 1.0
        nxt = env.next_round()
        nstate = encode_state(nxt.bids, agent.n_bidders)
        reward = total / scale
        if learn:
            agent.buffer.add(Transition(state, a, reward, nstate, k == k_max - 1))
            loss = agent.train_step()
            if loss is not None:
                trace.losses.append(loss)
            agent.steps += 1
        trace.surplus.append(total)
        trace.rewards.append(reward)
        trace.actions.append(a)
        trace.epsilon = eps
        rnd, state = nxt, nstate
    return trace


def train(env: MarketEnv, agent: DqnAgent, episodes: int | None = None) -> list[EpisodeTrace]:
    n = agent.cfg.episodes if episodes is None else episodes
    return [run_dqmsb_episode(env, agent, e) for e in range(n)]


class GreedyPricer:
    """Frozen network mapping a bid profile to its greedy scaling factor."""

    def __init__(self, net: QNetwork):
        self.net = net
        self.n_bidders = net.layer_sizes[0]
        self.action_count = net.layer_sizes[-1]

    def action(self, bids: market.BidProfile) -> int:
        return greedy_action(self.net, encode_state(bids, self.n_bidders))

    def rho(self, bids: market.BidProfile) -> float:
        return action_to_rho(self.action(bids), self.action_count)


def curve_slope(values: Sequence[float], window: int = 50) -> float:
    """Least-squares slope over the last ``window`` points, relative to their mean."""
    tail = np.asarray(values[-window:], dtype=float)
    if tail.size < 2:
        raise DomainError("slope needs at least two points")
    x = np.arange(tail.size, dtype=float)
    slope = np.polyfit(x, tail, 1)[0]
    mean = tail.mean()
    return float(slope / abs(mean)) if mean else float(slope)


PLATEAU_SLOPE = 1e-3  # relative change per episode accepted as flat


# ---------------------------------------------------------------------------
# files

CURVE_COLUMNS = ("episode", "mean_reward", "loss", "epsilon", "rho_histogram")


def write_curve(path, traces: Iterable[EpisodeTrace], action_count: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for tr in traces:
            hist = np.bincount(np.asarray(tr.actions, dtype=int), minlength=action_count)
            w.writerow([tr.episode, repr(tr.mean_surplus), repr(tr.mean_loss), repr(tr.epsilon),
                        "|".join(str(int(c)) for c in hist)])


def dumps_checkpoint(net: QNetwork) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.layer_sizes)),
             struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes)]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_checkpoint(data: bytes) -> QNetwork:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("bad magic")
    version, n_sizes = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if n_sizes < 2 or len(data) < 16 + 4 * n_sizes:
        raise CheckpointError("truncated layer table")
    sizes = struct.unpack_from(f"<{n_sizes}I", data, 16)
    if any(n < 1 for n in sizes):
        raise CheckpointError("layer sizes must be positive")
    offset = 16 + 4 * n_sizes
    expected = offset + 8 * sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(data) != expected:
        raise CheckpointError(f"checkpoint holds {len(data)} bytes, layer table implies {expected}")
    net = QNetwork.__new__(QNetwork)
    net.layer_sizes = tuple(sizes)
    net.weights, net.biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=a * b, offset=offset).reshape(a, b)
        offset += 8 * a * b
        bias = np.frombuffer(data, dtype="<f8", count=b, offset=offset)
        offset += 8 * b
        net.weights.append(w.astype(float))
        net.biases.append(bias.astype(float))
    return net


def save_checkpoint(net: QNetwork, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(net))


def load_checkpoint(path: str | Path) -> QNetwork:
    return loads_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# evaluation

MECHANISMS = ("dqmsb", "spa", "msb_myopic", "msb_optimal", "msb_fixed")


def evaluate_mechanisms(rounds: Sequence, pricer: GreedyPricer | None, history_rho: float,
                        fixed_rho: float = 10 ** 0.5,
                        mechanisms: Sequence[str] = MECHANISMS) -> dict[str, list[list]]:
    """Round-CSV rows per mechanism over one shared list of rounds."""
    out: dict[str, list[list]] = {m: [] for m in mechanisms}
    for k, rnd in enumerate(rounds):
        for m in mechanisms:
            if m == "dqmsb":
                if pricer is None:
                    raise DomainError("dqmsb evaluation needs a trained network")
                res = market.msb(rnd.bids, pricer.rho(rnd.bids))
            elif m == "spa":
                res = market.spa(rnd.bids)
            elif m == "msb_myopic":
                res = market.msb(rnd.bids, market.myopic_rho(rnd.bids))
            elif m == "msb_optimal":
                res = market.msb(rnd.bids, history_rho)
            elif m == "msb_fixed":
                res = market.msb(rnd.bids, fixed_rho)
            else:
                raise DomainError(f"unknown mechanism {m!r}")
            out[m].append(market.round_row(k, m, res, rnd.values))
    return out


def mean_surplus(rows: Sequence[list]) -> float:
    col = market.ROUND_COLUMNS.index("total_surplus")
    return math.fsum(float(r[col]) for r in rows) / len(rows)
