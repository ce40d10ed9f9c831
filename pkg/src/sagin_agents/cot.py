"""Chain-of-thought context dynamics, accuracy model and the ambiguity oracle.

The first half holds the per-slot recursions used by the caching engine
(token count ``K`` and age of thought ``kappa``) and the accuracy/cost
formulas built on them.  The second half is an exact enumeration oracle for
a finite latent-variable language model: it computes the in-context
posterior predictive and the true conditional by summing over every
(context, intention) pair and compares their gap with the ambiguity bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .domain import AOT_PROPORTIONAL, AOT_SUBTRACTIVE, DomainError

LOG_CAP = 50.0


@dataclass(frozen=True)
class ContextState:
    tokens: float = 0.0
    aot: float = 0.0


EMPTY_CONTEXT = ContextState()


def delta_tokens(a: int, offload: float, requests: int, k_tokens: float) -> float:
    """Tokens appended to the context by the edge-served share of a batch."""
    return a * (1.0 - offload) * requests * k_tokens


def update_tokens(prev: ContextState, a: int, delta: float, slot: int | None = None) -> float:
    if slot == 0:
        return 0.0
    return a * (prev.tokens + delta)


def update_aot(prev: ContextState, a: int, delta: float, vanish: float,
               mode: str = AOT_PROPORTIONAL, slot: int | None = None) -> float:
    """Age of thought after one slot.

    ``subtractive`` removes ``vanish`` thoughts per slot; ``proportional``
    keeps a ``1 - vanish`` share of the previous value.
    """
    if vanish < 0:
        raise DomainError("vanishing factor must be >= 0")
    if mode == AOT_PROPORTIONAL:
        if vanish > 1:
            raise DomainError("proportional vanishing factor must be <= 1")
        value = (1.0 - vanish) * prev.aot + delta
    elif mode == AOT_SUBTRACTIVE:
        value = prev.aot + delta - vanish
    else:
        raise DomainError(f"unknown AoT mode {mode!r}")
    if slot == 0:
        return 0.0
    return a * max(value, 0.0)


def log_gain(beta: float) -> float:
    """``ln(1/beta)`` capped at ``LOG_CAP`` (covers ``beta == 0``)."""
    if beta <= 0.0:
        return LOG_CAP
    return min(-math.log(beta), LOG_CAP)


def accuracy(alpha: float, beta: float, kappa: float) -> float:
    """Few-shot performance ``alpha * ln(1 / beta**kappa)`` in natural-log units."""
    if not (0.0 < alpha <= 1.0):
        raise DomainError("alpha must lie in (0, 1]")
    if not (0.0 <= beta < 1.0):
        raise DomainError("beta must lie in [0, 1)")
    if kappa < 0:
        raise DomainError("kappa must be >= 0")
    return alpha * kappa * log_gain(beta)


def unit_accuracy_cost(alpha: float, beta: float, kappa: float) -> float:
    """Per-request accuracy cost; kappa below one is floored to one."""
    if not (0.0 < alpha <= 1.0):
        raise DomainError("alpha must lie in (0, 1]")
    if not (0.0 <= beta < 1.0):
        raise DomainError("beta must lie in [0, 1)")
    if alpha == 1.0:
        return 0.0
    return (1.0 - alpha) / (max(kappa, 1.0) * log_gain(beta))


def ambiguity_bound(eps_d0: float, eps_examples: Sequence[float]) -> float:
    """``eta * prod(eps / (1 - eps))`` with ``eta = 2 eps_d0 / (1 - eps_d0)``."""
    for e in (eps_d0, *eps_examples):
        if not (0.0 <= e < 1.0):
            raise DomainError(f"ambiguity must lie in [0, 1), got {e!r}")
    eta = 2.0 * eps_d0 / (1.0 - eps_d0)
    prod = 1.0
    for e in eps_examples:
        prod *= e / (1.0 - e)
    return eta * prod


class SearchLimitError(RuntimeError):
    pass


def length_threshold(eps_of_length: Callable[[int], float], sigma: float,
                     cap: int = 1 << 24) -> int:
    """Smallest length ``k >= 1`` with ``eps_of_length(k) <= sigma``.

    ``eps_of_length`` must be nonincreasing. Doubling brackets the answer,
    bisection pins it.
    """
    if not (0.0 <= sigma < 0.5):
        raise DomainError("sigma must lie in [0, 0.5)")
    if eps_of_length(1) <= sigma:
        return 1
    lo, hi = 1, 2
    while eps_of_length(hi) > sigma:
        lo, hi = hi, hi * 2
        if hi > cap:
            raise SearchLimitError(f"ambiguity stays above {sigma} up to length {cap}")
    # invariant: eps(lo) > sigma >= eps(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if eps_of_length(mid) <= sigma:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# finite latent-variable oracle


@dataclass(frozen=True)
class FiniteLatentModel:
    """Contexts -> intentions -> i.i.d. symbols.

    ``prior[c]`` is q(c), ``intent[c, t]`` is q(theta=t | c) and
    ``emission[t, s]`` is q(s | theta=t).  Every message is a tuple of symbols
    drawn i.i.d. from the emission row of one intention.
    """

    prior: np.ndarray
    intent: np.ndarray
    emission: np.ndarray
    true_context: int = 0
    true_intention: int = 0

    def __post_init__(self) -> None:
        for name, arr in (("prior", self.prior), ("intent", self.intent),
                          ("emission", self.emission)):
            if np.any(arr < 0):
                raise DomainError(f"{name} has negative entries")
            sums = np.atleast_2d(arr).sum(axis=-1)
            if np.any(np.abs(sums - 1.0) > 1e-12):
                raise DomainError(f"{name} rows must sum to 1")
        if self.intent.shape != (self.prior.shape[0], self.emission.shape[0]):
            raise DomainError("intent must be contexts x intentions")
        if not (0 <= self.true_context < self.n_contexts):
            raise DomainError("true context out of range")
        if not (0 <= self.true_intention < self.n_intentions):
            raise DomainError("true intention out of range")

    @property
    def n_contexts(self) -> int:
        return self.prior.shape[0]

    @property
    def n_intentions(self) -> int:
        return self.emission.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.emission.shape[1]

    def seq_given_intention(self, seq: Sequence[int]) -> np.ndarray:
        """q(seq | theta) for every intention."""
        out = np.ones(self.n_intentions)
        for s in seq:
            out = out * self.emission[:, s]
        return out

    def seq_given_context(self, seq: Sequence[int]) -> np.ndarray:
        """q(seq | c) = sum_theta q(theta | c) q(seq | theta) for every context."""
        return self.intent @ self.seq_given_intention(seq)

    def ambiguity(self, seq: Sequence[int], intention: int | None = None) -> float:
        """One minus the posterior of (true context, intention) given ``seq``."""
        t = self.true_intention if intention is None else intention
        c = self.true_context
        joint_true = self.prior[c] * self.intent[c, t] * self.seq_given_intention(seq)[t]
        evidence = float(self.prior @ self.seq_given_context(seq))
        if evidence <= 0.0:
            raise DomainError("sequence has zero probability under the model")
        return 1.0 - joint_true / evidence

    def skewness(self) -> float:
        others = np.delete(self.prior, self.true_context)
        if others.size == 0:
            return 1.0
        return float(self.prior[self.true_context] / others.min())


@dataclass(frozen=True)
class GapReport:
    gap: float
    bound: float
    eta: float
    lam: float
    upsilon: float
    lam_upsilon_bound: float
    eps_task: float
    eps_examples: tuple[float, ...]

    @property
    def holds(self) -> bool:
        tol = 1e-12 * max(1.0, self.bound)
        return (self.gap <= self.bound + tol
                and self.lam <= self.lam_upsilon_bound + tol
                and self.upsilon <= self.lam_upsilon_bound + tol)


def oracle_posterior_gap(model: FiniteLatentModel, examples: Sequence[Sequence[int]],
                         task: Sequence[int], continuation: Sequence[int],
                         task_intention: int | None = None) -> GapReport:
    """Exact |p(D | d0, E) - q(D | d0, c*)| next to the ambiguity bound.

    ``D`` is ``task + continuation``.  Each example carries its own latent
    intention; the task and its continuation share one.
    """
    full = tuple(task) + tuple(continuation)
    cstar = model.true_context

    ex_lik = np.ones(model.n_contexts)
    for e in examples:
        ex_lik = ex_lik * model.seq_given_context(e)
    weights = model.prior * ex_lik
    total = weights.sum()
    if total <= 0.0:
        raise DomainError("examples have zero probability")
    weights = weights / total

    p_full = model.seq_given_context(full)
    p_task = model.seq_given_context(task)
    if p_task[cstar] <= 0.0 or float(weights @ p_task) <= 0.0:
        raise DomainError("conditioning on a zero-probability task")

    predictive = float(weights @ p_full) / float(weights @ p_task)
    truth = float(p_full[cstar] / p_task[cstar])

    others = np.arange(model.n_contexts) != cstar
    denom = weights[cstar] * p_task[cstar]
    lam = float((weights[others] * p_full[others]).sum() / denom)
    ups = float((weights[others] * p_task[others]).sum() / denom)

    eps_task = model.ambiguity(task, task_intention)
    eps_ex = tuple(model.ambiguity(e) for e in examples)
    gamma_pow = model.skewness() ** len(examples)
    prod = 1.0
    for e in eps_ex:
        prod *= e / (1.0 - e)
    single = gamma_pow * eps_task / (1.0 - eps_task) * prod
    eta = 2.0 * gamma_pow * eps_task / (1.0 - eps_task)
    return GapReport(
        gap=abs(predictive - truth),
        bound=eta * prod,
        eta=eta,
        lam=lam,
        upsilon=ups,
        lam_upsilon_bound=single,
        eps_task=eps_task,
        eps_examples=eps_ex,
    )


def random_latent_model(rng: np.random.Generator, n_contexts: int = 2, n_intentions: int = 2,
                        n_symbols: int = 3, uniform_prior: bool = True,
                        concentration: float = 1.0) -> FiniteLatentModel:
    if uniform_prior:
        prior = np.full(n_contexts, 1.0 / n_contexts)
    else:
        prior = rng.dirichlet(np.full(n_contexts, concentration))
    intent = rng.dirichlet(np.full(n_intentions, concentration), size=n_contexts)
    emission = rng.dirichlet(np.full(n_symbols, concentration), size=n_intentions)
    # renormalise so rows sum to one within float tolerance after dirichlet
    prior = prior / prior.sum()
    intent = intent / intent.sum(axis=1, keepdims=True)
    emission = emission / emission.sum(axis=1, keepdims=True)
    true_intention = int(np.argmax(intent[0]))
    return FiniteLatentModel(prior, intent, emission, true_context=0,
                             true_intention=true_intention)


def sample_message(model: FiniteLatentModel, rng: np.random.Generator, intention: int,
                   length: int) -> tuple[int, ...]:
    return tuple(int(s) for s in rng.choice(model.n_symbols, size=length,
                                            p=model.emission[intention]))


# ---------------------------------------------------------------------------
# plain-text table format
#
#   true <context> <intention>
#   <context> * * <p>          prior q(c)
#   <context> <intention> * <p>   q(intention | context)
#   * <intention> <symbol> <p>    q(symbol | intention)


def loads_latent_model(text: str) -> FiniteLatentModel:
    prior: dict[int, float] = {}
    intent: dict[tuple[int, int], float] = {}
    emit: dict[tuple[int, int], float] = {}
    truth = (0, 0)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "true":
            truth = (int(parts[1]), int(parts[2]))
            continue
        if len(parts) != 4:
            raise DomainError(f"line {lineno}: expected 4 columns")
        c, t, s, p = parts
        prob = float(p)
        if t == "*" and s == "*":
            prior[int(c)] = prob
        elif s == "*":
            intent[int(c), int(t)] = prob
        elif c == "*":
            emit[int(t), int(s)] = prob
        else:
            raise DomainError(f"line {lineno}: unrecognised row")
    n_c = max(prior) + 1 if prior else 0
    n_t = max(t for t, _ in emit) + 1 if emit else 0
    n_s = max(s for _, s in emit) + 1 if emit else 0
    P = np.zeros(n_c)
    for c, p in prior.items():
        P[c] = p
    I = np.zeros((n_c, n_t))
    for (c, t), p in intent.items():
        I[c, t] = p
    E = np.zeros((n_t, n_s))
    for (t, s), p in emit.items():
        E[t, s] = p
    return FiniteLatentModel(P, I, E, true_context=truth[0], true_intention=truth[1])


def dumps_latent_model(model: FiniteLatentModel) -> str:
    lines = [f"true {model.true_context} {model.true_intention}"]
    for c, p in enumerate(model.prior):
        lines.append(f"{c} * * {float(p)!r}")
    for c in range(model.n_contexts):
        for t in range(model.n_intentions):
            lines.append(f"{c} {t} * {float(model.intent[c, t])!r}")
    for t in range(model.n_intentions):
        for s in range(model.n_symbols):
            lines.append(f"* {t} {s} {float(model.emission[t, s])!r}")
    return "\n".join(lines) + "\n"


def load_latent_model(path: str | Path) -> FiniteLatentModel:
    return loads_latent_model(Path(path).read_text())
