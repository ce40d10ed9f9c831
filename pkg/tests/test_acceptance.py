"""Acceptance criteria, one test each, at their stated tolerances.

Every test records one ``PASS``/``FAIL`` line; ``conftest.py`` prints them in
the terminal summary.
"""

import time
from dataclasses import replace

import numpy as np

from sagin_agents import rl, sim, verify
from sagin_agents.domain import OFFLOAD_FRACTIONAL, default_config
from sagin_agents.rl import QNetwork

POLICIES = ("least_aot", "fifo", "lfu")
SEEDS = range(10)


VERDICTS: list[str] = []


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, detail


def inversions(seq, increasing):
    pairs = zip(seq, seq[1:])
    return sum(1 for a, b in pairs if (b < a if increasing else b > a))


def test_ac1_policy_ordering():
    t0 = time.perf_counter()
    cost = {p: np.mean([sim.run_scenario(default_config(seed=s), p).mean_total_cost
                        for s in SEEDS]) for p in POLICIES}
    dt = time.perf_counter() - t0
    margin_fifo = (cost["fifo"] - cost["least_aot"]) / cost["fifo"]
    margin_lfu = (cost["lfu"] - cost["least_aot"]) / cost["fifo"]
    ok = margin_fifo >= 0.02 and margin_lfu >= 0.02 and dt < 30
    verdict("AC1 policy ordering", ok,
            f"costs {({p: round(float(c), 4) for p, c in cost.items()})}, margins over FIFO "
            f"{margin_fifo:.3%} / {margin_lfu:.3%} (need >= 2%), {dt:.1f} s (limit 30 s)")


def test_ac2_resource_trends():
    t0 = time.perf_counter()
    axes = {"gpus": ((8, 16, 24, 32), False), "users": ((5, 10, 15, 20), True),
            "services": ((6, 10, 14, 18), True)}
    worst, seqs = 0, {}
    for axis, (values, increasing) in axes.items():
        rows = sim.sweep(sim.DefaultBuilder(), axis, values, POLICIES, replicates=len(SEEDS))
        means = sim.sweep_means(rows)
        for p in POLICIES:
            seq = [means[(v, p)] for v in values]
            seqs[(axis, p)] = [round(x, 4) for x in seq]
            worst = max(worst, inversions(seq, increasing))
    dt = time.perf_counter() - t0
    verdict("AC2 resource trends", worst <= 1 and dt < 120,
            f"max adjacent inversions {worst} (allowed 1), {dt:.1f} s (limit 120 s); {seqs}")


def test_ac3_vanishing_factor():
    t0 = time.perf_counter()
    deltas = (0.2, 0.4, 0.6, 0.8)
    ok, detail = True, {}
    for p in POLICIES:
        acc, gain = [], []
        for d in deltas:
            runs = [sim.run_scenario(default_config(seed=s, aot_vanish=d), p) for s in SEEDS]
            acc.append(float(np.mean([r.mean_accuracy_cost for r in runs])))
            gain.append(float(np.mean([r.mean_performance_gain for r in runs])))
        ok &= inversions(acc, True) == 0 and inversions(gain, False) == 0
        detail[p] = ([round(a, 5) for a in acc], [round(g, 1) for g in gain])
    dt = time.perf_counter() - t0
    verdict("AC3 vanishing factor", ok and dt < 60,
            f"(accuracy cost, performance gain) per policy {detail}, {dt:.1f} s (limit 60 s)")


def test_ac4_auction_ordering():
    cfg = default_config(seed=0)
    result = sim.run_scenario(cfg)
    t0 = time.perf_counter()
    agent = rl.DqnAgent(len(cfg.operators), rl.TrainConfig(), seed=cfg.rng_seed)
    rl.train(sim.market_episode_source(cfg, result=result), agent)
    dt = time.perf_counter() - t0
    rounds, rho = sim.evaluation_rounds(cfg, 1000, result)
    rows = rl.evaluate_mechanisms(rounds, rl.GreedyPricer(agent.net), rho)
    s = {m: rl.mean_surplus(r) for m, r in rows.items()}
    lift = s["dqmsb"] / s["msb_fixed"] - 1.0
    ok = (s["dqmsb"] >= s["msb_optimal"] >= s["spa"] and lift >= 0.10
          and agent.cfg.episodes <= 500 and dt < 300)
    verdict("AC4 auction ordering", ok,
            f"mean surplus {({m: round(v, 3) for m, v in s.items()})}, optimal rho {rho:.4g}, "
            f"lift over fixed rho {lift:.1%} (need >= 10%; reference 20%), "
            f"{agent.cfg.episodes} episodes in {dt:.1f} s (limit 300 s)")


def test_ac5_ambiguity_bound():
    t0 = time.perf_counter()
    rep = verify.theorem1_sweep(3000)
    checked = rep.cases - rep.skipped
    single = verify.theorem1_sweep(1000, family=verify.LatentFamily(contexts=1))
    dt = time.perf_counter() - t0
    ok = checked >= 1000 and rep.passed and single.passed and dt < 60
    verdict("AC5 ambiguity bound", ok,
            f"{checked} models checked ({rep.skipped} outside the precondition), "
            f"{len(rep.violations)} violations, max gap/bound "
            f"{rep.metrics['max_gap_over_bound']:.3g}; single-context violations "
            f"{len(single.violations)} over {single.cases}; {dt:.1f} s (limit 60 s)")


def test_ac6_mechanism_properties():
    t0 = time.perf_counter()
    reports = [verify.strategyproofness_fuzz(verify.FixedRhoMsb(rho), 10_000, 50, rho=rho)
               for rho in verify.SP_RHOS]
    reports.append(verify.scaling_invariance_fuzz(verify.FixedRhoMsb(2.0), 10_000))
    spa = verify.spa_equivalence_fuzz(10_000)
    reports.append(spa)
    dt = time.perf_counter() - t0
    distinct = spa.cases - spa.skipped
    ok = all(r.passed for r in reports) and distinct == 10_000 and dt < 60
    verdict("AC6 mechanism properties", ok,
            f"violations {[len(r.violations) for r in reports]} over cases "
            f"{[r.cases for r in reports]}, {distinct} distinct-bid profiles, "
            f"{dt:.1f} s (limit 60 s)")


def fd_gap(net, states, actions, targets, h=1e-6):
    _, gw, gb = net.loss_and_gradients(states, actions, targets)
    worst = 0.0
    for p, g in zip(net.params(), [x for pair in zip(gw, gb) for x in pair]):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = net.loss_and_gradients(states, actions, targets)[0]
            p[idx] = old - h
            down = net.loss_and_gradients(states, actions, targets)[0]
            p[idx] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
    return worst


def test_ac7_numeric_core():
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([7, i])
        sizes = tuple(int(x) for x in rng.integers(2, 6, size=int(rng.integers(3, 5))))
        net = QNetwork(sizes, rng)
        for b in net.biases:
            # zero biases can park a dead layer exactly on the ReLU kink
            b[...] = rng.normal(0.0, 0.5, size=b.shape)
        n = int(rng.integers(1, 5))
        states = rng.uniform(-1, 1, size=(n, sizes[0]))
        actions = rng.integers(0, sizes[-1], size=n)
        worst = max(worst, fd_gap(net, states, actions, rng.normal(size=n)))

    cfg = default_config(seed=0)
    result = sim.run_scenario(cfg)

    def curve():
        agent = rl.DqnAgent(len(cfg.operators), rl.TrainConfig(), seed=3)
        env = sim.market_episode_source(cfg, result=result)
        return [(t.mean_surplus, t.mean_loss) for t in rl.train(env, agent, 30)]

    a, b = curve(), curve()
    same = np.array_equal(np.array(a), np.array(b), equal_nan=True)
    verdict("AC7 numeric core", worst < 1e-4 and same,
            f"worst relative gradient gap {worst:.2e} over 100 networks (limit 1e-4), "
            f"identical training curves {same}")


def test_ac8_tiny_instance_optimality():
    rep = verify.caching_gap_suite(50)
    infeasible = [v for v in rep.violations if "infeasible" in v.detail]
    # informational only: the same instances under fractional offload
    frac = verify.run_sharded(_fractional_job, 50, seed=0,
                              tripwire=default_config().optimality_gap_tripwire)
    VERDICTS.append(f"INFO AC8 fractional offload: {len(frac.violations)} of {frac.cases} above the "
          f"tripwire, max gap {frac.metrics['max_gap']:.3f}")
    verdict("AC8 tiny-instance optimality", rep.passed,
            f"{len(rep.violations)} of {rep.cases} instances above the "
            f"{default_config().optimality_gap_tripwire:.0%} tripwire "
            f"({len(infeasible)} infeasible), max gap {rep.metrics['max_gap']:.3f}")


def _fractional_job(cases, seed, tripwire):
    real = verify.tiny_instance

    def tiny(rng, mean_requests=8.0):
        cfg, rows = real(rng, mean_requests)
        return replace(cfg, offload_mode=OFFLOAD_FRACTIONAL), rows

    verify.tiny_instance = tiny
    try:
        return verify._caching_job(cases, seed, tripwire, 8.0)
    finally:
        verify.tiny_instance = real
