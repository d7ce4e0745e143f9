"""Acceptance suite: one test per release criterion.

Each test prints a single [PASS]/[FAIL] line (visible with `pytest -s`)
and then asserts, so the suite both reports and gates. Tolerances are
pinned here, not configurable.
"""

import json
import math
import os
import random
import time
from fractions import Fraction

from scalegraph.cli import main as cli_main
from scalegraph.ident import IdSpace
from scalegraph.routing import StableNetwork, oracle_closest
from scalegraph.scenario import (
    committed_consistency,
    load_scenario,
    load_scenario_file,
    overdraft_free,
    random_adversarial_scenario,
    run_scenario,
)
from scalegraph.security_sim import (
    ExperimentConfig,
    compare_to_analytic,
    compromise_threshold,
    find_required_shard_size,
    hypergeometric_p_exact,
    run_experiment,
)

from conftest import scenario_path


def report(criterion, ok, detail):
    mark = "PASS" if ok else "FAIL"
    print(f"[{mark}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# --- 1. analytic-oracle exactness ---------------------------------------------------


def pascal_rows(n_max):
    rows = [[1]]
    for n in range(1, n_max + 1):
        prev = rows[-1]
        rows.append([1] + [prev[k - 1] + prev[k] for k in range(1, n)] + [1])
    return rows


def test_criterion_1_hypergeometric_exactness():
    start = time.time()
    pascal = pascal_rows(30)

    def binom(n, k):
        return pascal[n][k] if 0 <= k <= n else 0

    checked = 0
    for N in range(1, 31):
        for b in range(N + 1):
            for r in range(1, N + 1):
                for f_model in ("1/2", "1/3"):
                    threshold = compromise_threshold(r, f_model)
                    want = Fraction(
                        sum(binom(b, k) * binom(N - b, r - k) for k in range(threshold, r + 1)),
                        binom(N, r),
                    )
                    assert hypergeometric_p_exact(N, b, r, f_model) == want
                    checked += 1
    elapsed = time.time() - start
    report(1, elapsed < 60, f"{checked} cases exact-equal to the enumeration oracle in {elapsed:.1f}s")


# --- 2. Monte Carlo vs exact oracle at desk scale ------------------------------------


def test_criterion_2_monte_carlo_matches_exact_desk_scale():
    start = time.time()
    config = ExperimentConfig(N=6, m=1, r=3, F=Fraction(1, 3), f_model="1/2",
                              repetitions=20, iterations=5000, seed=2024)
    # exact per-network value by enumerating all byzantine pairs: any
    # placement of a 3-shard among 6 nodes gives C(3,2)/C(6,2) = 0.2
    exact = Fraction(3, 15)
    result = run_experiment(config)
    se = math.sqrt(float(exact) * (1 - float(exact)) / config.total_iterations)
    gap = abs(result.probability - float(exact))
    elapsed = time.time() - start
    report(
        2,
        gap <= 3 * se and elapsed < 60,
        f"observed {result.probability:.4f} vs exact 0.2, |gap|={gap:.4f} <= 3*SE={3*se:.4f}, {elapsed:.1f}s",
    )


# --- 3. required shard size spot checks -----------------------------------------------


def test_criterion_3_required_shard_sizes():
    start = time.time()
    results = {}
    for label, F, expected, reps, iters in (
        ("full F=1/5", Fraction(1, 5), 61, 20, 5000),
        ("full F=1/4", Fraction(1, 4), 101, 20, 5000),
        ("reduced F=1/5", Fraction(1, 5), 61, 20, 500),
        ("reduced F=1/4", Fraction(1, 4), 101, 20, 500),
    ):
        r, _ = find_required_shard_size(1000, F, "1/2", seed=101,
                                        repetitions=reps, iterations=iters)
        results[label] = (r, expected)
    elapsed = time.time() - start
    ok = all(abs(r - want) <= 20 for r, want in results.values())
    detail = ", ".join(f"{k}: r={r} (target {want})" for k, (r, want) in results.items())
    report(3, ok and elapsed < 1800, f"{detail}; {elapsed:.0f}s")


# --- 4. tolerance-model ratio ----------------------------------------------------------


def test_criterion_4_tolerance_model_ratio():
    start = time.time()
    r_half, _ = find_required_shard_size(2000, Fraction(1, 4), "1/2", seed=202,
                                         repetitions=20, iterations=500)
    r_third, _ = find_required_shard_size(2000, Fraction(1, 4), "1/3", seed=202,
                                          repetitions=20, iterations=500)
    ratio = r_third / r_half
    elapsed = time.time() - start
    report(4, ratio >= 4, f"f<1/3 needs r={r_third} vs f<1/2 r={r_half}, ratio {ratio:.2f} >= 4; {elapsed:.0f}s")


# --- 5. shard-size sweep trend vs analytic ----------------------------------------------


def test_criterion_5_failure_probability_trend():
    start = time.time()
    base = ExperimentConfig(N=2000, m=4000, r=11, F=Fraction(1, 4), f_model="1/2",
                            repetitions=100, iterations=5000, seed=77)
    rows = compare_to_analytic(base, [11, 21, 31, 41, 51, 61])
    total = base.total_iterations
    solid = [row for row in rows if row.observed * total > 100]
    decreasing = all(
        a.observed > b.observed for a, b in zip(solid, solid[1:])
    )
    within_order = all(
        row.analytic_at_n_over_r > 0
        and 0.1 <= row.observed / row.analytic_at_n_over_r <= 10
        for row in solid
    )
    elapsed = time.time() - start
    obs = ", ".join(f"r={row.r}:{row.observed:.3g}" for row in rows)
    report(
        5,
        decreasing and within_order and elapsed < 900,
        f"observed [{obs}] strictly decreasing over {len(solid)} solid points, "
        f"analytic m=N/r within one order of magnitude; {elapsed:.0f}s",
    )


# --- 6. shard-count sweep band ----------------------------------------------------------


def test_criterion_6_shard_count_band():
    start = time.time()
    probs = {}
    for m in (1000, 4000, 16000):
        config = ExperimentConfig(N=4000, m=m, r=61, F=Fraction(1, 4), f_model="1/2",
                                  repetitions=100, iterations=5000, seed=55)
        probs[m] = run_experiment(config).probability
    elapsed = time.time() - start
    in_band = all(0.002 <= p <= 0.006 for p in probs.values())
    spread = max(probs.values()) / min(probs.values())
    detail = ", ".join(f"m={m}: {p:.5f}" for m, p in probs.items())
    report(6, in_band and spread <= 2 and elapsed < 1200,
           f"{detail}; max/min {spread:.2f} <= 2; {elapsed:.0f}s")


# --- 7. randomized adversarial safety -----------------------------------------------------


def test_criterion_7_consensus_safety_suite():
    start = time.time()
    scenarios = 0
    committed = 0
    for i in range(200):
        r = [3, 5, 7][i % 3]
        policy = "proactive" if i % 2 == 0 else "timeout"
        doc = random_adversarial_scenario(seed=40_000 + i, r=r, policy=policy)
        trace, world = run_scenario(load_scenario(doc))
        scenarios += 1
        committed += len(trace.committed_tx_ids())
        ok, detail = committed_consistency(trace, world)
        assert ok, f"scenario {i}: {detail}"
        ok, detail = overdraft_free(world)
        assert ok, f"scenario {i}: {detail}"
        honest = {world.space.to_hex(n) for n in world.honest_node_ids()}
        rejected = [e for e in trace.select("append_rejected") if e["node"] in honest]
        assert not rejected, f"scenario {i}: honest replica refused a committed block"
    elapsed = time.time() - start
    report(7, elapsed < 600,
           f"{scenarios} adversarial scenarios, {committed} commits, zero conflicting "
           f"commits, zero committed overdrafts; {elapsed:.0f}s")


# --- 8. vote-counting defense is load-bearing ----------------------------------------------


def test_criterion_8_vote_counting_defense():
    per_group, world_a = run_scenario(load_scenario_file(scenario_path("vote_counting_attack.json")))
    naive, world_b = run_scenario(load_scenario_file(scenario_path("vote_counting_naive.json")))
    defended = not per_group.commits()
    broken = bool(naive.commits())
    report(
        8,
        defended and broken,
        f"per-group counting: {len(per_group.commits())} commits of the invalid "
        f"transaction; naive |V|/2+1 counting: {len(naive.commits())} commits",
    )


# --- 9. liveness and deadlock ---------------------------------------------------------------


def test_criterion_9_liveness_and_deadlock():
    details = []
    ok = True
    for policy in ("proactive", "timeout"):
        doc = json.load(open(scenario_path("three_cycle.json")))
        doc["deadlock_policy"] = policy
        first, _ = run_scenario(load_scenario(doc))
        second, _ = run_scenario(load_scenario(doc))
        committed = len(first.committed_tx_ids())
        ok = ok and committed == 3 and first.to_jsonl() == second.to_jsonl()
        details.append(f"{policy}: {committed}/3 committed, deterministic")
    trace, world = run_scenario(load_scenario_file(scenario_path("crash_leader.json")))
    views = {e["view"] for e in trace.view_changes()}
    crash_ok = trace.commits() and views == {1}
    ok = ok and bool(crash_ok)
    details.append(f"crashed leader: committed after exactly one view change (views {sorted(views)})")
    report(9, ok, "; ".join(details))


# --- 10. lookup correctness ------------------------------------------------------------------


def test_criterion_10_lookup_matches_oracle():
    start = time.time()
    space = IdSpace(32)
    bound = 4 * math.log2(1000) + 4
    worst_rounds = 0
    for net_index in range(100):
        rng = random.Random(90_000 + net_index)
        ids = space.distinct_identifiers(rng, 1000)
        net = StableNetwork(ids, space)
        target = space.random_identifier(rng)
        origin = rng.choice(ids)
        result = net.lookup(origin, target, 20)
        want = oracle_closest(ids, target, 20, space)
        assert set(result.nodes) == set(want), f"network {net_index} mismatch"
        worst_rounds = max(worst_rounds, result.rounds)
    elapsed = time.time() - start
    report(10, worst_rounds <= bound,
           f"100/100 networks exact; worst hop rounds {worst_rounds} <= {bound:.1f}; {elapsed:.0f}s")


# --- 11. reproducibility from manifests --------------------------------------------------------


def test_criterion_11_manifest_reproducibility(tmp_path):
    outputs = {}
    csv_out = str(tmp_path / "sizes.csv")
    cli_main(["shard-size", "--nodes", "125", "--byzantine-fraction", "1/5",
              "--repetitions", "5", "--iterations", "200", "--seed", "3",
              "--out", csv_out])
    sweep_out = str(tmp_path / "sweep.csv")
    cli_main(["failure-prob", "--nodes", "60", "--shards", "30",
              "--byzantine-fraction", "1/4", "--shard-sizes", "3,5",
              "--repetitions", "2", "--iterations", "200", "--seed", "3",
              "--out", sweep_out])
    trace_out = str(tmp_path / "trace.jsonl")
    cli_main(["protocol", scenario_path("crash_leader.json"), "--out", trace_out])
    for path in (csv_out, sweep_out, trace_out):
        with open(path, "rb") as fh:
            outputs[path] = fh.read()
        os.remove(path)
        assert cli_main(["replay", path + ".manifest.json"]) in (0, 1)
        with open(path, "rb") as fh:
            assert fh.read() == outputs[path], f"{path} not byte-identical on replay"
    report(11, True, "shard-size CSV, failure-prob CSV, and protocol trace all byte-identical on replay")
