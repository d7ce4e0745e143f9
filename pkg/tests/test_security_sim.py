import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from scalegraph.ident import IdSpace
from scalegraph.routing import oracle_closest
from scalegraph.security_sim import (
    ExperimentConfig,
    InfeasibleParameters,
    build_shards,
    compromise_threshold,
    failure_probability,
    find_required_shard_size,
    generate_network,
    hypergeometric_p,
    hypergeometric_p_exact,
    is_compromised,
    run_experiment,
    shard_index_matrix,
    shard_size_grid,
)

# --- independent oracles -----------------------------------------------------------


def pascal_binomials(n_max):
    """Binomial coefficients without math.comb, as exact ints."""
    rows = [[1]]
    for n in range(1, n_max + 1):
        prev = rows[-1]
        row = [1]
        for k in range(1, n):
            row.append(prev[k - 1] + prev[k])
        row.append(1)
        rows.append(row)
    return rows


PASCAL = pascal_binomials(40)


def binom(n, k):
    if k < 0 or k > n:
        return 0
    return PASCAL[n][k]


def hyper_oracle(N, b, r, f_model):
    threshold = compromise_threshold(r, f_model)
    total = Fraction(0)
    for k in range(threshold, r + 1):
        total += Fraction(binom(b, k) * binom(N - b, r - k), binom(N, r))
    return total


def enumeration_oracle(N, b, r, f_model):
    """Probability one shard is compromised, by enumerating draws."""
    threshold = compromise_threshold(r, f_model)
    byzantine = set(range(b))  # any fixed placement; symmetric
    hits = 0
    total = 0
    for shard in itertools.combinations(range(N), r):
        total += 1
        if len(byzantine & set(shard)) >= threshold:
            hits += 1
    return Fraction(hits, total)


# --- thresholds --------------------------------------------------------------------


def test_threshold_half_examples():
    assert compromise_threshold(3, "1/2") == 2
    assert compromise_threshold(1, "1/2") == 1
    assert compromise_threshold(61, "1/2") == 31


def test_threshold_third_examples():
    assert compromise_threshold(4, "1/3") == 2
    assert compromise_threshold(7, "1/3") == 3


def test_is_compromised_examples():
    assert is_compromised({1, 2, 3}, {1, 2}, "1/2")
    assert not is_compromised({1, 2, 3}, {1}, "1/2")
    assert not is_compromised({1, 2, 3, 4}, {1}, "1/3")
    assert is_compromised({1, 2, 3, 4}, {1, 2}, "1/3")


# --- hypergeometric ----------------------------------------------------------------


def test_hypergeometric_hand_case():
    assert hypergeometric_p_exact(6, 2, 3) == Fraction(1, 5)
    assert hypergeometric_p(6, 2, 3) == 0.2


def test_hypergeometric_edges():
    assert hypergeometric_p(100, 0, 7) == 0.0
    assert hypergeometric_p(100, 100, 7) == 1.0


def test_hypergeometric_matches_pascal_oracle_sample():
    for N in (5, 12, 19, 27):
        for b in range(N + 1):
            for r in range(1, N + 1):
                for f_model in ("1/2", "1/3"):
                    assert hypergeometric_p_exact(N, b, r, f_model) == hyper_oracle(
                        N, b, r, f_model
                    )


def test_hypergeometric_matches_enumeration_tiny():
    for N, b, r in [(6, 2, 3), (7, 3, 2), (8, 4, 3), (9, 2, 4)]:
        assert hypergeometric_p_exact(N, b, r, "1/2") == enumeration_oracle(
            N, b, r, "1/2"
        )


# --- failure probability ------------------------------------------------------------


def test_failure_probability_arithmetic():
    assert failure_probability(0.2, 2) == pytest.approx(0.36, abs=1e-15)
    assert failure_probability(0.0, 10) == 0.0
    assert failure_probability(1.0, 10) == 1.0


def test_failure_probability_tiny_p_no_cancellation():
    p = 1e-9
    m = 10**6
    exact = 1 - (1 - Fraction(1, 10**9)) ** m
    got = failure_probability(p, m)
    assert abs(got - float(exact)) / float(exact) < 1e-12
    assert got == pytest.approx(9.995e-4, rel=1e-3)


def test_failure_probability_fractional_m():
    # the N/r analytic curve uses a non-integral shard count
    assert 0 < failure_probability(0.01, 32.8) < 1


# --- shard construction ---------------------------------------------------------------


def test_build_shards_full_overlap_when_r_is_n():
    shards = build_shards(seed=1, N=12, m=5, r=12)
    assert all(len(s) == 12 for s in shards)
    assert len({frozenset(s) for s in shards}) == 1


def test_build_shards_single_matches_oracle():
    space = IdSpace(32)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(9)))
    node_ids, account_ids = generate_network(rng, 50, 4, 32)
    matrix = shard_index_matrix(node_ids, account_ids, 7)
    for i, account in enumerate(account_ids):
        want = set(oracle_closest([int(n) for n in node_ids], int(account), 7, space))
        got = {int(node_ids[j]) for j in matrix[i]}
        assert got == want


def test_shards_overlap_on_dense_networks():
    shards = build_shards(seed=3, N=100, m=200, r=11)
    overlaps = []
    for a, b in itertools.combinations(range(0, 40), 2):
        overlaps.append(len(shards[a] & shards[b]))
    assert sum(overlaps) > 0


# --- experiments -----------------------------------------------------------------------


def test_run_experiment_f_zero_never_fails():
    config = ExperimentConfig(N=40, m=10, r=5, F=Fraction(0), repetitions=3,
                              iterations=200, seed=4)
    result = run_experiment(config)
    assert result.compromised == 0
    assert result.probability == 0.0


def test_run_experiment_r1_saturates():
    config = ExperimentConfig(N=10, m=50, r=1, F=Fraction(1, 2), repetitions=2,
                              iterations=300, seed=4)
    result = run_experiment(config)
    assert result.probability > 0.99


def test_run_experiment_deterministic_per_seed():
    config = ExperimentConfig(N=60, m=30, r=5, F=Fraction(1, 4), repetitions=4,
                              iterations=500, seed=11)
    a = run_experiment(config)
    b = run_experiment(config)
    assert a.compromised == b.compromised
    assert [rep.compromised for rep in a.per_rep] == [rep.compromised for rep in b.per_rep]


def test_run_experiment_workers_match_sequential():
    config = ExperimentConfig(N=60, m=30, r=5, F=Fraction(1, 4), repetitions=4,
                              iterations=400, seed=12)
    seq = run_experiment(config, workers=1)
    par = run_experiment(config, workers=2)
    assert [r.compromised for r in seq.per_rep] == [r.compromised for r in par.per_rep]


def test_run_experiment_rejects_non_integral_b():
    config = ExperimentConfig(N=10, m=5, r=3, F=Fraction(1, 3), repetitions=1,
                              iterations=10, seed=1)
    with pytest.raises(ValueError):
        run_experiment(config)


def test_monte_carlo_matches_exhaustive_oracle_fixed_network():
    # one fixed tiny network; enumerate every byzantine subset exactly
    config = ExperimentConfig(N=8, m=2, r=3, F=Fraction(3, 8), repetitions=1,
                              iterations=100_000, seed=21)
    rep_seed = np.random.SeedSequence(config.seed).spawn(1)[0]
    rng = np.random.Generator(np.random.PCG64(rep_seed))
    node_ids, account_ids = generate_network(rng, config.N, config.m, config.bits)
    shards = [set(row.tolist()) for row in shard_index_matrix(node_ids, account_ids, config.r)]
    threshold = compromise_threshold(config.r, config.f_model)
    hits = 0
    subsets = list(itertools.combinations(range(config.N), config.byzantine_count))
    for subset in subsets:
        chosen = set(subset)
        if any(len(s & chosen) >= threshold for s in shards):
            hits += 1
    exact = hits / len(subsets)
    result = run_experiment(config)
    se = math.sqrt(exact * (1 - exact) / config.total_iterations)
    assert abs(result.probability - exact) <= 3 * se


def test_monotone_in_r_and_f():
    base = dict(N=100, m=100, F=Fraction(1, 4), repetitions=4, iterations=2_000)
    probs_r = []
    for r in (3, 5, 9):
        cfg = ExperimentConfig(r=r, seed=31, **base)
        probs_r.append(run_experiment(cfg).probability)
    assert probs_r[0] >= probs_r[1] >= probs_r[2]
    lo = run_experiment(ExperimentConfig(N=100, m=100, r=5, F=Fraction(1, 10),
                                         repetitions=4, iterations=2_000, seed=32))
    hi = run_experiment(ExperimentConfig(N=100, m=100, r=5, F=Fraction(1, 2),
                                         repetitions=4, iterations=2_000, seed=32))
    assert lo.probability <= hi.probability


# --- shard size search --------------------------------------------------------------------


def test_shard_size_grid_values():
    assert shard_size_grid(125)[:3] == [21, 41, 61]
    assert all(v % 20 == 1 for v in shard_size_grid(300))


def test_find_required_shard_size_small_network():
    r, total = find_required_shard_size(
        125, Fraction(1, 5), "1/2", seed=101, repetitions=20, iterations=500
    )
    assert r == 41
    assert total == 20 * 500


def test_find_required_shard_size_infeasible_third():
    with pytest.raises(InfeasibleParameters):
        find_required_shard_size(99, Fraction(1, 3), "1/3", seed=1,
                                 repetitions=2, iterations=50)
