"""Shard-compromise experiments: Monte Carlo and analytic.

A network is N uniform node ids plus m uniform account ids; the shard of
an account is the set of r nodes closest to it under XOR. An adversary
corrupts b = F*N nodes chosen uniformly without replacement; a shard is
compromised when its corrupted membership reaches the consensus
tolerance threshold (majority lost for f<1/2, a third for f<1/3). An
iteration fails when at least one shard is compromised.

The analytic comparison treats per-shard corruption as hypergeometric
(k corrupted of r drawn from b bad among N) and the network as m
independent shards: failure = 1 - (1-p)^m. Shards here overlap and are
proximity-correlated, so that model is an approximation; the experiments
measure how good.

The inner loop is vectorized: shards become an index matrix into the
node array, per-iteration corruption becomes a 0/1 mask, and compromise
counting is a batched gather-and-sum. Duplicate shards (common when m
is large relative to N) are collapsed first, which changes nothing for
the any-shard-compromised predicate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np

from .ident import Identifier

F_HALF = "1/2"
F_THIRD = "1/3"

_BATCH_ELEM_BUDGET = 48_000_000  # per-batch gather budget, elements


class InfeasibleParameters(ValueError):
    """No shard size below the network size can meet the target."""


def compromise_threshold(r: int, f_model: str) -> int:
    """Minimum corrupted members that compromise a shard of size r."""
    if f_model == F_HALF:
        return (r + 1) // 2  # honest majority lost at ceil(r/2)
    if f_model == F_THIRD:
        return (r - 1) // 3 + 1  # tolerance floor((r-1)/3) exceeded
    raise ValueError(f"unknown tolerance model {f_model!r} (want '1/2' or '1/3')")


def is_compromised(
    shard: Set[Identifier] | FrozenSet[Identifier] | Sequence[Identifier],
    byzantine: Set[Identifier],
    f_model: str = F_HALF,
) -> bool:
    shard = set(shard)
    return len(shard & set(byzantine)) >= compromise_threshold(len(shard), f_model)


def hypergeometric_p_exact(N: int, b: int, r: int, f_model: str = F_HALF) -> Fraction:
    """Exact probability that one r-shard drawn from N nodes is compromised."""
    if not (0 <= b <= N and 1 <= r <= N):
        raise ValueError("require 0 <= b <= N and 1 <= r <= N")
    threshold = compromise_threshold(r, f_model)
    numerator = sum(comb(b, k) * comb(N - b, r - k) for k in range(threshold, r + 1))
    return Fraction(numerator, comb(N, r))


def hypergeometric_p(N: int, b: int, r: int, f_model: str = F_HALF) -> float:
    return float(hypergeometric_p_exact(N, b, r, f_model))


def failure_probability(p: float, m: float) -> float:
    """1 - (1-p)^m without cancellation for tiny p."""
    if m < 0:
        raise ValueError("m must be >= 0")
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    return -math.expm1(m * math.log1p(-p))


# --- network generation ---------------------------------------------------------


def _distinct_uniform(
    rng: np.random.Generator, count: int, bits: int, exclude: Set[int] = frozenset()
) -> np.ndarray:
    out = np.empty(count, dtype=np.uint64)
    seen = set(exclude)
    filled = 0
    while filled < count:
        draw = rng.integers(0, 1 << bits, size=count - filled, dtype=np.uint64)
        for value in draw.tolist():
            if value in seen:
                continue
            seen.add(value)
            out[filled] = value
            filled += 1
    return out


def generate_network(
    rng: np.random.Generator, N: int, m: int, bits: int = 32
) -> Tuple[np.ndarray, np.ndarray]:
    """(node_ids, account_ids), all distinct across both populations."""
    node_ids = _distinct_uniform(rng, N, bits)
    account_ids = _distinct_uniform(rng, m, bits, exclude=set(node_ids.tolist()))
    return node_ids, account_ids


def shard_index_matrix(
    node_ids: np.ndarray, account_ids: np.ndarray, r: int
) -> np.ndarray:
    """(m, r) matrix of node indices: row i is the shard of account i."""
    m = len(account_ids)
    out = np.empty((m, r), dtype=np.int64)
    for i, account in enumerate(account_ids):
        dist = np.bitwise_xor(node_ids, account)
        if r < len(node_ids):
            out[i] = np.argpartition(dist, r - 1)[:r]
        else:
            out[i] = np.argsort(dist)
    return out


def build_shards(
    seed: int, N: int, m: int, r: int, bits: int = 32
) -> List[FrozenSet[Identifier]]:
    """The m proximity shards of a fresh random network, as id sets."""
    if r > N:
        raise ValueError("r must be <= N")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    node_ids, account_ids = generate_network(rng, N, m, bits)
    matrix = shard_index_matrix(node_ids, account_ids, r)
    return [frozenset(int(node_ids[j]) for j in row) for row in matrix]


# --- experiment ------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    N: int
    m: int
    r: int
    F: Fraction
    f_model: str = F_HALF
    repetitions: int = 20
    iterations: int = 5000
    seed: int = 0
    bits: int = 32

    @property
    def byzantine_count(self) -> int:
        b = self.F * self.N
        if b.denominator != 1:
            raise ValueError(f"F*N must be integral, got F={self.F} N={self.N}")
        return int(b)

    def validate(self) -> None:
        if self.r > self.N:
            raise ValueError("r must be <= N")
        if self.r < 1 or self.N < 1 or self.m < 1:
            raise ValueError("N, m, r must be positive")
        if self.iterations < 1 or self.repetitions < 1:
            raise ValueError("iterations and repetitions must be >= 1")
        if not (0 <= self.F <= 1):
            raise ValueError("F must be in [0, 1]")
        compromise_threshold(self.r, self.f_model)
        _ = self.byzantine_count

    @property
    def total_iterations(self) -> int:
        return self.repetitions * self.iterations


@dataclass
class RepetitionResult:
    compromised: int
    iterations: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    per_rep: List[RepetitionResult] = field(default_factory=list)

    @property
    def compromised(self) -> int:
        return sum(rep.compromised for rep in self.per_rep)

    @property
    def total(self) -> int:
        return sum(rep.iterations for rep in self.per_rep)

    @property
    def probability(self) -> float:
        return self.compromised / self.total if self.total else 0.0

    @property
    def stderr(self) -> float:
        if not self.total:
            return 0.0
        p = self.probability
        return math.sqrt(p * (1.0 - p) / self.total)


def _count_compromised(
    rng: np.random.Generator,
    shards: np.ndarray,
    N: int,
    b: int,
    threshold: int,
    iterations: int,
    stop_at_first: bool = False,
) -> Tuple[int, int]:
    """(compromised_iterations, iterations_run) for one fixed network.

    shards must be given in rank space: member values are positions in
    the id-sorted node order. Proximity shards occupy narrow windows of
    that order, so a prefix-sum count over each shard's [lo, hi] window
    bounds its corrupted membership from above; only window-hot
    (iteration, shard) pairs get an exact membership count.
    """
    if b == 0 or threshold > b:
        return 0, iterations
    unique = np.unique(np.sort(shards, axis=1), axis=0)
    u, r = unique.shape
    lo = unique[:, 0]
    hi = unique[:, -1]
    batch = max(1, min(2048, _BATCH_ELEM_BUDGET // max(1, 8 * N + 16 * u)))
    compromised = 0
    done = 0
    while done < iterations:
        q = min(batch, iterations - done)
        draws = rng.random((q, N))
        byz_idx = np.argpartition(draws, b - 1, axis=1)[:, :b]
        mask = np.zeros((q, N), dtype=np.int32)
        np.put_along_axis(mask, byz_idx, 1, axis=1)
        cum = np.zeros((q, N + 1), dtype=np.int32)
        np.cumsum(mask, axis=1, out=cum[:, 1:])
        window = cum[:, hi + 1] - cum[:, lo]
        hot_it, hot_sh = np.nonzero(window >= threshold)
        if hot_it.size:
            exact = mask[hot_it[:, None], unique[hot_sh]].sum(axis=1)
            bad_iters = np.unique(hot_it[exact >= threshold])
            compromised += int(bad_iters.size)
        done += q
        if stop_at_first and compromised:
            return compromised, done
    return compromised, done


def _run_repetition(
    config: ExperimentConfig,
    seed_seq: np.random.SeedSequence,
    stop_at_first: bool = False,
) -> RepetitionResult:
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    node_ids, account_ids = generate_network(rng, config.N, config.m, config.bits)
    shards = shard_index_matrix(node_ids, account_ids, config.r)
    # relabel members by rank in the id-sorted order; corruption sampling is
    # uniform either way and shards become narrow rank windows
    rank = np.empty(config.N, dtype=np.int64)
    rank[np.argsort(node_ids)] = np.arange(config.N)
    shards = rank[shards]
    threshold = compromise_threshold(config.r, config.f_model)
    compromised, done = _count_compromised(
        rng,
        shards,
        config.N,
        config.byzantine_count,
        threshold,
        config.iterations,
        stop_at_first,
    )
    return RepetitionResult(compromised=compromised, iterations=done)


def run_experiment(
    config: ExperimentConfig,
    workers: int = 1,
    stop_at_first: bool = False,
) -> ExperimentResult:
    """Monte Carlo failure probability for one parameter point.

    Each repetition draws a fresh network and shard set, then samples a
    fresh byzantine subset per iteration. Deterministic per seed; with
    workers > 1, repetitions run in parallel and are reduced in
    repetition order so the result is identical.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    children = root.spawn(config.repetitions)
    result = ExperimentResult(config=config)
    if workers > 1 and not stop_at_first:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_repetition, config, child) for child in children
            ]
            for future in futures:
                result.per_rep.append(future.result())
        return result
    for child in children:
        rep = _run_repetition(config, child, stop_at_first)
        result.per_rep.append(rep)
        if stop_at_first and rep.compromised:
            break
    return result


# --- required shard size -----------------------------------------------------------


SHARD_SIZE_STEP = 20
SHARD_SIZE_START = 21


def shard_size_grid(N: int) -> List[int]:
    return list(range(SHARD_SIZE_START, N + 1, SHARD_SIZE_STEP))


def find_required_shard_size(
    N: int,
    F: Fraction,
    f_model: str = F_HALF,
    seed: int = 0,
    repetitions: int = 20,
    iterations: int = 5000,
    m: Optional[int] = None,
    bits: int = 32,
) -> Tuple[int, int]:
    """Smallest grid shard size with zero compromised iterations.

    Probes r = 21, 41, 61, ... and accepts the first size whose full
    repetitions*iterations run contains no compromised shard anywhere.
    Returns (r, total_iterations_of_accepting_run). Raises
    InfeasibleParameters when even a network-sized shard is compromised
    by construction (e.g. a third of nodes byzantine under f < 1/3).
    """
    m = 2 * N if m is None else m
    b = ExperimentConfig(N, m, 1, F, f_model, seed=seed).byzantine_count
    if b >= compromise_threshold(N, f_model):
        raise InfeasibleParameters(
            f"b={b} corrupted meets the threshold even at r=N={N}"
        )
    root = np.random.SeedSequence(seed)
    for r in shard_size_grid(N):
        probe_seed = root.spawn(1)[0]
        config = ExperimentConfig(
            N=N,
            m=m,
            r=r,
            F=F,
            f_model=f_model,
            repetitions=repetitions,
            iterations=iterations,
            seed=0,
            bits=bits,
        )
        children = probe_seed.spawn(repetitions)
        clean = True
        total = 0
        for child in children:
            rep = _run_repetition(config, child, stop_at_first=True)
            total += rep.iterations
            if rep.compromised:
                clean = False
                break
        if clean:
            return r, total
    raise InfeasibleParameters(f"no shard size on the grid up to N={N} suffices")


# --- analytic comparison --------------------------------------------------------------


@dataclass
class AnalyticComparison:
    r: int
    observed: float
    stderr: float
    analytic_at_m: float
    analytic_at_n: float
    analytic_at_n_over_r: float


def compare_to_analytic(
    base: ExperimentConfig, r_values: Sequence[int], workers: int = 1
) -> List[AnalyticComparison]:
    """Observed failure probability next to three analytic shard counts.

    The analytic model needs a shard count; m (as simulated) and N both
    ignore overlap, while m = N/r approximates the number of disjoint
    shards the same nodes could form and tracks the observations best.
    """
    rows: List[AnalyticComparison] = []
    b = base.byzantine_count
    for r in r_values:
        config = ExperimentConfig(
            N=base.N,
            m=base.m,
            r=r,
            F=base.F,
            f_model=base.f_model,
            repetitions=base.repetitions,
            iterations=base.iterations,
            seed=base.seed,
            bits=base.bits,
        )
        result = run_experiment(config, workers=workers)
        p = hypergeometric_p(base.N, b, r, base.f_model)
        rows.append(
            AnalyticComparison(
                r=r,
                observed=result.probability,
                stderr=result.stderr,
                analytic_at_m=failure_probability(p, base.m),
                analytic_at_n=failure_probability(p, base.N),
                analytic_at_n_over_r=failure_probability(p, base.N / r),
            )
        )
    return rows


# --- CSV ------------------------------------------------------------------------------

RESULT_CSV_HEADER = "N,m,r,F,f,iterations,compromised,probability,stderr,seed"


def result_csv_row(result: ExperimentResult) -> str:
    c = result.config
    return (
        f"{c.N},{c.m},{c.r},{c.F},{c.f_model},{result.total},"
        f"{result.compromised},{result.probability!r},{result.stderr!r},{c.seed}"
    )
