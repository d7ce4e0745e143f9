"""Kademlia-style routing: k-buckets and iterative closest-node lookup.

A routing table keeps one bucket per bit of the identifier space; bucket
i holds peers whose XOR distance to the owner has its highest set bit at
position i. Lookups iteratively refine a pool of candidates until no
node closer than the current r-th best can be found.

oracle_closest is the global-knowledge reference: a full sort of the
whole population. It doubles as the shard constructor for the security
experiments and as the ground truth that lookup tests compare against.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set

from .ident import IdSpace, Identifier

DEFAULT_K_BUCKET = 20
DEFAULT_ALPHA = 3


class RoutingTable:
    """Per-node view of the network, bucketed by distance prefix."""

    def __init__(
        self,
        owner: Identifier,
        space: Optional[IdSpace] = None,
        k_bucket: int = DEFAULT_K_BUCKET,
    ):
        self.space = space or IdSpace()
        self.owner = self.space.check(owner)
        self.k_bucket = k_bucket
        # bucket lists are ordered least- to most-recently seen
        self.buckets: List[List[Identifier]] = [[] for _ in range(self.space.bits)]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def __contains__(self, node: Identifier) -> bool:
        idx = self.space.bucket_index(self.owner, node)
        return idx >= 0 and node in self.buckets[idx]

    def entries(self) -> List[Identifier]:
        out: List[Identifier] = []
        for bucket in self.buckets:
            out.extend(bucket)
        return out

    def update(
        self,
        node: Identifier,
        is_alive: Optional[Callable[[Identifier], bool]] = None,
    ) -> None:
        """Insert or refresh a peer.

        The owner's own id is rejected. When the destination bucket is
        full, the least-recently-seen entry is pinged (via is_alive):
        if it is still live it is refreshed and the newcomer dropped,
        otherwise it is evicted. With no liveness probe the resident is
        presumed live.
        """
        if node == self.owner:
            return
        idx = self.space.bucket_index(self.owner, node)
        bucket = self.buckets[idx]
        if node in bucket:
            bucket.remove(node)
            bucket.append(node)
            return
        if len(bucket) < self.k_bucket:
            bucket.append(node)
            return
        lru = bucket[0]
        if is_alive is not None and not is_alive(lru):
            bucket.pop(0)
            bucket.append(node)
        else:
            bucket.pop(0)
            bucket.append(lru)

    def remove(self, node: Identifier) -> None:
        idx = self.space.bucket_index(self.owner, node)
        if idx >= 0 and node in self.buckets[idx]:
            self.buckets[idx].remove(node)

    def closest(self, target: Identifier, count: int) -> List[Identifier]:
        """The count known peers closest to target, distance-ascending."""
        if count < 1:
            raise ValueError("count must be >= 1")
        return self.space.closest(self.entries(), target, count)


def oracle_closest(
    all_nodes: Sequence[Identifier],
    target: Identifier,
    r: int,
    space: Optional[IdSpace] = None,
) -> List[Identifier]:
    """Ground-truth r closest nodes by full sort over the population."""
    space = space or IdSpace()
    return space.closest(all_nodes, target, r)


@dataclass
class LookupResult:
    nodes: List[Identifier]
    rounds: int
    partial: bool = False


@dataclass
class LookupPool:
    """Candidate pool for one iterative lookup."""

    target: Identifier
    space: IdSpace
    candidates: Set[Identifier] = field(default_factory=set)
    queried: Set[Identifier] = field(default_factory=set)
    failed: Set[Identifier] = field(default_factory=set)

    def add(self, nodes: Sequence[Identifier]) -> None:
        self.candidates.update(nodes)

    def ranked(self) -> List[Identifier]:
        live = self.candidates - self.failed
        return self.space.sort_by_distance(live, self.target)

    def next_batch(self, alpha: int, width: int) -> List[Identifier]:
        """Up to alpha unqueried candidates among the width closest."""
        out = []
        for node in self.ranked()[:width]:
            if node not in self.queried:
                out.append(node)
                if len(out) == alpha:
                    break
        return out


# A query endpoint takes (node, target, count) and returns the count
# closest peers that node knows, or None when the request times out.
QueryFn = Callable[[Identifier, Identifier, int], Optional[List[Identifier]]]


def iterative_find_nodes(
    query: QueryFn,
    start_table: RoutingTable,
    target: Identifier,
    r: int,
    alpha: int = DEFAULT_ALPHA,
) -> LookupResult:
    """Find the r nodes closest to target by iterative querying.

    Each round queries up to alpha of the closest unqueried candidates.
    The lookup stops once every candidate among the r closest has been
    queried and a final full-width round discovers nothing closer than
    the current r-th best. If every request in a round times out the
    best-known set is returned with partial=True.
    """
    space = start_table.space
    pool = LookupPool(target=target, space=space)
    pool.add(start_table.closest(target, max(r, start_table.k_bucket)))
    pool.add([start_table.owner])
    rounds = 0
    reply_count = max(r, start_table.k_bucket)
    while True:
        batch = pool.next_batch(alpha, width=r)
        if not batch:
            # top-r all queried; sweep any remaining unqueried candidate that
            # could still displace the r-th best
            batch = pool.next_batch(alpha, width=len(pool.candidates))
            ranked = pool.ranked()
            if not batch or (
                len(ranked) >= r
                and all(
                    space.distance(b, target) > space.distance(ranked[r - 1], target)
                    for b in batch
                )
            ):
                return LookupResult(ranked[:r], rounds)
        rounds += 1
        any_reply = False
        for node in batch:
            pool.queried.add(node)
            reply = query(node, target, reply_count)
            if reply is None:
                pool.failed.add(node)
                continue
            any_reply = True
            pool.add(reply)
        if not any_reply:
            return LookupResult(pool.ranked()[:r], rounds, partial=True)


class StableNetwork:
    """Fully-bootstrapped population with synchronous query dispatch.

    Models a quiescent network: every node has joined via the standard
    procedure (seed the table with a bootstrap contact, then look up
    your own id) and no churn is in progress. Used by lookup tests and
    as the discovery backend for protocol simulations.
    """

    def __init__(
        self,
        node_ids: Sequence[Identifier],
        space: Optional[IdSpace] = None,
        k_bucket: int = DEFAULT_K_BUCKET,
        alpha: int = DEFAULT_ALPHA,
    ):
        self.space = space or IdSpace()
        self.k_bucket = k_bucket
        self.alpha = alpha
        self.tables: Dict[Identifier, RoutingTable] = {}
        self.node_ids: List[Identifier] = []
        bootstrap: Optional[Identifier] = None
        for ident in node_ids:
            self.join(ident, bootstrap)
            if bootstrap is None:
                bootstrap = ident

    def query(
        self, node: Identifier, target: Identifier, count: int
    ) -> Optional[List[Identifier]]:
        table = self.tables.get(node)
        if table is None:
            return None
        return table.closest(target, count)

    def join(self, ident: Identifier, bootstrap: Optional[Identifier]) -> None:
        table = RoutingTable(ident, self.space, self.k_bucket)
        self.tables[ident] = table
        self.node_ids.append(ident)
        if bootstrap is None:
            return
        table.update(bootstrap)

        def learning_query(node, target, count):
            reply = self.query(node, target, count)
            if reply is not None:
                # contacted peers learn about the joiner, and the joiner
                # records both the peer and everything it returned
                self.tables[node].update(ident)
                table.update(node)
                for found in reply:
                    if found != ident:
                        table.update(found)
            return reply

        iterative_find_nodes(learning_query, table, ident, self.k_bucket, self.alpha)
        # one neighborhood sweep: ask the closest known peers about ourselves
        # so adjacent nodes end up knowing each other densely
        for peer in table.closest(ident, self.k_bucket):
            learning_query(peer, ident, self.k_bucket)
        # classic join also refreshes buckets beyond the nearest neighbor;
        # one probe per still-empty bucket keeps every inhabited prefix
        # region reachable from everywhere
        nearest = table.closest(ident, 1)
        start = self.space.distance(ident, nearest[0]).bit_length() - 1
        for i in range(start + 1, self.space.bits):
            if table.buckets[i]:
                continue
            low_bits = random.Random(ident ^ i).getrandbits(i) if i else 0
            probe = (ident ^ ((1 << i) | low_bits)) & (self.space.size - 1)
            for peer in table.closest(probe, self.alpha):
                learning_query(peer, probe, self.k_bucket)

    def lookup(self, origin: Identifier, target: Identifier, r: int) -> LookupResult:
        return iterative_find_nodes(
            self.query, self.tables[origin], target, r, self.alpha
        )

    def closest(self, target: Identifier, count: int) -> List[Identifier]:
        return oracle_closest(self.node_ids, target, count, self.space)
