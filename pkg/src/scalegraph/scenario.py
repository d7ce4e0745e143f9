"""Scenario files: schema, world construction, execution, assertions.

A scenario JSON document pins everything a protocol run needs: the node
and account populations (explicit hex ids or a seeded count), fault
assignments, the transaction script, timing constants, the deadlock
policy, and the declared assertions. Identical scenario + seed always
produces a byte-identical trace.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .consensus import (
    COUNT_NAIVE,
    COUNT_PER_GROUP,
    POLICY_PROACTIVE,
    POLICY_TIMEOUT,
    ProtocolConfig,
    ValidatorNode,
)
from .ident import IdSpace, Identifier
from .ledger import Authenticator, Transaction
from .simnet import (
    BYZANTINE,
    BYZANTINE_STRATEGIES,
    CRASHED,
    DEFAULT_DELAY_MAX,
    DEFAULT_DELAY_MIN,
    DEFAULT_DELTA,
    SLUGGISH,
    FaultProfile,
    Simulator,
    Trace,
)


class ScenarioError(ValueError):
    """Schema violation; carries the offending field path."""

    def __init__(self, path: str, problem: str):
        self.path = path
        self.problem = problem
        super().__init__(f"{path}: {problem}")


def _expect(cond: bool, path: str, problem: str) -> None:
    if not cond:
        raise ScenarioError(path, problem)


@dataclass
class TxSpec:
    at: int
    sender: int  # index into account list
    receiver: int
    amount: int
    nonce: Optional[int] = None
    via: Optional[int] = None  # index into node list; default closest to sender


@dataclass
class Scenario:
    seed: int
    r: int
    name: str = "scenario"
    bits: int = 32
    delta: int = DEFAULT_DELTA
    delay_min: int = DEFAULT_DELAY_MIN
    delay_max: int = DEFAULT_DELAY_MAX
    node_count: int = 0
    node_ids: Optional[List[Identifier]] = None
    account_count: int = 0
    account_ids: Optional[List[Identifier]] = None
    initial_grant: int = 1000
    byzantine: List[Tuple[int, str, Dict[str, Any]]] = field(default_factory=list)
    crashes: List[Tuple[int, int]] = field(default_factory=list)  # (node idx, at)
    sluggish: List[Tuple[int, List[Tuple[int, int]]]] = field(default_factory=list)
    transactions: List[TxSpec] = field(default_factory=list)
    deadlock_policy: str = POLICY_PROACTIVE
    vote_counting: str = COUNT_PER_GROUP
    horizon: Optional[int] = None
    leader_timeout: Optional[int] = None
    tip_timeout: Optional[int] = None
    lock_expiry: Optional[int] = None
    tx_expiry: Optional[int] = None
    max_retries: int = 3
    replication_k: Optional[int] = None
    replication_period: Optional[int] = 0  # off by default for protocol runs
    churn: List[Dict[str, Any]] = field(default_factory=list)
    assertions: Dict[str, Any] = field(default_factory=dict)

    def resolved_horizon(self) -> int:
        return self.horizon if self.horizon is not None else 100 * self.delta


def _parse_node_ref(value: Any, path: str, count: int, space: IdSpace) -> int:
    """A node/account reference: integer index or explicit hex id is resolved later."""
    _expect(isinstance(value, int) and not isinstance(value, bool), path, "expected integer index")
    _expect(0 <= value < count, path, f"index out of range [0, {count})")
    return value


def load_scenario(doc: Dict[str, Any]) -> Scenario:
    """Validate a parsed JSON document into a Scenario."""
    _expect(isinstance(doc, dict), "scenario", "expected a JSON object")
    _expect("seed" in doc, "scenario.seed", "required")
    _expect(isinstance(doc["seed"], int), "scenario.seed", "expected integer")
    _expect("r" in doc, "scenario.r", "required")
    _expect(
        isinstance(doc["r"], int) and doc["r"] >= 1, "scenario.r", "expected integer >= 1"
    )

    bits = doc.get("bits", 32)
    _expect(
        isinstance(bits, int) and bits > 0 and bits % 4 == 0,
        "scenario.bits",
        "expected positive multiple of 4",
    )
    space = IdSpace(bits)

    sc = Scenario(seed=doc["seed"], r=doc["r"], bits=bits)
    sc.name = doc.get("name", "scenario")
    sc.delta = doc.get("delta", DEFAULT_DELTA)
    delay = doc.get("delay", {})
    sc.delay_min = delay.get("min", DEFAULT_DELAY_MIN)
    sc.delay_max = delay.get("max", DEFAULT_DELAY_MAX)
    _expect(
        0 < sc.delay_min <= sc.delay_max <= sc.delta,
        "scenario.delay",
        "require 0 < min <= max <= delta",
    )

    nodes = doc.get("nodes")
    _expect(nodes is not None, "scenario.nodes", "required")
    if isinstance(nodes, int):
        sc.node_count = nodes
    elif isinstance(nodes, dict) and "count" in nodes:
        sc.node_count = nodes["count"]
    elif isinstance(nodes, dict) and "ids" in nodes:
        sc.node_ids = [space.from_hex(h) for h in nodes["ids"]]
        sc.node_count = len(sc.node_ids)
    else:
        raise ScenarioError("scenario.nodes", "expected count or ids")
    _expect(sc.node_count >= 1, "scenario.nodes", "need at least one node")
    _expect(sc.r <= sc.node_count, "scenario.r", "r must be <= node count")

    accounts = doc.get("accounts", {"count": 0})
    if isinstance(accounts, int):
        sc.account_count = accounts
    elif isinstance(accounts, dict) and "ids" in accounts:
        sc.account_ids = [space.from_hex(h) for h in accounts["ids"]]
        sc.account_count = len(sc.account_ids)
        sc.initial_grant = accounts.get("initial_grant", 1000)
    elif isinstance(accounts, dict):
        sc.account_count = accounts.get("count", 0)
        sc.initial_grant = accounts.get("initial_grant", 1000)
    else:
        raise ScenarioError("scenario.accounts", "expected count or ids")

    for i, entry in enumerate(doc.get("byzantine", [])):
        path = f"scenario.byzantine[{i}]"
        _expect(isinstance(entry, dict), path, "expected object")
        node = _parse_node_ref(entry.get("node"), path + ".node", sc.node_count, space)
        strategy = entry.get("strategy")
        _expect(
            strategy in BYZANTINE_STRATEGIES,
            path + ".strategy",
            f"expected one of {BYZANTINE_STRATEGIES}",
        )
        sc.byzantine.append((node, strategy, entry.get("params", {})))

    for i, entry in enumerate(doc.get("crashes", [])):
        path = f"scenario.crashes[{i}]"
        node = _parse_node_ref(entry.get("node"), path + ".node", sc.node_count, space)
        at = entry.get("at", 0)
        _expect(isinstance(at, int) and at >= 0, path + ".at", "expected time >= 0")
        sc.crashes.append((node, at))

    for i, entry in enumerate(doc.get("sluggish", [])):
        path = f"scenario.sluggish[{i}]"
        node = _parse_node_ref(entry.get("node"), path + ".node", sc.node_count, space)
        intervals = entry.get("intervals", [])
        _expect(isinstance(intervals, list) and intervals, path + ".intervals", "required")
        parsed = []
        for j, pair in enumerate(intervals):
            _expect(
                isinstance(pair, list) and len(pair) == 2 and pair[0] < pair[1],
                f"{path}.intervals[{j}]",
                "expected [start, end) with start < end",
            )
            parsed.append((pair[0], pair[1]))
        sc.sluggish.append((node, parsed))

    for i, entry in enumerate(doc.get("transactions", [])):
        path = f"scenario.transactions[{i}]"
        _expect(isinstance(entry, dict), path, "expected object")
        at = entry.get("at", 0)
        _expect(isinstance(at, int) and at >= 0, path + ".at", "expected time >= 0")
        sender = _parse_node_ref(
            entry.get("sender"), path + ".sender", sc.account_count, space
        )
        receiver = _parse_node_ref(
            entry.get("receiver"), path + ".receiver", sc.account_count, space
        )
        _expect(sender != receiver, path, "sender and receiver must differ")
        amount = entry.get("amount")
        _expect(
            isinstance(amount, int) and amount > 0, path + ".amount", "expected integer > 0"
        )
        nonce = entry.get("nonce")
        via = entry.get("via")
        if via is not None:
            via = _parse_node_ref(via, path + ".via", sc.node_count, space)
        sc.transactions.append(TxSpec(at, sender, receiver, amount, nonce, via))

    policy = doc.get("deadlock_policy", POLICY_PROACTIVE)
    _expect(
        policy in (POLICY_PROACTIVE, POLICY_TIMEOUT),
        "scenario.deadlock_policy",
        "expected proactive or timeout",
    )
    sc.deadlock_policy = policy

    counting = doc.get("vote_counting", COUNT_PER_GROUP)
    _expect(
        counting in (COUNT_PER_GROUP, COUNT_NAIVE),
        "scenario.vote_counting",
        "expected per-group or naive",
    )
    sc.vote_counting = counting

    for key in (
        "horizon",
        "leader_timeout",
        "tip_timeout",
        "lock_expiry",
        "tx_expiry",
        "replication_k",
        "replication_period",
    ):
        if key in doc:
            _expect(
                isinstance(doc[key], int) and doc[key] >= 0,
                f"scenario.{key}",
                "expected integer >= 0",
            )
            setattr(sc, key, doc[key])
    if "max_retries" in doc:
        _expect(
            isinstance(doc["max_retries"], int) and doc["max_retries"] >= 0,
            "scenario.max_retries",
            "expected integer >= 0",
        )
        sc.max_retries = doc["max_retries"]

    for i, entry in enumerate(doc.get("churn", [])):
        path = f"scenario.churn[{i}]"
        _expect(isinstance(entry, dict), path, "expected object")
        action = entry.get("action")
        _expect(action in ("join", "leave"), path + ".action", "expected join or leave")
        at = entry.get("at", 0)
        _expect(isinstance(at, int) and at >= 0, path + ".at", "expected time >= 0")
        if action == "leave":
            _parse_node_ref(entry.get("node"), path + ".node", sc.node_count, space)
        else:
            _expect(isinstance(entry.get("id"), str), path + ".id", "expected hex id")
    sc.churn = doc.get("churn", [])
    sc.assertions = doc.get("assertions", {})
    _expect(isinstance(sc.assertions, dict), "scenario.assertions", "expected object")
    return sc


def load_scenario_file(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}:{exc.lineno}", exc.msg) from exc
    return load_scenario(doc)


@dataclass
class World:
    """A fully-built simulation ready to run, plus id bookkeeping."""

    scenario: Scenario
    sim: Simulator
    space: IdSpace
    node_ids: List[Identifier]
    account_ids: List[Identifier]
    auth: Authenticator
    config: ProtocolConfig

    def node(self, idx: int) -> ValidatorNode:
        return self.sim.nodes[self.node_ids[idx]]

    def honest_node_ids(self) -> List[Identifier]:
        return [
            i
            for i in self.node_ids
            if self.sim.faults[i].behavior == "honest"
        ]


def build_world(sc: Scenario) -> World:
    space = IdSpace(sc.bits)
    rng = random.Random(sc.seed)
    sim = Simulator(
        seed=sc.seed,
        space=space,
        delta=sc.delta,
        delay_min=sc.delay_min,
        delay_max=sc.delay_max,
    )

    if sc.node_ids is not None:
        node_ids = list(sc.node_ids)
    else:
        node_ids = space.distinct_identifiers(rng, sc.node_count)
    if sc.account_ids is not None:
        account_ids = list(sc.account_ids)
    else:
        account_ids = space.distinct_identifiers(rng, sc.account_count, exclude=node_ids)

    config = ProtocolConfig(
        r=sc.r,
        deadlock_policy=sc.deadlock_policy,
        vote_counting=sc.vote_counting,
        leader_timeout=sc.leader_timeout,
        tip_timeout=sc.tip_timeout,
        lock_expiry=sc.lock_expiry,
        tx_expiry=sc.tx_expiry,
        max_retries=sc.max_retries,
        replication_k=sc.replication_k,
        replication_period=sc.replication_period,
    )

    profiles: Dict[int, FaultProfile] = {}
    for idx, strategy, params in sc.byzantine:
        profiles[idx] = FaultProfile(
            node=node_ids[idx], behavior=BYZANTINE, strategy=strategy, params=params
        )
    for idx, at in sc.crashes:
        profiles[idx] = FaultProfile(node=node_ids[idx], behavior=CRASHED, crash_at=at)
    for idx, intervals in sc.sluggish:
        profiles[idx] = FaultProfile(
            node=node_ids[idx],
            behavior=SLUGGISH,
            sluggish_intervals=tuple(intervals),
        )

    for idx, ident in enumerate(node_ids):
        node = ValidatorNode(ident, sim, config)
        sim.add_node(node, profiles.get(idx))

    for account in account_ids:
        sim.accounts[account] = sc.initial_grant

    # seed storage: the replication-k closest nodes hold each account chain
    k = config.resolved(sc.delta).replication_k
    for account in account_ids:
        for ident in sim.closest(account, k):
            sim.nodes[ident].setup_storage(account)

    auth = Authenticator(space)
    return World(sc, sim, space, node_ids, account_ids, auth, config)


def schedule_script(world: World) -> None:
    sc = world.scenario
    sim = world.sim
    auto_nonce: Dict[int, int] = {}
    injections = []
    for spec in sc.transactions:
        if spec.nonce is None:
            auto_nonce[spec.sender] = auto_nonce.get(spec.sender, 0) + 1
            nonce = auto_nonce[spec.sender]
        else:
            nonce = spec.nonce
            auto_nonce[spec.sender] = max(auto_nonce.get(spec.sender, 0), nonce)
        tx = Transaction(
            sender=world.account_ids[spec.sender],
            receiver=world.account_ids[spec.receiver],
            amount=spec.amount,
            nonce=nonce,
        ).signed(world.auth)
        if spec.via is not None:
            via = world.node_ids[spec.via]
        else:
            via = sim.closest(tx.sender, 1)[0]
        injections.append((spec.at, via, tx))

    def make_inject(via_id, tx_obj):
        def run():
            sim.nodes[via_id].receive_client_tx(tx_obj)

        return run

    for at, via, tx in injections:
        sim.schedule_action(at, make_inject(via, tx))

    for i, entry in enumerate(sc.churn):
        at = entry.get("at", 0)
        action = entry.get("action")
        if action == "leave":
            idx = entry["node"]
            ident = world.node_ids[idx]
            sim.schedule_action(
                at, (lambda n: (lambda: sim.remove_node(n)))(ident)
            )
        elif action == "join":
            ident = world.space.from_hex(entry["id"])

            def make_join(new_id):
                def run():
                    node = ValidatorNode(new_id, sim, world.config)
                    sim.add_node(node)
                    sim.emit("join", node=world.space.to_hex(new_id))

                return run

            world.node_ids.append(ident)
            sim.schedule_action(at, make_join(ident))
    sim.injections_done = True


def run_scenario(sc: Scenario) -> Tuple[Trace, World]:
    world = build_world(sc)
    schedule_script(world)
    trace = world.sim.run(sc.resolved_horizon())
    return trace, world


# --- assertion evaluation -------------------------------------------------------


@dataclass
class AssertionResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        mark = "PASS" if self.ok else "FAIL"
        return f"[{mark}] {self.name}: {self.detail}"


def committed_consistency(trace: Trace, world: World) -> Tuple[bool, str]:
    """No two honest nodes commit different blocks at the same (account, height)."""
    honest = {world.space.to_hex(i) for i in world.honest_node_ids()}
    slots: Dict[Tuple[str, int], str] = {}
    for ev in trace.commits():
        if ev["node"] not in honest:
            continue
        key = (ev["account"], ev["height"])
        block = ev["block"]
        if key in slots and slots[key] != block:
            return False, f"conflicting commit at {key}: {slots[key][:12]} vs {block[:12]}"
        slots.setdefault(key, block)
    return True, f"{len(slots)} committed slots consistent"


def overdraft_free(world: World) -> Tuple[bool, str]:
    """Replay every honest replica's chains through the balance oracle."""
    for ident in world.honest_node_ids():
        node = world.sim.nodes[ident]
        for account, chain in node.chains.items():
            bal = chain.initial_grant
            for block in chain.blocks:
                bal += block.tx.amount if block.tx.receiver == account else -block.tx.amount
                if bal < 0:
                    return False, (
                        f"overdraft on {world.space.to_hex(account)} at "
                        f"{world.space.to_hex(ident)}"
                    )
    return True, "all honest replica chains non-negative"


def evaluate_assertions(trace: Trace, world: World) -> List[AssertionResult]:
    sc = world.scenario
    results: List[AssertionResult] = []
    committed = trace.committed_tx_ids()
    injected = {e["tx"] for e in trace.select("inject")}

    for name, expected in sc.assertions.items():
        if name == "all_committed":
            ok = injected <= committed if expected else not (injected <= committed)
            results.append(
                AssertionResult(name, ok, f"{len(committed & injected)}/{len(injected)} committed")
            )
        elif name == "committed_count":
            ok = len(committed) == expected
            results.append(
                AssertionResult(name, ok, f"{len(committed)} committed, want {expected}")
            )
        elif name == "uncommitted_count":
            n = len(injected - committed)
            ok = n == expected
            results.append(AssertionResult(name, ok, f"{n} uncommitted, want {expected}"))
        elif name == "no_conflicting_commits":
            ok, detail = committed_consistency(trace, world)
            ok = ok if expected else not ok
            results.append(AssertionResult(name, ok, detail))
        elif name == "no_overdraft":
            ok, detail = overdraft_free(world)
            ok = ok if expected else not ok
            results.append(AssertionResult(name, ok, detail))
        elif name == "max_commit_latency":
            worst, ok = 0, True
            for ev in trace.select("inject"):
                first = trace.first_commit_time(ev["tx"])
                if first is None:
                    continue
                worst = max(worst, first - ev["t"])
            ok = worst <= expected
            results.append(
                AssertionResult(name, ok, f"worst latency {worst} <= {expected}")
            )
        elif name == "view_changes_exactly":
            views = {e["view"] for e in trace.view_changes()}
            ok = len(views) == expected
            results.append(
                AssertionResult(name, ok, f"{sorted(views)} view(s) reached, want {expected}")
            )
        elif name == "view_changes_at_least":
            views = {e["view"] for e in trace.view_changes()}
            ok = len(views) >= expected
            results.append(
                AssertionResult(name, ok, f"{sorted(views)} view(s) reached, want >= {expected}")
            )
        else:
            results.append(AssertionResult(name, False, "unknown assertion"))
    return results


# --- randomized adversarial scenarios --------------------------------------------


def random_adversarial_scenario(
    seed: int,
    r: int,
    policy: str = POLICY_PROACTIVE,
) -> Dict[str, Any]:
    """A small random network with byzantine members bounded per r-group.

    Every account's r-group contains at most floor(r/2) byzantine nodes,
    the regime in which the protocol promises safety. Transactions
    include deliberate overdraft and double-spend attempts so the safety
    assertions have teeth.
    """
    rng = random.Random(seed)
    space = IdSpace(32)
    n = rng.randint(2 * r, 3 * r)
    node_ids = space.distinct_identifiers(rng, n)
    n_accounts = rng.randint(2, 4)
    account_ids = space.distinct_identifiers(rng, n_accounts, exclude=node_ids)

    max_bad_per_group = r // 2
    groups = [
        set(IdSpace(32).closest(node_ids, account, r)) for account in account_ids
    ]
    byz: List[int] = []
    for trial in range(200):
        k = rng.randint(0, max(1, min(n // 3, max_bad_per_group * 2)))
        cand = rng.sample(range(n), k)
        cand_ids = {node_ids[i] for i in cand}
        if all(len(g & cand_ids) <= max_bad_per_group for g in groups):
            byz = cand
            break
    strategies = [rng.choice(BYZANTINE_STRATEGIES) for _ in byz]

    txs = []
    n_tx = rng.randint(2, 5)
    spent: Dict[int, int] = {}
    for i in range(n_tx):
        sender = rng.randrange(n_accounts)
        receiver = rng.randrange(n_accounts)
        while receiver == sender:
            receiver = rng.randrange(n_accounts)
        if rng.random() < 0.25:
            amount = 2000 + rng.randint(0, 500)  # deliberate overdraft attempt
        else:
            amount = rng.randint(1, 200)
        txs.append(
            {
                "at": rng.randint(0, 4) * 50_000,
                "sender": sender,
                "receiver": receiver,
                "amount": amount,
            }
        )
        spent[sender] = spent.get(sender, 0) + amount

    return {
        "name": f"adversarial-{seed}",
        "seed": seed,
        "bits": 32,
        "r": r,
        "nodes": {"ids": [space.to_hex(i) for i in node_ids]},
        "accounts": {
            "ids": [space.to_hex(a) for a in account_ids],
            "initial_grant": 1000,
        },
        "byzantine": [
            {"node": idx, "strategy": strat}
            for idx, strat in zip(byz, strategies)
        ],
        "transactions": txs,
        "deadlock_policy": policy,
        "horizon": 60 * DEFAULT_DELTA,
        "assertions": {"no_conflicting_commits": True, "no_overdraft": True},
    }
