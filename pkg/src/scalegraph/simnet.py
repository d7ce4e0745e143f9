"""Deterministic discrete-event network simulator.

Virtual time is integer ticks (think microseconds). Events are processed
in (time, sequence) order, so a run is a pure function of the scenario
and seed: same inputs, byte-identical trace.

The synchrony model: every message between prompt nodes is delivered
within the known bound delta_cap; the sampled per-message latency is
uniform on [delay_min, delay_max] with delay_max <= delta_cap. Nodes can
be crashed (silent forever after a point), sluggish (delivery may exceed
delta_cap during declared intervals), or run one of a fixed catalog of
byzantine strategies implemented by the protocol layer.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

from .ident import IdSpace, Identifier
from .ledger import Block, Transaction
from .routing import oracle_closest

DEFAULT_DELTA = 100_000
DEFAULT_DELAY_MIN = 5_000
DEFAULT_DELAY_MAX = 50_000
SLUGGISH_MAX_FACTOR = 3  # sluggish latency drawn from (delta, 3*delta]

BYZANTINE_STRATEGIES = ("equivocate", "vote-invalid", "silent", "stale-tip")

HONEST = "honest"
CRASHED = "crashed"
SLUGGISH = "sluggish"
BYZANTINE = "byzantine"


@dataclass
class FaultProfile:
    node: Identifier
    behavior: str = HONEST
    crash_at: Optional[int] = None
    sluggish_intervals: Tuple[Tuple[int, int], ...] = ()
    strategy: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def crashed(self, t: int) -> bool:
        return self.behavior == CRASHED and self.crash_at is not None and t >= self.crash_at

    def sluggish(self, t: int) -> bool:
        return any(a <= t < b for a, b in self.sluggish_intervals)

    def is_byzantine(self) -> bool:
        return self.behavior == BYZANTINE


# --- message catalog ----------------------------------------------------------
# Every message is implicitly signed by its sender: the simulator attaches the
# authentic sender identity on delivery, and byzantine strategies never forge
# payload-level tokens for other identities.


@dataclass(frozen=True)
class Message:
    kind = "message"

    def trace_fields(self, space: IdSpace) -> Dict[str, Any]:
        return {}


@dataclass(frozen=True)
class FindNode(Message):
    target: Identifier
    count: int
    kind = "find_node"

    def trace_fields(self, space):
        return {"target": space.to_hex(self.target), "count": self.count}


@dataclass(frozen=True)
class FindNodeReply(Message):
    target: Identifier
    nodes: Tuple[Identifier, ...]
    kind = "find_node_reply"

    def trace_fields(self, space):
        return {"target": space.to_hex(self.target), "n": len(self.nodes)}


@dataclass(frozen=True)
class TxForward(Message):
    tx: Transaction
    tx_id: str
    attempt: int
    origin: Identifier
    kind = "tx_forward"

    def trace_fields(self, space):
        return {"tx": self.tx_id[:12], "attempt": self.attempt}


@dataclass(frozen=True)
class TipRequest(Message):
    tx_id: str
    attempt: int
    sender: Identifier
    receiver: Identifier
    kind = "tip_request"

    def trace_fields(self, space):
        return {"tx": self.tx_id[:12], "account": space.to_hex(self.receiver)}


@dataclass(frozen=True)
class TipReply(Message):
    tx_id: str
    attempt: int
    account: Identifier
    tip_hash: str
    tip_height: int
    kind = "tip_reply"

    def trace_fields(self, space):
        return {"tx": self.tx_id[:12], "height": self.tip_height}


@dataclass(frozen=True)
class TipDeferred(Message):
    """Busy acknowledgment: the account is locked by another transaction."""

    tx_id: str
    attempt: int
    account: Identifier
    holder: str
    kind = "tip_deferred"

    def trace_fields(self, space):
        return {"tx": self.tx_id[:12], "holder": self.holder[:12]}


@dataclass(frozen=True)
class Proposal(Message):
    tx_id: str
    attempt: int
    view: int
    leader: Identifier
    block: Block
    token: str
    certificate: Optional[Tuple[Identifier, ...]] = None
    forwarded_by: Optional[Identifier] = None
    kind = "proposal"

    def trace_fields(self, space):
        return {
            "tx": self.tx_id[:12],
            "view": self.view,
            "block": self.block.hash[:12],
            "fwd": self.forwarded_by is not None,
        }


@dataclass(frozen=True)
class VoteMsg(Message):
    tx_id: str
    attempt: int
    view: int
    block_hash: str
    signer: Identifier
    kind = "vote"

    def trace_fields(self, space):
        return {"tx": self.tx_id[:12], "view": self.view, "block": self.block_hash[:12]}


@dataclass(frozen=True)
class CommitMsg(Message):
    tx_id: str
    attempt: int
    view: int
    block: Block
    signer: Identifier
    kind = "commit_vote"

    def trace_fields(self, space):
        return {"tx": self.tx_id[:12], "view": self.view, "block": self.block.hash[:12]}


@dataclass(frozen=True)
class BlameMsg(Message):
    tx_id: str
    attempt: int
    view: int
    signer: Identifier
    # equivocation proof: two conflicting proposals from the same leader
    evidence: Optional[Tuple[Proposal, Proposal]] = None
    kind = "blame"

    def trace_fields(self, space):
        return {
            "tx": self.tx_id[:12],
            "view": self.view,
            "evidence": self.evidence is not None,
        }


@dataclass(frozen=True)
class CommitNotify(Message):
    tx_id: str
    kind = "commit_notify"

    def trace_fields(self, space):
        return {"tx": self.tx_id[:12]}


@dataclass(frozen=True)
class StoreTip(Message):
    account: Identifier
    tip_hash: str
    tip_height: int
    kind = "store_tip"

    def trace_fields(self, space):
        return {"account": space.to_hex(self.account), "height": self.tip_height}


@dataclass(frozen=True)
class BlockRequest(Message):
    account: Identifier
    from_height: int
    to_height: int
    kind = "block_request"

    def trace_fields(self, space):
        return {
            "account": space.to_hex(self.account),
            "from_h": self.from_height,
            "to_h": self.to_height,
        }


@dataclass(frozen=True)
class BlockReply(Message):
    account: Identifier
    blocks: Tuple[Block, ...]
    kind = "block_reply"

    def trace_fields(self, space):
        return {"account": space.to_hex(self.account), "n": len(self.blocks)}


# --- trace --------------------------------------------------------------------


class Trace:
    """Ordered record of everything observable in a run."""

    def __init__(self):
        self.events: List[Dict[str, Any]] = []

    def emit(self, t: int, seq: int, ev: str, **fields: Any) -> None:
        record: Dict[str, Any] = {"t": t, "seq": seq, "ev": ev}
        record.update(fields)
        self.events.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, separators=(",", ":")) + "\n" for e in self.events)

    def select(self, ev: str) -> List[Dict[str, Any]]:
        return [e for e in self.events if e["ev"] == ev]

    def commits(self) -> List[Dict[str, Any]]:
        return self.select("commit")

    def committed_tx_ids(self) -> Set[str]:
        return {e["tx"] for e in self.commits()}

    def first_commit_time(self, tx_prefix: str) -> Optional[int]:
        for e in self.commits():
            if e["tx"] == tx_prefix:
                return e["t"]
        return None

    def view_changes(self, tx_prefix: Optional[str] = None) -> List[Dict[str, Any]]:
        out = self.select("view_change")
        if tx_prefix is not None:
            out = [e for e in out if e["tx"] == tx_prefix]
        return out


# --- simulator ----------------------------------------------------------------

DELIVER = 0
TIMER = 1
ACTION = 2


class Simulator:
    """Single-threaded deterministic event loop over simulated nodes.

    Nodes are objects exposing on_message(frm, msg) and on_timer(key).
    All randomness flows from one seeded stream; event ties break on a
    monotone sequence number, so runs with equal inputs are identical.
    """

    def __init__(
        self,
        seed: int,
        space: Optional[IdSpace] = None,
        delta: int = DEFAULT_DELTA,
        delay_min: int = DEFAULT_DELAY_MIN,
        delay_max: int = DEFAULT_DELAY_MAX,
    ):
        if not (0 < delay_min <= delay_max <= delta):
            raise ValueError("require 0 < delay_min <= delay_max <= delta")
        self.space = space or IdSpace()
        self.rng = random.Random(seed)
        self.delta = delta
        self.delay_min = delay_min
        self.delay_max = delay_max
        self.now = 0
        self._seq = 0
        self._queue: List[Tuple[int, int, int, Any]] = []
        self._cancelled: Set[int] = set()
        self.nodes: Dict[Identifier, Any] = {}
        self.faults: Dict[Identifier, FaultProfile] = {}
        self.departed: Set[Identifier] = set()
        self.accounts: Dict[Identifier, int] = {}  # account -> initial grant
        self.trace = Trace()
        self.pending_work: Set[str] = set()  # unresolved transaction ids
        self.injections_done = False
        self.stop_on_settle = False
        self.horizon_exceeded = False

    # -- population ------------------------------------------------------------

    def add_node(self, node: Any, profile: Optional[FaultProfile] = None) -> None:
        self.nodes[node.ident] = node
        self.faults[node.ident] = profile or FaultProfile(node.ident)

    def remove_node(self, ident: Identifier) -> None:
        """Churn departure: leaves the address space and goes silent."""
        self.departed.add(ident)
        self.faults[ident].behavior = CRASHED
        self.faults[ident].crash_at = self.now
        self.emit("leave", node=self.space.to_hex(ident))

    def live_node_ids(self) -> List[Identifier]:
        # crashed-but-not-departed nodes stay listed: the population does
        # not learn of silent failures, only of departures and joins
        return [i for i in self.nodes if i not in self.departed]

    def closest(self, target: Identifier, count: int) -> List[Identifier]:
        """Stable-network discovery cache: oracle over current members."""
        return oracle_closest(self.live_node_ids(), target, count, self.space)

    def profile(self, ident: Identifier) -> FaultProfile:
        return self.faults[ident]

    def crashed(self, ident: Identifier) -> bool:
        return self.faults[ident].crashed(self.now)

    # -- scheduling ------------------------------------------------------------

    def _push(self, at: int, kind: int, payload: Any) -> int:
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (at, seq, kind, payload))
        return seq

    def deliver_latency(self, frm: Identifier, to: Identifier) -> int:
        """Latency sample for one message at the current instant."""
        if self.faults[frm].sluggish(self.now) or self.faults[to].sluggish(self.now):
            return self.rng.randint(self.delta + 1, SLUGGISH_MAX_FACTOR * self.delta)
        return self.rng.randint(self.delay_min, self.delay_max)

    def send(self, frm: Identifier, to: Identifier, msg: Message) -> None:
        if self.crashed(frm):
            return
        profile = self.faults[frm]
        if profile.strategy == "silent":
            return
        if to == frm:
            raise ValueError("self-sends are handled inline by nodes")
        latency = self.deliver_latency(frm, to)
        self._push(self.now + latency, DELIVER, (frm, to, msg, self.now))

    def set_timer(self, owner: Identifier, key: Tuple, delay: int) -> int:
        return self._push(self.now + delay, TIMER, (owner, key))

    def cancel_timer(self, timer_id: int) -> None:
        self._cancelled.add(timer_id)

    def schedule_action(self, at: int, fn: Callable[[], None]) -> int:
        return self._push(at, ACTION, fn)

    def emit(self, ev: str, **fields: Any) -> None:
        seq = self._seq
        self._seq += 1
        self.trace.emit(self.now, seq, ev, **fields)

    # -- transaction bookkeeping -----------------------------------------------

    def watch_tx(self, tx_id: str) -> None:
        self.pending_work.add(tx_id)

    def resolve_tx(self, tx_id: str) -> None:
        self.pending_work.discard(tx_id)

    # -- main loop ---------------------------------------------------------------

    def run(self, horizon: int) -> Trace:
        while self._queue:
            at, seq, kind, payload = self._queue[0]
            if at > horizon:
                self.horizon_exceeded = bool(self.pending_work)
                break
            heapq.heappop(self._queue)
            self.now = at
            if kind == DELIVER:
                frm, to, msg, sent_at = payload
                if self.crashed(to):
                    self.emit("drop", to=self.space.to_hex(to), msg=msg.kind)
                    continue
                fields = msg.trace_fields(self.space)
                self.emit(
                    "deliver",
                    frm=self.space.to_hex(frm),
                    to=self.space.to_hex(to),
                    msg=msg.kind,
                    sent=sent_at,
                    **fields,
                )
                self.nodes[to].on_message(frm, msg)
            elif kind == TIMER:
                if seq in self._cancelled:
                    self._cancelled.discard(seq)
                    continue
                owner, key = payload
                if self.crashed(owner):
                    continue
                self.nodes[owner].on_timer(key)
            else:
                payload()
            if (
                self.stop_on_settle
                and self.injections_done
                and not self.pending_work
            ):
                break
        self.now = min(self.now, horizon)
        return self.trace
