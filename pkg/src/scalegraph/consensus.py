"""Validator groups and the modified synchronous consensus state machine.

A transaction is decided by the union V of two proximity groups: the r
nodes closest to the sender account (r_S, whose first member leads and
proposes) and the r closest to the receiver (r_R, whose first member
supplies and locks the receiver chain tip). Votes are never pooled
across V: a quorum needs floor(r/2)+1 votes from r_S *and* from r_R,
because only sender-side nodes can check the spending history. Nodes in
the overlap count toward both groups.

The steady-state flow per block: the leader acquires both chain tips
(locking per the deadlock policy), proposes; members forward the
proposal to each other and vote; once a member holds a per-group quorum
of forwarded copies and of votes it arms a non-blocking 2*delta
pre-commit timer; if no conflicting leader proposal shows up before the
timer fires it broadcasts a commit vote; a per-group quorum of commit
votes commits the block to both account chains. Leader failure or
provable equivocation advances the view to the next-closest sender-side
node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

from .ident import Identifier
from .ledger import (
    DEFAULT_DROP_TIMER_PERIODS,
    DEFAULT_INITIAL_GRANT,
    START_DROP_TIMER,
    AccountChain,
    Authenticator,
    Block,
    LedgerError,
    ParentLink,
    ParentMismatchError,
    ReplicationState,
    Transaction,
    replication_tick,
)
from .simnet import (
    BlameMsg,
    BlockReply,
    BlockRequest,
    CommitMsg,
    CommitNotify,
    FindNode,
    FindNodeReply,
    Message,
    Proposal,
    Simulator,
    StoreTip,
    TipDeferred,
    TipReply,
    TipRequest,
    TxForward,
    VoteMsg,
)

LOCK_BEFORE_REQUEST = "lock-before-request"
LOCK_AFTER_REPLY = "lock-after-reply"

POLICY_PROACTIVE = "proactive"
POLICY_TIMEOUT = "timeout"

COUNT_PER_GROUP = "per-group"
COUNT_NAIVE = "naive"

AWAITING_TIP = "awaiting-tip"
PROPOSED = "proposed"
VOTED = "voted"
PRE_COMMIT_PENDING = "pre-commit-pending"
COMMITTED = "committed"
ABORTED = "aborted"

_LIVE_PHASES = (PROPOSED, VOTED, PRE_COMMIT_PENDING)


@dataclass(frozen=True)
class ValidatorGroup:
    """The two distance-ordered r-groups for one (sender, receiver) pair."""

    r_s: Tuple[Identifier, ...]
    r_r: Tuple[Identifier, ...]

    def __post_init__(self):
        if not self.r_s or not self.r_r:
            raise ValueError("validator groups must be non-empty")

    @property
    def union(self) -> Tuple[Identifier, ...]:
        seen = dict.fromkeys(self.r_s)
        for n in self.r_r:
            seen.setdefault(n)
        return tuple(seen)

    @property
    def leader_s(self) -> Identifier:
        return self.r_s[0]

    @property
    def leader_r(self) -> Identifier:
        return self.r_r[0]

    def leader_for_view(self, view: int) -> Identifier:
        return self.r_s[view % len(self.r_s)]

    def quorum_s(self) -> int:
        return len(self.r_s) // 2 + 1

    def quorum_r(self) -> int:
        return len(self.r_r) // 2 + 1

    def quorum_naive(self) -> int:
        return len(self.union) // 2 + 1


def derive_validator_group(tx: Transaction, lookup, r: int) -> ValidatorGroup:
    """Build the group from any closest-nodes lookup capability.

    lookup(target, count) must return the count nodes closest to target,
    distance-ascending. Any two callers with a consistent view of the
    population derive identical groups.
    """
    r_s = tuple(lookup(tx.sender, r))
    r_r = tuple(lookup(tx.receiver, r))
    return ValidatorGroup(r_s, r_r)


def lock_order(sender: Identifier, receiver: Identifier) -> str:
    """Which side locks first under the proactive deadlock policy.

    Locks are acquired in increasing account-address order, so lock the
    sender chain before requesting the receiver tip when the sender
    address is smaller, otherwise only after the reply arrives.
    """
    if sender == receiver:
        raise ValueError("sender and receiver must differ")
    return LOCK_BEFORE_REQUEST if sender < receiver else LOCK_AFTER_REPLY


def count_votes(
    voters: Set[Identifier], group: ValidatorGroup, mode: str = COUNT_PER_GROUP
) -> bool:
    """Quorum predicate over deduplicated signers.

    Per-group counting needs floor(r/2)+1 voters inside each r-group
    (overlap members count toward both). The naive mode pools everything
    and exists only to demonstrate why it is unsafe.
    """
    if mode == COUNT_NAIVE:
        return len(voters & set(group.union)) >= group.quorum_naive()
    in_s = len(voters & set(group.r_s))
    in_r = len(voters & set(group.r_r))
    return in_s >= group.quorum_s() and in_r >= group.quorum_r()


@dataclass
class ProtocolConfig:
    r: int
    deadlock_policy: str = POLICY_PROACTIVE
    vote_counting: str = COUNT_PER_GROUP
    leader_timeout: Optional[int] = None  # default 6 * delta
    tip_timeout: Optional[int] = None  # default 4 * delta
    lock_expiry: Optional[int] = None  # default 10 * delta
    tx_expiry: Optional[int] = None  # default 10 * delta
    max_retries: int = 3
    replication_k: Optional[int] = None  # default r
    replication_period: Optional[int] = None  # 0 disables; default 4 * delta
    drop_timer_periods: int = DEFAULT_DROP_TIMER_PERIODS
    include_prev_votes: bool = False

    def resolved(self, delta: int) -> "ProtocolConfig":
        cfg = replace(self)
        if cfg.leader_timeout is None:
            cfg.leader_timeout = 6 * delta
        if cfg.tip_timeout is None:
            cfg.tip_timeout = 4 * delta
        if cfg.lock_expiry is None:
            cfg.lock_expiry = 10 * delta
        if cfg.tx_expiry is None:
            cfg.tx_expiry = 10 * delta
        if cfg.replication_k is None:
            cfg.replication_k = cfg.r
        if cfg.replication_period is None:
            cfg.replication_period = 4 * delta
        return cfg


@dataclass
class LockState:
    tx_id: str
    timer_id: int


@dataclass
class Instance:
    """One node's view of consensus for a single transaction."""

    tx: Transaction
    tx_id: str
    attempt: int
    group: ValidatorGroup
    origin: Identifier
    view: int = 0
    phase: str = AWAITING_TIP
    proposals_seen: Dict[int, Dict[str, Proposal]] = field(default_factory=dict)
    blocks_by_hash: Dict[str, Block] = field(default_factory=dict)
    forwards: Dict[Tuple[int, str], Set[Identifier]] = field(default_factory=dict)
    votes: Dict[Tuple[int, str], Set[Identifier]] = field(default_factory=dict)
    commits: Dict[str, Set[Identifier]] = field(default_factory=dict)
    blames: Dict[int, Set[Identifier]] = field(default_factory=dict)
    equivocated_views: Set[int] = field(default_factory=set)
    pre_commit_timers: Dict[Tuple[int, str], int] = field(default_factory=dict)
    my_votes: Set[int] = field(default_factory=set)
    my_forwards: Set[Tuple[int, str]] = field(default_factory=set)
    my_blames: Set[int] = field(default_factory=set)
    my_commits: Set[str] = field(default_factory=set)
    proposed_views: Set[int] = field(default_factory=set)
    evidence_sent: bool = False
    certificate: Optional[Tuple[int, Block]] = None
    receiver_tip: Optional[ParentLink] = None
    sender_locked: bool = False
    tip_timer: Optional[int] = None
    tip_supplier_idx: int = 0
    tip_deferred: bool = False
    leader_timer: Optional[int] = None
    deadline_timer: Optional[int] = None
    committed_block: Optional[Block] = None

    def tally(self, table: Dict, key) -> Set[Identifier]:
        return table.setdefault(key, set())


class ValidatorNode:
    """A simulated node: chain storage, replication, and consensus roles."""

    def __init__(self, ident: Identifier, sim: Simulator, config: ProtocolConfig):
        self.ident = ident
        self.sim = sim
        self.space = sim.space
        self.auth = Authenticator(self.space)
        self.config = config.resolved(sim.delta)
        self.chains: Dict[Identifier, AccountChain] = {}
        self.repl_state: Dict[Identifier, ReplicationState] = {}
        self.repl_timer: Dict[Identifier, int] = {}
        self.instances: Dict[str, Instance] = {}
        self.locks: Dict[Identifier, LockState] = {}
        self.lock_waiters: Dict[Identifier, List[Tuple[str, str, Identifier]]] = {}
        self.last_cert: Dict[Identifier, Tuple[Identifier, ...]] = {}
        self.origin_watch: Dict[str, Dict[str, Any]] = {}
        self.pending_append: Dict[Identifier, Block] = {}
        # (account, height) -> {block hash: claiming tx}; two distinct hashes
        # claiming one slot is a conflict and freezes commit votes for both
        self.slot_claims: Dict[Tuple[Identifier, int], Dict[str, str]] = {}

    # -- helpers -----------------------------------------------------------------

    @property
    def strategy(self) -> Optional[str]:
        return self.sim.profile(self.ident).strategy

    def hex(self, ident: Identifier) -> str:
        return self.space.to_hex(ident)

    def emit(self, ev: str, **fields) -> None:
        self.sim.emit(ev, node=self.hex(self.ident), **fields)

    def _send(self, to: Identifier, msg: Message) -> None:
        self.sim.send(self.ident, to, msg)

    def _broadcast(self, recipients: Sequence[Identifier], msg: Message) -> None:
        for member in recipients:
            if member != self.ident:
                self._send(member, msg)

    def derive_group(self, tx: Transaction) -> ValidatorGroup:
        return derive_validator_group(tx, self.sim.closest, self.config.r)

    def ensure_chain(self, account: Identifier) -> AccountChain:
        if account not in self.chains:
            grant = self.sim.accounts.get(account, DEFAULT_INITIAL_GRANT)
            self.chains[account] = AccountChain(account, self.space, grant)
        return self.chains[account]

    # -- storage / replication ----------------------------------------------------

    def setup_storage(self, account: Identifier) -> None:
        self.ensure_chain(account)
        self.repl_state[account] = ReplicationState()
        if self.config.replication_period:
            period = self.config.replication_period
            delay = period + self.sim.rng.randint(0, period)
            self.repl_timer[account] = self.sim.set_timer(
                self.ident, ("replicate", account), delay
            )

    def _reschedule_replication(self, account: Identifier, delay: int) -> None:
        old = self.repl_timer.pop(account, None)
        if old is not None:
            self.sim.cancel_timer(old)
        self.repl_timer[account] = self.sim.set_timer(
            self.ident, ("replicate", account), delay
        )

    def _replication_tick(self, account: Identifier) -> None:
        chain = self.chains.get(account)
        if chain is None:
            return
        state = self.repl_state.setdefault(account, ReplicationState())
        closest = self.sim.closest(account, self.config.replication_k)
        action = replication_tick(self.ident, state, closest)
        tip = chain.tip
        msg = StoreTip(account=account, tip_hash=tip.hash, tip_height=tip.height)
        for peer in closest:
            if peer != self.ident:
                self._send(peer, msg)
        self.emit("replicate", account=self.hex(account), action=action)
        period = self.config.replication_period
        if not period:
            return
        if action == START_DROP_TIMER:
            self.repl_timer.pop(account, None)
            self.sim.set_timer(
                self.ident,
                ("dropchain", account),
                self.config.drop_timer_periods * period,
            )
        else:
            self.repl_timer[account] = self.sim.set_timer(
                self.ident, ("replicate", account), period
            )

    def on_store_tip(self, frm: Identifier, msg: StoreTip) -> None:
        account = msg.account
        new_replica = account not in self.chains
        chain = self.ensure_chain(account)
        if new_replica:
            self.repl_state[account] = ReplicationState()
        if self.config.replication_period:
            # a peer already replicated this period; skip our own slot
            self._reschedule_replication(account, self.config.replication_period)
        if msg.tip_height > chain.height:
            self._send(
                frm, BlockRequest(account, chain.height + 1, msg.tip_height)
            )

    def on_block_request(self, frm: Identifier, msg: BlockRequest) -> None:
        chain = self.chains.get(msg.account)
        if chain is None or msg.from_height < 1 or msg.to_height < msg.from_height:
            return
        blocks = tuple(chain.get_blocks(msg.from_height, msg.to_height))
        if blocks:
            self._send(frm, BlockReply(msg.account, blocks))

    def on_block_reply(self, frm: Identifier, msg: BlockReply) -> None:
        chain = self.chains.get(msg.account)
        if chain is None:
            return
        for block in msg.blocks:
            height = block.height_for(msg.account)
            if height <= chain.height:
                continue
            try:
                chain.append_block(block)
            except LedgerError:
                break
        pending = self.pending_append.get(msg.account)
        if pending is not None:
            parent = pending.parent_for(msg.account)
            if parent.height == chain.height and parent.hash == chain.tip.hash:
                del self.pending_append[msg.account]
                chain.append_block(pending)
                self.emit(
                    "commit",
                    tx=pending.tx.tx_id(self.space)[:12],
                    account=self.hex(msg.account),
                    height=chain.height,
                    block=pending.hash,
                )

    def _drop_chain_check(self, account: Identifier) -> None:
        closest = self.sim.closest(account, self.config.replication_k)
        if self.ident in closest:
            self.repl_state[account] = ReplicationState()
            if self.config.replication_period:
                self._reschedule_replication(account, self.config.replication_period)
            return
        self.chains.pop(account, None)
        self.repl_state.pop(account, None)
        self.repl_timer.pop(account, None)
        self.emit("chain_drop", account=self.hex(account))

    # -- client entry ---------------------------------------------------------------

    def receive_client_tx(self, tx: Transaction) -> None:
        if not tx.well_formed() or not self.auth.verify(
            tx.sender, tx.signing_payload(self.space), tx.signature
        ):
            self.emit("client_tx_rejected", reason="malformed-or-bad-signature")
            return
        tx_id = tx.tx_id(self.space)
        self.emit(
            "inject",
            tx=tx_id[:12],
            sender=self.hex(tx.sender),
            receiver=self.hex(tx.receiver),
            amount=tx.amount,
            nonce=tx.nonce,
        )
        self.sim.watch_tx(tx_id)
        self.origin_watch[tx_id] = {"tx": tx, "attempt": 1, "resolved": False}
        self._forward_tx(tx, tx_id, 1)
        self.sim.set_timer(self.ident, ("txwatch", tx_id, 1), self.config.tx_expiry)

    def _forward_tx(self, tx: Transaction, tx_id: str, attempt: int) -> None:
        group = self.derive_group(tx)
        msg = TxForward(tx=tx, tx_id=tx_id, attempt=attempt, origin=self.ident)
        for member in group.union:
            if member == self.ident:
                self.on_tx_forward(self.ident, msg)
            else:
                self._send(member, msg)

    # -- instance lifecycle -----------------------------------------------------------

    def _new_instance(
        self, tx: Transaction, tx_id: str, attempt: int, origin: Identifier
    ) -> Optional[Instance]:
        group = self.derive_group(tx)
        if self.ident not in group.union:
            return None
        inst = Instance(tx=tx, tx_id=tx_id, attempt=attempt, group=group, origin=origin)
        self.instances[tx_id] = inst
        if self.ident in group.r_s:
            self.ensure_chain(tx.sender)
        if self.ident in group.r_r:
            self.ensure_chain(tx.receiver)
        inst.deadline_timer = self.sim.set_timer(
            self.ident, ("deadline", tx_id, attempt), self.config.tx_expiry
        )
        inst.leader_timer = self.sim.set_timer(
            self.ident, ("leader", tx_id, attempt, 0), self.config.leader_timeout
        )
        return inst

    def _get_or_create(
        self, tx: Transaction, tx_id: str, attempt: int, origin: Identifier
    ) -> Optional[Instance]:
        inst = self.instances.get(tx_id)
        if inst is None:
            return self._new_instance(tx, tx_id, attempt, origin)
        if attempt < inst.attempt:
            return None
        if attempt > inst.attempt:
            if inst.phase in (PRE_COMMIT_PENDING, COMMITTED):
                # this attempt may still decide; refuse to wipe it
                return None
            self._teardown_instance(inst)
            return self._new_instance(tx, tx_id, attempt, origin)
        return inst

    def _teardown_instance(self, inst: Instance) -> None:
        for timer in (inst.leader_timer, inst.deadline_timer, inst.tip_timer):
            if timer is not None:
                self.sim.cancel_timer(timer)
        for timer in inst.pre_commit_timers.values():
            self.sim.cancel_timer(timer)
        inst.pre_commit_timers.clear()
        self._drop_claims(inst.tx_id)
        for account in (inst.tx.sender, inst.tx.receiver):
            self._release_lock(account, inst.tx_id, "teardown")

    def _abort_instance(self, inst: Instance, reason: str) -> None:
        self._teardown_instance(inst)
        inst.phase = ABORTED
        self.emit("abort", tx=inst.tx_id[:12], attempt=inst.attempt, reason=reason)

    def on_tx_forward(self, frm: Identifier, msg: TxForward) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is not None and msg.attempt <= inst.attempt:
            return
        inst = self._get_or_create(msg.tx, msg.tx_id, msg.attempt, msg.origin)
        if inst is None:
            return
        if inst.group.leader_for_view(0) == self.ident:
            self._start_leader_flow(inst)

    # -- leader side ----------------------------------------------------------------

    def _start_leader_flow(self, inst: Instance) -> None:
        tx = inst.tx
        if (
            self.config.deadlock_policy == POLICY_PROACTIVE
            and lock_order(tx.sender, tx.receiver) == LOCK_AFTER_REPLY
        ):
            self._request_tip(inst)
        else:
            self._acquire_local_lock(tx.sender, inst.tx_id, "leader-sender")

    def _after_sender_lock(self, inst: Instance) -> None:
        inst.sender_locked = True
        if inst.receiver_tip is not None:
            self._propose(inst)
        else:
            self._request_tip(inst)

    def _request_tip(self, inst: Instance) -> None:
        supplier = inst.group.r_r[inst.tip_supplier_idx % len(inst.group.r_r)]
        msg = TipRequest(
            tx_id=inst.tx_id,
            attempt=inst.attempt,
            sender=inst.tx.sender,
            receiver=inst.tx.receiver,
        )
        if supplier == self.ident:
            self.on_tip_request(self.ident, msg)
        else:
            self._send(supplier, msg)
        inst.tip_timer = self.sim.set_timer(
            self.ident,
            ("tipreq", inst.tx_id, inst.attempt, inst.tip_supplier_idx),
            self.config.tip_timeout,
        )

    def on_tip_request(self, frm: Identifier, msg: TipRequest) -> None:
        account = msg.receiver
        chain = self.ensure_chain(account)
        if self.strategy == "stale-tip":
            reply = TipReply(
                tx_id=msg.tx_id,
                attempt=msg.attempt,
                account=account,
                tip_hash=ParentLink.genesis().hash,
                tip_height=0,
            )
            self._reply_tip(frm, reply)
            return
        lock = self.locks.get(account)
        if lock is None:
            self._grant_lock(account, msg.tx_id)
            self._send_tip_reply(frm, msg, chain)
        elif lock.tx_id == msg.tx_id:
            self._send_tip_reply(frm, msg, chain)
        else:
            waiters = self.lock_waiters.setdefault(account, [])
            for i, (kind, tx_id, _req) in enumerate(waiters):
                if kind == "tipreq" and tx_id == msg.tx_id:
                    waiters[i] = ("tipreq", msg.tx_id, frm)
                    break
            else:
                waiters.append(("tipreq", msg.tx_id, frm))
            self.emit(
                "lock_busy",
                account=self.hex(account),
                tx=msg.tx_id[:12],
                holder=lock.tx_id[:12],
            )
            deferred = TipDeferred(
                tx_id=msg.tx_id,
                attempt=msg.attempt,
                account=account,
                holder=lock.tx_id,
            )
            if frm == self.ident:
                self.on_tip_deferred(self.ident, deferred)
            else:
                self._send(frm, deferred)

    def _send_tip_reply(self, to: Identifier, msg: TipRequest, chain: AccountChain) -> None:
        tip = chain.tip
        reply = TipReply(
            tx_id=msg.tx_id,
            attempt=msg.attempt,
            account=msg.receiver,
            tip_hash=tip.hash,
            tip_height=tip.height,
        )
        self._reply_tip(to, reply)

    def _reply_tip(self, to: Identifier, reply: TipReply) -> None:
        if to == self.ident:
            self.on_tip_reply(self.ident, reply)
        else:
            self._send(to, reply)

    def on_tip_deferred(self, frm: Identifier, msg: TipDeferred) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is None or msg.attempt != inst.attempt:
            return
        if inst.group.leader_for_view(inst.view) != self.ident:
            return
        # the supplier is alive but the account is locked; wait for the
        # queued reply rather than falling back to another supplier
        inst.tip_deferred = True

    def on_tip_reply(self, frm: Identifier, msg: TipReply) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is None or msg.attempt != inst.attempt:
            return
        if inst.phase in (COMMITTED, ABORTED):
            return
        if inst.group.leader_for_view(inst.view) != self.ident:
            return
        if inst.tip_timer is not None:
            self.sim.cancel_timer(inst.tip_timer)
            inst.tip_timer = None
        inst.tip_deferred = False
        inst.receiver_tip = ParentLink(msg.tip_hash, msg.tip_height)
        if inst.sender_locked:
            self._propose(inst)
        else:
            self._acquire_local_lock(inst.tx.sender, inst.tx_id, "leader-sender")

    def _propose(self, inst: Instance) -> None:
        if inst.view in inst.proposed_views:
            return
        if inst.phase in (COMMITTED, ABORTED):
            return
        inst.proposed_views.add(inst.view)
        tx = inst.tx
        chain = self.ensure_chain(tx.sender)
        prev_votes = None
        if self.config.include_prev_votes and tx.sender in self.last_cert:
            prev_votes = tuple(
                (signer, "commit") for signer in self.last_cert[tx.sender]
            )
        block = Block(
            tx=tx,
            validators=inst.group.union,
            sender_parent=chain.tip,
            receiver_parent=inst.receiver_tip or ParentLink.genesis(),
            prev_votes=prev_votes,
        ).with_hash(self.space)
        cert = self.last_cert.get(tx.sender)
        self.emit(
            "propose",
            tx=inst.tx_id[:12],
            view=inst.view,
            block=block.hash[:12],
            height=block.height_for(tx.sender),
        )
        inst.phase = PROPOSED
        if self.strategy == "equivocate":
            self._propose_equivocating(inst, block)
            return
        msg = self._proposal_msg(inst, block, cert)
        self._broadcast(inst.group.union, msg)
        self._evaluate_proposal(self.ident, msg)

    def _proposal_msg(
        self, inst: Instance, block: Block, cert: Optional[Tuple[Identifier, ...]]
    ) -> Proposal:
        token = self.auth.sign(
            self.ident, f"{inst.tx_id}|{inst.view}|{block.hash}".encode()
        )
        return Proposal(
            tx_id=inst.tx_id,
            attempt=inst.attempt,
            view=inst.view,
            leader=self.ident,
            block=block,
            token=token,
            certificate=cert,
        )

    def _propose_equivocating(self, inst: Instance, block: Block) -> None:
        # a colluding client pre-signs a conflicting spend; the corrupt
        # leader shows each half of the group a different block
        tx = inst.tx
        alt_tx = Transaction(tx.sender, tx.receiver, tx.amount + 1, tx.nonce).signed(
            self.auth
        )
        alt_block = Block(
            tx=alt_tx,
            validators=block.validators,
            sender_parent=block.sender_parent,
            receiver_parent=block.receiver_parent,
        ).with_hash(self.space)
        members = [m for m in inst.group.union if m != self.ident]
        half = len(members) // 2
        msg_a = self._proposal_msg(inst, block, None)
        msg_b = self._proposal_msg(inst, alt_block, None)
        for member in members[:half]:
            self._send(member, msg_a)
        for member in members[half:]:
            self._send(member, msg_b)
        self.emit(
            "equivocate",
            tx=inst.tx_id[:12],
            view=inst.view,
            blocks=[block.hash[:12], alt_block.hash[:12]],
        )

    # -- local locks ------------------------------------------------------------------

    def _grant_lock(self, account: Identifier, tx_id: str) -> None:
        timer = self.sim.set_timer(
            self.ident, ("lockexp", account, tx_id), self.config.lock_expiry
        )
        self.locks[account] = LockState(tx_id=tx_id, timer_id=timer)
        self.emit("lock_acquire", account=self.hex(account), tx=tx_id[:12])

    def _acquire_local_lock(self, account: Identifier, tx_id: str, tag: str) -> None:
        lock = self.locks.get(account)
        inst = self.instances.get(tx_id)
        if lock is None or lock.tx_id == tx_id:
            if lock is None:
                self._grant_lock(account, tx_id)
            if tag == "leader-sender" and inst is not None:
                self._after_sender_lock(inst)
            return
        waiters = self.lock_waiters.setdefault(account, [])
        for i, (kind, waiting_tx, _req) in enumerate(waiters):
            if kind == "leader" and waiting_tx == tx_id:
                break
        else:
            waiters.append(("leader", tx_id, self.ident))
        self.emit(
            "lock_busy",
            account=self.hex(account),
            tx=tx_id[:12],
            holder=lock.tx_id[:12],
        )

    def _release_lock(self, account: Identifier, tx_id: str, reason: str) -> None:
        lock = self.locks.get(account)
        if lock is None or lock.tx_id != tx_id:
            return
        self.sim.cancel_timer(lock.timer_id)
        del self.locks[account]
        self.emit(
            "lock_release", account=self.hex(account), tx=tx_id[:12], reason=reason
        )
        self._grant_next_waiter(account)

    def _grant_next_waiter(self, account: Identifier) -> None:
        waiters = self.lock_waiters.get(account, [])
        while waiters:
            kind, tx_id, requester = waiters.pop(0)
            inst = self.instances.get(tx_id)
            if inst is None or inst.phase in (COMMITTED, ABORTED):
                continue
            if kind == "tipreq":
                self._grant_lock(account, tx_id)
                chain = self.ensure_chain(account)
                tip = chain.tip
                reply = TipReply(
                    tx_id=tx_id,
                    attempt=inst.attempt,
                    account=account,
                    tip_hash=tip.hash,
                    tip_height=tip.height,
                )
                self._reply_tip(requester, reply)
            else:
                if (
                    inst.group.leader_for_view(inst.view) != self.ident
                    or inst.sender_locked
                ):
                    continue
                self._grant_lock(account, tx_id)
                self._after_sender_lock(inst)
            return

    # -- slot claims -----------------------------------------------------------------

    def _block_slots(self, block: Block) -> List[Tuple[Identifier, int]]:
        tx = block.tx
        return [
            (tx.sender, block.sender_parent.height + 1),
            (tx.receiver, block.receiver_parent.height + 1),
        ]

    def _register_claims(self, inst: Instance, block: Block) -> None:
        for slot in self._block_slots(block):
            claims = self.slot_claims.setdefault(slot, {})
            if block.hash not in claims:
                claims[block.hash] = inst.tx_id
                if len(set(claims.values())) >= 2:
                    self.emit(
                        "slot_conflict",
                        account=self.hex(slot[0]),
                        height=slot[1],
                        blocks=sorted(h[:12] for h in claims),
                    )
                    self._freeze_contested(slot)

    def _freeze_contested(self, slot: Tuple[Identifier, int]) -> None:
        # the 2-delta wait exists so a conflicting claim surfaces before a
        # commit vote; while two transactions claim one chain slot, neither
        # may be committed, until the conflict resolves by commit or expiry
        for block_hash, tx_id in self.slot_claims.get(slot, {}).items():
            inst = self.instances.get(tx_id)
            if inst is None:
                continue
            for (v, h), timer in list(inst.pre_commit_timers.items()):
                if h == block_hash:
                    self.sim.cancel_timer(timer)
                    del inst.pre_commit_timers[(v, h)]

    def _slot_contested(self, block: Block) -> bool:
        """True while another transaction also claims one of this block's slots."""
        for slot in self._block_slots(block):
            claims = self.slot_claims.get(slot, {})
            mine = claims.get(block.hash)
            if mine is not None and any(t != mine for t in claims.values()):
                return True
        return False

    def _drop_claims(self, tx_id: str) -> None:
        freed: List[Tuple[Identifier, int]] = []
        for slot, claims in list(self.slot_claims.items()):
            removed = False
            for block_hash, claimant in list(claims.items()):
                if claimant == tx_id:
                    del claims[block_hash]
                    removed = True
            if not claims:
                del self.slot_claims[slot]
            if removed and claims:
                freed.append(slot)
        # a dropped claim may un-contest a surviving block whose quorum is
        # already on hand; give it a fresh conflict window
        for slot in freed:
            for block_hash, claimant in list(self.slot_claims.get(slot, {}).items()):
                inst = self.instances.get(claimant)
                if inst is not None and inst.phase not in (COMMITTED, ABORTED):
                    self._check_quorum(inst, inst.view, block_hash)

    def _consume_slots(self, block: Block) -> None:
        for slot in self._block_slots(block):
            self.slot_claims.pop(slot, None)

    # -- proposal / vote path ------------------------------------------------------------

    def on_proposal(self, frm: Identifier, msg: Proposal) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is None:
            inst = self._get_or_create(
                msg.block.tx, msg.tx_id, msg.attempt, msg.leader
            )
            if inst is None:
                return
        if msg.attempt != inst.attempt:
            return
        if inst.phase in (COMMITTED, ABORTED):
            return
        if not self.auth.verify(
            msg.leader, f"{msg.tx_id}|{msg.view}|{msg.block.hash}".encode(), msg.token
        ):
            return
        if msg.view < inst.view:
            return
        seen = inst.proposals_seen.setdefault(msg.view, {})
        seen[msg.block.hash] = msg
        inst.blocks_by_hash[msg.block.hash] = msg.block
        if msg.leader == inst.group.leader_for_view(msg.view):
            self._register_claims(inst, msg.block)
        if len(seen) >= 2:
            self._handle_equivocation(inst, msg.view)
            return
        if msg.view > inst.view:
            return  # buffered; replayed after a view change
        self._evaluate_proposal(frm, msg)

    def _handle_equivocation(self, inst: Instance, view: int) -> None:
        if view in inst.equivocated_views:
            return
        inst.equivocated_views.add(view)
        for (v, h), timer in list(inst.pre_commit_timers.items()):
            if v == view:
                self.sim.cancel_timer(timer)
                del inst.pre_commit_timers[(v, h)]
        proposals = list(inst.proposals_seen[view].values())[:2]
        self.emit("equivocation_detected", tx=inst.tx_id[:12], view=view)
        if not inst.evidence_sent:
            inst.evidence_sent = True
            blame = BlameMsg(
                tx_id=inst.tx_id,
                attempt=inst.attempt,
                view=view,
                signer=self.ident,
                evidence=(proposals[0], proposals[1]),
            )
            self._broadcast(inst.group.union, blame)
        if view == inst.view:
            self._advance_view(inst, view + 1)

    def _evaluate_proposal(self, frm: Identifier, msg: Proposal) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is None or msg.view != inst.view or msg.attempt != inst.attempt:
            return
        if inst.phase in (COMMITTED, ABORTED):
            return
        view, block = msg.view, msg.block
        group = inst.group
        if msg.leader != group.leader_for_view(view):
            return
        if self.ident not in group.union:
            return
        if view in inst.equivocated_views:
            return
        # tally the copy we just received; the sender of a direct proposal
        # is the leader, otherwise the forwarder
        inst.tally(inst.forwards, (view, block.hash)).add(frm)
        # forward once so every member sees what we saw
        key = (view, block.hash)
        if key not in inst.my_forwards and msg.leader != self.ident:
            inst.my_forwards.add(key)
            inst.tally(inst.forwards, key).add(self.ident)
            fwd = replace(msg, forwarded_by=self.ident)
            self._broadcast(group.union, fwd)
        elif msg.leader == self.ident:
            inst.tally(inst.forwards, key).add(self.ident)
        verdict = self._proposal_valid(inst, block)
        if verdict is not None:
            self.emit(
                "vote_withheld",
                tx=inst.tx_id[:12],
                view=view,
                block=block.hash[:12],
                reason=verdict,
            )
        elif view not in inst.my_votes:
            inst.my_votes.add(view)
            inst.tally(inst.votes, key).add(self.ident)
            vote = VoteMsg(
                tx_id=inst.tx_id,
                attempt=inst.attempt,
                view=view,
                block_hash=block.hash,
                signer=self.ident,
            )
            self.emit("vote", tx=inst.tx_id[:12], view=view, block=block.hash[:12])
            self._broadcast(group.union, vote)
            if inst.phase == AWAITING_TIP or inst.phase == PROPOSED:
                inst.phase = VOTED
        self._check_quorum(inst, view, block.hash)

    def _proposal_valid(self, inst: Instance, block: Block) -> Optional[str]:
        """None when the proposal deserves our vote, else a reason string."""
        tx = block.tx
        group = inst.group
        if tuple(block.validators) != group.union:
            return "validator-list-mismatch"
        if block.with_hash(self.space).hash != block.hash:
            return "bad-block-hash"
        if self.strategy == "vote-invalid":
            return None
        if inst.certificate is not None and inst.certificate[1].hash != block.hash:
            return "conflicts-with-certified-block"
        for other_id, other in self.instances.items():
            if (
                other_id != inst.tx_id
                and other.phase in _LIVE_PHASES
                and {other.tx.sender, other.tx.receiver} & {tx.sender, tx.receiver}
            ):
                return "concurrent-instance-for-account"
        if self.ident in group.r_s:
            chain = self.ensure_chain(tx.sender)
            tip = chain.tip
            if (block.sender_parent.hash, block.sender_parent.height) != (
                tip.hash,
                tip.height,
            ):
                return "stale-sender-tip"
            verdict = chain.validate_transaction(tx, self.auth)
            if not verdict:
                return verdict.reason
        if self.ident in group.r_r:
            chain = self.ensure_chain(tx.receiver)
            tip = chain.tip
            if (block.receiver_parent.hash, block.receiver_parent.height) != (
                tip.hash,
                tip.height,
            ):
                return "stale-receiver-tip"
        return None

    def on_vote(self, frm: Identifier, msg: VoteMsg) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is None or msg.attempt != inst.attempt:
            return
        inst.tally(inst.votes, (msg.view, msg.block_hash)).add(frm)
        if msg.view == inst.view:
            self._check_quorum(inst, msg.view, msg.block_hash)

    def _check_quorum(self, inst: Instance, view: int, block_hash: str) -> None:
        if inst.phase in (COMMITTED, ABORTED) or view in inst.equivocated_views:
            return
        if view != inst.view:
            return
        mode = self.config.vote_counting
        key = (view, block_hash)
        votes = inst.votes.get(key, set())
        if count_votes(votes, inst.group, mode):
            block = inst.blocks_by_hash.get(block_hash)
            if block is not None and (
                inst.certificate is None or inst.certificate[0] < view
            ):
                inst.certificate = (view, block)
        forwards = inst.forwards.get(key, set())
        if (
            count_votes(votes, inst.group, mode)
            and count_votes(forwards, inst.group, mode)
            and key not in inst.pre_commit_timers
            and block_hash in inst.blocks_by_hash
            and not self._slot_contested(inst.blocks_by_hash[block_hash])
        ):
            timer = self.sim.set_timer(
                self.ident,
                ("precommit", inst.tx_id, view, block_hash),
                2 * self.sim.delta,
            )
            inst.pre_commit_timers[key] = timer
            inst.phase = PRE_COMMIT_PENDING
            self.emit(
                "pre_commit_armed",
                tx=inst.tx_id[:12],
                view=view,
                block=block_hash[:12],
            )

    def _fire_pre_commit(self, tx_id: str, view: int, block_hash: str) -> None:
        inst = self.instances.get(tx_id)
        if inst is None or inst.phase in (COMMITTED, ABORTED):
            return
        key = (view, block_hash)
        if key not in inst.pre_commit_timers:
            return
        del inst.pre_commit_timers[key]
        if view in inst.equivocated_views or view != inst.view:
            return
        if block_hash in inst.my_commits:
            return
        block = inst.blocks_by_hash[block_hash]
        if self._slot_contested(block):
            return
        inst.my_commits.add(block_hash)
        inst.tally(inst.commits, block_hash).add(self.ident)
        self.emit("pre_commit", tx=tx_id[:12], view=view, block=block_hash[:12])
        commit = CommitMsg(
            tx_id=tx_id,
            attempt=inst.attempt,
            view=view,
            block=block,
            signer=self.ident,
        )
        self._broadcast(inst.group.union, commit)
        self._check_commit_quorum(inst, block_hash)

    def on_commit_msg(self, frm: Identifier, msg: CommitMsg) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is None:
            inst = self._get_or_create(
                msg.block.tx, msg.tx_id, msg.attempt, msg.signer
            )
            if inst is None:
                return
        # commit votes count across attempts: a block that gathered a
        # quorum is committed no matter which retry this replica is on
        inst.blocks_by_hash[msg.block.hash] = msg.block
        inst.tally(inst.commits, msg.block.hash).add(frm)
        self._check_commit_quorum(inst, msg.block.hash)

    def _check_commit_quorum(self, inst: Instance, block_hash: str) -> None:
        if inst.phase == COMMITTED:
            return
        commits = inst.commits.get(block_hash, set())
        if count_votes(commits, inst.group, self.config.vote_counting):
            self._do_commit(inst, inst.blocks_by_hash[block_hash], commits)

    def _do_commit(
        self, inst: Instance, block: Block, committers: Set[Identifier]
    ) -> None:
        # append before releasing locks: waiters granted during teardown
        # must see the advanced chain tips
        inst.phase = COMMITTED
        inst.committed_block = block
        tx = block.tx
        self._consume_slots(block)
        sides = []
        if self.ident in inst.group.r_s or tx.sender in self.chains:
            sides.append(tx.sender)
        if self.ident in inst.group.r_r or tx.receiver in self.chains:
            sides.append(tx.receiver)
        for account in dict.fromkeys(sides):
            chain = self.ensure_chain(account)
            try:
                chain.append_block(block)
            except ParentMismatchError:
                parent = block.parent_for(account)
                self.pending_append[account] = block
                peers = [n for n in inst.group.union if n != self.ident]
                if peers and parent.height > chain.height:
                    self._send(
                        peers[0],
                        BlockRequest(account, chain.height + 1, parent.height),
                    )
                continue
            except LedgerError as exc:
                self.emit(
                    "append_rejected",
                    tx=inst.tx_id[:12],
                    account=self.hex(account),
                    reason=str(exc),
                )
                continue
            self.emit(
                "commit",
                tx=inst.tx_id[:12],
                account=self.hex(account),
                height=chain.height,
                block=block.hash,
            )
        self._teardown_instance(inst)
        ordered = tuple(sorted(committers))
        self.last_cert[tx.sender] = ordered
        self.last_cert[tx.receiver] = ordered
        if inst.origin == self.ident or inst.tx_id in self.origin_watch:
            watch = self.origin_watch.get(inst.tx_id)
            if watch is not None:
                watch["resolved"] = True
        elif inst.origin not in inst.group.union:
            self._send(inst.origin, CommitNotify(tx_id=inst.tx_id))
        self.sim.resolve_tx(inst.tx_id)

    def on_commit_notify(self, frm: Identifier, msg: CommitNotify) -> None:
        watch = self.origin_watch.get(msg.tx_id)
        if watch is not None:
            watch["resolved"] = True
        self.sim.resolve_tx(msg.tx_id)

    # -- blame / view change ----------------------------------------------------------

    def on_blame(self, frm: Identifier, msg: BlameMsg) -> None:
        inst = self.instances.get(msg.tx_id)
        if inst is None or msg.attempt != inst.attempt:
            return
        if msg.evidence is not None:
            if self._verify_evidence(inst, msg.evidence):
                view = msg.evidence[0].view
                for proposal in msg.evidence:
                    inst.proposals_seen.setdefault(view, {})[
                        proposal.block.hash
                    ] = proposal
                self._handle_equivocation(inst, view)
            return
        inst.tally(inst.blames, msg.view).add(frm)
        self._check_blame_quorum(inst, msg.view)

    def _verify_evidence(
        self, inst: Instance, evidence: Tuple[Proposal, Proposal]
    ) -> bool:
        a, b = evidence
        if a.tx_id != b.tx_id or a.view != b.view or a.leader != b.leader:
            return False
        if a.block.hash == b.block.hash:
            return False
        for p in (a, b):
            if not self.auth.verify(
                p.leader, f"{p.tx_id}|{p.view}|{p.block.hash}".encode(), p.token
            ):
                return False
        return inst.group.leader_for_view(a.view) == a.leader

    def _check_blame_quorum(self, inst: Instance, view: int) -> None:
        # a quorum for any view at or past ours is proof the group moved on
        if view < inst.view or inst.phase in (COMMITTED, ABORTED):
            return
        blames = inst.blames.get(view, set())
        if count_votes(blames, inst.group, COUNT_PER_GROUP):
            self._advance_view(inst, view + 1)

    def _leader_timeout(self, tx_id: str, attempt: int, view: int) -> None:
        inst = self.instances.get(tx_id)
        if inst is None or inst.attempt != attempt or inst.view != view:
            return
        if inst.phase in (COMMITTED, ABORTED, PRE_COMMIT_PENDING):
            return
        if view in inst.my_blames:
            return
        inst.my_blames.add(view)
        inst.tally(inst.blames, view).add(self.ident)
        self.emit("blame", tx=tx_id[:12], view=view, reason="leader-timeout")
        blame = BlameMsg(
            tx_id=tx_id, attempt=attempt, view=view, signer=self.ident
        )
        self._broadcast(inst.group.union, blame)
        self._check_blame_quorum(inst, view)

    def _advance_view(self, inst: Instance, new_view: int) -> None:
        if new_view <= inst.view or inst.phase in (COMMITTED, ABORTED):
            return
        for (v, h), timer in list(inst.pre_commit_timers.items()):
            if v < new_view:
                self.sim.cancel_timer(timer)
                del inst.pre_commit_timers[(v, h)]
        inst.view = new_view
        leader = inst.group.leader_for_view(new_view)
        self.emit(
            "view_change",
            tx=inst.tx_id[:12],
            view=new_view,
            leader=self.hex(leader),
        )
        if inst.leader_timer is not None:
            self.sim.cancel_timer(inst.leader_timer)
        inst.leader_timer = self.sim.set_timer(
            self.ident,
            ("leader", inst.tx_id, inst.attempt, new_view),
            self.config.leader_timeout,
        )
        if leader == self.ident:
            if inst.certificate is not None:
                # re-propose the certified block so any member that might
                # have pre-committed it stays consistent
                _view, block = inst.certificate
                msg = self._proposal_msg(inst, block, None)
                inst.proposed_views.add(new_view)
                self.emit(
                    "propose",
                    tx=inst.tx_id[:12],
                    view=new_view,
                    block=block.hash[:12],
                    height=block.height_for(inst.tx.sender),
                )
                self._broadcast(inst.group.union, msg)
                self._evaluate_proposal(self.ident, msg)
            else:
                inst.receiver_tip = None
                if inst.sender_locked:
                    self._request_tip(inst)
                else:
                    self._start_leader_flow(inst)
        # votes or proposals for the new view may have arrived early
        buffered = inst.proposals_seen.get(new_view, {})
        if len(buffered) >= 2:
            self._handle_equivocation(inst, new_view)
        else:
            for proposal in list(buffered.values()):
                self._evaluate_proposal(proposal.leader, proposal)
        for (v, h) in list(inst.votes.keys()):
            if v == new_view:
                self._check_quorum(inst, v, h)
        self._check_blame_quorum(inst, new_view)

    # -- timers -------------------------------------------------------------------------

    def on_timer(self, key: Tuple) -> None:
        kind = key[0]
        if kind == "replicate":
            self._replication_tick(key[1])
        elif kind == "dropchain":
            self._drop_chain_check(key[1])
        elif kind == "precommit":
            self._fire_pre_commit(key[1], key[2], key[3])
        elif kind == "leader":
            self._leader_timeout(key[1], key[2], key[3])
        elif kind == "lockexp":
            account, tx_id = key[1], key[2]
            lock = self.locks.get(account)
            if lock is not None and lock.tx_id == tx_id:
                self.emit("lock_expire", account=self.hex(account), tx=tx_id[:12])
                self._release_lock(account, tx_id, "expired")
        elif kind == "deadline":
            self._deadline(key[1], key[2])
        elif kind == "tipreq":
            self._tip_timeout(key[1], key[2], key[3])
        elif kind == "txwatch":
            self._tx_watch(key[1], key[2])
        elif kind == "txretry":
            self._tx_retry(key[1], key[2])

    def _deadline(self, tx_id: str, attempt: int) -> None:
        inst = self.instances.get(tx_id)
        if inst is None or inst.attempt != attempt or inst.phase == COMMITTED:
            return
        if inst.phase == PRE_COMMIT_PENDING:
            # a commit decision is in flight; give it one timer's grace
            inst.deadline_timer = self.sim.set_timer(
                self.ident,
                ("deadline", tx_id, attempt),
                2 * self.sim.delta + self.sim.delay_max,
            )
            return
        self._abort_instance(inst, "expired")

    def _tip_timeout(self, tx_id: str, attempt: int, supplier_idx: int) -> None:
        inst = self.instances.get(tx_id)
        if inst is None or inst.attempt != attempt:
            return
        if inst.receiver_tip is not None or inst.phase in (
            COMMITTED,
            ABORTED,
            PRE_COMMIT_PENDING,
        ):
            return
        if inst.tip_supplier_idx != supplier_idx:
            return
        if inst.group.leader_for_view(inst.view) != self.ident:
            return
        if inst.tip_deferred:
            # busy, not dead: keep waiting for the queued reply
            inst.tip_timer = self.sim.set_timer(
                self.ident,
                ("tipreq", inst.tx_id, inst.attempt, supplier_idx),
                self.config.tip_timeout,
            )
            return
        # receiver-side supplier unresponsive; fall back to the next closest
        inst.tip_supplier_idx += 1
        self.emit(
            "tip_supplier_advance",
            tx=tx_id[:12],
            idx=inst.tip_supplier_idx,
        )
        self._request_tip(inst)

    def _tx_watch(self, tx_id: str, attempt: int) -> None:
        watch = self.origin_watch.get(tx_id)
        if watch is None or watch["resolved"] or watch["attempt"] != attempt:
            return
        if attempt > self.config.max_retries:
            self.emit("tx_gave_up", tx=tx_id[:12], attempts=attempt)
            return
        backoff = self.sim.rng.randint(self.sim.delta, 3 * self.sim.delta)
        self.sim.set_timer(self.ident, ("txretry", tx_id, attempt + 1), backoff)

    def _tx_retry(self, tx_id: str, attempt: int) -> None:
        watch = self.origin_watch.get(tx_id)
        if watch is None or watch["resolved"]:
            return
        watch["attempt"] = attempt
        self.emit("tx_retry", tx=tx_id[:12], attempt=attempt)
        self._forward_tx(watch["tx"], tx_id, attempt)
        self.sim.set_timer(
            self.ident, ("txwatch", tx_id, attempt), self.config.tx_expiry
        )

    # -- dispatch ----------------------------------------------------------------------

    def on_message(self, frm: Identifier, msg: Message) -> None:
        if isinstance(msg, TxForward):
            self.on_tx_forward(frm, msg)
        elif isinstance(msg, TipRequest):
            self.on_tip_request(frm, msg)
        elif isinstance(msg, TipReply):
            self.on_tip_reply(frm, msg)
        elif isinstance(msg, TipDeferred):
            self.on_tip_deferred(frm, msg)
        elif isinstance(msg, FindNode):
            # discovery backed by the stable-network cache
            found = tuple(self.sim.closest(msg.target, msg.count))
            self._send(frm, FindNodeReply(target=msg.target, nodes=found))
        elif isinstance(msg, Proposal):
            self.on_proposal(frm, msg)
        elif isinstance(msg, VoteMsg):
            self.on_vote(frm, msg)
        elif isinstance(msg, CommitMsg):
            self.on_commit_msg(frm, msg)
        elif isinstance(msg, BlameMsg):
            self.on_blame(frm, msg)
        elif isinstance(msg, CommitNotify):
            self.on_commit_notify(frm, msg)
        elif isinstance(msg, StoreTip):
            self.on_store_tip(frm, msg)
        elif isinstance(msg, BlockRequest):
            self.on_block_request(frm, msg)
        elif isinstance(msg, BlockReply):
            self.on_block_reply(frm, msg)
