"""Per-account append-only block chains.

Each account has its own chain. A block carries exactly one transaction
and links to the previous block on *both* the sender and the receiver
chain, so the union of all chains forms a DAG that partially orders
transactions across accounts while totally ordering each account's
spending history.

Accounts use a balance model with a per-sender monotone nonce for replay
protection. Block hashes are SHA-256 over a canonical length-prefixed
serialization so independently-built replicas agree byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .ident import IdSpace, Identifier

GENESIS_HASH = "0" * 64
GENESIS_HEIGHT = 0

DEFAULT_INITIAL_GRANT = 1000
DEFAULT_REPLICATIONS_WHEN_DISTANT = 3
DEFAULT_DROP_TIMER_PERIODS = 10

ACCEPT = "accept"
REJECT_BAD_SIGNATURE = "bad-signature"
REJECT_INSUFFICIENT_BALANCE = "insufficient-balance"
REJECT_REPLAY = "replay"
REJECT_MALFORMED = "malformed"


class LedgerError(Exception):
    pass


class ParentMismatchError(LedgerError):
    """Block's parent link does not match the chain tip (fork or gap)."""


class ChainInconsistencyError(LedgerError):
    """Two chains disagree about the content of a shared block."""


class Authenticator:
    """Simulated signature scheme.

    Tokens are deterministic digests of (signer, payload). They stand in
    for real signatures under the authenticated-adversary assumption:
    simulated faulty nodes never mint tokens for identities other than
    their own, so a verified token is as good as an unforgeable one.
    """

    def __init__(self, space: Optional[IdSpace] = None):
        self.space = space or IdSpace()

    def sign(self, signer: Identifier, payload: bytes) -> str:
        material = self.space.to_hex(signer).encode() + b"|" + payload
        return hashlib.sha256(material).hexdigest()[:24]

    def verify(self, signer: Identifier, payload: bytes, token: str) -> bool:
        return self.sign(signer, payload) == token


def _field_bytes(*parts: bytes) -> bytes:
    out = bytearray()
    for part in parts:
        out += len(part).to_bytes(4, "big")
        out += part
    return bytes(out)


@dataclass(frozen=True)
class Transaction:
    sender: Identifier
    receiver: Identifier
    amount: int
    nonce: int
    signature: str = ""

    def signing_payload(self, space: IdSpace) -> bytes:
        return _field_bytes(
            space.to_hex(self.sender).encode(),
            space.to_hex(self.receiver).encode(),
            str(self.amount).encode(),
            str(self.nonce).encode(),
        )

    def signed(self, auth: Authenticator) -> "Transaction":
        token = auth.sign(self.sender, self.signing_payload(auth.space))
        return Transaction(self.sender, self.receiver, self.amount, self.nonce, token)

    def tx_id(self, space: IdSpace) -> str:
        """Stable identity of the transfer itself (signature excluded)."""
        return hashlib.sha256(self.signing_payload(space)).hexdigest()[:32]

    def well_formed(self) -> bool:
        return (
            self.sender != self.receiver
            and isinstance(self.amount, int)
            and self.amount > 0
            and isinstance(self.nonce, int)
            and self.nonce >= 1
        )


@dataclass(frozen=True)
class ParentLink:
    """(hash, height) of the previous block on one side."""

    hash: str
    height: int

    @staticmethod
    def genesis() -> "ParentLink":
        return ParentLink(GENESIS_HASH, GENESIS_HEIGHT)


@dataclass(frozen=True)
class Block:
    tx: Transaction
    validators: Tuple[Identifier, ...]
    sender_parent: ParentLink
    receiver_parent: ParentLink
    prev_votes: Optional[Tuple[Tuple[Identifier, str], ...]] = None
    hash: str = ""

    def canonical_bytes(self, space: IdSpace) -> bytes:
        vote_parts: List[bytes] = []
        if self.prev_votes is not None:
            for signer, token in self.prev_votes:
                vote_parts.append(space.to_hex(signer).encode() + b":" + token.encode())
        return _field_bytes(
            self.tx.signing_payload(space),
            self.tx.signature.encode(),
            _field_bytes(*(space.to_hex(v).encode() for v in self.validators)),
            self.sender_parent.hash.encode(),
            str(self.sender_parent.height).encode(),
            self.receiver_parent.hash.encode(),
            str(self.receiver_parent.height).encode(),
            _field_bytes(*vote_parts),
        )

    def with_hash(self, space: IdSpace) -> "Block":
        digest = hashlib.sha256(self.canonical_bytes(space)).hexdigest()
        return Block(
            self.tx,
            self.validators,
            self.sender_parent,
            self.receiver_parent,
            self.prev_votes,
            digest,
        )

    def parent_for(self, account: Identifier) -> ParentLink:
        if account == self.tx.sender:
            return self.sender_parent
        if account == self.tx.receiver:
            return self.receiver_parent
        raise LedgerError(f"account {account} is not a party to this block")

    def height_for(self, account: Identifier) -> int:
        return self.parent_for(account).height + 1

    def to_json(self, space: IdSpace) -> str:
        doc = {
            "sender": space.to_hex(self.tx.sender),
            "receiver": space.to_hex(self.tx.receiver),
            "amount": self.tx.amount,
            "nonce": self.tx.nonce,
            "signature": self.tx.signature,
            "validators": [space.to_hex(v) for v in self.validators],
            "sender_parent": [self.sender_parent.hash, self.sender_parent.height],
            "receiver_parent": [self.receiver_parent.hash, self.receiver_parent.height],
            "prev_votes": (
                None
                if self.prev_votes is None
                else [[space.to_hex(s), t] for s, t in self.prev_votes]
            ),
            "hash": self.hash,
        }
        return json.dumps(doc, separators=(",", ":"))

    @staticmethod
    def from_json(line: str, space: IdSpace) -> "Block":
        doc = json.loads(line)
        tx = Transaction(
            sender=space.from_hex(doc["sender"]),
            receiver=space.from_hex(doc["receiver"]),
            amount=doc["amount"],
            nonce=doc["nonce"],
            signature=doc["signature"],
        )
        prev_votes = doc.get("prev_votes")
        block = Block(
            tx=tx,
            validators=tuple(space.from_hex(v) for v in doc["validators"]),
            sender_parent=ParentLink(*doc["sender_parent"]),
            receiver_parent=ParentLink(*doc["receiver_parent"]),
            prev_votes=(
                None
                if prev_votes is None
                else tuple((space.from_hex(s), t) for s, t in prev_votes)
            ),
        ).with_hash(space)
        if block.hash != doc["hash"]:
            raise LedgerError(f"hash mismatch in imported block: {doc['hash']}")
        return block


@dataclass
class Verdict:
    ok: bool
    reason: str

    def __bool__(self) -> bool:
        return self.ok


def accept() -> Verdict:
    return Verdict(True, ACCEPT)


def reject(reason: str) -> Verdict:
    return Verdict(False, reason)


class AccountChain:
    """Append-only chain of the blocks that touch one account."""

    def __init__(
        self,
        account: Identifier,
        space: Optional[IdSpace] = None,
        initial_grant: int = DEFAULT_INITIAL_GRANT,
    ):
        self.account = account
        self.space = space or IdSpace()
        self.initial_grant = initial_grant
        self.blocks: List[Block] = []

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> ParentLink:
        if not self.blocks:
            return ParentLink.genesis()
        return ParentLink(self.blocks[-1].hash, self.height)

    @property
    def tip_block(self) -> Optional[Block]:
        return self.blocks[-1] if self.blocks else None

    def balance_after(self, height: int) -> int:
        bal = self.initial_grant
        for block in self.blocks[:height]:
            if block.tx.sender == self.account:
                bal -= block.tx.amount
            else:
                bal += block.tx.amount
        return bal

    @property
    def balance(self) -> int:
        return self.balance_after(self.height)

    def used_nonces(self) -> Set[int]:
        return {b.tx.nonce for b in self.blocks if b.tx.sender == self.account}

    def max_used_nonce(self) -> int:
        nonces = self.used_nonces()
        return max(nonces) if nonces else 0

    def validate_transaction(self, tx: Transaction, auth: Authenticator) -> Verdict:
        """Sender-side admission check against this (the sender's) chain."""
        if not tx.well_formed():
            return reject(REJECT_MALFORMED)
        if tx.sender != self.account:
            raise LedgerError("validate_transaction requires the sender's chain")
        if not auth.verify(tx.sender, tx.signing_payload(self.space), tx.signature):
            return reject(REJECT_BAD_SIGNATURE)
        if tx.nonce <= self.max_used_nonce():
            return reject(REJECT_REPLAY)
        if tx.amount > self.balance:
            return reject(REJECT_INSUFFICIENT_BALANCE)
        return accept()

    def append_block(self, block: Block) -> None:
        """Extend the chain by one committed block.

        Raises ParentMismatchError when the block's parent link for this
        account does not match the current tip; the caller should fill the
        gap with get_blocks and retry. Re-appending the current tip block
        is a no-op so duplicate commit deliveries stay idempotent.
        """
        if self.blocks and block.hash == self.blocks[-1].hash:
            return
        parent = block.parent_for(self.account)
        tip = self.tip
        if parent.hash != tip.hash or parent.height != tip.height:
            raise ParentMismatchError(
                f"account {self.space.to_hex(self.account)}: block parent "
                f"({parent.hash[:8]},{parent.height}) != tip ({tip.hash[:8]},{tip.height})"
            )
        if block.tx.sender == self.account:
            if block.tx.nonce in self.used_nonces():
                raise LedgerError(
                    f"duplicate nonce {block.tx.nonce} for sender "
                    f"{self.space.to_hex(self.account)}"
                )
            if block.tx.amount > self.balance:
                raise LedgerError(
                    f"overdraft appended to {self.space.to_hex(self.account)}"
                )
        self.blocks.append(block)

    def get_blocks(self, from_height: int, to_height: int) -> List[Block]:
        """Blocks with heights in [from_height, to_height]; heights are 1-based."""
        if from_height < 1 or to_height < from_height:
            raise ValueError("require 1 <= from_height <= to_height")
        return self.blocks[from_height - 1 : to_height]

    def export_jsonl(self) -> str:
        return "".join(b.to_json(self.space) + "\n" for b in self.blocks)

    @classmethod
    def import_jsonl(
        cls,
        account: Identifier,
        text: str,
        space: Optional[IdSpace] = None,
        initial_grant: int = DEFAULT_INITIAL_GRANT,
    ) -> "AccountChain":
        chain = cls(account, space, initial_grant)
        for line in text.splitlines():
            if line.strip():
                chain.append_block(Block.from_json(line, chain.space))
        return chain

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, AccountChain)
            and self.account == other.account
            and [b.hash for b in self.blocks] == [b.hash for b in other.blocks]
        )


# --- replication / expiration policy -----------------------------------------

REPLICATE_AND_RESCHEDULE = "replicate-and-reschedule"
REPLICATE_AND_DECREMENT = "replicate-and-decrement"
START_DROP_TIMER = "start-drop-timer"


@dataclass
class ReplicationState:
    """Per-(node, account) countdown used once the node drifts out of range.

    Chains never expire on their own; a node drops one only after it is no
    longer among the k closest, has replicated the chain a few final times,
    and the drop timer has then run out.
    """

    remaining_when_distant: int = DEFAULT_REPLICATIONS_WHEN_DISTANT
    drop_timer_started: bool = False


def replication_tick(
    node: Identifier,
    state: ReplicationState,
    current_closest: Sequence[Identifier],
) -> str:
    """Decide what a replication-period tick does for one stored chain."""
    if node in current_closest:
        state.remaining_when_distant = DEFAULT_REPLICATIONS_WHEN_DISTANT
        state.drop_timer_started = False
        return REPLICATE_AND_RESCHEDULE
    if state.remaining_when_distant > 0:
        state.remaining_when_distant -= 1
        if state.remaining_when_distant == 0:
            state.drop_timer_started = True
            return START_DROP_TIMER
        return REPLICATE_AND_DECREMENT
    state.drop_timer_started = True
    return START_DROP_TIMER


# --- cross-account DAG --------------------------------------------------------


@dataclass
class TransactionDag:
    """Each committed transaction once, with arcs to both parent blocks."""

    vertices: Dict[str, Block] = field(default_factory=dict)
    edges: Dict[str, Set[str]] = field(default_factory=dict)  # child -> parents

    def parents(self, block_hash: str) -> Set[str]:
        return self.edges.get(block_hash, set())

    def topological_order(self) -> List[str]:
        """Kahn's algorithm; raises ChainInconsistencyError on a cycle."""
        indegree = {h: 0 for h in self.vertices}
        children: Dict[str, List[str]] = {h: [] for h in self.vertices}
        for child, parents in self.edges.items():
            for parent in parents:
                indegree[child] += 1
                children[parent].append(child)
        ready = sorted(h for h, d in indegree.items() if d == 0)
        order: List[str] = []
        while ready:
            h = ready.pop(0)
            order.append(h)
            for c in sorted(children[h]):
                indegree[c] -= 1
                if indegree[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(order) != len(self.vertices):
            raise ChainInconsistencyError("dependency cycle among blocks")
        return order

    def is_ordered(self, earlier_hash: str, later_hash: str) -> bool:
        """True when earlier_hash is an ancestor of later_hash."""
        seen: Set[str] = set()
        stack = [later_hash]
        while stack:
            h = stack.pop()
            for p in self.parents(h):
                if p == earlier_hash:
                    return True
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return False

    def unordered(self, a: str, b: str) -> bool:
        return not self.is_ordered(a, b) and not self.is_ordered(b, a)


def build_dag(chains: Iterable[AccountChain]) -> TransactionDag:
    """Combine per-account chains into the global partial order.

    Shared blocks must be byte-identical across chains (same hash). The
    same (sender, nonce) appearing with two different hashes means the
    chains were never consistent.
    """
    dag = TransactionDag()
    by_spend: Dict[Tuple[Identifier, int], str] = {}
    hash_to_account_parent: Dict[str, Dict[Identifier, str]] = {}
    for chain in chains:
        for block in chain.blocks:
            key = (block.tx.sender, block.tx.nonce)
            known = by_spend.get(key)
            if known is not None and known != block.hash:
                raise ChainInconsistencyError(
                    f"sender {chain.space.to_hex(block.tx.sender)} nonce "
                    f"{block.tx.nonce} appears with two different contents"
                )
            by_spend[key] = block.hash
            dag.vertices[block.hash] = block
            links = hash_to_account_parent.setdefault(block.hash, {})
            links[chain.account] = block.parent_for(chain.account).hash
    for block_hash, links in hash_to_account_parent.items():
        parents = {p for p in links.values() if p != GENESIS_HASH}
        dag.edges[block_hash] = parents
    dag.topological_order()  # acyclicity check
    return dag


def replay_dag(
    dag: TransactionDag,
    accounts: Iterable[Identifier],
    space: Optional[IdSpace] = None,
    initial_grant: int = DEFAULT_INITIAL_GRANT,
) -> Dict[Identifier, AccountChain]:
    """Rebuild every account chain by replaying the DAG in topological order."""
    space = space or IdSpace()
    chains = {a: AccountChain(a, space, initial_grant) for a in accounts}
    for block_hash in dag.topological_order():
        block = dag.vertices[block_hash]
        for account in (block.tx.sender, block.tx.receiver):
            if account in chains:
                chains[account].append_block(block)
    return chains
