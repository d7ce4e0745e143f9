"""Proximity-sharded account ledger with synchronous BFT consensus.

Accounts and nodes share one XOR-metric identifier space; the r nodes
closest to an account store its chain and validate its transactions.
The package bundles the protocol simulator and the shard-compromise
security experiments.
"""

__version__ = "0.1.0"
