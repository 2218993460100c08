"""lskv: a replicated, ledger-backed key-value store with etcd-style semantics.

The cluster acknowledges writes optimistically (before consensus) and gates
commit on replicated signatures over a Merkle tree of transactions.  Clients
can wait for commit with several strategies, fetch offline-verifiable write
receipts, and audit the ledger files without talking to the cluster.
"""

from lskv.types import (
    KeyRange,
    ResponseHeader,
    StoredValue,
    TxID,
    TxStatus,
)

__version__ = "0.1.0"

__all__ = [
    "KeyRange",
    "ResponseHeader",
    "StoredValue",
    "TxID",
    "TxStatus",
    "__version__",
]
