"""Desk-scale confidential federated computation.

Modules, bottom-up: ``canonical`` (encoding/digests), ``envelope`` (HPKE-wrapped
AEAD blobs), ``transparency`` (Merkle log), ``attestation`` (layered evidence,
endorsements, reference values), ``policy`` (access-policy DAGs), ``dpquery``
(DP SQL dialect), ``aggcore`` (DP heavy hitters and vector sums), ``ledger``,
``client``, ``pipeline``, ``scenarios`` and ``cli``.
"""

__version__ = "0.1.0"
