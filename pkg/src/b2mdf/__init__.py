"""Blockchain-backed malware detection for app stores.

Feature extractors write signed feature blocks to a per-app private chain,
detection engines score them onto a second private chain, and a consortium of
engines commits verdicts under a two-thirds signature quorum.
"""
from .errors import B2mdfError
from .ledger import (
    Block,
    BlockHeader,
    Chain,
    ChainKind,
    ChainStore,
    Participant,
    Registry,
    Role,
    ValidationReport,
    authorize,
    canonical_bytes,
    quorum_threshold,
    verify_chain,
)
from .pipeline import DeploymentConfig, FinalVerdict, decide, export_features, ingest, scan, verify_store

__version__ = "0.1.0"

__all__ = [
    "B2mdfError", "Block", "BlockHeader", "Chain", "ChainKind", "ChainStore", "Participant",
    "Registry", "Role", "ValidationReport", "authorize", "canonical_bytes", "quorum_threshold",
    "verify_chain", "DeploymentConfig", "FinalVerdict", "decide", "export_features", "ingest",
    "scan", "verify_store",
]
