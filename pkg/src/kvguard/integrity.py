"""Checksum countermeasure for cached KV blocks, plus the TTL mitigation.

On seal a SHA-256 digest of the block's bytes (all layers, both sides) is
stored with the block metadata.  Every cache hit recomputes and compares it
at scheduling time; a mismatch invalidates the block so the request falls
back to a normal prefill.
"""

from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from kvguard.block_pool import BlockPool
from kvguard.kvstore import KvStore

DIGEST_ALGORITHM = "SHA-256"


class Verdict(enum.Enum):
    OK = "ok"
    MISMATCH = "mismatch"


class TtlDecision(enum.Enum):
    KEEP = "keep"
    RECOMPUTE = "recompute"


@dataclass(frozen=True)
class IntegrityConfig:
    enabled: bool = False
    ttl_requests: int | None = None
    digest_algorithm: str = DIGEST_ALGORITHM

    def __post_init__(self):
        if self.ttl_requests is not None and self.ttl_requests < 1:
            raise ValueError("ttl_requests must be >= 1 when set")
        if self.digest_algorithm != DIGEST_ALGORITHM:
            raise ValueError(f"unsupported digest algorithm {self.digest_algorithm!r}")

    @property
    def active(self) -> bool:
        return self.enabled or self.ttl_requests is not None


@dataclass(frozen=True)
class BlockDigest:
    block_id: int
    digest: bytes
    sealed_at: int | None
    hits_since_seal: int = 0


@dataclass(frozen=True)
class DetectionEvent:
    cycle: int
    block_id: int
    cause: str  # "checksum" or "ttl"
    action: str


def digest_block(store: KvStore, block_id: int) -> bytes:
    return hashlib.sha256(store.block_bytes(block_id)).digest()


def seal(store: KvStore, pool: BlockPool, block_id: int, cycle: int | None = None) -> BlockDigest:
    meta = pool.blocks[block_id]
    if not meta.sealed:
        raise ValueError(f"block {block_id} has not been sealed in the pool")
    meta.digest = digest_block(store, block_id)
    if cycle is not None:
        meta.sealed_at = cycle
    return BlockDigest(block_id, meta.digest, meta.sealed_at, meta.hits_since_seal)


def verify(store: KvStore, pool: BlockPool, block_id: int) -> Verdict:
    meta = pool.blocks[block_id]
    if not meta.sealed or meta.digest is None:
        raise ValueError(f"block {block_id} has no stored digest")
    return Verdict.OK if digest_block(store, block_id) == meta.digest else Verdict.MISMATCH


def on_mismatch(pool: BlockPool, block_id: int) -> None:
    # the caller's prefix walk stops here, so the request recomputes from
    # this block on through the ordinary prefill path
    pool.invalidate(block_id)


def ttl_check(pool: BlockPool, block_id: int, cfg: IntegrityConfig) -> TtlDecision:
    if cfg.ttl_requests is None:
        return TtlDecision.KEEP
    if pool.blocks[block_id].hits_since_seal >= cfg.ttl_requests:
        return TtlDecision.RECOMPUTE
    return TtlDecision.KEEP


@dataclass
class IntegrityMonitor:
    """Scheduler-side gate that every prefix cache hit passes through."""

    config: IntegrityConfig = field(default_factory=IntegrityConfig)
    verified_hits: int = 0
    mismatches: int = 0
    ttl_expiries: int = 0
    pre_seal_hits: int = 0
    events: list[DetectionEvent] = field(default_factory=list)

    def seal_pending(self, store: KvStore, pool: BlockPool, cycle: int) -> list[BlockDigest]:
        """Install digests owed by blocks sealed during the step that just ran."""
        pending, pool.pending_digest = pool.pending_digest, []
        if not self.config.enabled:
            return []
        return [seal(store, pool, b, cycle) for b in pending if pool.blocks[b].sealed]

    def admit_hit(self, store: KvStore, pool: BlockPool, block_id: int, cycle: int) -> bool:
        """Return True when the cached block may be served to the request."""
        cfg = self.config
        meta = pool.blocks[block_id]
        if cfg.enabled:
            if meta.digest is None:
                self.pre_seal_hits += 1
            else:
                self.verified_hits += 1
                if verify(store, pool, block_id) is Verdict.MISMATCH:
                    self.mismatches += 1
                    self.events.append(DetectionEvent(cycle, block_id, "checksum", "evict-recompute"))
                    on_mismatch(pool, block_id)
                    return False
        if ttl_check(pool, block_id, cfg) is TtlDecision.RECOMPUTE:
            self.ttl_expiries += 1
            self.events.append(DetectionEvent(cycle, block_id, "ttl", "evict-recompute"))
            pool.invalidate(block_id)
            return False
        meta.hits_since_seal += 1
        return True

    def write_events(self, path: str | Path, append: bool = False) -> None:
        path = Path(path)
        new = not append or not path.exists()
        with path.open("a" if append else "w", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["cycle", "block_id", "cause", "action", "digest_algorithm"])
            for ev in self.events:
                writer.writerow([ev.cycle, ev.block_id, ev.cause, ev.action, self.config.digest_algorithm])
