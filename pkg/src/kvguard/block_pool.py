"""CPU-side prefix-cache metadata.

Blocks are content-addressed by a chain hash over (parent hash, token ids,
extra keys).  A block with ``ref_cnt == 0`` sits in an LRU free queue but
keeps its hash, so it can still be hit until it is reallocated.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence


class AllocationError(RuntimeError):
    """The free queue is empty: every block is pinned by a live request."""


@dataclass(frozen=True)
class ExtraKeys:
    salt: bytes | None = None
    lora_id: str | None = None


NO_EXTRA = ExtraKeys()


@dataclass
class BlockMeta:
    block_id: int
    ref_cnt: int = 0
    chain_hash: bytes | None = None
    sealed: bool = False
    digest: bytes | None = None
    hit_count: int = 0
    sealed_at: int | None = None
    hits_since_seal: int = 0


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def compute_block_hash(
    parent_hash: bytes | None,
    token_ids: Sequence[int],
    extra_keys: ExtraKeys = NO_EXTRA,
) -> bytes:
    """SHA-256 over a length-prefixed encoding of the chain-hash inputs."""
    if len(token_ids) == 0:
        raise ValueError("token_ids must be non-empty")
    h = hashlib.sha256()
    if parent_hash is None:
        h.update(b"\x00")
    else:
        h.update(b"\x01" + _u32(len(parent_hash)) + parent_hash)
    h.update(_u32(len(token_ids)))
    h.update(struct.pack(f"<{len(token_ids)}I", *token_ids))
    for field in (extra_keys.salt, extra_keys.lora_id):
        if field is None:
            h.update(b"\x00")
        else:
            raw = field.encode() if isinstance(field, str) else field
            h.update(b"\x01" + _u32(len(raw)) + raw)
    return h.digest()


def block_hashes(
    token_ids: Sequence[int], block_size: int, extra_keys: ExtraKeys = NO_EXTRA
) -> list[bytes]:
    """Chain hashes of every full block of ``token_ids``."""
    out: list[bytes] = []
    parent = None
    for start in range(0, len(token_ids) - block_size + 1, block_size):
        parent = compute_block_hash(parent, token_ids[start:start + block_size], extra_keys)
        out.append(parent)
    return out


class BlockPool:
    def __init__(self, n_blocks: int, block_size: int):
        if n_blocks <= 0 or block_size <= 0:
            raise ValueError("n_blocks and block_size must be positive")
        self.block_size = block_size
        self.blocks = [BlockMeta(i) for i in range(n_blocks)]
        self.hash_to_block: dict[bytes, int] = {}
        self.free_queue: OrderedDict[int, None] = OrderedDict((i, None) for i in range(n_blocks))
        # sealed this step, digest still owed
        self.pending_digest: list[int] = []
        self.evictions = 0

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def num_free(self) -> int:
        return len(self.free_queue)

    def lookup(self, chain_hash: bytes) -> int | None:
        return self.hash_to_block.get(chain_hash)

    def find_longest_cached_prefix(
        self, token_ids: Sequence[int], extra_keys: ExtraKeys = NO_EXTRA
    ) -> tuple[list[int], int]:
        """Walk full-block hashes from block 0; stop at the first miss."""
        hits: list[int] = []
        for h in block_hashes(token_ids, self.block_size, extra_keys):
            block_id = self.hash_to_block.get(h)
            if block_id is None:
                break
            hits.append(block_id)
        return hits, len(hits) * self.block_size

    def touch(self, block_id: int) -> None:
        meta = self.blocks[block_id]
        if not meta.sealed or self.hash_to_block.get(meta.chain_hash) != block_id:
            raise ValueError(f"block {block_id} is not a sealed cached block")
        if meta.ref_cnt == 0:
            del self.free_queue[block_id]
        meta.ref_cnt += 1
        meta.hit_count += 1

    def release(self, block_ids: Sequence[int]) -> None:
        for block_id in block_ids:
            meta = self.blocks[block_id]
            if meta.ref_cnt <= 0:
                raise ValueError(f"block {block_id} released with ref_cnt={meta.ref_cnt}")
            meta.ref_cnt -= 1
            if meta.ref_cnt == 0:
                self.free_queue[block_id] = None

    def allocate_block(self) -> int:
        if not self.free_queue:
            raise AllocationError("no free KV blocks: all blocks are referenced")
        block_id, _ = self.free_queue.popitem(last=False)
        meta = self.blocks[block_id]
        if meta.chain_hash is not None:
            self.evictions += 1
        self._drop_cached(meta)
        meta.ref_cnt = 1
        meta.hit_count = 0
        return block_id

    def seal_block(self, block_id: int, chain_hash: bytes, cycle: int | None = None) -> None:
        """Register a fully written block for reuse; its digest is deferred."""
        meta = self.blocks[block_id]
        if meta.sealed:
            raise ValueError(f"block {block_id} is already sealed")
        if chain_hash in self.hash_to_block:
            raise ValueError(f"hash already cached in block {self.hash_to_block[chain_hash]}")
        meta.chain_hash = chain_hash
        meta.sealed = True
        meta.sealed_at = cycle
        meta.hits_since_seal = 0
        self.hash_to_block[chain_hash] = block_id
        self.pending_digest.append(block_id)

    def invalidate(self, block_id: int) -> None:
        """Forget a cached block's contents so no further lookup can hit it.

        An unreferenced block moves to the head of the free queue so it is
        recycled before any still-valid cached block.
        """
        meta = self.blocks[block_id]
        self._drop_cached(meta)
        if meta.ref_cnt == 0:
            self.free_queue.move_to_end(block_id, last=False)

    def _drop_cached(self, meta: BlockMeta) -> None:
        if meta.chain_hash is not None and self.hash_to_block.get(meta.chain_hash) == meta.block_id:
            del self.hash_to_block[meta.chain_hash]
        meta.chain_hash = None
        meta.sealed = False
        meta.digest = None
        meta.sealed_at = None
        meta.hits_since_seal = 0
        if meta.block_id in self.pending_digest:
            self.pending_digest.remove(meta.block_id)

    def state(self) -> list[dict]:
        positions = {b: i for i, b in enumerate(self.free_queue)}
        return [
            {
                "block_id": m.block_id,
                "ref_cnt": m.ref_cnt,
                "hash": m.chain_hash.hex() if m.chain_hash else None,
                "sealed": m.sealed,
                "queue_position": positions.get(m.block_id),
            }
            for m in self.blocks
        ]

    def dump_json(self) -> str:
        return json.dumps(self.state(), indent=2)
