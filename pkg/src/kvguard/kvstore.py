"""Per-layer contiguous KV buffers with fixed block addressing.

Each layer owns one flat ``uint16`` buffer laid out as
``[2, n_blocks, block_size, n_kv_heads, head_dim]`` (keys first, then
values).  Buffers are allocated once and never resized.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from kvguard import bf16


class KvSide(enum.IntEnum):
    KEY = 0
    VALUE = 1


@dataclass(frozen=True)
class KvGeometry:
    n_layers: int
    n_blocks: int
    block_size: int
    n_kv_heads: int
    head_dim: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def block_stride(self) -> int:
        """Elements per block on one side (key or value) of one layer."""
        return self.block_size * self.n_kv_heads * self.head_dim

    @property
    def page_size_elements(self) -> int:
        return 2 * self.block_stride

    @property
    def layer_elements(self) -> int:
        return 2 * self.n_blocks * self.block_stride

    @property
    def block_nbytes(self) -> int:
        return self.n_layers * self.page_size_elements * 2


class Coord(NamedTuple):
    layer: int
    kv_side: int
    block: int
    slot: int
    head: int
    channel: int


def check_coord(g: KvGeometry, c: Coord) -> None:
    bounds = (g.n_layers, 2, g.n_blocks, g.block_size, g.n_kv_heads, g.head_dim)
    for name, value, bound in zip(Coord._fields, c, bounds):
        if not 0 <= value < bound:
            raise IndexError(f"{name}={value} out of range [0, {bound})")


def linear_offset(g: KvGeometry, c: Coord) -> int:
    """Element index of ``c`` inside its layer's buffer."""
    check_coord(g, c)
    off = c.kv_side
    off = off * g.n_blocks + c.block
    off = off * g.block_size + c.slot
    off = off * g.n_kv_heads + c.head
    return off * g.head_dim + c.channel


class KvStore:
    def __init__(self, geometry: KvGeometry):
        self.geometry = geometry
        self.buffers = [
            np.zeros(geometry.layer_elements, dtype=np.uint16)
            for _ in range(geometry.n_layers)
        ]

    def layer_view(self, layer: int) -> np.ndarray:
        g = self.geometry
        return self.buffers[layer].reshape(
            2, g.n_blocks, g.block_size, g.n_kv_heads, g.head_dim
        )

    def read(self, c: Coord) -> int:
        return int(self.buffers[c.layer][linear_offset(self.geometry, c)])

    def write(self, c: Coord, b: int) -> None:
        if not 0 <= b <= 0xFFFF:
            raise ValueError(f"bf16 pattern must fit in 16 bits, got {b:#x}")
        self.buffers[c.layer][linear_offset(self.geometry, c)] = b

    def write_token(self, layer: int, block: int, slot: int, kv: np.ndarray) -> np.ndarray:
        """Store one token's ``[2, H, D]`` key/value rows as bf16.

        Returns the float32 values actually stored, i.e. after the bf16
        round trip.
        """
        bits = bf16.from_float32(kv)
        self.layer_view(layer)[:, block, slot] = bits
        return bf16.to_float32(bits)

    def gather(self, layer: int, blocks: list[int], n_tokens: int) -> tuple[np.ndarray, np.ndarray]:
        """Decoded float32 keys and values ``[n_tokens, H, D]`` for a block table."""
        g = self.geometry
        view = self.layer_view(layer)
        k = view[KvSide.KEY, blocks].reshape(-1, g.n_kv_heads, g.head_dim)[:n_tokens]
        v = view[KvSide.VALUE, blocks].reshape(-1, g.n_kv_heads, g.head_dim)[:n_tokens]
        return bf16.to_float32(k), bf16.to_float32(v)

    def block_bytes(self, block: int) -> bytes:
        """Canonical byte image of one block across all layers.

        Layers ascending; per layer the key page then the value page, each
        slot-major then head then channel; patterns little-endian.
        """
        if not 0 <= block < self.geometry.n_blocks:
            raise IndexError(f"block {block} out of range")
        parts = []
        for layer in range(self.geometry.n_layers):
            view = self.layer_view(layer)
            parts.append(view[KvSide.KEY, block].astype("<u2").tobytes())
            parts.append(view[KvSide.VALUE, block].astype("<u2").tobytes())
        return b"".join(parts)

    def copy(self) -> KvStore:
        out = KvStore(self.geometry)
        for dst, src in zip(out.buffers, self.buffers):
            dst[:] = src
        return out

    def dump(self, directory: str | Path) -> None:
        """Write ``layer_<i>.bin`` files plus ``geometry.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, buf in enumerate(self.buffers):
            (directory / f"layer_{i}.bin").write_bytes(buf.astype("<u2").tobytes())
        meta = asdict(self.geometry) | {
            "layout": ["kv_side", "block", "slot", "head", "channel"],
            "dtype": "bfloat16-le",
        }
        (directory / "geometry.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> KvStore:
        directory = Path(directory)
        meta = json.loads((directory / "geometry.json").read_text())
        fields = KvGeometry.__dataclass_fields__
        store = cls(KvGeometry(**{k: meta[k] for k in fields}))
        for i in range(store.geometry.n_layers):
            raw = np.frombuffer((directory / f"layer_{i}.bin").read_bytes(), dtype="<u2")
            if raw.size != store.geometry.layer_elements:
                raise ValueError(f"layer_{i}.bin has {raw.size} elements, expected "
                                 f"{store.geometry.layer_elements}")
            store.buffers[i][:] = raw
        return store
