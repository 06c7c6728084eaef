"""Deterministic toy attention generator served from a shared prefix cache.

The model is a small pre-norm transformer in float32 whose keys and values
live in a :class:`~kvguard.kvstore.KvStore` as bf16.  Every attention read
goes through the stored bf16 values, so a bit flip in a cached block reaches
each request that reads it.

Scheduling mirrors a serving loop: a batch of requests is scheduled against
one cache snapshot (prefix walk through the integrity gate), then each
request is prefilled and decoded in order, then all blocks are released.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from kvguard.block_pool import BlockPool, ExtraKeys, block_hashes
from kvguard.integrity import IntegrityConfig, IntegrityMonitor
from kvguard.kvstore import KvGeometry, KvStore

COLLAPSE_TOKEN = 0


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 256
    n_layers: int = 2
    n_kv_heads: int = 2
    head_dim: int = 16
    hidden_dim: int = 64
    weight_seed: int = 0
    max_new_tokens: int = 128
    max_positions: int = 1024

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        for name in ("n_layers", "n_kv_heads", "head_dim", "hidden_dim", "max_new_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Request:
    request_id: str
    prefix_tokens: tuple[int, ...]
    suffix_tokens: tuple[int, ...] = ()
    salt: bytes | None = None

    def __post_init__(self):
        if not self.prefix_tokens and not self.suffix_tokens:
            raise ValueError("request has no tokens")

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.prefix_tokens + self.suffix_tokens

    @property
    def extra_keys(self) -> ExtraKeys:
        return ExtraKeys(salt=self.salt)


@dataclass
class GenerationOutput:
    request_id: str
    tokens: list[int]
    served_from_cache: list[bool]
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "request_id": self.request_id,
            "tokens": self.tokens,
            "hit_flags": self.served_from_cache,
            "degenerate": self.degenerate,
        })


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Model:
    """Weights of the toy transformer; pure function of ``cfg.weight_seed``."""

    # gains chosen so that prefix tokens draw a real share of attention mass
    # and argmax margins are small enough for value perturbations to matter
    QK_GAIN = 3.0
    OUT_GAIN = 2.0
    LOGIT_GAIN = 4.0
    EMBED_GAIN = 1.0

    def __init__(self, cfg: ToyModelConfig):
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(key=cfg.weight_seed))
        d, hd = cfg.hidden_dim, cfg.n_kv_heads * cfg.head_dim
        self.embed = _uniform(rng, (cfg.vocab_size, d), 1, self.EMBED_GAIN)
        pos = np.arange(cfg.max_positions)[:, None]
        freq = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
        self.pos = np.zeros((cfg.max_positions, d), dtype=np.float32)
        self.pos[:, 0::2] = 0.5 * np.sin(pos * freq)
        self.pos[:, 1::2] = 0.5 * np.cos(pos * freq)
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append({
                # fused [q; k; v] projection
                "wqkv": np.concatenate([
                    _uniform(rng, (hd, d), d, self.QK_GAIN),
                    _uniform(rng, (hd, d), d, self.QK_GAIN),
                    _uniform(rng, (hd, d), d),
                ]),
                "wo": _uniform(rng, (d, hd), hd, self.OUT_GAIN),
                "w1": _uniform(rng, (2 * d, d), d),
                "w2": _uniform(rng, (d, 2 * d), 2 * d),
            })
        self.unembed = _uniform(rng, (cfg.vocab_size, d), d, self.LOGIT_GAIN)

    def weights(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "pos": self.pos, "unembed": self.unembed}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.items()})
        return out


def build_model(cfg: ToyModelConfig) -> Model:
    return Model(cfg)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.dot(x, x) / np.float32(x.size) + np.float32(1e-6))


def attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention of one query over ``n`` cached tokens.

    ``q`` is ``[H, D]``, ``keys``/``values`` are ``[n, H, D]``.  Returns the
    softmax weights ``[H, n]`` and the per-head output ``[H, D]``, which is
    linear in the values: ``out[h] = sum_j alpha[h, j] * values[j, h]``.
    """
    scale = q.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    scores = np.einsum("nhd,hd->hn", keys, q) * scale
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    alpha = w / w.sum(axis=1, keepdims=True)
    return alpha, np.einsum("hn,nhd->hd", alpha, values)


@dataclass
class RequestContext:
    request: Request
    block_table: list[int]
    n_hit_blocks: int
    hit_flags: list[bool]
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    hit_tokens: int = 0
    n_tokens: int = 0
    logits: np.ndarray | None = None


class Engine:
    """One serving instance: model, KV store, block pool and integrity gate."""

    def __init__(
        self,
        model: Model,
        n_blocks: int = 256,
        block_size: int = 16,
        integrity: IntegrityConfig | None = None,
    ):
        cfg = model.cfg
        self.model = model
        self.geometry = KvGeometry(cfg.n_layers, n_blocks, block_size, cfg.n_kv_heads, cfg.head_dim)
        self.store = KvStore(self.geometry)
        self.pool = BlockPool(n_blocks, block_size)
        self.monitor = IntegrityMonitor(integrity or IntegrityConfig())
        self.cycle = 0
        # (cycle, request_id, block_ids served from cache) for damage accounting
        self.serve_log: list[tuple[int, str, tuple[int, ...]]] = []

    @property
    def block_size(self) -> int:
        return self.geometry.block_size

    # --- scheduling ----------------------------------------------------------

    def schedule(self, req: Request) -> RequestContext:
        """Prefix walk, integrity gate, ref counting and block allocation."""
        B = self.block_size
        prompt = req.prompt
        hashes = block_hashes(prompt, B, req.extra_keys)
        hits, _ = self.pool.find_longest_cached_prefix(prompt, req.extra_keys)
        admitted: list[int] = []
        for block_id in hits:
            if not self.monitor.admit_hit(self.store, self.pool, block_id, self.cycle):
                break
            self.pool.touch(block_id)
            admitted.append(block_id)

        total_tokens = len(prompt) + self.model.cfg.max_new_tokens - 1
        n_needed = -(-total_tokens // B)
        table = list(admitted)
        try:
            while len(table) < n_needed:
                table.append(self.pool.allocate_block())
        except Exception:
            self.pool.release(table[::-1])
            raise
        # only blocks made entirely of shared prefix tokens are ever cached;
        # the boundary block and everything after it stay private
        n_shareable = len(req.prefix_tokens) // B
        for i in range(len(admitted), n_shareable):
            if self.pool.lookup(hashes[i]) is None:
                self.pool.seal_block(table[i], hashes[i], self.cycle)

        n_prompt_blocks = -(-len(prompt) // B)
        flags = [i < len(admitted) for i in range(n_prompt_blocks)]
        ctx = RequestContext(req, table, len(admitted), flags, hit_tokens=len(admitted) * B)
        self.serve_log.append((self.cycle, req.request_id, tuple(admitted)))
        return ctx

    # --- model execution -------------------------------------------------------

    def _forward(self, ctx: RequestContext, token: int, pos: int) -> np.ndarray:
        model, cfg, B = self.model, self.model.cfg, self.block_size
        H, D = cfg.n_kv_heads, cfg.head_dim
        block, slot = ctx.block_table[pos // B], pos % B
        x = model.embed[token] + model.pos[pos]
        for li, layer in enumerate(model.layers):
            qkv = (layer["wqkv"] @ _rmsnorm(x)).reshape(3, H, D)
            kv = self.store.write_token(li, block, slot, qkv[1:])
            ctx.keys[li][pos] = kv[0]
            ctx.values[li][pos] = kv[1]
            q = qkv[0]
            _, o = attend(q, ctx.keys[li][:pos + 1], ctx.values[li][:pos + 1])
            x = x + layer["wo"] @ o.reshape(-1)
            x = x + layer["w2"] @ np.tanh(layer["w1"] @ _rmsnorm(x))
        ctx.n_tokens = pos + 1
        return model.unembed @ _rmsnorm(x)

    def prefill(self, ctx: RequestContext) -> None:
        """Load cached K/V for hit blocks, then compute the rest of the prompt."""
        cfg = self.model.cfg
        capacity = len(ctx.block_table) * self.block_size
        ctx.keys = [np.zeros((capacity, cfg.n_kv_heads, cfg.head_dim), np.float32) for _ in range(cfg.n_layers)]
        ctx.values = [np.zeros_like(k) for k in ctx.keys]
        n_hit = ctx.hit_tokens
        if n_hit:
            for li in range(cfg.n_layers):
                k, v = self.store.gather(li, ctx.block_table[:ctx.n_hit_blocks], n_hit)
                ctx.keys[li][:n_hit] = k
                ctx.values[li][:n_hit] = v
        prompt = ctx.request.prompt
        with np.errstate(all="ignore"):
            for pos in range(n_hit, len(prompt)):
                ctx.logits = self._forward(ctx, prompt[pos], pos)

    def decode_greedy(self, ctx: RequestContext) -> GenerationOutput:
        """Greedy decoding; non-finite logits switch to the collapse token."""
        max_new = self.model.cfg.max_new_tokens
        tokens: list[int] = []
        degenerate = False
        logits = ctx.logits
        pos = len(ctx.request.prompt)
        with np.errstate(all="ignore"):
            for step in range(max_new):
                if degenerate or not np.isfinite(logits).all():
                    degenerate = True
                    tokens.append(COLLAPSE_TOKEN)
                    continue
                tok = int(np.argmax(logits))  # first maximum == lowest id on ties
                tokens.append(tok)
                if step < max_new - 1:
                    logits = self._forward(ctx, tok, pos)
                    pos += 1
        return GenerationOutput(ctx.request.request_id, tokens, ctx.hit_flags, degenerate)

    # --- composition -----------------------------------------------------------

    def run_batch(
        self,
        requests: Sequence[Request],
        after_schedule: Callable[[Engine], None] | None = None,
    ) -> list[GenerationOutput]:
        """One scheduling cycle serving ``requests`` against the same snapshot.

        ``after_schedule`` runs once all requests have passed the integrity
        gate and before any of them reads the cache: the TOCTOU window.
        """
        self.cycle += 1
        contexts: list[RequestContext] = []
        try:
            for req in requests:
                contexts.append(self.schedule(req))
            if after_schedule is not None:
                after_schedule(self)
            for ctx in contexts:
                self.prefill(ctx)
            # the model step has returned: install deferred digests
            self.monitor.seal_pending(self.store, self.pool, self.cycle)
            return [self.decode_greedy(ctx) for ctx in contexts]
        finally:
            for ctx in contexts:
                self.pool.release(ctx.block_table[::-1])

    def run_request(self, req: Request) -> GenerationOutput:
        return self.run_batch([req])[0]

    def fork(self) -> Engine:
        """Independent copy of the cache state sharing the (read-only) model."""
        return copy.deepcopy(self, memo={id(self.model): self.model})

    def prefix_surface(self, prefix_tokens: Sequence[int], salt: bytes | None = None) -> list[int]:
        """Physical ids of the cached, fully shared blocks of a prefix."""
        n_full = len(prefix_tokens) // self.block_size
        hits, _ = self.pool.find_longest_cached_prefix(
            list(prefix_tokens[:n_full * self.block_size]), ExtraKeys(salt=salt)
        )
        return hits


# --- experiment descriptors ----------------------------------------------------


def load_descriptor(path: str | Path) -> tuple[ToyModelConfig, list[Request]]:
    """Read ``{"model": {...}, "requests": [...]}`` from a JSON file."""
    raw = json.loads(Path(path).read_text())
    cfg = ToyModelConfig(**raw.get("model", {}))
    reqs = []
    for i, r in enumerate(raw.get("requests", [])):
        salt = r.get("salt")
        reqs.append(Request(
            request_id=str(r.get("request_id", i)),
            prefix_tokens=tuple(r.get("prefix_tokens", ())),
            suffix_tokens=tuple(r.get("suffix_tokens", ())),
            salt=salt.encode() if isinstance(salt, str) else salt,
        ))
    return cfg, reqs


def write_outputs(outputs: Iterable[GenerationOutput], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for out in outputs:
            fh.write(out.to_json() + "\n")


def config_dict(cfg: ToyModelConfig) -> dict:
    return asdict(cfg)
