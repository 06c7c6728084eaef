"""Single-bit fault injection into shared prefix blocks, and its metrics.

A trial runs four phases on a fresh engine: warm-up (populate the prefix
blocks, output discarded), baseline generation for ``n_c`` requests, one
XOR bit flip in a value element of a shared prefix block, and regeneration
of the same ``n_c`` requests.  Metrics compare phase 4 against phase 2.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from kvguard import bf16
from kvguard.engine import Engine, GenerationOutput, Model, Request, ToyModelConfig, build_model
from kvguard.integrity import DetectionEvent, IntegrityConfig
from kvguard.kvstore import Coord, KvGeometry, KvSide, KvStore

COLLAPSE_ROUGE_THRESHOLD = 0.1
SURVIVAL_CHECKPOINTS = (25, 50, 75, 100)


class Category(enum.Enum):
    NO_EFFECT = "none"
    PARTIAL = "partial"
    COMPLETE = "complete"
    COLLAPSE = "collapse"


# --- metrics -------------------------------------------------------------------


def tcr(baselines: Sequence[Sequence[int]], outputs: Sequence[Sequence[int]]) -> float:
    """Fraction of the batch whose token sequence changed."""
    if len(baselines) != len(outputs):
        raise ValueError("baselines and outputs differ in length")
    if not baselines:
        raise ValueError("empty batch")
    changed = sum(list(y) != list(y_hat) for y, y_hat in zip(baselines, outputs))
    return changed / len(baselines)


def tdr(y: Sequence[int], y_hat: Sequence[int]) -> float:
    """Positional mismatch ratio; positions past the shorter sequence count as mismatches."""
    length = max(len(y), len(y_hat))
    if length == 0:
        return 0.0
    same = sum(a == b for a, b in zip(y, y_hat))
    return (length - same) / length


def ocr(trial_tcrs: Sequence[float]) -> float:
    if len(trial_tcrs) == 0:
        raise ValueError("ocr needs at least one trial")
    return sum(t > 0 for t in trial_tcrs) / len(trial_tcrs)


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(ref: Sequence[int], hyp: Sequence[int]) -> float:
    """ROUGE-L F1 over token ids (no stemming)."""
    if not ref or not hyp:
        return 0.0
    lcs = lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def classify_trial(tcr_value: float, mean_rouge: float) -> Category:
    if not 0.0 <= tcr_value <= 1.0:
        raise ValueError(f"tcr must be in [0, 1], got {tcr_value}")
    if tcr_value == 0.0:
        return Category.NO_EFFECT
    if tcr_value < 1.0:
        return Category.PARTIAL
    if mean_rouge < COLLAPSE_ROUGE_THRESHOLD:
        return Category.COLLAPSE
    return Category.COMPLETE


def corruption_indicator(baseline: Sequence[int], output: Sequence[int]) -> bool:
    return list(baseline) != list(output)


def cumulative(indicators: Sequence[bool]) -> list[int]:
    return [int(c) for c in np.cumsum(np.asarray(indicators, dtype=np.int64))]


# --- injection -------------------------------------------------------------------


@dataclass(frozen=True)
class InjectionSpec:
    bit_position: int
    coord: Coord
    rng_seed: int

    def __post_init__(self):
        if not 0 <= self.bit_position <= 15:
            raise ValueError("bit_position must be in [0, 15]")
        if self.coord.kv_side != KvSide.VALUE:
            raise ValueError("injections target value tensors only")


def pick_target(surface: Sequence[int], p: int, seed: int, geometry: KvGeometry) -> InjectionSpec:
    """Uniform (layer, block, slot, head, channel) over the injection surface."""
    if len(surface) == 0:
        raise ValueError("injection surface is empty")
    rng = np.random.Generator(np.random.Philox(key=seed))
    g = geometry
    coord = Coord(
        layer=int(rng.integers(g.n_layers)),
        kv_side=int(KvSide.VALUE),
        block=int(surface[int(rng.integers(len(surface)))]),
        slot=int(rng.integers(g.block_size)),
        head=int(rng.integers(g.n_kv_heads)),
        channel=int(rng.integers(g.head_dim)),
    )
    return InjectionSpec(p, coord, seed)


def inject(store: KvStore, spec: InjectionSpec) -> tuple[int, int]:
    """XOR-flip one bit in place; returns the (before, after) patterns."""
    before = store.read(spec.coord)
    after = bf16.flip_bit(before, spec.bit_position)
    store.write(spec.coord, after)
    return before, after


# --- workload and trial flow -------------------------------------------------------


@dataclass(frozen=True)
class LabConfig:
    """Settings shared by every trial of an experiment."""

    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    prefix_len: int = 103
    block_size: int = 16
    n_blocks: int = 512
    suffix_len_min: int = 8
    suffix_len_max: int = 32
    prefix_seed: int = 0
    integrity: IntegrityConfig = field(default_factory=IntegrityConfig)


class Lab:
    def __init__(self, config: LabConfig, model: Model | None = None):
        self.config = config
        self.model = model or build_model(config.model)
        self.prefix = make_prefix(config.prefix_len, config.model.vocab_size, config.prefix_seed)

    def new_engine(self, integrity: IntegrityConfig | None = None) -> Engine:
        c = self.config
        return Engine(self.model, c.n_blocks, c.block_size, integrity or c.integrity)

    def requests(self, rng: np.random.Generator, n: int, tag: str, prefix: tuple[int, ...] | None = None,
                 salt: bytes | None = None) -> list[Request]:
        c = self.config
        prefix = self.prefix if prefix is None else prefix
        out = []
        for i in range(n):
            length = int(rng.integers(c.suffix_len_min, c.suffix_len_max + 1))
            suffix = tuple(int(t) for t in rng.integers(1, c.model.vocab_size, length))
            out.append(Request(f"{tag}-{i}", prefix, suffix, salt))
        return out


def make_prefix(length: int, vocab_size: int, seed: int) -> tuple[int, ...]:
    """Seeded synthetic system prompt; token 0 is reserved for collapse output."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    return tuple(int(t) for t in rng.integers(1, vocab_size, length))


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass
class TrialResult:
    spec: InjectionSpec | None
    n_c: int
    baselines: list[list[int]]
    outputs: list[list[int]]
    tcr: float
    tdr_per_request: list[float]
    rouge_per_request: list[float]
    category: Category
    before: int | None = None
    after: int | None = None
    detections: int = 0

    @property
    def ocr_contribution(self) -> int:
        return int(self.tcr > 0)

    @property
    def mean_tdr(self) -> float:
        return float(np.mean(self.tdr_per_request))

    @property
    def mean_rouge(self) -> float:
        return float(np.mean(self.rouge_per_request))

    @property
    def affected(self) -> int:
        return sum(b != o for b, o in zip(self.baselines, self.outputs))


def score(spec: InjectionSpec | None, baselines: list[GenerationOutput], outputs: list[GenerationOutput],
          **extra) -> TrialResult:
    ys = [b.tokens for b in baselines]
    ys_hat = [o.tokens for o in outputs]
    t = tcr(ys, ys_hat)
    tdrs = [tdr(y, y_hat) for y, y_hat in zip(ys, ys_hat)]
    rouges = [rouge_l_f1(y, y_hat) for y, y_hat in zip(ys, ys_hat)]
    return TrialResult(spec, len(ys), ys, ys_hat, t, tdrs, rouges,
                       classify_trial(t, float(np.mean(rouges))), **extra)


@dataclass
class TrialSetup:
    """Engine state after warm-up and baseline generation (phases 1 and 2)."""

    engine: Engine
    batch: list[Request]
    baselines: list[GenerationOutput]
    seed: int


def prepare_trial(lab: Lab, n_c: int, seed: int, integrity: IntegrityConfig | None = None,
                  prefix_b: tuple[int, ...] | None = None, n_b: int = 0) -> TrialSetup:
    """Phases 1-2.  With ``prefix_b`` the batch gains ``n_b`` requests on a second prefix."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    engine = lab.new_engine(integrity)
    warm = lab.requests(rng, 1, "warm")
    batch = lab.requests(rng, n_c, "req")
    if prefix_b is not None:
        warm += lab.requests(rng, 1, "warm-b", prefix=prefix_b)
        batch += lab.requests(rng, n_b, "req-b", prefix=prefix_b)
    engine.run_batch(warm)
    baselines = engine.run_batch(batch)
    return TrialSetup(engine, batch, baselines, seed)


@dataclass
class Regeneration:
    engine: Engine
    spec: InjectionSpec | None
    outputs: list[GenerationOutput]
    before: int | None
    after: int | None
    detections: int


def regenerate(setup: TrialSetup, lab: Lab, p: int | None, inject_after_schedule: bool = False) -> Regeneration:
    """Phases 3-4 on a fork of ``setup``, which stays reusable for other bits."""
    engine = setup.engine.fork()
    spec = None
    if p is not None:
        surface = engine.prefix_surface(lab.prefix)
        spec = pick_target(surface, p, derive_seed(setup.seed, p), engine.geometry)
    flipped: list[tuple[int, int]] = []

    def _inject(e: Engine) -> None:
        if spec is not None:
            flipped.append(inject(e.store, spec))

    mismatches = engine.monitor.mismatches
    if inject_after_schedule:
        outputs = engine.run_batch(setup.batch, after_schedule=_inject)
    else:
        _inject(engine)
        outputs = engine.run_batch(setup.batch)
    before, after = flipped[0] if flipped else (None, None)
    return Regeneration(engine, spec, outputs, before, after, engine.monitor.mismatches - mismatches)


def finish_trial(setup: TrialSetup, lab: Lab, p: int | None, inject_after_schedule: bool = False) -> TrialResult:
    regen = regenerate(setup, lab, p, inject_after_schedule)
    return score(regen.spec, setup.baselines, regen.outputs, before=regen.before, after=regen.after,
                 detections=regen.detections)


def run_trial(lab: Lab, p: int | None, n_c: int, seed: int, integrity: IntegrityConfig | None = None,
              inject_after_schedule: bool = False) -> TrialResult:
    """Warm-up, baseline, inject, regenerate.  ``p=None`` is a control trial.

    With ``inject_after_schedule`` the flip lands after the post-injection
    batch passed the integrity gate but before it reads the cache.
    """
    return finish_trial(prepare_trial(lab, n_c, seed, integrity), lab, p, inject_after_schedule)


@dataclass
class GuardedResult:
    """Damage accounting for one injection with the integrity gate on."""

    spec: InjectionSpec
    n_c: int
    affected_injection_cycle: int
    affected_follow_up: int
    detections: int
    false_positives: int
    recovered: bool
    events: list[DetectionEvent] = field(default_factory=list)

    @property
    def affected(self) -> int:
        return self.affected_injection_cycle + self.affected_follow_up


def run_guarded_trial(setup: TrialSetup, lab: Lab, p: int, inject_after_schedule: bool = False) -> GuardedResult:
    """Inject, regenerate, then serve the same batch once more.

    ``setup`` must come from an engine with detection enabled.  The follow-up
    cycle shows whether the recomputed blocks reproduce the clean baseline.
    """
    false_positives = setup.engine.monitor.mismatches
    n_events = len(setup.engine.monitor.events)
    regen = regenerate(setup, lab, p, inject_after_schedule)
    follow = regen.engine.run_batch(setup.batch)
    base = [b.tokens for b in setup.baselines]

    def _affected(outs: list[GenerationOutput]) -> int:
        return sum(o.tokens != y for o, y in zip(outs, base))

    return GuardedResult(
        spec=regen.spec,
        n_c=len(setup.batch),
        affected_injection_cycle=_affected(regen.outputs),
        affected_follow_up=_affected(follow),
        detections=regen.engine.monitor.mismatches - false_positives,
        false_positives=false_positives,
        recovered=[o.tokens for o in follow] == base,
        events=regen.engine.monitor.events[n_events:],
    )


# --- temporal persistence ----------------------------------------------------------


@dataclass
class PersistenceRun:
    spec: InjectionSpec | None
    indicators: list[bool]
    cumulative: list[int]
    survival_checkpoints: dict[int, bool]
    corrupted_serves: int = 0
    detections: int = 0
    events: list[DetectionEvent] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.cumulative[-1] if self.cumulative else 0


def persistence_baselines(lab: Lab, warmup: Request, requests: Sequence[Request]) -> list[list[int]]:
    """Clean outputs of the sequential workload, each served from a warm cache."""
    engine = lab.new_engine(IntegrityConfig())
    engine.run_request(warmup)
    return [engine.run_request(r).tokens for r in requests]


def run_persistence(
    lab: Lab,
    p: int | None,
    warmup: Request,
    requests: Sequence[Request],
    baselines: Sequence[Sequence[int]],
    seed: int,
    integrity: IntegrityConfig | None = None,
    checkpoints: Sequence[int] = SURVIVAL_CHECKPOINTS,
) -> PersistenceRun:
    """One injection, then every request of ``requests`` in its own cycle."""
    engine = lab.new_engine(integrity)
    engine.run_request(warmup)
    n_events = len(engine.monitor.events)
    spec = None
    if p is not None:
        surface = engine.prefix_surface(lab.prefix)
        spec = pick_target(surface, p, derive_seed(seed, p), engine.geometry)
        inject(engine.store, spec)
        target_hash = engine.pool.blocks[spec.coord.block].chain_hash
        corrupted_bytes = engine.store.block_bytes(spec.coord.block)

    indicators: list[bool] = []
    survival: dict[int, bool] = {}
    corrupted_serves = 0
    for i, (req, y) in enumerate(zip(requests, baselines), start=1):
        out = engine.run_request(req)
        indicators.append(corruption_indicator(y, out.tokens))
        if spec is not None:
            served = engine.serve_log[-1][2]
            if spec.coord.block in served and engine.store.block_bytes(spec.coord.block) == corrupted_bytes:
                corrupted_serves += 1
            if i in checkpoints:
                # still cached under its hash and still holding the flipped bytes
                survival[i] = (engine.pool.lookup(target_hash) == spec.coord.block
                               and engine.store.block_bytes(spec.coord.block) == corrupted_bytes)
    return PersistenceRun(spec, indicators, cumulative(indicators), survival,
                          corrupted_serves, engine.monitor.mismatches, engine.monitor.events[n_events:])
