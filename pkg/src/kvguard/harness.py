"""Seeded experiment runner: configs in, CSV tables and a JSON summary out.

Every experiment is a function ``cmd_<name>(cfg) -> dict`` that writes its
tables under ``cfg.out_dir`` and returns the summary it also stores in
``summary.json``.  Trial seeds are derived from the top-level seed, the model
seed and the condition, so a fixed config reproduces identical tables.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from kvguard import bf16, stats
from kvguard.block_pool import BlockPool, block_hashes, compute_block_hash
from kvguard.engine import Engine, Request, ToyModelConfig, build_model
from kvguard.faultlab import (
    SURVIVAL_CHECKPOINTS,
    Category,
    Lab,
    LabConfig,
    TrialResult,
    derive_seed,
    finish_trial,
    make_prefix,
    ocr,
    persistence_baselines,
    prepare_trial,
    regenerate,
    run_guarded_trial,
    run_persistence,
    score,
)
from kvguard.integrity import IntegrityConfig, Verdict, seal, verify
from kvguard.kvstore import Coord, KvGeometry, KvSide, KvStore

log = logging.getLogger(__name__)

EXPERIMENTS = ("scan-bits", "selective", "persistence", "detect", "overhead", "noise-floor")
REPRESENTATIVE_BITS = (0, 6, 14, 15)
TRIAL_COLUMNS = ["trial_id", "model_seed", "p", "n_c", "tcr", "mean_tdr", "mean_rouge", "category"]
PERSISTENCE_COLUMNS = ["run_id", "model_seed", "p", "i", "c_i", "C_i", "block_present"]
DETECTION_COLUMNS = ["trial_id", "cycle", "block_id", "cause", "action", "digest_algorithm"]

_DEFAULTS: dict[str, dict[str, Any]] = {
    "scan-bits": {"bits": tuple(range(16)), "n_c_levels": (2, 4, 8, 16, 32), "trials": 30},
    "selective": {"bits": REPRESENTATIVE_BITS, "n_c_levels": (2,), "trials": 30},
    "persistence": {"bits": REPRESENTATIVE_BITS, "n_c_levels": (1,), "trials": 30},
    "detect": {"bits": REPRESENTATIVE_BITS, "n_c_levels": (2,), "trials": 30},
    "overhead": {"bits": (), "n_c_levels": (1,), "trials": 30},
    "noise-floor": {"bits": (), "n_c_levels": (1, 2, 4, 8, 16, 32), "trials": 10},
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class ExperimentFailure(AssertionError):
    """An experiment's built-in check did not hold."""

    def __init__(self, message: str, summary: dict | None = None):
        super().__init__(message)
        self.summary = summary


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    model_seeds: tuple[int, ...] = (0, 1)
    model: dict = field(default_factory=dict)
    prefix_len: int = 103
    block_size: int = 16
    n_blocks: int = 512
    suffix_len: tuple[int, int] = (8, 32)
    bits: tuple[int, ...] | None = None
    n_c_levels: tuple[int, ...] | None = None
    trials: int | None = None
    requests: int = 100
    checkpoints: tuple[int, ...] = SURVIVAL_CHECKPOINTS
    integrity: bool = False
    ttl: int | None = None
    # selective: seeds of the two prefix groups
    prefix_seeds: tuple[int, int] = (0, 1)
    # detect
    control_hits: int = 3000
    sweep: bool = True
    # noise-floor: deliberately break one control trial
    fault_test: bool = False
    out_dir: Path = Path("out")

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        defaults = _DEFAULTS[self.experiment]
        for name in ("bits", "n_c_levels", "trials"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, defaults[name])
        for name in ("bits", "n_c_levels", "model_seeds", "checkpoints", "suffix_len", "prefix_seeds"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if any(not 0 <= b <= 15 for b in self.bits):
            raise ConfigError("bit positions must lie in [0, 15]")
        if any(n < 1 for n in self.n_c_levels) or not self.n_c_levels:
            raise ConfigError("n_c levels must be positive")
        if not self.model_seeds:
            raise ConfigError("at least one model seed is required")
        if self.requests < 1:
            raise ConfigError("requests must be >= 1")
        if len(self.suffix_len) != 2 or not 1 <= self.suffix_len[0] <= self.suffix_len[1]:
            raise ConfigError("suffix_len must be [min, max] with 1 <= min <= max")
        if self.ttl is not None and self.ttl < 1:
            raise ConfigError("ttl must be >= 1")
        if self.prefix_len < self.block_size:
            raise ConfigError("prefix must span at least one full block")
        if self.experiment in ("scan-bits", "selective", "persistence", "detect") and not self.bits:
            raise ConfigError(f"{self.experiment} needs at least one bit position")
        if self.experiment == "selective":
            if len(self.prefix_seeds) != 2:
                raise ConfigError("selective needs exactly two prefix seeds")
        try:
            ToyModelConfig(**self.model)
        except TypeError as exc:
            raise ConfigError(f"bad model section: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if "weight_seed" in self.model:
            raise ConfigError("set model seeds through model_seeds, not model.weight_seed")

    @classmethod
    def from_dict(cls, raw: dict, **overrides) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        merged = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in merged:
            raise ConfigError("config lacks 'experiment'")
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path, **overrides) -> ExperimentConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw, **overrides)

    @property
    def integrity_config(self) -> IntegrityConfig:
        return IntegrityConfig(enabled=self.integrity, ttl_requests=self.ttl)

    def lab(self, model_seed: int, prefix_seed: int | None = None, integrity: IntegrityConfig | None = None) -> Lab:
        model = ToyModelConfig(**{**self.model, "weight_seed": model_seed})
        return Lab(LabConfig(
            model=model,
            prefix_len=self.prefix_len,
            block_size=self.block_size,
            n_blocks=self.n_blocks,
            suffix_len_min=self.suffix_len[0],
            suffix_len_max=self.suffix_len[1],
            prefix_seed=self.prefix_seeds[0] if prefix_seed is None else prefix_seed,
            integrity=integrity or self.integrity_config,
        ))

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["out_dir"] = str(self.out_dir)
        return out


# --- output helpers --------------------------------------------------------------


def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else value


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    n = 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
            n += 1
    return n


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_summary(cfg: ExperimentConfig, summary: dict) -> dict:
    summary = {"experiment": cfg.experiment, "seed": cfg.seed, "model_seeds": list(cfg.model_seeds),
               "config": cfg.to_json(), **summary}
    summary = _jsonable(summary)
    (cfg.out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _trial_row(trial_id: str, model_seed: int, p: int | None, res: TrialResult) -> list:
    return [trial_id, model_seed, "none" if p is None else p, res.n_c, res.tcr, res.mean_tdr,
            res.mean_rouge, res.category.value]


def _event_rows(trial_id: str, events, integrity: IntegrityConfig) -> list[list]:
    return [[trial_id, e.cycle, e.block_id, e.cause, e.action, integrity.digest_algorithm] for e in events]


def _trial_seed(cfg: ExperimentConfig, model_seed: int, n_c: int, t: int, stream: int = 0) -> int:
    # shared by every bit of a condition, so bits are compared on paired workloads
    return derive_seed(cfg.seed, model_seed, stream, n_c, t)


def _prepare(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)


# --- experiments -------------------------------------------------------------------


def cmd_scan_bits(cfg: ExperimentConfig) -> dict:
    """Every (bit, n_c) condition; per-bit means, classes and Kruskal-Wallis over n_c."""
    _prepare(cfg.out_dir)
    rows: list[list] = []
    per_seed: dict[int, dict] = {}
    for model_seed in cfg.model_seeds:
        lab = cfg.lab(model_seed)
        results: dict[int, dict[int, list[TrialResult]]] = {p: {n: [] for n in cfg.n_c_levels} for p in cfg.bits}
        for n_c in cfg.n_c_levels:
            for t in range(cfg.trials):
                setup = prepare_trial(lab, n_c, _trial_seed(cfg, model_seed, n_c, t))
                for p in cfg.bits:
                    res = finish_trial(setup, lab, p)
                    results[p][n_c].append(res)
                    rows.append(_trial_row(f"s{model_seed}-b{p}-n{n_c}-t{t}", model_seed, p, res))
            log.info("scan seed=%d n_c=%d done", model_seed, n_c)
        per_seed[model_seed] = _scan_summary(results)

    summary: dict[str, Any] = {"per_model_seed": per_seed}
    if len(cfg.model_seeds) >= 2 and len(cfg.bits) >= 3:
        a, b = (per_seed[s]["per_bit"] for s in cfg.model_seeds[:2])
        rho = stats.spearman([a[p]["ocr"] for p in cfg.bits], [b[p]["ocr"] for p in cfg.bits])
        summary["cross_seed_ocr_spearman"] = {"rho": rho.statistic, "p_value": rho.p_value,
                                              "degenerate": rho.degenerate}
    summary["rows"] = write_csv(cfg.out_dir / "trials.csv", TRIAL_COLUMNS, rows)
    return write_summary(cfg, summary)


def _scan_summary(results: dict[int, dict[int, list[TrialResult]]]) -> dict:
    per_bit: dict[int, dict] = {}
    kw_p: list[float] = []
    for p, by_nc in results.items():
        trials = [r for rs in by_nc.values() for r in rs]
        counts = {c.value: sum(r.category is c for r in trials) for c in Category}
        entry = {
            "field": bf16.classify_bit(p).symbol,
            "trials": len(trials),
            "mean_tcr": float(np.mean([r.tcr for r in trials])),
            "mean_tdr": float(np.mean([r.mean_tdr for r in trials])),
            "mean_rouge": float(np.mean([r.mean_rouge for r in trials])),
            "ocr": ocr([r.tcr for r in trials]),
            "categories": counts,
            "ocr_by_n_c": {n: ocr([r.tcr for r in rs]) for n, rs in by_nc.items()},
        }
        if len(by_nc) >= 2:
            kw = stats.kruskal_wallis([[r.tcr for r in rs] for rs in by_nc.values()])
            entry["kruskal_wallis"] = {"H": kw.statistic, "p_value": kw.p_value, "degenerate": kw.degenerate}
            kw_p.append(kw.p_value)
        per_bit[p] = entry
    if kw_p:
        for p, adj in zip(results, stats.bonferroni(kw_p)):
            per_bit[p]["kruskal_wallis"]["p_bonferroni"] = adj
    collapse_bits = sorted(p for p, e in per_bit.items() if e["categories"]["collapse"])
    return {"per_bit": per_bit, "collapse_bits": collapse_bits}


def _check_prefix_groups(cfg: ExperimentConfig, lab_a: Lab, prefix_b: tuple[int, ...]) -> None:
    if lab_a.prefix == prefix_b:
        raise ConfigError("prefix groups are identical")
    shared = set(block_hashes(lab_a.prefix, cfg.block_size)) & set(block_hashes(prefix_b, cfg.block_size))
    if shared:
        raise ConfigError("prefix groups share cached blocks")


def cmd_selective(cfg: ExperimentConfig) -> dict:
    """Inject into group A's prefix blocks only; group B must stay untouched."""
    _prepare(cfg.out_dir)
    rows: list[list] = []
    seeds_summary: dict[int, dict] = {}
    violations: list[str] = []
    for model_seed in cfg.model_seeds:
        lab = cfg.lab(model_seed, cfg.prefix_seeds[0], IntegrityConfig())
        prefix_b = make_prefix(cfg.prefix_len, lab.config.model.vocab_size, cfg.prefix_seeds[1])
        _check_prefix_groups(cfg, lab, prefix_b)
        tcr_a: dict[int, list[float]] = {p: [] for p in cfg.bits}
        tcr_b: dict[int, list[float]] = {p: [] for p in cfg.bits}
        for n_c in cfg.n_c_levels:
            for t in range(cfg.trials):
                setup = prepare_trial(lab, n_c, _trial_seed(cfg, model_seed, n_c, t, 1), prefix_b=prefix_b, n_b=n_c)
                for p in cfg.bits:
                    regen = regenerate(setup, lab, p)
                    res_a = score(regen.spec, setup.baselines[:n_c], regen.outputs[:n_c])
                    res_b = score(None, setup.baselines[n_c:], regen.outputs[n_c:])
                    tid = f"s{model_seed}-b{p}-n{n_c}-t{t}"
                    rows.append(_trial_row(tid, model_seed, p, res_a) + ["A"])
                    rows.append(_trial_row(tid, model_seed, p, res_b) + ["B"])
                    tcr_a[p].append(res_a.tcr)
                    tcr_b[p].append(res_b.tcr)
                    if res_b.tcr != 0:
                        violations.append(tid)
        seeds_summary[model_seed] = {
            p: {"group_a_mean_tcr": float(np.mean(tcr_a[p])), "group_a_ocr": ocr(tcr_a[p]),
                "group_b_mean_tcr": float(np.mean(tcr_b[p])),
                "group_b_zero_trials": sum(t == 0 for t in tcr_b[p]), "trials": len(tcr_b[p])}
            for p in cfg.bits
        }
    n_rows = write_csv(cfg.out_dir / "trials.csv", TRIAL_COLUMNS + ["group"], rows)
    summary = write_summary(cfg, {"per_model_seed": seeds_summary, "group_b_violations": violations,
                                  "rows": n_rows})
    if violations:
        raise ExperimentFailure(f"group B diverged in {len(violations)} trials", summary)
    return summary


def persistence_workload(cfg: ExperimentConfig, lab: Lab, model_seed: int) -> tuple[Request, list[Request]]:
    rng = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, model_seed, 2)))
    warm = lab.requests(rng, 1, "warm")[0]
    return warm, lab.requests(rng, cfg.requests, "seq")


def cmd_persistence(cfg: ExperimentConfig) -> dict:
    """One flip, then ``requests`` sequential requests; cumulative damage and its linear fit."""
    _prepare(cfg.out_dir)
    integrity = cfg.integrity_config
    rows: list[list] = []
    detections: list[list] = []
    conditions: dict[str, dict] = {}
    spearman_p: list[float] = []
    checkpoints = tuple(c for c in cfg.checkpoints if c <= cfg.requests)
    for model_seed in cfg.model_seeds:
        lab = cfg.lab(model_seed, integrity=integrity)
        warm, workload = persistence_workload(cfg, lab, model_seed)
        baselines = persistence_baselines(lab, warm, workload)
        for p in cfg.bits:
            runs = []
            for r in range(cfg.trials):
                run = run_persistence(lab, p, warm, workload, baselines, derive_seed(cfg.seed, model_seed, p, r),
                                      integrity, checkpoints)
                runs.append(run)
                run_id = f"s{model_seed}-b{p}-r{r}"
                for i, (c, C) in enumerate(zip(run.indicators, run.cumulative), start=1):
                    present = run.survival_checkpoints.get(i)
                    rows.append([run_id, model_seed, p, i, int(c), C, "" if present is None else int(present)])
                detections.extend(_event_rows(run_id, run.events, integrity))
            cond = _persistence_summary(runs, checkpoints)
            conditions[f"s{model_seed}-b{p}"] = {"model_seed": model_seed, "p": p, **cond}
            spearman_p.append(cond["spearman"]["p_value"])
            log.info("persistence seed=%d bit=%d rate=%.3f", model_seed, p, cond["mean_rate"])
    for cond, adj in zip(conditions.values(), stats.bonferroni(spearman_p)):
        cond["spearman"]["p_bonferroni"] = adj
        cond["spearman"]["significant"] = bool(adj < 0.05) if np.isfinite(adj) else False
    n_rows = write_csv(cfg.out_dir / "persistence.csv", PERSISTENCE_COLUMNS, rows)
    write_csv(cfg.out_dir / "detections.csv", DETECTION_COLUMNS, detections)
    return write_summary(cfg, {"conditions": conditions, "rows": n_rows,
                               "integrity": dataclasses.asdict(integrity)})


def _persistence_summary(runs, checkpoints: Sequence[int]) -> dict:
    c_bar = np.mean([r.indicators for r in runs], axis=0)
    C_bar = np.mean([r.cumulative for r in runs], axis=0)
    i = np.arange(1, len(c_bar) + 1)
    fit = stats.ols_fit(i, C_bar) if len(i) >= 2 else None
    trend = stats.spearman(i, c_bar) if len(i) >= 3 else stats.TestResult(float("nan"), float("nan"), len(i), True)
    survival = {c: all(r.survival_checkpoints.get(c, False) for r in runs) for c in checkpoints}
    return {
        "runs": len(runs),
        "mean_rate": float(c_bar.mean()),
        "c_bar": c_bar.tolist(),
        "C_bar": C_bar.tolist(),
        "ols": None if fit is None else {"slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared},
        "slope_minus_rate": None if fit is None else abs(fit.slope - float(c_bar.mean())),
        "spearman": {"rho": trend.statistic, "p_value": trend.p_value, "degenerate": trend.degenerate},
        "survival": survival,
        "survived_all_checkpoints": all(survival.values()),
        "max_corrupted_serves": max(r.corrupted_serves for r in runs),
        "max_cumulative": max(r.total for r in runs),
    }


def detection_sweep_pool(geometry: KvGeometry, seed: int = 0) -> dict:
    """Flip every bit of every element of every sealed block; the digest check must catch each one."""
    store = KvStore(geometry)
    rng = np.random.Generator(np.random.Philox(key=seed))
    for buf in store.buffers:
        buf[:] = bf16.from_float32(rng.standard_normal(buf.size).astype(np.float32))
    pool = BlockPool(geometry.n_blocks, geometry.block_size)
    for b in range(geometry.n_blocks):
        pool.allocate_block()
        pool.seal_block(b, compute_block_hash(None, [b] * geometry.block_size))
        seal(store, pool, b, 0)
    g = geometry
    total = detected = 0
    for layer in range(g.n_layers):
        for side in range(2):
            for block in range(g.n_blocks):
                for slot in range(g.block_size):
                    for head in range(g.n_kv_heads):
                        for ch in range(g.head_dim):
                            c = Coord(layer, side, block, slot, head, ch)
                            original = store.read(c)
                            for p in range(16):
                                store.write(c, bf16.flip_bit(original, p))
                                total += 1
                                detected += verify(store, pool, block) is Verdict.MISMATCH
                            store.write(c, original)
    return {"injections": total, "detected": detected}


def detection_sweep_engine(geometry: KvGeometry, model_seed: int = 0) -> dict:
    """Same sweep through the serving path on the shared prefix blocks of a tiny engine.

    An injection counts as detected when the next request's integrity gate
    raises exactly one mismatch and the request still matches its clean output.
    """
    g = geometry
    cfg = ToyModelConfig(n_layers=g.n_layers, n_kv_heads=g.n_kv_heads, head_dim=g.head_dim,
                         hidden_dim=16, weight_seed=model_seed, max_new_tokens=1)
    model = build_model(cfg)
    n_shared = g.n_blocks - 1
    prefix = make_prefix(n_shared * g.block_size, cfg.vocab_size, model_seed)
    req = Request("sweep", prefix, (1,))
    engine = Engine(model, g.n_blocks, g.block_size, IntegrityConfig(enabled=True))
    engine.run_request(req)
    baseline = engine.run_request(req).tokens
    surface = engine.prefix_surface(prefix)
    total = detected = 0
    for block in surface:
        for layer in range(g.n_layers):
            for side in range(2):
                for slot in range(g.block_size):
                    for head in range(g.n_kv_heads):
                        for ch in range(g.head_dim):
                            c = Coord(layer, side, block, slot, head, ch)
                            for p in range(16):
                                e = engine.fork()
                                e.store.write(c, bf16.flip_bit(e.store.read(c), p))
                                out = e.run_request(req)
                                total += 1
                                detected += e.monitor.mismatches == 1 and out.tokens == baseline
    return {"injections": total, "detected": detected, "shared_blocks": len(surface)}


SWEEP_GEOMETRY = KvGeometry(n_layers=2, n_blocks=4, block_size=4, n_kv_heads=2, head_dim=4)


def cmd_detect(cfg: ExperimentConfig) -> dict:
    """Replay injections with the checksum gate on; sweep; control arm for false positives."""
    _prepare(cfg.out_dir)
    on = IntegrityConfig(enabled=True, ttl_requests=cfg.ttl)
    rows: list[list] = []
    events: list[list] = []
    replay = {"injections": 0, "detected": 0, "false_positives": 0, "recovered": 0,
              "max_affected_between_cycles": 0, "toctou_max_affected": 0, "toctou_bound_held": True}
    for model_seed in cfg.model_seeds:
        lab = cfg.lab(model_seed, integrity=on)
        for n_c in cfg.n_c_levels:
            for t in range(cfg.trials):
                setup = prepare_trial(lab, n_c, _trial_seed(cfg, model_seed, n_c, t, 1), on)
                for p in cfg.bits:
                    tid = f"s{model_seed}-b{p}-n{n_c}-t{t}"
                    res = run_guarded_trial(setup, lab, p)
                    toctou = run_guarded_trial(setup, lab, p, inject_after_schedule=True)
                    replay["injections"] += 1
                    replay["detected"] += res.detections == 1 and res.affected == 0
                    replay["false_positives"] += res.false_positives
                    replay["recovered"] += res.recovered and toctou.recovered
                    replay["max_affected_between_cycles"] = max(replay["max_affected_between_cycles"], res.affected)
                    replay["toctou_max_affected"] = max(replay["toctou_max_affected"], toctou.affected)
                    replay["toctou_bound_held"] &= toctou.affected <= toctou.n_c
                    rows.append([tid, model_seed, p, n_c, res.detections, res.affected,
                                 toctou.affected_injection_cycle, toctou.affected_follow_up,
                                 int(res.recovered and toctou.recovered)])
                    events.extend(_event_rows(tid, res.events, on))
                    events.extend(_event_rows(tid + "-toctou", toctou.events, on))
    write_csv(cfg.out_dir / "trials.csv",
              ["trial_id", "model_seed", "p", "n_c", "detections", "affected",
               "toctou_affected_injection_cycle", "toctou_affected_follow_up", "recovered"], rows)
    write_csv(cfg.out_dir / "detections.csv", DETECTION_COLUMNS, events)

    summary: dict[str, Any] = {"replay": replay}
    if cfg.sweep:
        summary["sweep_pool"] = detection_sweep_pool(SWEEP_GEOMETRY, cfg.seed)
        summary["sweep_engine"] = detection_sweep_engine(SWEEP_GEOMETRY, cfg.model_seeds[0])
    summary["control"] = control_arm(cfg, cfg.control_hits)
    summary = write_summary(cfg, summary)

    problems = []
    if replay["detected"] != replay["injections"]:
        problems.append("undetected injections in replay")
    if replay["false_positives"] or summary["control"]["mismatches"]:
        problems.append("false positives")
    if replay["recovered"] != replay["injections"]:
        problems.append("recomputed outputs differ from baselines")
    for key in ("sweep_pool", "sweep_engine"):
        if key in summary and summary[key]["detected"] != summary[key]["injections"]:
            problems.append(f"{key} incomplete")
    if problems:
        raise ExperimentFailure("; ".join(problems), summary)
    return summary


def control_arm(cfg: ExperimentConfig, min_hits: int) -> dict:
    """Injection-free traffic with the gate on until ``min_hits`` hits were verified."""
    lab = cfg.lab(cfg.model_seeds[0], integrity=IntegrityConfig(enabled=True))
    engine = lab.new_engine()
    rng = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, 3)))
    n = 0
    while engine.monitor.verified_hits < min_hits:
        engine.run_request(lab.requests(rng, 1, f"c{n}")[0])
        n += 1
    m = engine.monitor
    return {"requests": n, "verified_hits": m.verified_hits, "mismatches": m.mismatches,
            "pre_seal_hits": m.pre_seal_hits}


def cmd_overhead(cfg: ExperimentConfig) -> dict:
    """Tokens/s of follow-up requests with the gate on and off (report only)."""
    _prepare(cfg.out_dir)
    model_seed = cfg.model_seeds[0]
    arms: dict[str, dict] = {}
    outputs: dict[str, list[list[int]]] = {}
    rows: list[list] = []
    for arm, enabled in (("off", False), ("on", True)):
        lab = cfg.lab(model_seed, integrity=IntegrityConfig(enabled=enabled))
        rates: list[float] = []
        outputs[arm] = []
        for r in range(cfg.trials):
            rng = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, model_seed, 4, r)))
            engine = lab.new_engine()
            engine.run_request(lab.requests(rng, 1, "warm")[0])
            for i, req in enumerate(lab.requests(rng, cfg.requests, "seq")):
                start = time.perf_counter()
                out = engine.run_request(req)
                elapsed = time.perf_counter() - start
                rates.append(len(out.tokens) / elapsed)
                outputs[arm].append(out.tokens)
                rows.append([arm, r, i, len(out.tokens), elapsed])
        arms[arm] = {"measurements": len(rates), "mean_tok_per_s": float(np.mean(rates)),
                     "sd_tok_per_s": float(np.std(rates, ddof=1)) if len(rates) > 1 else 0.0}
    off, on = arms["off"]["mean_tok_per_s"], arms["on"]["mean_tok_per_s"]
    write_csv(cfg.out_dir / "trials.csv", ["arm", "run", "i", "tokens", "seconds"], rows)
    return write_summary(cfg, {
        "arms": arms,
        "relative_delta": (on - off) / off,
        "outputs_identical": outputs["on"] == outputs["off"],
    })


def cmd_noise_floor(cfg: ExperimentConfig) -> dict:
    """Injection-free trials must reproduce their baselines token for token."""
    _prepare(cfg.out_dir)
    rows: list[list] = []
    divergences: list[str] = []
    for model_seed in cfg.model_seeds:
        lab = cfg.lab(model_seed)
        for n_c in cfg.n_c_levels:
            for t in range(cfg.trials):
                setup = prepare_trial(lab, n_c, _trial_seed(cfg, model_seed, n_c, t, 5))
                if cfg.fault_test and not rows:
                    res = _faulty_control(setup, lab)
                else:
                    res = finish_trial(setup, lab, None)
                tid = f"s{model_seed}-n{n_c}-t{t}"
                rows.append(_trial_row(tid, model_seed, None, res))
                if res.tcr != 0 or res.mean_tdr != 0:
                    divergences.append(tid)
    n_rows = write_csv(cfg.out_dir / "trials.csv", TRIAL_COLUMNS, rows)
    summary = write_summary(cfg, {"trials": n_rows, "divergences": divergences})
    if divergences:
        raise ExperimentFailure(f"{len(divergences)} control trials diverged", summary)
    return summary


def _faulty_control(setup, lab: Lab) -> TrialResult:
    # a NaN left in a shared value element: the divergence the floor must catch
    engine = setup.engine.fork()
    block = engine.prefix_surface(lab.prefix)[0]
    engine.store.write(Coord(0, KvSide.VALUE, block, 0, 0, 0), bf16.QUIET_NAN)
    return score(None, setup.baselines, engine.run_batch(setup.batch))


COMMANDS = {
    "scan-bits": cmd_scan_bits,
    "selective": cmd_selective,
    "persistence": cmd_persistence,
    "detect": cmd_detect,
    "overhead": cmd_overhead,
    "noise-floor": cmd_noise_floor,
}


def run(cfg: ExperimentConfig) -> dict:
    return COMMANDS[cfg.experiment](cfg)
