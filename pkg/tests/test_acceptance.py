"""End-to-end acceptance checks at full toy scale (128 generated tokens).

Each test carries a ``criterion`` marker; ``conftest.py`` prints one PASS or
FAIL line per criterion after the run.  The module takes several minutes.
"""

import math
import time

import numpy as np
import pytest
import scipy.stats

from oracles import brute_lcs, brute_tdr, decode_fields, random_pairs

from kvguard import bf16, stats
from kvguard.faultlab import ocr, rouge_l_f1, tcr, tdr
from kvguard.harness import (
    ExperimentConfig,
    cmd_detect,
    cmd_noise_floor,
    cmd_overhead,
    cmd_persistence,
    cmd_scan_bits,
    cmd_selective,
)

SEED0 = {"model_seeds": [0]}


def config(experiment, out_dir, **kw):
    return ExperimentConfig.from_dict({**SEED0, "experiment": experiment, **kw}, out_dir=out_dir)


def timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - start


@pytest.mark.criterion(1, "bf16 perturbation exact over all patterns and positions, < 1 s")
def test_bf16_exactness():
    bits = np.arange(0x10000, dtype=np.uint16)
    finite = np.array([bf16.is_finite_pattern(int(b)) for b in bits])
    start = time.perf_counter()
    before = decode_fields(bits)
    for p in range(16):
        got = bf16.perturbation_array(bits, p)
        after = decode_fields(bits ^ np.uint16(1 << p))
        with np.errstate(invalid="ignore"):
            expected = after - before
        f = finite
        nan_out = np.isnan(after[f])
        assert np.array_equal(np.isnan(got[f]), nan_out)
        inf_out = np.isinf(after[f])
        assert np.array_equal(got[f][inf_out], after[f][inf_out])
        exact = ~nan_out & ~inf_out
        assert np.array_equal(got[f][exact], expected[f][exact])
        # non-finite inputs are outside the domain and tagged NaN
        assert np.isnan(got[~f]).all()
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, elapsed
    with pytest.raises(ValueError):
        bf16.perturbation(0x7F80, 0)


@pytest.mark.criterion(2, "noise floor: 60 injection-free trials, 0 divergences, < 1 min")
def test_noise_floor(tmp_path):
    summary, elapsed = timed(cmd_noise_floor, config("noise-floor", tmp_path))
    assert summary["trials"] == 60
    assert summary["divergences"] == []
    assert elapsed < 60, elapsed


@pytest.mark.criterion(3, "selective propagation: group B TCR = 0 in 120/120 trials, < 5 min")
def test_selective(tmp_path):
    summary, elapsed = timed(cmd_selective, config("selective", tmp_path))
    per_bit = summary["per_model_seed"]["0"]
    assert sum(v["trials"] for v in per_bit.values()) == 120
    assert sum(v["group_b_zero_trials"] for v in per_bit.values()) == 120
    assert per_bit["14"]["group_a_ocr"] >= per_bit["6"]["group_a_ocr"] >= per_bit["0"]["group_a_ocr"]
    assert elapsed < 300, elapsed


@pytest.fixture(scope="module")
def scan(tmp_path_factory):
    out = tmp_path_factory.mktemp("scan")
    return cmd_scan_bits(config("scan-bits", out, n_c_levels=[2], trials=200))


@pytest.mark.criterion(4, "sensitivity ordering OCR(14) >= OCR(13) >= OCR(6) >= OCR(0); collapse only at bits >= 11")
def test_sensitivity_ordering(scan):
    per_bit = scan["per_model_seed"]["0"]["per_bit"]
    assert all(per_bit[str(p)]["trials"] >= 200 for p in range(16))
    o = {p: per_bit[str(p)]["ocr"] for p in (0, 6, 13, 14)}
    assert o[14] >= o[13] >= o[6] >= o[0], o
    assert all(p >= 11 for p in scan["per_model_seed"]["0"]["collapse_bits"])


@pytest.fixture(scope="module")
def persistence(tmp_path_factory):
    out = tmp_path_factory.mktemp("persistence")
    return timed(cmd_persistence, config("persistence", out))


@pytest.mark.criterion(5, "persistence: survival, R^2 >= 0.99, |slope - rate| <= 0.05, no trend, < 10 min")
def test_persistence_linearity(persistence):
    summary, elapsed = persistence
    failures = []
    for name, cond in summary["conditions"].items():
        assert cond["runs"] == 30 and len(cond["C_bar"]) == 100
        if not cond["survived_all_checkpoints"]:
            failures.append(f"{name}: block evicted")
        if cond["ols"]["r_squared"] < 0.99:
            failures.append(f"{name}: R^2 {cond['ols']['r_squared']:.4f} (rate {cond['mean_rate']:.4f})")
        if cond["slope_minus_rate"] > 0.05:
            failures.append(f"{name}: |slope - rate| {cond['slope_minus_rate']:.4f}")
        if cond["spearman"]["significant"]:
            failures.append(f"{name}: trend p_adj {cond['spearman']['p_bonferroni']:.4f}")
    assert elapsed < 600, elapsed
    assert not failures, failures


@pytest.fixture(scope="module")
def detect(tmp_path_factory):
    out = tmp_path_factory.mktemp("detect")
    return timed(cmd_detect, config("detect", out))


@pytest.mark.criterion(6, "exhaustive detection sweep on the small geometry: 100%, < 5 min")
def test_detection_completeness(detect):
    summary, elapsed = detect
    pool, engine = summary["sweep_pool"], summary["sweep_engine"]
    assert pool["injections"] == 2 * 2 * 4 * 4 * 2 * 4 * 16
    assert pool["detected"] == pool["injections"]
    assert engine["injections"] == engine["shared_blocks"] * 2 * 2 * 4 * 2 * 4 * 16
    assert engine["detected"] == engine["injections"]
    assert summary["replay"]["detected"] == summary["replay"]["injections"] == 120
    assert elapsed < 300, elapsed


@pytest.mark.criterion(7, "soundness: >= 3000 verified hits, 0 false positives")
def test_soundness(detect):
    summary, _ = detect
    assert summary["control"]["verified_hits"] >= 3000
    assert summary["control"]["mismatches"] == 0
    assert summary["replay"]["false_positives"] == 0


@pytest.mark.criterion(8, "damage bound: affected <= batch size, recomputed outputs equal baselines")
def test_damage_bound(detect):
    replay = detect[0]["replay"]
    assert replay["max_affected_between_cycles"] == 0
    assert replay["toctou_bound_held"] and replay["toctou_max_affected"] <= 2
    assert replay["recovered"] == replay["injections"]


@pytest.mark.criterion(9, "TTL = 10 without detection: <= 10 corrupted serves per run")
def test_ttl_bound(tmp_path):
    summary = cmd_persistence(config("persistence", tmp_path, trials=10, requests=60, ttl=10,
                                     checkpoints=[20, 40, 60]))
    serves = [c["max_corrupted_serves"] for c in summary["conditions"].values()]
    assert max(serves) == 10
    assert all(c["max_cumulative"] <= 10 for c in summary["conditions"].values())


@pytest.mark.criterion(10, "metric and statistic oracles (>= 20 fixtures each)")
def test_oracles():
    rng = np.random.default_rng(2024)
    for seed in range(20):
        pairs = list(random_pairs(seed, n=5))
        for a, b in pairs:
            assert abs(tdr(a, b) - brute_tdr(a, b)) < 1e-9
            lcs = brute_lcs(a, b)
            assert abs(rouge_l_f1(a, b) - (0.0 if lcs == 0 else 2 * lcs / (len(a) + len(b)))) < 1e-9
        ys, ys_hat = [a for a, _ in pairs], [b for _, b in pairs]
        assert abs(tcr(ys, ys_hat) - sum(a != b for a, b in pairs) / len(pairs)) < 1e-9
        t = rng.choice([0.0, 0.5, 1.0], 30)
        assert abs(ocr(t) - np.count_nonzero(t) / 30) < 1e-9

        x = rng.normal(size=40)
        y = 0.5 * x + rng.normal(size=40)
        ours, ref = stats.spearman(x, y), scipy.stats.spearmanr(x, y)
        assert abs(ours.statistic - ref.statistic) < 1e-9 and abs(ours.p_value - ref.pvalue) < 1e-3
        groups = [rng.integers(0, 5, 15) for _ in range(3)]
        ours, ref = stats.kruskal_wallis(groups), scipy.stats.kruskal(*groups)
        assert abs(ours.statistic - ref.statistic) < 1e-9 and abs(ours.p_value - ref.pvalue) < 1e-3
        fit = stats.ols_fit(x, y)
        X = np.column_stack([np.ones_like(x), x])
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        assert abs(fit.intercept - beta[0]) < 1e-9 and abs(fit.slope - beta[1]) < 1e-9
    assert math.isclose(stats.kruskal_wallis([[1, 2, 3], [4, 5, 6]]).statistic, 3.857142857142857, abs_tol=1e-9)
    assert math.isclose(rouge_l_f1([1, 2, 3], [1, 3]), 0.8, abs_tol=1e-9)


@pytest.mark.criterion(11, "overhead report: on/off throughput with mean and SD")
def test_overhead_report(tmp_path):
    summary = cmd_overhead(config("overhead", tmp_path, trials=3, requests=20))
    for arm in ("on", "off"):
        a = summary["arms"][arm]
        assert a["measurements"] == 60
        assert a["mean_tok_per_s"] > 0 and a["sd_tok_per_s"] >= 0
    assert isinstance(summary["relative_delta"], float)
    assert summary["outputs_identical"]
