"""
Catching the flip before it is served
=====================================
"""

# %%
import numpy as np

from kvguard import IntegrityConfig, Lab, LabConfig
from kvguard.faultlab import persistence_baselines, prepare_trial, run_guarded_trial, run_persistence

lab = Lab(LabConfig())
on = IntegrityConfig(enabled=True)

# %%
# With digests on, a flip between cycles is found at the next cache hit.
# The block is invalidated and recomputed before anyone reads it.
setup = prepare_trial(lab, n_c=4, seed=1, integrity=on)
res = run_guarded_trial(setup, lab, p=14)
print("detections:", res.detections, "affected:", res.affected, "recovered:", res.recovered)

# %%
# A flip landing after the check but before the read (the TOCTOU window)
# reaches that one batch only; the next cycle catches it.
late = run_guarded_trial(setup, lab, p=14, inject_after_schedule=True)
print("affected in the injection cycle:", late.affected_injection_cycle,
      "in the next:", late.affected_follow_up)

# %%
# Without digests, damage accumulates request after request.  A TTL on
# cached blocks caps it instead.
rng = np.random.Generator(np.random.Philox(key=3))
warm = lab.requests(rng, 1, "warm")[0]
work = lab.requests(rng, 40, "seq")
base = persistence_baselines(lab, warm, work)
for label, cfg in (("no guard", IntegrityConfig()), ("ttl=10", IntegrityConfig(ttl_requests=10))):
    run = run_persistence(lab, 15, warm, work, base, seed=2, integrity=cfg, checkpoints=(10, 20, 40))
    print(f"{label:>8}: corrupted serves {run.corrupted_serves:2d}, C_40 = {run.total}")
