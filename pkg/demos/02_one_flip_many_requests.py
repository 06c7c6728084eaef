"""
One flip, every request that shares the prefix
===============================================

A toy engine serves requests that share a 103-token system prompt.  Six
full prefix blocks are cached and shared; we corrupt one value element in
one of them and regenerate.
"""

# %%
import numpy as np

from kvguard import Lab, LabConfig
from kvguard.faultlab import prepare_trial, finish_trial

lab = Lab(LabConfig())
setup = prepare_trial(lab, n_c=8, seed=7)
print("shared prefix blocks:", setup.engine.prefix_surface(lab.prefix))
print("baseline of request 0:", setup.baselines[0].tokens[:16], "...")

# %%
# The same warm cache is forked for every bit, so the comparison is paired.
for p in (0, 6, 10, 13, 14, 15):
    res = finish_trial(setup, lab, p)
    print(f"bit {p:2d}: TCR {res.tcr:.3f}  mean TDR {res.mean_tdr:.3f}  "
          f"ROUGE-L {res.mean_rouge:.3f}  -> {res.category.value}")

# %%
# Over many seeds, higher bits change outputs more often.
rates = {}
for p in (0, 6, 14):
    tcrs = [finish_trial(prepare_trial(lab, 2, seed=s), lab, p).tcr for s in range(40)]
    rates[p] = float(np.mean(np.asarray(tcrs) > 0))
print("output change rate by bit:", rates)
