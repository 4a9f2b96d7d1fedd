"""
How many forward matches are enough?
====================================

Forward matching stops once N_F pairs are collected.  On a noisy world with
distractor features the number of registered queries levels off quickly as
N_F grows, while the time spent keeps rising.
"""

# %%
import numpy as np

from clusterloc.ann import build_index
from clusterloc.bench import evaluate
from clusterloc.matching import MatchConfig
from clusterloc.pipeline import localize
from clusterloc.synth import generate_world, load_preset

worlds = [generate_world(load_preset("noisy").replace(seed=s)) for s in range(3)]
indices = [build_index(w.model) for w in worlds]

# %%
print(" N_F | registered | s/query")
for nf in (10, 50, 100, 200, 500):
    reg, secs = 0, []
    for w, idx in zip(worlds, indices):
        locs = [localize(q, w.model, idx, MatchConfig(n_forward=nf)) for q in w.queries]
        reg += evaluate(locs, w).num_registered
        secs += [l.timings["total"] for l in locs]
    print(f"{nf:4d} | {reg:3d}/{sum(len(w.queries) for w in worlds):3d}    | {np.mean(secs):.3f}")
