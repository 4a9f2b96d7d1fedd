"""
Vote-ordered back-matching
==========================

Forward matches vote for the image they land in.  Images are back-matched in
vote order; an image that returns enough matches passes votes on to every
other image observing the same 3D points, which pulls its neighbors forward.
"""

# %%
import numpy as np

from clusterloc.ann import build_index
from clusterloc.matching import MatchConfig, cluster_wise_ratio_test, global_forward_match
from clusterloc.voting import back_match_cluster, cast_votes, prioritized_back_match, propagate_votes
from clusterloc.synth import generate_world, load_preset

world = generate_world(load_preset("many-clusters").replace(num_query_images=1))
model = world.model
q = world.queries[0]
index = build_index(model)
cfg = MatchConfig()

MF = cluster_wise_ratio_test(global_forward_match(q, index, cfg), model, cfg)
hist = cast_votes(MF, model)
top = np.argsort(-hist.counts, kind="stable")[:6]
print("forward votes, top images:", {int(c): int(hist.counts[c]) for c in top})

# %%
# One propagation step by hand.
c = hist.select([])
found = back_match_cluster(c, q, model, cfg)
before = hist.counts.copy()
propagate_votes(hist, found, model)
gained = np.flatnonzero(hist.counts > before)
print(f"image {c} back-matched {len(found)} features; votes went up for images {gained.tolist()}")

# %%
# The whole loop, as recorded in the trace.
MB, trace = prioritized_back_match(MF, q, model, cfg)
for img, votes, n in zip(trace.selected, trace.votes, trace.match_counts):
    print(f"  image {img:2d}: {votes:3d} votes at selection, {n:3d} back-matches")
print(f"{len(MB)} matches after {len(trace.selected)} images (cap {cfg.max_backmatch}, target {cfg.n_back})")
