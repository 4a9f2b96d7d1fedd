"""Cluster voting and prioritized back-matching.

Each forward match votes for the cluster of its view.  Clusters are then
back-matched greedily in vote order: every view of the chosen cluster is
matched into the query features with a ratio test.  A cluster that yields at
least ``vote_gate`` matches propagates one vote per match to every other
cluster that also observes the matched 3D point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .matching import BACK_RATIO, MatchCandidate, MatchConfig, MatchSet, safe_ratio
from .model import SceneModel
from .query import QueryImage


@dataclass
class VoteHistogram:
    counts: np.ndarray

    @classmethod
    def zeros(cls, num_clusters: int) -> VoteHistogram:
        return cls(np.zeros(num_clusters, dtype=np.int64))

    def select(self, visited) -> int | None:
        """Most-voted unvisited cluster (lowest id on ties); ``None`` once votes run out."""
        masked = self.counts.copy()
        masked[list(visited)] = -1
        if len(masked) == 0:
            return None
        c = int(np.argmax(masked))
        return c if masked[c] > 0 else None

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class BackMatchTrace:
    query_id: int
    selected: list[int] = field(default_factory=list)
    votes: list[int] = field(default_factory=list)
    match_counts: list[int] = field(default_factory=list)
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps({"query_id": self.query_id, "selected": self.selected, "votes": self.votes,
                           "match_counts": self.match_counts, "status": self.status}, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> BackMatchTrace:
        return cls(d["query_id"], list(d["selected"]), list(d["votes"]), list(d["match_counts"]), d["status"])


@dataclass
class BackMatchState:
    histogram: VoteHistogram
    max_visited: int = 20
    visited: list[int] = field(default_factory=list)
    accumulated: MatchSet = field(default_factory=lambda: MatchSet("M_B"))


def cast_votes(matches: MatchSet, model: SceneModel) -> VoteHistogram:
    hist = VoteHistogram.zeros(model.clustering.num_clusters)
    if len(matches):
        vids = np.fromiter((m.view_id for m in matches), dtype=np.int64, count=len(matches))
        hist.counts += np.bincount(model.view_cluster[vids], minlength=len(hist.counts))
    return hist


def back_match_cluster(cluster_id: int, query: QueryImage, model: SceneModel,
                       cfg: MatchConfig = MatchConfig()) -> MatchSet:
    """Ratio-tested 3D-to-2D matches for every view of one cluster."""
    out = MatchSet(f"M_c{cluster_id}")
    vids = model.views_of_cluster(cluster_id)
    if len(vids) == 0 or query.num_features == 0:
        return out
    d, rows = query.back_match(model.descriptors[vids], k=2)
    if query.num_features < 2:
        out.flags.add("single-feature fallback")
        out.matches = [MatchCandidate(int(query.feature_ids[rows[j, 0]]), int(v), float(d[j, 0]), 0.0, BACK_RATIO)
                       for j, v in enumerate(vids)]
        return out
    for j, v in enumerate(vids):
        ratio = safe_ratio(float(d[j, 0]), float(d[j, 1]))
        if ratio <= cfg.tau:
            out.matches.append(MatchCandidate(int(query.feature_ids[rows[j, 0]]), int(v), float(d[j, 0]),
                                              ratio, BACK_RATIO))
    return out


def propagate_votes(hist: VoteHistogram, matches: MatchSet, model: SceneModel) -> None:
    """One vote per (match, cluster observing the match's 3D point)."""
    graph = model.graph
    assign = model.clustering.assignment
    for m in matches:
        p = model.view_point[m.view_id]
        clusters = np.unique(assign[graph.images_of_point(p)])
        hist.counts[clusters] += 1


def prioritized_back_match(forward: MatchSet, query: QueryImage, model: SceneModel,
                           cfg: MatchConfig = MatchConfig()) -> tuple[MatchSet, BackMatchTrace]:
    state = BackMatchState(cast_votes(forward, model), cfg.max_backmatch)
    trace = BackMatchTrace(query.id)
    if len(forward) == 0:
        trace.status = "no votes"
        return state.accumulated, trace
    while len(state.accumulated) < cfg.n_back and len(state.visited) < state.max_visited:
        c = state.histogram.select(state.visited)
        if c is None:
            break
        trace.selected.append(c)
        trace.votes.append(int(state.histogram.counts[c]))
        found = back_match_cluster(c, query, model, cfg)
        trace.match_counts.append(len(found))
        state.accumulated.extend(found)
        state.accumulated.flags |= found.flags
        if len(found) >= cfg.vote_gate:
            propagate_votes(state.histogram, found, model)
        state.visited.append(c)
    return state.accumulated, trace
