"""Forward matching with conservative global and cluster-wise ratio tests.

Global forward matching retrieves ``k + 1`` approximate neighbors for randomly
sampled query features and keeps the first ``k`` when the k-ratio
``d(q, v_1) / d(q, v_{k+1})`` passes.  The cluster-wise test then re-ranks the
survivors inside each cluster: two candidates of distinct 3D points get the
usual first/second ratio, a lone candidate gets the t-ratio
``d(q, v) / (d(q, v) + d(v, v_NN))`` using the precomputed in-cluster neighbor.
Neither test ever rejects a match the exact in-cluster ratio test would keep.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .ann import AnnIndex, SearchBudget
from .model import NO_NEIGHBOR, SceneModel
from .query import QueryImage

K_RATIO = "k-ratio"
LOCAL_RATIO = "local-1-ratio"
T_RATIO = "t-ratio"
BACK_RATIO = "back-1-ratio"


@dataclass(frozen=True)
class MatchConfig:
    k: int = 5
    tau: float = 0.7
    n_forward: int | None = 200
    n_back: int = 200
    max_backmatch: int = 20
    vote_gate: int = 12
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.n_forward is not None and self.n_forward < 1:
            raise ValueError("n_forward must be at least 1")
        if self.n_back < 1 or self.max_backmatch < 1:
            raise ValueError("n_back and max_backmatch must be at least 1")


@dataclass(frozen=True, slots=True)
class MatchCandidate:
    query_feature_id: int
    view_id: int
    distance: float
    ratio: float
    test_kind: str

    @property
    def pair(self) -> tuple[int, int]:
        return (self.query_feature_id, self.view_id)


@dataclass
class MatchSet:
    stage: str
    matches: list[MatchCandidate] = field(default_factory=list)
    flags: set[str] = field(default_factory=set)

    def __post_init__(self):
        pairs = [m.pair for m in self.matches]
        if len(set(pairs)) != len(pairs):
            raise ValueError(f"duplicate (feature, view) pairs in {self.stage}")

    def __len__(self) -> int:
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)

    def pairs(self) -> set[tuple[int, int]]:
        return {m.pair for m in self.matches}

    def canonical(self) -> MatchSet:
        return MatchSet(self.stage, sorted(self.matches, key=lambda m: m.pair), set(self.flags))

    def extend(self, other: MatchSet) -> None:
        have = self.pairs()
        for m in other:
            if m.pair not in have:
                self.matches.append(m)
                have.add(m.pair)


def safe_ratio(num: float, den: float) -> float:
    """``num / den`` with ``0 / 0`` read as 1 (indistinct)."""
    if den <= 0:
        return 1.0
    return num / den


def k_ratio(distances) -> float:
    """First over last distance of a sorted neighbor list."""
    return safe_ratio(float(distances[0]), float(distances[-1]))


def t_ratio(distance: float, nn_distance: float) -> float:
    if not np.isfinite(nn_distance):
        return 0.0  # no other point in the cluster: locally unique
    return safe_ratio(distance, distance + nn_distance)


def cluster_ratio_tests(distances, view_ids, points, clusters, nn_distance, tau: float):
    """Cluster-wise ratio tests for one query feature's candidate list.

    ``distances``/``view_ids`` are the candidates (any order); ``points``,
    ``clusters`` and ``nn_distance`` are aligned per candidate.  Returns
    ``(position, ratio, kind, admitted)`` for the top candidate of each
    cluster, ordered by cluster first appearance in distance order.
    """
    distances = np.asarray(distances)
    view_ids = np.asarray(view_ids)
    order = np.lexsort((view_ids, distances))
    grouped: dict[int, list[int]] = {}
    for pos in order:
        grouped.setdefault(int(clusters[pos]), []).append(int(pos))
    out = []
    for members in grouped.values():
        first = members[0]
        second = next((m for m in members[1:] if points[m] != points[first]), None)
        if second is not None:
            ratio = safe_ratio(float(distances[first]), float(distances[second]))
            kind = LOCAL_RATIO
        else:
            ratio = t_ratio(float(distances[first]), float(nn_distance[first]))
            kind = T_RATIO
        out.append((first, ratio, kind, ratio <= tau))
    return out


def global_forward_match(query: QueryImage, index: AnnIndex, cfg: MatchConfig = MatchConfig(),
                         budget: SearchBudget | None = None) -> MatchSet:
    """Sample query features without replacement until ``|M| >= n_forward`` pairs."""
    if query.num_features == 0:
        raise ValueError(f"query {query.id} has no features")
    leaves = 128 if budget is None else budget.max_leaves_checked
    rng = np.random.default_rng([cfg.seed, query.id])
    target = np.inf if cfg.n_forward is None else cfg.n_forward
    out: list[MatchCandidate] = []
    for row in rng.permutation(query.num_features):
        if len(out) >= target:
            break
        d, ids = index.search(query.descriptors[row], cfg.k + 1, leaves)
        alpha = k_ratio(d)
        if alpha <= cfg.tau:
            fid = int(query.feature_ids[row])
            keep = min(cfg.k, len(d))
            out.extend(MatchCandidate(fid, int(ids[j]), float(d[j]), alpha, K_RATIO) for j in range(keep))
    return MatchSet("M", out)


def cluster_wise_ratio_test(matches: MatchSet, model: SceneModel, cfg: MatchConfig = MatchConfig()) -> MatchSet:
    """Keep at most one candidate per (query feature, cluster) that passes the local test."""
    if model.nn_table is None:
        raise ValueError("model has no nearest-neighbor table")
    nn_dist = model.nn_table.nn_distance
    nn_view = model.nn_table.nn_view
    by_feature: dict[int, list[MatchCandidate]] = defaultdict(list)
    for m in matches:
        by_feature[m.query_feature_id].append(m)
    out = []
    for fid, cands in by_feature.items():
        vids = np.array([c.view_id for c in cands], dtype=np.int64)
        dists = np.array([c.distance for c in cands])
        if np.any((nn_view[vids] == NO_NEIGHBOR) & np.isfinite(nn_dist[vids])):
            raise ValueError("malformed nearest-neighbor table entry")
        for pos, ratio, kind, ok in cluster_ratio_tests(dists, vids, model.view_point[vids],
                                                       model.view_cluster[vids], nn_dist[vids], cfg.tau):
            if ok:
                out.append(MatchCandidate(fid, int(vids[pos]), float(dists[pos]), ratio, kind))
    return MatchSet("M_F", out).canonical()


def best_buddy_filter(matches: MatchSet, query: QueryImage, model: SceneModel,
                      cfg: MatchConfig = MatchConfig()) -> MatchSet:
    """Keep ``(q, v)`` when back-matching ``v`` into the query lands on ``q`` and passes the ratio test."""
    result = MatchSet("M_B")
    if len(matches) == 0 or query.num_features == 0:
        return result
    vids = sorted({m.view_id for m in matches})
    d, rows = query.back_match(model.descriptors[vids], k=2)
    buddy = {}
    for j, v in enumerate(vids):
        if query.num_features < 2:
            buddy[v] = int(query.feature_ids[rows[j, 0]])
            result.flags.add("single-feature fallback")
        elif safe_ratio(d[j, 0], d[j, 1]) <= cfg.tau:
            buddy[v] = int(query.feature_ids[rows[j, 0]])
    result.matches = [m for m in matches if buddy.get(m.view_id) == m.query_feature_id]
    return result
