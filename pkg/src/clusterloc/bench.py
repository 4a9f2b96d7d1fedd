"""Baselines and evaluation metrics on synthetic worlds.

Two reference pipelines sit next to the cluster-wise one:

* global 1-ratio matching: every query feature is matched against all views
  and kept when its nearest view is distinct from the nearest view of any
  other 3D point;
* exhaustive local matching: the same test run independently inside every
  cluster, each cluster followed by its own robust fit.  The best cluster is
  chosen by localization error when ground truth is known, by inlier count
  otherwise.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .ann import AnnIndex, SearchBudget
from .camera import CameraPose, rotation_error
from .matching import MatchCandidate, MatchConfig, MatchSet, safe_ratio
from .model import SceneModel
from .pipeline import STAGES, POSE_FOUND, POSE_NOT_FOUND, Localization, correspondences, pose_record
from .pose import PoseConfig, PoseEstimationError, PoseResult, ransac_pnp
from .query import QueryImage
from .synth import DISTRACTOR, SynthWorld
from .voting import BackMatchTrace

GLOBAL_RATIO = "global-1-ratio"
EXHAUSTIVE_LOCAL = "exhaustive-local"
LOCAL_RATIO_BASELINE = "1-ratio"

SELECT_BY_ERROR = "error"
SELECT_BY_INLIERS = "inliers"

RECOGNITION_KS = (1, 2, 5, 10)


def distinct_point_neighbors(index: AnnIndex, q: np.ndarray, view_point: np.ndarray, max_leaves):
    """Nearest view and the nearest view of a different 3D point.

    Returns ``(d1, v1, d2)``; ``d2`` is ``inf`` when every indexed view
    belongs to the nearest view's point.
    """
    k = 2
    while True:
        d, ids = index.search(q, k, max_leaves)
        pts = view_point[ids]
        other = np.flatnonzero(pts != pts[0])
        if len(other):
            return float(d[0]), int(ids[0]), float(d[other[0]])
        if k >= len(index):
            return float(d[0]), int(ids[0]), math.inf
        k = min(2 * k, len(index))


def ratio_match(query: QueryImage, index: AnnIndex, model: SceneModel, tau: float = 0.7,
                max_leaves: int | None = 128, stage: str = "M") -> MatchSet:
    """Plain 1-ratio matching of every query feature against one index."""
    out = []
    for row in range(query.num_features):
        d1, v1, d2 = distinct_point_neighbors(index, query.descriptors[row], model.view_point, max_leaves)
        ratio = 0.0 if math.isinf(d2) else safe_ratio(d1, d2)
        if ratio <= tau:
            out.append(MatchCandidate(int(query.feature_ids[row]), v1, d1, ratio, LOCAL_RATIO_BASELINE))
    return MatchSet(stage, out)


def _fit(matches: MatchSet, query: QueryImage, model: SceneModel, pose_cfg: PoseConfig, seed):
    feats, pts, pixels, xyz = correspondences(matches, query, model)
    if len(pixels) < max(4, pose_cfg.min_inliers):
        return None, len(pixels)
    try:
        return ransac_pnp(pixels, xyz, query.intrinsics, pose_cfg, seed=seed), len(pixels)
    except PoseEstimationError:
        return None, len(pixels)


def global_ratio_localize(query: QueryImage, model: SceneModel, index: AnnIndex,
                          match_cfg: MatchConfig = MatchConfig(), pose_cfg: PoseConfig = PoseConfig(),
                          budget: SearchBudget = SearchBudget()) -> Localization:
    """Global 1-ratio matching over all views followed by RANSAC."""
    timings = dict.fromkeys(STAGES, 0.0)
    t0 = time.perf_counter()
    M = ratio_match(query, index, model, match_cfg.tau, budget.max_leaves_checked)
    timings["fwd"] = time.perf_counter() - t0
    t = time.perf_counter()
    result, n = _fit(M, query, model, pose_cfg, [pose_cfg.seed, query.id])
    timings["rnsc"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    ok = result is not None and result.success
    return Localization(query.id, GLOBAL_RATIO, POSE_FOUND if ok else POSE_NOT_FOUND, result, n,
                        {"M": len(M)}, timings)


def build_cluster_indices(model: SceneModel, leaf_size: int = 16, seed: int = 0) -> dict[int, AnnIndex]:
    """One index per non-empty cluster, payload = global view ids."""
    out = {}
    for c in range(model.clustering.num_clusters):
        vids = model.views_of_cluster(c)
        if len(vids):
            out[c] = AnnIndex(model.descriptors[vids], vids, leaf_size, seed)
    return out


@dataclass
class ExhaustiveResult:
    query_id: int
    cluster_matches: dict[int, MatchSet]
    cluster_results: dict[int, PoseResult]
    best_cluster: int | None
    selection: str
    timings: dict[str, float] = field(default_factory=dict)
    num_correspondences: int = 0

    @property
    def best(self) -> PoseResult | None:
        return None if self.best_cluster is None else self.cluster_results[self.best_cluster]

    @property
    def success(self) -> bool:
        return self.best is not None and self.best.success

    def localization(self) -> Localization:
        return Localization(self.query_id, EXHAUSTIVE_LOCAL, POSE_FOUND if self.success else POSE_NOT_FOUND,
                            self.best, self.num_correspondences,
                            {"M": sum(len(m) for m in self.cluster_matches.values())}, dict(self.timings))


def exhaustive_local_match(query: QueryImage, model: SceneModel, match_cfg: MatchConfig = MatchConfig(),
                           pose_cfg: PoseConfig = PoseConfig(), budget: SearchBudget = SearchBudget(),
                           cluster_indices: dict[int, AnnIndex] | None = None,
                           truth: CameraPose | None = None, selection: str | None = None) -> ExhaustiveResult:
    """Independent 1-ratio matching and RANSAC inside every cluster.

    ``selection`` defaults to ``"error"`` when ``truth`` is given, else ``"inliers"``.
    """
    if selection is None:
        selection = SELECT_BY_ERROR if truth is not None else SELECT_BY_INLIERS
    if selection == SELECT_BY_ERROR and truth is None:
        raise ValueError("error-based selection needs a ground-truth pose")
    if selection not in (SELECT_BY_ERROR, SELECT_BY_INLIERS):
        raise ValueError(f"unknown selection {selection!r}")
    timings = dict.fromkeys(STAGES, 0.0)
    t0 = time.perf_counter()
    if cluster_indices is None:
        cluster_indices = build_cluster_indices(model)
    matches, results, sizes = {}, {}, {}
    for c, index in cluster_indices.items():
        t = time.perf_counter()
        M = ratio_match(query, index, model, match_cfg.tau, budget.max_leaves_checked, f"M_c{c}")
        timings["fwd"] += time.perf_counter() - t
        matches[c] = M
        t = time.perf_counter()
        res, n = _fit(M, query, model, pose_cfg, [pose_cfg.seed, query.id, c])
        timings["rnsc"] += time.perf_counter() - t
        if res is not None:
            results[c] = res
            sizes[c] = n
    ok = [c for c, r in results.items() if r.success]
    best = None
    if ok:
        if selection == SELECT_BY_ERROR:
            best = min(ok, key=lambda c: (float(np.linalg.norm(results[c].pose.center - truth.center)), c))
        else:
            best = min(ok, key=lambda c: (-results[c].num_inliers, c))
    elif results:
        best = min(results, key=lambda c: (-results[c].num_inliers, c))
    timings["total"] = time.perf_counter() - t0
    return ExhaustiveResult(query.id, matches, results, best, selection, timings, sizes.get(best, 0))


# -- metrics -------------------------------------------------------------------

def _quantiles(x, qs) -> list[float]:
    if len(x) == 0:
        return [math.nan] * len(qs)
    return [float(v) for v in np.percentile(np.asarray(x, dtype=np.float64), qs)]


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


@dataclass
class EvalReport:
    num_queries: int
    num_registered: int
    mean_inliers: float
    mean_inlier_ratio: float
    position_quartiles: list[float]  # Q1, median, Q3
    rotation_quantiles_deg: list[float]  # Q1, median, Q3
    mean_timings: dict[str, float]
    recognition: dict[int, float] = field(default_factory=dict)

    def check(self) -> EvalReport:
        for qs in (self.position_quartiles, self.rotation_quantiles_deg):
            if all(math.isfinite(v) for v in qs) and not qs[0] <= qs[1] <= qs[2]:
                raise AssertionError(f"quartiles out of order: {qs}")
        return self

    def to_dict(self) -> dict:
        return _json_safe({
            "num_queries": self.num_queries,
            "num_registered": self.num_registered,
            "mean_inliers": self.mean_inliers,
            "mean_inlier_ratio": self.mean_inlier_ratio,
            "position_error": dict(zip(("q1", "median", "q3"), self.position_quartiles)),
            "rotation_error_deg": dict(zip(("q1", "median", "q3"), self.rotation_quantiles_deg)),
            "mean_timings": self.mean_timings,
            "recognition": {str(k): v for k, v in sorted(self.recognition.items())},
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        def fmt(v):
            return "-" if not math.isfinite(v) else f"{v:.6g}"
        p, r = self.position_quartiles, self.rotation_quantiles_deg
        lines = [
            "#images | #inliers | ratio | error",
            f"{self.num_registered}/{self.num_queries} | {fmt(self.mean_inliers)} | "
            f"{fmt(self.mean_inlier_ratio)} | {fmt(p[1])}",
            "",
            "          Q1 | median | Q3",
            f"position  {fmt(p[0])} | {fmt(p[1])} | {fmt(p[2])}",
            f"rotation  {fmt(r[0])} | {fmt(r[1])} | {fmt(r[2])}",
            "",
            "stage timings (mean s): " + " ".join(f"{k}={self.mean_timings[k]:.4f}" for k in STAGES),
        ]
        if self.recognition:
            ks = sorted(self.recognition)
            lines += ["", " | ".join(f"top-{k}" for k in ks),
                      " | ".join(f"{100 * self.recognition[k]:.1f}%" for k in ks)]
        return "\n".join(lines) + "\n"


def _as_record(r) -> dict:
    if isinstance(r, dict):
        return r
    if isinstance(r, ExhaustiveResult):
        r = r.localization()
    if isinstance(r, Localization):
        return pose_record(r)
    raise TypeError(f"cannot evaluate {type(r).__name__}")


def evaluate(results, world: SynthWorld, traces=None, ks=RECOGNITION_KS, min_inliers: int = 12) -> EvalReport:
    """Registration counts and error statistics over registered queries.

    ``results`` holds pose records (dicts), ``Localization`` or
    ``ExhaustiveResult`` objects aligned with ``world.queries``.  A query is
    registered when its record reports success with at least
    ``min_inliers`` inliers.
    """
    records = [_as_record(r) for r in results]
    ids = [rec["query_id"] for rec in records]
    expected = [q.id for q in world.queries]
    if ids != expected:
        raise ValueError(f"result query ids {ids[:5]}... do not match world query ids {expected[:5]}...")
    pos, rot, inl, ratio = [], [], [], []
    for rec in records:
        if not (rec["success"] and rec["inliers"] >= min_inliers):
            continue
        truth = world.truth(rec["query_id"]).pose
        center = np.asarray(rec["center"], dtype=np.float64)
        w, x, y, z = rec["quaternion"]
        R = Rotation.from_quat([x, y, z, w]).as_matrix()
        pos.append(float(np.linalg.norm(center - truth.center)))
        rot.append(float(np.degrees(rotation_error(R, truth.rotation))))
        inl.append(rec["inliers"])
        ratio.append(rec["inlier_ratio"])
    n = len(records)
    timings = {k: (float(np.mean([rec["timing"][k] for rec in records])) if n else 0.0) for k in STAGES}
    report = EvalReport(
        n, len(pos), float(np.mean(inl)) if inl else math.nan, float(np.mean(ratio)) if ratio else math.nan,
        _quantiles(pos, (25, 50, 75)), _quantiles(rot, (25, 50, 75)), timings,
    )
    if traces is not None:
        report.recognition = evaluate_location_recognition(traces, world, ks)
    return report.check()


def ranked_images(trace: BackMatchTrace, model: SceneModel) -> list[int]:
    """Model images in back-matching order (cluster members ascending)."""
    members = model.clustering.members
    return [int(i) for c in trace.selected for i in members[c]]


def shared_points(world: SynthWorld, query_id: int, image_id: int) -> int:
    """Ground-truth correspondences between a query and a model image."""
    prov = world.truth(query_id).provenance
    seen = prov[prov != DISTRACTOR]
    return int(np.isin(world.model.graph.points_of_image(image_id), seen).sum())


def evaluate_location_recognition(traces, world: SynthWorld, ks=RECOGNITION_KS,
                                  min_shared: int = 12) -> dict[int, float]:
    """Fraction of queries with a top-k ranked image sharing ``min_shared`` true points."""
    traces = [BackMatchTrace.from_dict(t) if isinstance(t, dict) else t for t in traces]
    if [t.query_id for t in traces] != [q.id for q in world.queries]:
        raise ValueError("traces do not match world queries")
    if not traces:
        return {int(k): math.nan for k in ks}
    hits = {int(k): 0 for k in ks}
    for t in traces:
        ranked = ranked_images(t, world.model)
        good = [shared_points(world, t.query_id, i) >= min_shared for i in ranked]
        for k in hits:
            hits[k] += any(good[:k])
    return {k: v / len(traces) for k, v in hits.items()}
