"""End-to-end localization of one query image."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ann import AnnIndex, SearchBudget
from .matching import MatchConfig, MatchSet, best_buddy_filter, cluster_wise_ratio_test, global_forward_match
from .model import SceneModel
from .pose import PoseConfig, PoseEstimationError, PoseResult, ransac_pnp
from .query import QueryImage
from .voting import BackMatchTrace, prioritized_back_match

FAST_VOTING = "fast-voting"
FULL_FORWARD = "full-forward"
MODES = (FAST_VOTING, FULL_FORWARD)

POSE_FOUND = "Pose"
POSE_NOT_FOUND = "Error - Pose not found"

STAGES = ("fwd", "rt", "bck", "rnsc", "total")


@dataclass
class Localization:
    query_id: int
    mode: str
    status: str
    result: PoseResult | None
    num_correspondences: int
    stage_sizes: dict[str, int]
    timings: dict[str, float]
    trace: BackMatchTrace | None = None
    correspondence_points: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    correspondence_features: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def success(self) -> bool:
        return self.status == POSE_FOUND


def correspondences(matches: MatchSet, query: QueryImage, model: SceneModel):
    """Unique ``(feature, 3D point)`` pairs in first-seen order."""
    seen = set()
    feats, pts = [], []
    for m in matches:
        p = int(model.view_point[m.view_id])
        key = (m.query_feature_id, p)
        if key not in seen:
            seen.add(key)
            feats.append(m.query_feature_id)
            pts.append(p)
    feats = np.array(feats, dtype=np.int64)
    pts = np.array(pts, dtype=np.int64)
    rows = np.array([query.row_of[f] for f in feats], dtype=np.int64)
    pixels = query.pixels[rows] if len(rows) else np.empty((0, 2))
    return feats, pts, pixels, model.point_xyz[pts] if len(pts) else np.empty((0, 3))


def robust_fit(feats, pts, pixels, xyz, query: QueryImage, pose_cfg: PoseConfig) -> PoseResult | None:
    if len(pixels) < 4:
        return None
    try:
        return ransac_pnp(pixels, xyz, query.intrinsics, pose_cfg, seed=[pose_cfg.seed, query.id])
    except PoseEstimationError:
        return None


def localize(query: QueryImage, model: SceneModel, index: AnnIndex, match_cfg: MatchConfig = MatchConfig(),
             pose_cfg: PoseConfig = PoseConfig(), budget: SearchBudget = SearchBudget(),
             mode: str = FAST_VOTING) -> Localization:
    """Forward match, cluster-wise ratio test, back-match, and robust fitting.

    ``fast-voting`` back-matches the most-voted clusters; ``full-forward``
    forward-matches every query feature and keeps best buddies instead.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    match_cfg = replace(match_cfg, k=budget.k)
    timings = dict.fromkeys(STAGES, 0.0)
    t_start = time.perf_counter()
    trace = None

    t = time.perf_counter()
    fwd_cfg = replace(match_cfg, n_forward=None) if mode == FULL_FORWARD else match_cfg
    M = global_forward_match(query, index, fwd_cfg, budget) if query.num_features else MatchSet("M")
    timings["fwd"] = time.perf_counter() - t

    t = time.perf_counter()
    MF = cluster_wise_ratio_test(M, model, match_cfg)
    timings["rt"] = time.perf_counter() - t

    t = time.perf_counter()
    if mode == FAST_VOTING:
        MB, trace = prioritized_back_match(MF, query, model, match_cfg)
    else:
        MB = best_buddy_filter(MF, query, model, match_cfg)
    timings["bck"] = time.perf_counter() - t

    t = time.perf_counter()
    feats, pts, pixels, xyz = correspondences(MB, query, model)
    result = robust_fit(feats, pts, pixels, xyz, query, pose_cfg)
    timings["rnsc"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t_start

    ok = result is not None and result.success
    return Localization(
        query.id, mode, POSE_FOUND if ok else POSE_NOT_FOUND, result, len(pixels),
        {"M": len(M), "M_F": len(MF), "M_B": len(MB)}, timings, trace, pts, feats,
    )


def pose_record(loc: Localization) -> dict:
    """JSON-serializable pose output for one query."""
    res = loc.result
    rec = {
        "query_id": loc.query_id,
        "mode": loc.mode,
        "status": loc.status,
        "success": loc.success,
        "num_correspondences": loc.num_correspondences,
        "stage_sizes": loc.stage_sizes,
        "inliers": res.num_inliers if res is not None else 0,
        "inlier_ratio": res.inlier_ratio if res is not None else 0.0,
        "median_residual": None,
        "quaternion": None,
        "center": None,
        "focal": None,
        "timing": {k: loc.timings[k] for k in STAGES},
    }
    if res is not None and res.pose is not None:
        finite = res.residuals[np.isfinite(res.residuals)]
        rec["median_residual"] = float(np.median(finite)) if len(finite) else None
        rec["quaternion"] = res.pose.quaternion().tolist()
        rec["center"] = res.pose.center.tolist()
        rec["focal"] = res.pose.focal
    return rec


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def strip_timing(rec: dict) -> dict:
    return {k: v for k, v in rec.items() if k != "timing"}
