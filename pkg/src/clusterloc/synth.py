"""Synthetic scenes with known ground truth.

Cameras stand on a ring and look outward at a cylindrical wall of 3D points.
The wall is split into angular segments; with ``repetition_groups > 0`` some
segments become copies of a shared motif: their points get the motif's
descriptors plus a small per-copy jitter, so structures far apart on the
ring look alike in descriptor space while differing in geometry.  Copies of
one motif are scattered at random positions at least
``min_copy_separation_deg`` apart, so no camera sees two of them at once.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .camera import CameraPose, Intrinsics, look_at
from .formats import load_model, save_model
from .model import Clustering, ModelError, ModelImage, SceneModel, precompute_nn_table, validate_model
from .query import QueryImage, load_queries, save_queries

DISTRACTOR = -1


@dataclass(frozen=True)
class SynthConfig:
    num_points: int = 2000
    num_model_images: int = 50
    num_query_images: int = 10
    descriptor_dim: int = 128
    descriptor_noise_sigma: float = 0.05
    pixel_noise_sigma: float = 0.0
    repetition_groups: int = 0
    group_size: int = 2
    repetition_jitter_sigma: float = 0.01
    min_copy_separation_deg: float = 90.0
    wall_segments: int = 16
    distractor_feature_fraction: float = 0.0
    image_size: tuple[int, int] = (640, 480)
    focal: float = 500.0
    ring_radius: float = 5.0
    camera_height: float = 1.6
    wall_radius: float = 20.0
    wall_depth: float = 2.0
    wall_height: tuple[float, float] = (0.0, 10.0)
    look_height: float = 5.0
    query_position_jitter: float = 0.5
    query_yaw_jitter_deg: float = 5.0
    min_views_per_point: int = 2
    max_views_per_point: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))
        object.__setattr__(self, "wall_height", tuple(float(x) for x in self.wall_height))
        counts = ("num_points", "num_model_images", "num_query_images", "descriptor_dim",
                  "group_size", "wall_segments", "min_views_per_point")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.min_views_per_point < 2 or self.max_views_per_point < self.min_views_per_point:
            raise ValueError("need 2 <= min_views_per_point <= max_views_per_point")
        if self.repetition_groups < 0:
            raise ValueError("repetition_groups must be non-negative")
        if self.repetition_groups and self.group_size < 2:
            raise ValueError("repeated structures need group_size >= 2")
        if self.repetition_groups * self.group_size > self.wall_segments:
            raise ValueError("repetition groups do not fit in wall_segments")
        if self.repetition_groups and self.group_size * self.min_copy_separation_deg > 360.0:
            raise ValueError("copies of a motif cannot be that far apart")
        for name in ("descriptor_noise_sigma", "pixel_noise_sigma", "repetition_jitter_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.distractor_feature_fraction < 1:
            raise ValueError("distractor_feature_fraction must lie in [0, 1)")
        if not self.focal > 0 or min(self.image_size) < 1:
            raise ValueError("invalid camera intrinsics")
        if self.wall_radius - self.wall_depth <= self.ring_radius:
            raise ValueError("wall must lie outside the camera ring")

    @property
    def intrinsics(self) -> Intrinsics:
        w, h = self.image_size
        return Intrinsics(self.focal, (w / 2.0, h / 2.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["wall_height"] = list(self.wall_height)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> SynthConfig:
        d = self.to_dict()
        d.update(kw)
        return SynthConfig.from_dict(d)


@dataclass
class QueryTruth:
    pose: CameraPose
    provenance: np.ndarray  # per feature row: 3D point id or DISTRACTOR


@dataclass
class SynthWorld:
    config: SynthConfig
    model: SceneModel
    queries: list[QueryImage]
    ground_truth: list[QueryTruth]
    segment_of_point: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    motif_of_point: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def truth(self, query_id: int) -> QueryTruth:
        return self.ground_truth[query_id]


def load_preset(name: str) -> SynthConfig:
    try:
        text = resources.files("clusterloc").joinpath("presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ValueError(f"unknown preset {name!r}") from None
    return SynthConfig.from_dict(json.loads(text))


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("clusterloc").joinpath("presets").iterdir()
                  if p.name.endswith(".json"))


def _ring_pose(angle: float, cfg: SynthConfig, offset=(0.0, 0.0, 0.0), yaw: float = 0.0) -> CameraPose:
    center = np.array([cfg.ring_radius * np.cos(angle), cfg.ring_radius * np.sin(angle), cfg.camera_height])
    center = center + np.asarray(offset)
    a = angle + yaw
    target = np.array([cfg.wall_radius * np.cos(a), cfg.wall_radius * np.sin(a), cfg.look_height])
    return CameraPose.from_intrinsics(look_at(center, target), center, cfg.intrinsics)


def _visible(pose: CameraPose, xyz: np.ndarray, size) -> np.ndarray:
    px, front = pose.project(xyz)
    w, h = size
    with np.errstate(invalid="ignore"):
        return front & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)


def _wall_points(rng, n: int, segment: int, cfg: SynthConfig) -> np.ndarray:
    width = 2 * np.pi / cfg.wall_segments
    phi = (segment + rng.uniform(0, 1, n)) * width
    r = cfg.wall_radius + rng.uniform(-cfg.wall_depth / 2, cfg.wall_depth / 2, n)
    z = rng.uniform(cfg.wall_height[0], cfg.wall_height[1], n)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _circular_gap(a, b, n: int):
    d = np.abs(np.asarray(a) - np.asarray(b)) % n
    return np.minimum(d, n - d)


def _segment_layout(cfg: SynthConfig, rng) -> np.ndarray:
    """Motif index per segment, -1 for unique structure."""
    S = cfg.wall_segments
    motif = np.full(S, -1, dtype=np.int64)
    if cfg.repetition_groups == 0:
        return motif
    min_gap = int(np.ceil(cfg.min_copy_separation_deg / 360.0 * S))
    for _ in range(200):
        motif[:] = -1
        for m in range(cfg.repetition_groups):
            chosen: list[int] = []
            for s in rng.permutation(np.flatnonzero(motif == -1)):
                if all(_circular_gap(s, c, S) >= min_gap for c in chosen):
                    chosen.append(int(s))
                    if len(chosen) == cfg.group_size:
                        break
            if len(chosen) < cfg.group_size:
                break
            motif[chosen] = m
        else:
            return motif
    raise ValueError("could not place repetition copies with the requested separation")


def generate_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng(cfg.seed)
    D = cfg.descriptor_dim
    size = cfg.image_size

    images_pose = [_ring_pose(2 * np.pi * i / cfg.num_model_images, cfg) for i in range(cfg.num_model_images)]

    seg_motif = _segment_layout(cfg, rng)
    per_seg = np.full(cfg.wall_segments, cfg.num_points // cfg.wall_segments)
    per_seg[: cfg.num_points % cfg.wall_segments] += 1
    # a motif's copies share one point count
    for m in range(cfg.repetition_groups):
        segs = np.flatnonzero(seg_motif == m)
        per_seg[segs] = per_seg[segs].min()
    motif_desc = {m: rng.normal(size=(int(per_seg[seg_motif == m][0]), D)) for m in range(cfg.repetition_groups)}

    xyz_parts, desc_parts, seg_parts, motif_parts = [], [], [], []
    for s in range(cfg.wall_segments):
        n = int(per_seg[s])
        pts = _wall_points(rng, n, s, cfg)
        for _ in range(100):
            counts = np.sum([_visible(p, pts, size) for p in images_pose], axis=0)
            bad = counts < cfg.min_views_per_point
            if not np.any(bad):
                break
            pts[bad] = _wall_points(rng, int(bad.sum()), s, cfg)
        else:
            raise ModelError(f"segment {s}: could not place points visible in enough model images")
        m = int(seg_motif[s])
        if m >= 0:
            desc = motif_desc[m] + rng.normal(scale=cfg.repetition_jitter_sigma, size=(n, D))
        else:
            desc = rng.normal(size=(n, D))
        xyz_parts.append(pts)
        desc_parts.append(desc)
        seg_parts.append(np.full(n, s))
        motif_parts.append(np.full(n, m))
    point_xyz = np.concatenate(xyz_parts)
    point_desc = np.concatenate(desc_parts)
    P = len(point_xyz)

    vis = np.stack([_visible(p, point_xyz, size) for p in images_pose], axis=1)  # (P, I)
    view_point, view_image = [], []
    for p in range(P):
        cams = np.flatnonzero(vis[p])
        want = int(rng.integers(cfg.min_views_per_point, cfg.max_views_per_point + 1))
        chosen = np.sort(rng.choice(cams, size=min(want, len(cams)), replace=False))
        view_point.extend([p] * len(chosen))
        view_image.extend(chosen.tolist())
    view_point = np.array(view_point, dtype=np.int64)
    view_image = np.array(view_image, dtype=np.int64)
    order = np.lexsort((view_point, view_image))
    view_point, view_image = view_point[order], view_image[order]
    view_pixel = np.empty((len(view_point), 2))
    for i, pose in enumerate(images_pose):
        sel = view_image == i
        view_pixel[sel] = pose.project(point_xyz[view_point[sel]])[0]
    view_desc = point_desc[view_point] + rng.normal(scale=cfg.descriptor_noise_sigma, size=(len(view_point), D))

    w, h = size
    images = [ModelImage(i, pose, w, h, i) for i, pose in enumerate(images_pose)]
    model = SceneModel(point_xyz, view_point, view_image, view_pixel, view_desc, images,
                       Clustering.single_image(len(images)))
    validate_model(model)
    model.nn_table = precompute_nn_table(model)

    queries, truths = [], []
    for qid in range(cfg.num_query_images):
        angle = rng.uniform(0, 2 * np.pi)
        offset = rng.normal(scale=cfg.query_position_jitter, size=3) * np.array([1.0, 1.0, 0.2])
        yaw = np.deg2rad(rng.uniform(-cfg.query_yaw_jitter_deg, cfg.query_yaw_jitter_deg))
        pose = _ring_pose(angle, cfg, offset, yaw)
        seen = np.flatnonzero(_visible(pose, point_xyz, size))
        px = pose.project(point_xyz[seen])[0] + rng.normal(scale=cfg.pixel_noise_sigma, size=(len(seen), 2))
        keep = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
        seen, px = seen[keep], px[keep]
        desc = point_desc[seen] + rng.normal(scale=cfg.descriptor_noise_sigma, size=(len(seen), D))
        f = cfg.distractor_feature_fraction
        n_dis = int(round(len(seen) * f / (1 - f)))
        dis_px = rng.uniform([0, 0], [w, h], size=(n_dis, 2))
        dis_desc = rng.normal(size=(n_dis, D))
        prov = np.concatenate([seen, np.full(n_dis, DISTRACTOR)])
        all_px = np.concatenate([px, dis_px])
        all_desc = np.concatenate([desc, dis_desc])
        shuffle = rng.permutation(len(prov))
        queries.append(QueryImage(qid, np.arange(len(prov)), all_px[shuffle], all_desc[shuffle],
                                  cfg.intrinsics, w, h))
        truths.append(QueryTruth(pose, prov[shuffle].astype(np.int64)))
    return SynthWorld(cfg, model, queries, truths, np.concatenate(seg_parts), np.concatenate(motif_parts))


def save_world(world: SynthWorld, path) -> None:
    path = Path(path)
    save_model(world.model, path)
    save_queries(world.queries, path / "queries.bin", world.model.descriptor_dim)
    gt = {
        "queries": [
            {"query_id": q.id, "pose": t.pose.to_dict(), "provenance": t.provenance.tolist()}
            for q, t in zip(world.queries, world.ground_truth)
        ],
        "segment_of_point": world.segment_of_point.tolist(),
        "motif_of_point": world.motif_of_point.tolist(),
    }
    (path / "ground_truth.json").write_text(json.dumps(gt, sort_keys=True) + "\n")
    (path / "synth_config.json").write_text(json.dumps(world.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_world(path) -> SynthWorld:
    path = Path(path)
    model = load_model(path)
    queries = load_queries(path / "queries.bin")
    gt = json.loads((path / "ground_truth.json").read_text())
    cfg_path = path / "synth_config.json"
    cfg = SynthConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() else SynthConfig()
    truths = [QueryTruth(CameraPose.from_dict(g["pose"]), np.array(g["provenance"], dtype=np.int64))
              for g in gt["queries"]]
    if [g["query_id"] for g in gt["queries"]] != [q.id for q in queries]:
        raise ModelError("ground_truth.json does not match queries.bin")
    return SynthWorld(cfg, model, queries, truths, np.array(gt.get("segment_of_point", []), dtype=np.int64),
                      np.array(gt.get("motif_of_point", []), dtype=np.int64))
