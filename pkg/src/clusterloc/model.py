"""Scene model types, structural validation, and offline lookup tables.

Entities use dense ids: point, view and image ids are their row index in
the corresponding arrays.  A view is one observation of a 3D point in a
model image, carrying a pixel and a descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .camera import CameraPose

NO_NEIGHBOR = -1


class ModelError(ValueError):
    """Raised for structurally inconsistent scene models."""


def l2_distances(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distance from every row of ``X`` (any leading shape) to ``q``.

    Every distance in the package goes through this function so that two
    code paths computing the same pair agree bit-for-bit.
    """
    diff = X - q
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass(frozen=True)
class Point3D:
    id: int
    position: np.ndarray
    view_ids: np.ndarray


@dataclass(frozen=True)
class View:
    id: int
    point_id: int
    image_id: int
    pixel: np.ndarray
    descriptor: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelImage:
    id: int
    pose: CameraPose
    width: int
    height: int
    cluster_id: int

    def __eq__(self, other):
        if not isinstance(other, ModelImage):
            return NotImplemented
        return (self.id, self.width, self.height, self.cluster_id) == (
            other.id, other.width, other.height, other.cluster_id) and self.pose == other.pose

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Clustering:
    """Disjoint grouping of model images; ``assignment[image_id] = cluster_id``."""

    assignment: np.ndarray
    num_clusters: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "num_clusters", int(self.num_clusters))

    @classmethod
    def single_image(cls, num_images: int) -> Clustering:
        return cls(np.arange(num_images, dtype=np.int64), num_images)

    @cached_property
    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(self.num_clusters + 1))
        return [order[bounds[c]:bounds[c + 1]] for c in range(self.num_clusters)]

    def validate(self, num_images: int):
        a = self.assignment
        if len(a) != num_images:
            raise ModelError(f"clustering covers {len(a)} images, model has {num_images}")
        if len(a) and (a.min() < 0 or a.max() >= self.num_clusters):
            bad = int(np.flatnonzero((a < 0) | (a >= self.num_clusters))[0])
            raise ModelError(f"image {bad}: invalid cluster id {int(a[bad])}")
        counts = np.bincount(a, minlength=self.num_clusters)
        if np.any(counts == 0):
            raise ModelError(f"cluster {int(np.flatnonzero(counts == 0)[0])} is empty")

    @property
    def is_single_image(self) -> bool:
        return self.num_clusters == len(self.assignment) and np.array_equal(
            self.assignment, np.arange(len(self.assignment)))

    def __eq__(self, other):
        if not isinstance(other, Clustering):
            return NotImplemented
        return self.num_clusters == other.num_clusters and np.array_equal(self.assignment, other.assignment)

    __hash__ = None


@dataclass(frozen=True)
class SceneGraph:
    """Bipartite image-point visibility in CSR form, both directions."""

    point_indptr: np.ndarray
    point_images: np.ndarray
    image_indptr: np.ndarray
    image_points: np.ndarray

    def images_of_point(self, point_id: int) -> np.ndarray:
        return self.point_images[self.point_indptr[point_id]:self.point_indptr[point_id + 1]]

    def points_of_image(self, image_id: int) -> np.ndarray:
        return self.image_points[self.image_indptr[image_id]:self.image_indptr[image_id + 1]]

    @property
    def num_edges(self) -> int:
        return len(self.point_images)


@dataclass(frozen=True, eq=False)
class NearestNeighborTable:
    """Per view: nearest same-cluster view of a different point, and its distance.

    Views without such a neighbor hold ``NO_NEIGHBOR`` and ``inf``.
    """

    nn_view: np.ndarray
    nn_distance: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, NearestNeighborTable):
            return NotImplemented
        return np.array_equal(self.nn_view, other.nn_view) and np.array_equal(
            self.nn_distance, other.nn_distance)

    __hash__ = None


def _csr(keys: np.ndarray, values: np.ndarray, n: int):
    order = np.lexsort((values, keys))
    indptr = np.searchsorted(keys[order], np.arange(n + 1))
    return indptr.astype(np.int64), values[order].astype(np.int64)


@dataclass(eq=False)
class SceneModel:
    point_xyz: np.ndarray
    view_point: np.ndarray
    view_image: np.ndarray
    view_pixel: np.ndarray
    descriptors: np.ndarray
    images: list[ModelImage]
    clustering: Clustering
    nn_table: NearestNeighborTable | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.point_xyz = np.asarray(self.point_xyz, dtype=np.float64).reshape(-1, 3)
        self.view_point = np.asarray(self.view_point, dtype=np.int64).reshape(-1)
        self.view_image = np.asarray(self.view_image, dtype=np.int64).reshape(-1)
        self.view_pixel = np.asarray(self.view_pixel, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            raise ModelError("descriptors must be a 2-D array")
        self.images = list(self.images)

    @property
    def num_points(self) -> int:
        return len(self.point_xyz)

    @property
    def num_views(self) -> int:
        return len(self.view_point)

    @property
    def num_images(self) -> int:
        return len(self.images)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def view_cluster(self) -> np.ndarray:
        if "view_cluster" not in self._cache:
            self._cache["view_cluster"] = self.clustering.assignment[self.view_image]
        return self._cache["view_cluster"]

    @property
    def graph(self) -> SceneGraph:
        if "graph" not in self._cache:
            self._cache["graph"] = build_scene_graph(self)
        return self._cache["graph"]

    def _views_by(self, key: str, keys: np.ndarray, n: int):
        if key not in self._cache:
            self._cache[key] = _csr(keys, np.arange(self.num_views), n)
        return self._cache[key]

    def views_of_point(self, point_id: int) -> np.ndarray:
        indptr, idx = self._views_by("point_views", self.view_point, self.num_points)
        return idx[indptr[point_id]:indptr[point_id + 1]]

    def views_of_image(self, image_id: int) -> np.ndarray:
        indptr, idx = self._views_by("image_views", self.view_image, self.num_images)
        return idx[indptr[image_id]:indptr[image_id + 1]]

    def views_of_cluster(self, cluster_id: int) -> np.ndarray:
        indptr, idx = self._views_by("cluster_views", self.view_cluster, self.clustering.num_clusters)
        return idx[indptr[cluster_id]:indptr[cluster_id + 1]]

    def point(self, point_id: int) -> Point3D:
        return Point3D(point_id, self.point_xyz[point_id], self.views_of_point(point_id))

    def view(self, view_id: int) -> View:
        return View(view_id, int(self.view_point[view_id]), int(self.view_image[view_id]),
                    self.view_pixel[view_id], self.descriptors[view_id])

    def with_clustering(self, clustering: Clustering) -> SceneModel:
        """Copy with a new clustering; images, cluster ids and the NN table follow it."""
        images = [ModelImage(im.id, im.pose, im.width, im.height, int(clustering.assignment[im.id]))
                  for im in self.images]
        m = SceneModel(self.point_xyz, self.view_point, self.view_image, self.view_pixel,
                       self.descriptors, images, clustering)
        m.nn_table = precompute_nn_table(m)
        return m

    def validate(self) -> SceneModel:
        validate_model(self)
        return self

    def __eq__(self, other):
        if not isinstance(other, SceneModel):
            return NotImplemented
        arrays = ("point_xyz", "view_point", "view_image", "view_pixel", "descriptors")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.images == other.images
            and self.clustering == other.clustering
            and self.nn_table == other.nn_table
        )

    __hash__ = None


def validate_model(model: SceneModel):
    """Check every structural invariant; raise :class:`ModelError` naming the entity."""
    P, V, I = model.num_points, model.num_views, model.num_images
    D = model.descriptor_dim
    for name in ("view_image", "view_pixel", "descriptors"):
        if len(getattr(model, name)) != V:
            raise ModelError(f"{name} has {len(getattr(model, name))} rows, expected {V}")
    if D < 1:
        raise ModelError("descriptor dimension must be positive")
    if not np.all(np.isfinite(model.descriptors)):
        bad = int(np.flatnonzero(~np.isfinite(model.descriptors).all(axis=1))[0])
        raise ModelError(f"view {bad}: non-finite descriptor")
    if not np.all(np.isfinite(model.point_xyz)):
        bad = int(np.flatnonzero(~np.isfinite(model.point_xyz).all(axis=1))[0])
        raise ModelError(f"point {bad}: non-finite position")
    for i, im in enumerate(model.images):
        if im.id != i:
            raise ModelError(f"image at row {i} has id {im.id}; ids must be dense")
        if im.width <= 0 or im.height <= 0:
            raise ModelError(f"image {i}: non-positive size")
    bad = np.flatnonzero((model.view_point < 0) | (model.view_point >= P))
    if len(bad):
        v = int(bad[0])
        raise ModelError(f"view {v}: dangling point reference {int(model.view_point[v])}")
    bad = np.flatnonzero((model.view_image < 0) | (model.view_image >= I))
    if len(bad):
        v = int(bad[0])
        raise ModelError(f"view {v}: dangling image reference {int(model.view_image[v])}")
    if V:
        pair = model.view_point * max(I, 1) + model.view_image
        uniq, first, counts = np.unique(pair, return_index=True, return_counts=True)
        if np.any(counts > 1):
            dup = uniq[counts > 1][0]
            v = int(np.flatnonzero(pair == dup)[1])
            raise ModelError(f"view {v}: duplicate observation of point {int(model.view_point[v])} "
                             f"in image {int(model.view_image[v])}")
        w = np.array([im.width for im in model.images])[model.view_image]
        h = np.array([im.height for im in model.images])[model.view_image]
        px = model.view_pixel
        outside = ~((px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h))
        if np.any(outside):
            v = int(np.flatnonzero(outside)[0])
            raise ModelError(f"view {v}: pixel {px[v].tolist()} outside image {int(model.view_image[v])}")
    per_point = np.bincount(model.view_point, minlength=P)
    if np.any(per_point < 2):
        p = int(np.flatnonzero(per_point < 2)[0])
        raise ModelError(f"point {p}: observed by {int(per_point[p])} views, need at least 2")
    model.clustering.validate(I)
    for i, im in enumerate(model.images):
        if im.cluster_id != model.clustering.assignment[i]:
            raise ModelError(f"image {i}: cluster id {im.cluster_id} disagrees with clustering")
    nn = model.nn_table
    if nn is not None:
        if len(nn.nn_view) != V or len(nn.nn_distance) != V:
            raise ModelError("nearest-neighbor table size does not match view count")
        bad = np.flatnonzero((nn.nn_view != NO_NEIGHBOR) & ((nn.nn_view < 0) | (nn.nn_view >= V)))
        if len(bad):
            raise ModelError(f"view {int(bad[0])}: dangling nearest-neighbor reference")


def build_scene_graph(model: SceneModel) -> SceneGraph:
    p_indptr, p_images = _csr(model.view_point, model.view_image, model.num_points)
    i_indptr, i_points = _csr(model.view_image, model.view_point, model.num_images)
    return SceneGraph(p_indptr, p_images, i_indptr, i_points)


def _cluster_nn(desc: np.ndarray, points: np.ndarray, view_ids: np.ndarray, chunk_elems: int):
    n = len(view_ids)
    nn_view = np.full(n, NO_NEIGHBOR, dtype=np.int64)
    nn_dist = np.full(n, np.inf)
    if n < 2:
        return nn_view, nn_dist
    rows = max(1, chunk_elems // (n * desc.shape[1]))
    for s in range(0, n, rows):
        block = slice(s, min(n, s + rows))
        d = l2_distances(desc[None, :, :], desc[block, None, :])
        d[points[block, None] == points[None, :]] = np.inf
        # view ids within a cluster are ascending, so argmin breaks ties by lower id
        j = np.argmin(d, axis=1)
        dj = d[np.arange(len(j)), j]
        ok = np.isfinite(dj)
        nn_view[block][ok] = view_ids[j[ok]]
        nn_dist[block][ok] = dj[ok]
    return nn_view, nn_dist


def precompute_nn_table(model: SceneModel, chunk_elems: int = 1 << 22) -> NearestNeighborTable:
    """Exact in-cluster nearest neighbor of each view, excluding views of the same point."""
    nn_view = np.full(model.num_views, NO_NEIGHBOR, dtype=np.int64)
    nn_dist = np.full(model.num_views, np.inf)
    for c in range(model.clustering.num_clusters):
        vids = model.views_of_cluster(c)
        if len(vids) == 0:
            continue
        nv, nd = _cluster_nn(model.descriptors[vids], model.view_point[vids], vids, chunk_elems)
        nn_view[vids] = nv
        nn_dist[vids] = nd
    return NearestNeighborTable(nn_view, nn_dist)
