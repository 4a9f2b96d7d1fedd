"""On-disk formats for scene models and query sets.

A model directory holds::

    model.json    header: format, version, descriptor_dim, counts, clustering mode,
                  sha256 of every binary file
    points.bin    num_points records  <i8 id, <f8 x, <f8 y, <f8 z
    views.bin     num_views records   <i8 id, <i8 point_id, <i8 image_id, <f8 u, <f8 v
                  followed by a contiguous row-major num_views x D block of <f8 descriptors
    images.bin    num_images records  <i8 id, <i8 cluster_id, <i8 width, <i8 height,
                  <f8 focal, <f8 cx, <f8 cy, <f8 R[9] (row-major, world->camera), <f8 C[3]
    nn_table.bin  num_views records   <i8 view_id, <i8 nn_view_id (-1 = none), <f8 nn_distance

A query file (``queries.bin``) is::

    <i8 num_queries, <i8 descriptor_dim
    per query: <i8 query_id, <i8 num_features, <i8 width, <i8 height, <f8 focal, <f8 cx, <f8 cy
               num_features records <i8 feature_id, <f8 u, <f8 v
               num_features x D block of <f8 descriptors

All values little-endian.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .camera import CameraPose
from .model import (
    Clustering,
    ModelError,
    ModelImage,
    NearestNeighborTable,
    SceneModel,
    precompute_nn_table,
    validate_model,
)

FORMAT_NAME = "clusterloc-model"
FORMAT_VERSION = 1

POINT_DTYPE = np.dtype([("id", "<i8"), ("xyz", "<f8", (3,))])
VIEW_DTYPE = np.dtype([("id", "<i8"), ("point_id", "<i8"), ("image_id", "<i8"), ("pixel", "<f8", (2,))])
IMAGE_DTYPE = np.dtype([
    ("id", "<i8"), ("cluster_id", "<i8"), ("width", "<i8"), ("height", "<i8"),
    ("focal", "<f8"), ("pp", "<f8", (2,)), ("R", "<f8", (9,)), ("C", "<f8", (3,)),
])
NN_DTYPE = np.dtype([("view_id", "<i8"), ("nn_view_id", "<i8"), ("nn_distance", "<f8")])
QUERY_HEADER_DTYPE = np.dtype([
    ("id", "<i8"), ("num_features", "<i8"), ("width", "<i8"), ("height", "<i8"),
    ("focal", "<f8"), ("pp", "<f8", (2,)),
])
FEATURE_DTYPE = np.dtype([("id", "<i8"), ("pixel", "<f8", (2,))])

MODEL_FILES = ("points.bin", "views.bin", "images.bin", "nn_table.bin")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_model(model: SceneModel, path) -> None:
    validate_model(model)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nn = model.nn_table if model.nn_table is not None else precompute_nn_table(model)

    pts = np.zeros(model.num_points, POINT_DTYPE)
    pts["id"] = np.arange(model.num_points)
    pts["xyz"] = model.point_xyz
    views = np.zeros(model.num_views, VIEW_DTYPE)
    views["id"] = np.arange(model.num_views)
    views["point_id"] = model.view_point
    views["image_id"] = model.view_image
    views["pixel"] = model.view_pixel
    ims = np.zeros(model.num_images, IMAGE_DTYPE)
    for i, im in enumerate(model.images):
        ims[i] = (im.id, im.cluster_id, im.width, im.height, im.pose.focal,
                  im.pose.principal_point, im.pose.rotation.ravel(), im.pose.center)
    nnrec = np.zeros(model.num_views, NN_DTYPE)
    nnrec["view_id"] = np.arange(model.num_views)
    nnrec["nn_view_id"] = nn.nn_view
    nnrec["nn_distance"] = nn.nn_distance

    with open(path / "points.bin", "wb") as fh:
        fh.write(pts.tobytes())
    with open(path / "views.bin", "wb") as fh:
        fh.write(views.tobytes())
        fh.write(model.descriptors.astype("<f8").tobytes())
    with open(path / "images.bin", "wb") as fh:
        fh.write(ims.tobytes())
    with open(path / "nn_table.bin", "wb") as fh:
        fh.write(nnrec.tobytes())

    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "descriptor_dim": model.descriptor_dim,
        "num_points": model.num_points,
        "num_views": model.num_views,
        "num_images": model.num_images,
        "num_clusters": model.clustering.num_clusters,
        "clustering": "single-image" if model.clustering.is_single_image else "custom",
        "sha256": {name: file_sha256(path / name) for name in MODEL_FILES},
    }
    (path / "model.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def _read_records(path: Path, dtype: np.dtype, count: int, extra_bytes: int = 0) -> tuple[np.ndarray, bytes]:
    if not path.exists():
        raise ModelError(f"missing file {path.name}")
    raw = path.read_bytes()
    expected = dtype.itemsize * count + extra_bytes
    if len(raw) != expected:
        raise ModelError(f"{path.name}: size {len(raw)} bytes, header implies {expected}")
    recs = np.frombuffer(raw, dtype=dtype, count=count)
    return recs, raw[dtype.itemsize * count:]


def read_header(path) -> dict:
    path = Path(path)
    hp = path / "model.json"
    if not hp.exists():
        raise ModelError(f"missing file model.json in {path}")
    try:
        header = json.loads(hp.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"model.json: {exc}") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ModelError("model.json: unsupported format or version")
    return header


def load_model(path, verify_hashes: bool = True) -> SceneModel:
    path = Path(path)
    h = read_header(path)
    D = int(h["descriptor_dim"])
    P, V, I = int(h["num_points"]), int(h["num_views"]), int(h["num_images"])
    if verify_hashes:
        for name, digest in h.get("sha256", {}).items():
            if (path / name).exists() and file_sha256(path / name) != digest:
                raise ModelError(f"{name}: content hash does not match model.json")

    pts, _ = _read_records(path / "points.bin", POINT_DTYPE, P)
    views, tail = _read_records(path / "views.bin", VIEW_DTYPE, V, extra_bytes=V * D * 8)
    ims, _ = _read_records(path / "images.bin", IMAGE_DTYPE, I)
    nnr, _ = _read_records(path / "nn_table.bin", NN_DTYPE, V)
    for name, recs in (("point", pts["id"]), ("view", views["id"]), ("image", ims["id"]), ("view", nnr["view_id"])):
        if not np.array_equal(recs, np.arange(len(recs))):
            bad = int(np.flatnonzero(recs != np.arange(len(recs)))[0])
            raise ModelError(f"{name} record {bad} has id {int(recs[bad])}; ids must be dense")

    descriptors = np.frombuffer(tail, dtype="<f8").reshape(V, D).astype(np.float64)
    images = []
    for r in ims:
        try:
            pose = CameraPose(r["R"].reshape(3, 3), r["C"], float(r["focal"]), tuple(r["pp"]))
        except ValueError as exc:
            raise ModelError(f"image {int(r['id'])}: {exc}") from None
        images.append(ModelImage(int(r["id"]), pose, int(r["width"]), int(r["height"]), int(r["cluster_id"])))
    clustering = Clustering(ims["cluster_id"].copy(), int(h["num_clusters"]))
    model = SceneModel(
        pts["xyz"].copy(), views["point_id"].copy(), views["image_id"].copy(), views["pixel"].copy(),
        descriptors, images, clustering,
        NearestNeighborTable(nnr["nn_view_id"].copy(), nnr["nn_distance"].astype(np.float64)),
    )
    validate_model(model)
    return model


def import_text_model(path, clustering: Clustering | None = None) -> SceneModel:
    """Read a tiny hand-written model.

    One entity per line, ``#`` starts a comment::

        dim <D>
        image <id> <cluster> <width> <height> <focal> <cx> <cy> <R00..R22> <Cx> <Cy> <Cz>
        point <id> <x> <y> <z>
        view <id> <point_id> <image_id> <u> <v> <d_1> ... <d_D>

    ``image`` lines may omit the rotation and center (identity pose at origin).
    The NN table is computed on import.
    """
    dim = None
    images, points, views = {}, {}, {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind, vals = tok[0], tok[1:]
        try:
            if kind == "dim":
                dim = int(vals[0])
            elif kind == "image":
                iid, cl, w, hgt = (int(x) for x in vals[:4])
                focal, cx, cy = (float(x) for x in vals[4:7])
                rest = [float(x) for x in vals[7:]]
                R = np.array(rest[:9]).reshape(3, 3) if rest else np.eye(3)
                C = np.array(rest[9:12]) if rest else np.zeros(3)
                images[iid] = ModelImage(iid, CameraPose(R, C, focal, (cx, cy)), w, hgt, cl)
            elif kind == "point":
                points[int(vals[0])] = [float(x) for x in vals[1:4]]
            elif kind == "view":
                views[int(vals[0])] = (int(vals[1]), int(vals[2]), [float(x) for x in vals[3:5]],
                                       [float(x) for x in vals[5:]])
            else:
                raise ModelError(f"line {lineno}: unknown record '{kind}'")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ModelError):
                raise
            raise ModelError(f"line {lineno}: {exc}") from None
    if dim is None:
        raise ModelError("missing 'dim' line")
    for name, table in (("image", images), ("point", points), ("view", views)):
        if sorted(table) != list(range(len(table))):
            raise ModelError(f"{name} ids must be 0..{len(table) - 1}")
    for vid, (_, _, _, d) in views.items():
        if len(d) != dim:
            raise ModelError(f"view {vid}: descriptor has {len(d)} values, header dim is {dim}")
    img_list = [images[i] for i in range(len(images))]
    if clustering is None:
        assignment = np.array([im.cluster_id for im in img_list], dtype=np.int64)
        clustering = Clustering(assignment, int(assignment.max()) + 1 if len(assignment) else 0)
    V = len(views)
    model = SceneModel(
        np.array([points[i] for i in range(len(points))], dtype=np.float64).reshape(-1, 3),
        np.array([views[i][0] for i in range(V)], dtype=np.int64),
        np.array([views[i][1] for i in range(V)], dtype=np.int64),
        np.array([views[i][2] for i in range(V)], dtype=np.float64).reshape(-1, 2),
        np.array([views[i][3] for i in range(V)], dtype=np.float64).reshape(V, dim),
        img_list, clustering,
    )
    validate_model(model)
    model.nn_table = precompute_nn_table(model)
    return model
