"""Query images: 2D features with descriptors plus known intrinsics."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Intrinsics
from .formats import FEATURE_DTYPE, QUERY_HEADER_DTYPE
from .model import ModelError


@dataclass(eq=False)
class QueryImage:
    id: int
    feature_ids: np.ndarray
    pixels: np.ndarray
    descriptors: np.ndarray
    intrinsics: Intrinsics
    width: int
    height: int

    def __post_init__(self):
        self.feature_ids = np.asarray(self.feature_ids, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        n = len(self.feature_ids)
        desc = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        self.descriptors = desc if desc.ndim == 2 and len(desc) == n else desc.reshape(n, -1)
        if len(self.pixels) != n:
            raise ValueError("pixels and feature ids differ in length")
        if len(np.unique(self.feature_ids)) != n:
            raise ValueError(f"query {self.id}: duplicate feature ids")
        px = self.pixels
        inside = (px[:, 0] >= 0) & (px[:, 0] < self.width) & (px[:, 1] >= 0) & (px[:, 1] < self.height)
        if not np.all(inside):
            bad = int(self.feature_ids[np.flatnonzero(~inside)[0]])
            raise ValueError(f"query {self.id}: feature {bad} lies outside the image")

    @property
    def num_features(self) -> int:
        return len(self.feature_ids)

    @cached_property
    def row_of(self) -> dict[int, int]:
        return {int(f): i for i, f in enumerate(self.feature_ids)}

    @cached_property
    def index(self) -> cKDTree:
        """Exact kd-tree over this query's descriptors, for back-matching."""
        return cKDTree(self.descriptors)

    def back_match(self, descriptors: np.ndarray, k: int = 2):
        """Nearest query features of model descriptors: ``(distances, feature_rows)``, shape (m, k)."""
        k = min(k, self.num_features)
        d, i = self.index.query(np.atleast_2d(descriptors), k=k)
        return np.asarray(d).reshape(-1, k), np.asarray(i).reshape(-1, k)

    def __eq__(self, other):
        if not isinstance(other, QueryImage):
            return NotImplemented
        return (self.id == other.id and self.width == other.width and self.height == other.height
                and self.intrinsics == other.intrinsics
                and np.array_equal(self.feature_ids, other.feature_ids)
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.descriptors, other.descriptors))

    __hash__ = None


def save_queries(queries: list[QueryImage], path, descriptor_dim: int | None = None) -> None:
    if descriptor_dim is None:
        descriptor_dim = queries[0].descriptors.shape[1] if queries else 0
    with open(path, "wb") as fh:
        fh.write(np.array([len(queries), descriptor_dim], dtype="<i8").tobytes())
        for q in queries:
            if q.num_features and q.descriptors.shape[1] != descriptor_dim:
                raise ValueError(f"query {q.id}: descriptor dimension mismatch")
            hdr = np.zeros(1, QUERY_HEADER_DTYPE)
            hdr[0] = (q.id, q.num_features, q.width, q.height, q.intrinsics.focal, q.intrinsics.principal_point)
            feats = np.zeros(q.num_features, FEATURE_DTYPE)
            feats["id"] = q.feature_ids
            feats["pixel"] = q.pixels
            fh.write(hdr.tobytes())
            fh.write(feats.tobytes())
            fh.write(q.descriptors.astype("<f8").tobytes())


def load_queries(path) -> list[QueryImage]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ModelError(f"{path}: truncated query file")
    count, D = (int(x) for x in np.frombuffer(raw, "<i8", count=2))
    off = 16
    out = []
    for _ in range(count):
        if off + QUERY_HEADER_DTYPE.itemsize > len(raw):
            raise ModelError(f"{path}: truncated query header")
        h = np.frombuffer(raw, QUERY_HEADER_DTYPE, count=1, offset=off)[0]
        off += QUERY_HEADER_DTYPE.itemsize
        n = int(h["num_features"])
        need = n * FEATURE_DTYPE.itemsize + n * D * 8
        if off + need > len(raw):
            raise ModelError(f"{path}: truncated features of query {int(h['id'])}")
        feats = np.frombuffer(raw, FEATURE_DTYPE, count=n, offset=off)
        off += n * FEATURE_DTYPE.itemsize
        desc = np.frombuffer(raw, "<f8", count=n * D, offset=off).reshape(n, D)
        off += n * D * 8
        try:
            out.append(QueryImage(int(h["id"]), feats["id"].copy(), feats["pixel"].copy(), desc.copy(),
                                  Intrinsics(float(h["focal"]), tuple(float(x) for x in h["pp"])),
                                  int(h["width"]), int(h["height"])))
        except ValueError as exc:
            raise ModelError(str(exc)) from None
    if off != len(raw):
        raise ModelError(f"{path}: {len(raw) - off} trailing bytes")
    return out
