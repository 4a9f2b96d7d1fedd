"""Approximate k-nearest-neighbor search over view descriptors.

A single kd-tree (split on the dimension of largest spread, at the median)
searched best-bin-first: unexplored branches wait in a priority queue keyed
by the squared distance from the query to the branch's cell (updated
incrementally, one split dimension at a time), and the search stops after
``max_leaves_checked`` leaves or when no branch can hold a closer point.
With an unlimited leaf budget the result is exact.
"""

from __future__ import annotations

import hashlib
import heapq
import io
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .model import SceneModel, l2_distances

# incremental squared cell distances may exceed the true value by rounding
_BOUND_SLACK = 1.0 + 1e-9


@dataclass(frozen=True)
class SearchBudget:
    max_leaves_checked: int | None = 128
    k: int = 5

    def __post_init__(self):
        if self.max_leaves_checked is not None and self.max_leaves_checked < 1:
            raise ValueError("max_leaves_checked must be at least 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")


UNLIMITED = None


class Neighbor(NamedTuple):
    view_id: int
    distance: float


def _select_k(dists: np.ndarray, ids: np.ndarray, k: int):
    order = np.lexsort((ids, dists))[:k]
    return dists[order], ids[order]


class AnnIndex:
    """kd-tree over the rows of ``data``; ``payload[i]`` is the view id of row ``i``."""

    def __init__(self, data: np.ndarray, payload: np.ndarray | None = None, leaf_size: int = 16,
                 seed: int = 0):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 2 or len(data) == 0:
            raise ValueError("cannot build an index over an empty descriptor set")
        if leaf_size < 1:
            raise ValueError("leaf_size must be at least 1")
        self.data = data
        self.payload = np.arange(len(data), dtype=np.int64) if payload is None else np.asarray(payload, np.int64)
        self.leaf_size = int(leaf_size)
        self.seed = int(seed)
        self._build(np.random.default_rng(seed))

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return len(self.data)

    @property
    def num_leaves(self) -> int:
        return int(np.sum(self.split_dim < 0))

    def _build(self, rng):
        n = len(self.data)
        perm = np.arange(n)
        split_dim, split_val, left, right, start, stop, lo, hi = [], [], [], [], [], [], [], []

        def new_node(s, e):
            pts = self.data[perm[s:e]]
            split_dim.append(-1)
            split_val.append(0.0)
            left.append(-1)
            right.append(-1)
            start.append(s)
            stop.append(e)
            lo.append(pts.min(axis=0))
            hi.append(pts.max(axis=0))
            return len(split_dim) - 1

        root = new_node(0, n)
        stack = [root]
        while stack:
            node = stack.pop()
            s, e = start[node], stop[node]
            if e - s <= self.leaf_size:
                continue
            spread = hi[node] - lo[node]
            best = spread.max()
            if best <= 0:
                continue  # all points identical; keep as an oversized leaf
            ties = np.flatnonzero(spread == best)
            dim = int(ties[0] if len(ties) == 1 else rng.choice(ties))
            idx = perm[s:e]
            vals = self.data[idx, dim]
            order = np.argsort(vals, kind="stable")
            perm[s:e] = idx[order]
            mid = (e - s) // 2
            split_dim[node] = dim
            split_val[node] = float(vals[order[mid]])
            m = s + mid
            left[node] = new_node(s, m)
            right[node] = new_node(m, e)
            stack.extend((right[node], left[node]))

        self.perm = perm
        self.split_dim = np.array(split_dim, dtype=np.int64)
        self.split_val = np.array(split_val)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.stop = np.array(stop, dtype=np.int64)
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self._prepare()

    def _prepare(self):
        # leaf contents stored contiguously; node arrays as lists for fast scalar access
        self._leaf_data = self.data[self.perm]
        self._leaf_ids = self.payload[self.perm]
        self._split_dim_list = self.split_dim.tolist()
        self._split_val_list = self.split_val.tolist()
        self._left_list = self.left.tolist()
        self._right_list = self.right.tolist()
        self._start_list = self.start.tolist()
        self._stop_list = self.stop.tolist()

    def search(self, query, k: int, max_leaves: int | None = 128) -> tuple[np.ndarray, np.ndarray]:
        """Up to ``k`` approximate neighbors as ``(distances, view_ids)``, ascending.

        Ties are broken by lower view id.  ``max_leaves=None`` is unlimited.
        """
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if len(q) != self.dim:
            raise ValueError(f"query dimension {len(q)} does not match index dimension {self.dim}")
        k = min(int(k), len(self.data))
        best_d = np.empty(0)
        best_i = np.empty(0, dtype=np.int64)
        worst2 = np.inf  # squared k-th distance once k candidates are known
        split_dim, split_val = self._split_dim_list, self._split_val_list
        left, right = self._left_list, self._right_list
        start, stop = self._start_list, self._stop_list
        qs = q.tolist()
        # entries: (squared cell distance, tie counter, node, per-dimension offsets)
        heap = [(0.0, 0, 0, None)]
        tick = 1
        leaves = 0
        while heap:
            bound2, _, node, off = heapq.heappop(heap)
            if bound2 > worst2 * _BOUND_SLACK:
                break
            if max_leaves is not None and leaves >= max_leaves:
                break
            while split_dim[node] >= 0:
                dim = split_dim[node]
                gap = qs[dim] - split_val[node]
                if gap < 0:
                    near, far = left[node], right[node]
                else:
                    near, far = right[node], left[node]
                old = off.get(dim, 0.0) if off else 0.0
                fb2 = bound2 - old * old + gap * gap
                if fb2 <= worst2 * _BOUND_SLACK:
                    foff = dict(off) if off else {}
                    foff[dim] = gap
                    heapq.heappush(heap, (fb2, tick, far, foff))
                    tick += 1
                node = near
            leaves += 1
            s, e = start[node], stop[node]
            d = l2_distances(self._leaf_data[s:e], q)
            if len(best_d) == k and d.min() > best_d[-1]:
                continue  # nothing in this leaf can enter the current k best
            if len(best_d):
                d = np.concatenate([best_d, d])
                ids = np.concatenate([best_i, self._leaf_ids[s:e]])
            else:
                ids = self._leaf_ids[s:e]
            best_d, best_i = _select_k(d, ids, k)
            if len(best_d) == k:
                worst2 = float(best_d[-1]) ** 2
        return best_d, best_i

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.data.tobytes())
        h.update(self.payload.tobytes())
        return h.hexdigest()

    def save(self, path, views_hash: str) -> None:
        """Write the tree to ``path``; ``views_hash`` keys it to a ``views.bin``."""
        buf = io.BytesIO()
        np.savez(buf, views_hash=np.array(views_hash), leaf_size=self.leaf_size, seed=self.seed,
                 perm=self.perm, split_dim=self.split_dim, split_val=self.split_val, left=self.left,
                 right=self.right, start=self.start, stop=self.stop, lo=self.lo, hi=self.hi,
                 payload=self.payload)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path, data: np.ndarray, views_hash: str) -> AnnIndex:
        with np.load(path) as z:
            if str(z["views_hash"]) != views_hash:
                raise StaleIndexError(f"{path}: index was built for different views")
            self = cls.__new__(cls)
            self.data = np.ascontiguousarray(data, dtype=np.float64)
            self.leaf_size = int(z["leaf_size"])
            self.seed = int(z["seed"])
            for name in ("perm", "split_dim", "split_val", "left", "right", "start", "stop", "lo", "hi", "payload"):
                setattr(self, name, z[name])
        self._prepare()
        return self


class StaleIndexError(ValueError):
    pass


def build_index(model: SceneModel, leaf_size: int = 16, seed: int = 0) -> AnnIndex:
    """Global index over every view descriptor of the model."""
    if model.num_views == 0:
        raise ValueError("cannot build an index for a model without views")
    return AnnIndex(model.descriptors, np.arange(model.num_views), leaf_size, seed)


def knn_search(index: AnnIndex, query, budget: SearchBudget = SearchBudget()) -> list[Neighbor]:
    """The ``k + 1`` nearest views under the leaf budget, ascending by distance."""
    d, ids = index.search(query, budget.k + 1, budget.max_leaves_checked)
    return [Neighbor(int(i), float(x)) for i, x in zip(ids, d)]


def brute_force_knn(model: SceneModel, query, k: int) -> list[Neighbor]:
    """Exact ``k`` nearest views by linear scan; ties go to the lower view id."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if len(q) != model.descriptor_dim:
        raise ValueError("query dimension does not match model")
    d = l2_distances(model.descriptors, q)
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return [Neighbor(int(i), float(d[i])) for i in order]
