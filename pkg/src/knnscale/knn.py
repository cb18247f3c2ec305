"""Exact k-nearest-neighbour search: a kd-tree and a brute-force reference.

Neighbours are ordered by the total order (squared Euclidean distance, row
index).  Squared distances are accumulated coordinate by coordinate in column
order in both implementations, so their results agree bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .errors import PreconditionError

DEFAULT_LEAF_SIZE = 32

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old for numba and only produces a warning
    numba.config.THREADING_LAYER = "omp"


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return self.indices.shape[0]


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(inline="always")
def _after(sa, ia, sb, ib):
    # (sa, ia) sorts after (sb, ib)
    return sa > sb or (sa == sb and ia > ib)


@njit(inline="always")
def _sift_down(hs, hi, pos, cnt):
    while True:
        c = 2 * pos + 1
        if c >= cnt:
            break
        if c + 1 < cnt and _after(hs[c + 1], hi[c + 1], hs[c], hi[c]):
            c += 1
        if _after(hs[c], hi[c], hs[pos], hi[pos]):
            hs[c], hs[pos] = hs[pos], hs[c]
            hi[c], hi[pos] = hi[pos], hi[c]
            pos = c
        else:
            break


@njit(inline="always")
def _sift_up(hs, hi, pos):
    while pos > 0:
        par = (pos - 1) // 2
        if _after(hs[pos], hi[pos], hs[par], hi[par]):
            hs[par], hs[pos] = hs[pos], hs[par]
            hi[par], hi[pos] = hi[pos], hi[par]
            pos = par
        else:
            break


@njit(inline="always")
def _box_sq(q, lo, hi):
    acc = 0.0
    for j in range(q.shape[0]):
        if q[j] < lo[j]:
            diff = lo[j] - q[j]
            acc += diff * diff
        elif q[j] > hi[j]:
            diff = q[j] - hi[j]
            acc += diff * diff
    return acc


@njit(cache=True, parallel=True)
def _tree_query(pts, perm, start, end, left, right, lo, hi, Q, k, exclude, out_idx, out_sq):
    n_nodes = start.shape[0]
    d = pts.shape[1]
    for qi in prange(Q.shape[0]):
        q = Q[qi]
        excl = exclude[qi]
        hs = np.empty(k)
        hid = np.empty(k, dtype=np.int64)
        cnt = 0
        stack = np.empty(n_nodes, dtype=np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if cnt == k and _box_sq(q, lo[node], hi[node]) > hs[0]:
                continue
            if left[node] < 0:
                for pos in range(start[node], end[node]):
                    idx = perm[pos]
                    if idx == excl:
                        continue
                    acc = 0.0
                    for j in range(d):
                        diff = pts[pos, j] - q[j]
                        acc += diff * diff
                    if cnt < k:
                        hs[cnt] = acc
                        hid[cnt] = idx
                        _sift_up(hs, hid, cnt)
                        cnt += 1
                    elif _after(hs[0], hid[0], acc, idx):
                        hs[0] = acc
                        hid[0] = idx
                        _sift_down(hs, hid, 0, cnt)
            else:
                a = left[node]
                b = right[node]
                da = _box_sq(q, lo[a], hi[a])
                db = _box_sq(q, lo[b], hi[b])
                if da <= db:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        for t in range(cnt - 1, -1, -1):
            out_sq[qi, t] = hs[0]
            out_idx[qi, t] = hid[0]
            hs[0] = hs[t]
            hid[0] = hid[t]
            _sift_down(hs, hid, 0, t)


_RADIX_BITS = 11
_RADIX_MASK = (1 << _RADIX_BITS) - 1


@njit(cache=True)
def _radix_argsort(keys):
    """Stable LSD radix argsort of uint64 keys (11-bit digits, constant digits skipped)."""
    n = keys.shape[0]
    order = np.arange(n)
    tmp = np.empty(n, dtype=np.int64)
    counts = np.empty(_RADIX_MASK + 1, dtype=np.int64)
    for shift in range(0, 64, _RADIX_BITS):
        counts[:] = 0
        for t in range(n):
            counts[(keys[t] >> np.uint64(shift)) & np.uint64(_RADIX_MASK)] += 1
        first = (keys[0] >> np.uint64(shift)) & np.uint64(_RADIX_MASK)
        if counts[first] == n:
            continue
        total = 0
        for b in range(_RADIX_MASK + 1):
            c = counts[b]
            counts[b] = total
            total += c
        for t in range(n):
            o = order[t]
            b = (keys[o] >> np.uint64(shift)) & np.uint64(_RADIX_MASK)
            tmp[counts[b]] = o
            counts[b] += 1
        order, tmp = tmp, order
    return order


_SMALL_BUCKET = 32


@njit(cache=True)
def _sort_segment(vals, ids, a, e):
    """Stable in-place sort of vals[a:e] (ids carried along); ids arrive ascending."""
    if e - a <= _SMALL_BUCKET:
        for u in range(a + 1, e):
            v = vals[u]
            o = ids[u]
            w = u - 1
            while w >= a and vals[w] > v:
                vals[w + 1] = vals[w]
                ids[w + 1] = ids[w]
                w -= 1
            vals[w + 1] = v
            ids[w + 1] = o
    else:
        seg_v = vals[a:e].copy()
        seg_i = ids[a:e].copy()
        sub = _radix_argsort(seg_v.view(np.uint64))
        for u in range(e - a):
            vals[a + u] = seg_v[sub[u]]
            ids[a + u] = seg_i[sub[u]]


@njit(cache=True)
def _ordered_prefix(X, q, skip, kneed, sq, bkt, counts, out_sq, out_id):
    """Nearest rows of X to q in (squared distance, index) order, row ``skip`` left out.

    Only the first ``kneed`` entries of out_sq/out_id are guaranteed sorted.
    Rows are bucketed by sq * n / max(sq), a monotone map, so only buckets that
    start before position ``kneed`` need sorting.  Returns the number of rows placed.
    """
    m, d = X.shape
    n = 0
    top = 0.0
    for j in range(m):
        if j == skip:
            continue
        acc = 0.0
        for c in range(d):
            diff = X[j, c] - q[c]
            acc += diff * diff
        sq[n] = acc
        n += 1
        if acc > top:
            top = acc
    scale = n / top if top > 0 else 0.0
    if not np.isfinite(scale):
        scale = 0.0
    for b in range(n + 1):
        counts[b] = 0
    for t in range(n):
        b = min(int(sq[t] * scale), n - 1)
        bkt[t] = b
        counts[b + 1] += 1
    widest = 0
    for b in range(n):
        if counts[b + 1] > widest:
            widest = counts[b + 1]
        counts[b + 1] += counts[b]
    for t in range(n):
        b = bkt[t]
        pos = counts[b]
        out_sq[pos] = sq[t]
        out_id[pos] = t if (skip < 0 or t < skip) else t + 1
        counts[b] = pos + 1
    # counts[b] now holds the end of bucket b
    if widest <= _SMALL_BUCKET:
        # buckets are already in order, so one insertion pass only moves rows within a bucket
        stop = n
        if kneed < n:
            stop = counts[_bucket_at(out_sq, kneed - 1, scale, n)]
        for u in range(1, stop):
            v = out_sq[u]
            if out_sq[u - 1] <= v:
                continue
            o = out_id[u]
            w = u - 1
            while w >= 0 and out_sq[w] > v:
                out_sq[w + 1] = out_sq[w]
                out_id[w + 1] = out_id[w]
                w -= 1
            out_sq[w + 1] = v
            out_id[w + 1] = o
        return n
    a = 0
    for b in range(n):
        if a >= kneed:
            break
        e = counts[b]
        if e - a > 1:
            _sort_segment(out_sq, out_id, a, e)
        a = e
    return n


@njit(inline="always")
def _bucket_at(vals, pos, scale, n):
    return min(int(vals[pos] * scale), n - 1)


@njit(cache=True, parallel=True)
def _brute_query(X, Q, k, exclude, out_idx, out_sq, n_chunks):
    m = X.shape[0]
    nq = Q.shape[0]
    per = (nq + n_chunks - 1) // n_chunks
    for ch in prange(n_chunks):
        sq = np.empty(m)
        bkt = np.empty(m, dtype=np.int32)
        counts = np.empty(m + 1, dtype=np.int32)
        vals = np.empty(m)
        ids = np.empty(m, dtype=np.int32)
        for t in range(ch * per, min(nq, (ch + 1) * per)):
            _ordered_prefix(X, Q[t], exclude[t], k, sq, bkt, counts, vals, ids)
            for c in range(k):
                out_idx[t, c] = ids[c]
                out_sq[t, c] = vals[c]


def scan_chunks(rows: int) -> int:
    """Work units for row-parallel scans; results never depend on this."""
    return max(1, min(rows, 8 * numba.get_num_threads()))


def prefer_scan(m: int, d: int, k: int) -> bool:
    # tree pruning degrades with dimension and with k; thresholds from timing runs
    return k * 16 > m or d >= 8


# ---------------------------------------------------------------------------
# kd-tree
# ---------------------------------------------------------------------------

class KDTree:
    """Static kd-tree: median split on the dimension of widest spread.

    Nodes keep tight bounding boxes; a subtree is skipped only when its box is
    strictly farther than the current k-th candidate, so equal-distance points
    with smaller indices are never pruned.
    """

    def __init__(self, points, leaf_size: int = DEFAULT_LEAF_SIZE):
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise PreconditionError(f"cannot index an empty point set (shape {pts.shape})")
        if not np.all(np.isfinite(pts)):
            raise PreconditionError("indexed points must be finite")
        if leaf_size < 1:
            raise PreconditionError("leaf_size must be >= 1")
        self.points = pts
        self.points.setflags(write=False)
        self.leaf_size = int(leaf_size)
        self._build()

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def _build(self):
        pts = self.points
        perm = np.arange(self.m, dtype=np.int64)
        start, end, left, right, lo, hi = [], [], [], [], [], []

        def new_node(s, e):
            sub = pts[perm[s:e]]
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            lo.append(sub.min(axis=0))
            hi.append(sub.max(axis=0))
            return len(start) - 1

        stack = [new_node(0, self.m)]
        while stack:
            node = stack.pop()
            s, e = start[node], end[node]
            if e - s <= self.leaf_size:
                continue
            spread = hi[node] - lo[node]
            dim = int(np.argmax(spread))
            if spread[dim] == 0.0:
                continue
            mid = (e - s) // 2
            seg = perm[s:e]
            part = np.argpartition(pts[seg, dim], mid, kind="introselect")
            perm[s:e] = seg[part]
            a = new_node(s, s + mid)
            b = new_node(s + mid, e)
            left[node], right[node] = a, b
            stack.extend((b, a))

        self._perm = perm
        self._pts = np.ascontiguousarray(pts[perm])
        self._start = np.array(start, dtype=np.int64)
        self._end = np.array(end, dtype=np.int64)
        self._left = np.array(left, dtype=np.int64)
        self._right = np.array(right, dtype=np.int64)
        self._lo = np.ascontiguousarray(lo, dtype=np.float64)
        self._hi = np.ascontiguousarray(hi, dtype=np.float64)

    def query_batch(self, Q, k: int, exclude=None, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
        """k nearest rows for every query row; returns (indices, squared distances).

        ``method`` picks the tree walk or a bucketed full scan ("tree", "scan",
        "auto"); both return the same neighbours in the same order.
        """
        Q = np.ascontiguousarray(Q, dtype=np.float64)
        if Q.ndim == 1:
            Q = Q.reshape(1, -1)
        if Q.shape[1] != self.d:
            raise PreconditionError(f"query dimension {Q.shape[1]} != index dimension {self.d}")
        if exclude is None:
            exclude = np.full(Q.shape[0], -1, dtype=np.int64)
            available = self.m
        else:
            exclude = np.ascontiguousarray(exclude, dtype=np.int64)
            available = self.m - 1 if np.any(exclude >= 0) else self.m
        if not 1 <= k <= available:
            raise PreconditionError(f"k={k} outside [1, {available}]")
        if method == "auto":
            method = "scan" if prefer_scan(self.m, self.d, k) else "tree"
        out_idx = np.empty((Q.shape[0], k), dtype=np.int64)
        out_sq = np.empty((Q.shape[0], k))
        if method == "tree":
            _tree_query(self._pts, self._perm, self._start, self._end, self._left, self._right,
                        self._lo, self._hi, Q, int(k), exclude, out_idx, out_sq)
        elif method == "scan":
            _brute_query(self.points, Q, int(k), exclude, out_idx, out_sq, scan_chunks(Q.shape[0]))
        else:
            raise PreconditionError(f"unknown query method {method!r}")
        return out_idx, out_sq

    def query(self, q, k: int, exclude_index: int | None = None) -> NeighborList:
        q = np.asarray(q, dtype=np.float64).reshape(1, -1)
        excl = None if exclude_index is None else np.array([exclude_index])
        idx, sq = self.query_batch(q, k, excl)
        return NeighborList(idx[0], np.sqrt(sq[0]))


def build_index(points, leaf_size: int = DEFAULT_LEAF_SIZE) -> KDTree:
    return KDTree(points, leaf_size)


def query(index: KDTree, q, k: int, exclude_index: int | None = None) -> NeighborList:
    return index.query(q, k, exclude_index)


def query_brute(points, q, k: int, exclude_index: int | None = None) -> NeighborList:
    """Full scan plus sort by (squared distance, index); the reference for ``query``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.shape[0] < 1:
        raise PreconditionError("cannot search an empty point set")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != pts.shape[1]:
        raise PreconditionError(f"query dimension {q.shape[0]} != point dimension {pts.shape[1]}")
    sq = np.zeros(pts.shape[0])
    for j in range(pts.shape[1]):
        diff = pts[:, j] - q[j]
        sq += diff * diff
    ids = np.arange(pts.shape[0])
    if exclude_index is not None:
        keep = ids != exclude_index
        sq, ids = sq[keep], ids[keep]
    if not 1 <= k <= ids.shape[0]:
        raise PreconditionError(f"k={k} outside [1, {ids.shape[0]}]")
    order = np.lexsort((ids, sq))[:k]
    return NeighborList(ids[order], np.sqrt(sq[order]))


def set_threads(n: int | None) -> int:
    """Cap the numba worker pool; returns the number actually in use."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()
