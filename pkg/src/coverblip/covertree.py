"""Cover tree metric index with (1+eps)-approximate nearest neighbour search.

The tree is a levelled structure over a point set.  Nodes at scale ``i``
form a covering net of radius ``sigma * 2**-i``; children of a scale-``i``
node lie within that radius and nodes sharing a scale are separated by
more than it.  Each node additionally stores the maximum distance to any
of its descendants, which tightens branch-and-bound pruning during
queries.

Points may be real or complex vectors; the metric is the Euclidean norm
of the difference (complex vectors are treated as twice as many reals).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AnnsResult",
    "CoverTree",
    "aspect_ratio",
    "build",
]

_REL_TOL = 1e-9
_MAGIC = b"CBTREE01"


@dataclass
class AnnsResult:
    """Outcome of a single (1+eps)-ANNS query."""

    index: int
    distance: float
    cost: int


class CoverTree:
    """Explicit cover tree over a fixed-dimension point set.

    One node is stored per point; self-parent chains are implicit.  The
    tree is built by repeated insertion (see :func:`build`) and supports
    online :meth:`insert`, exact and approximate :meth:`ann_search`, and
    structural self-checks via :meth:`verify_invariants`.
    """

    def __init__(self, points: np.ndarray):
        points = np.atleast_2d(np.asarray(points))
        if points.size == 0:
            raise ValueError("empty dataset")
        self._points = np.array(points, copy=True)
        self.point_dim = points.shape[1]
        self.root = 0
        self.i_max = 0
        self.distance_count = 0
        # per-node storage, index == point id
        self._scale = [0]
        self._parent = [-1]
        self._maxdist = [0.0]
        # children grouped by the scale they were attached at
        self._children: list[dict[int, list[int]]] = [{}]
        if len(self._points) > 1:
            diff = self._points[1:] - self._points[0]
            self.sigma = float(np.sqrt((np.abs(diff) ** 2).sum(axis=1)).max())
            self.distance_count += len(self._points) - 1
        else:
            self.sigma = 0.0
        for i in range(1, len(self._points)):
            self._insert_existing(i)

    # ------------------------------------------------------------------
    # construction

    @property
    def n_points(self) -> int:
        return len(self._points)

    def _dist_batch(self, ids, q) -> np.ndarray:
        """Distances from query ``q`` to the points with the given ids."""
        diff = self._points[ids] - q
        self.distance_count += len(ids)
        if np.iscomplexobj(diff):
            return np.sqrt(np.einsum("ij,ij->i", diff.real, diff.real)
                           + np.einsum("ij,ij->i", diff.imag, diff.imag))
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def _dist_one(self, i: int, q) -> float:
        return float(self._dist_batch([i], q)[0])

    def _attach(self, pid: int, parent: int, scale: int) -> None:
        self._scale.append(scale)
        self._parent.append(parent)
        self._maxdist.append(0.0)
        self._children.append({})
        self._children[parent].setdefault(scale, []).append(pid)
        self.i_max = max(self.i_max, scale)
        # keep ancestor maxdist exact
        a = parent
        p = self._points[pid]
        while a != -1:
            d = self._dist_one(a, p)
            if d > self._maxdist[a]:
                self._maxdist[a] = d
            a = self._parent[a]

    def _attach_duplicate(self, pid: int, twin: int) -> None:
        scale = max(self.i_max, self._scale[twin] + 1)
        self._attach(pid, twin, scale)

    def _rescale_root(self, needed: float) -> None:
        """Grow sigma by powers of two so ``needed`` fits under the root."""
        if self.sigma == 0.0:
            self.sigma = needed
            return
        shift = 0
        while self.sigma < needed:
            self.sigma *= 2.0
            shift += 1
        for i in range(len(self._scale)):
            if i != self.root:
                self._scale[i] += shift
        for i, ch in enumerate(self._children):
            if ch:
                self._children[i] = {s + shift: kids for s, kids in ch.items()}
        self.i_max += shift

    def _insert_existing(self, pid: int) -> None:
        p = self._points[pid]
        d_root = self._dist_one(self.root, p)
        if d_root > self.sigma:
            # also covers 1-ulp excesses over a sigma computed in a
            # differently-rounded batch; rescaling is always safe
            self._rescale_root(d_root)
        if d_root == 0.0:
            self._attach_duplicate(pid, self.root)
            return
        # descend keeping candidates within the parent-scale radius; the
        # insertion point is the deepest scale whose candidate set still
        # contains an eligible parent
        cand_ids = [self.root]
        cand_d = [d_root]
        attach_scale = -1
        attach_parent = -1
        s = 0
        while True:
            r_s = self.sigma * 2.0 ** (-s)
            eligible = [(d, q) for q, d in zip(cand_ids, cand_d) if d <= r_s]
            if eligible:
                attach_scale = s + 1
                attach_parent = min(eligible)[1]
            s1 = s + 1
            new_ids: list[int] = []
            for q in cand_ids:
                kids = self._children[q].get(s1)
                if kids:
                    new_ids.extend(kids)
            if new_ids:
                nd = self._dist_batch(new_ids, p)
                z = int(np.argmin(nd))
                if nd[z] == 0.0:
                    self._attach_duplicate(pid, new_ids[z])
                    return
                all_ids = cand_ids + new_ids
                all_d = cand_d + list(nd)
            else:
                all_ids = cand_ids
                all_d = cand_d
            if min(all_d) > r_s:
                break
            cand_ids = []
            cand_d = []
            for q, d in zip(all_ids, all_d):
                if d <= r_s:
                    cand_ids.append(q)
                    cand_d.append(d)
            s = s1
        self._attach(pid, attach_parent, attach_scale)

    def insert(self, point) -> "CoverTree":
        """Insert one point, preserving the structural invariants.

        Sigma grows (by root rescaling) when the point falls outside the
        current coverage radius.  Returns the tree for chaining.
        """
        point = np.asarray(point)
        if point.shape != (self.point_dim,):
            raise ValueError(
                f"dimension mismatch: expected {self.point_dim}, got {point.shape}")
        if point.dtype.kind == "c" and not np.iscomplexobj(self._points):
            self._points = self._points.astype(complex)
        self._points = np.vstack([self._points, point[None, :]])
        self._insert_existing(len(self._points) - 1)
        return self

    # ------------------------------------------------------------------
    # search

    def ann_search(self, query, epsilon: float = 0.0,
                   warm_start: int | None = None) -> AnnsResult:
        """(1+epsilon)-approximate nearest neighbour of ``query``.

        With ``epsilon == 0`` the search is exact (the scale loop runs to
        the finest level).  A ``warm_start`` point id initialises the
        running best, so the returned distance never exceeds the distance
        to the warm start.  Ties are broken toward the lowest point id.
        """
        if epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        q = np.asarray(query)
        if q.shape != (self.point_dim,):
            raise ValueError(
                f"dimension mismatch: expected {self.point_dim}, got {q.shape}")
        cost0 = self.distance_count
        d_root = self._dist_one(self.root, q)
        best_id = self.root
        best_d = d_root
        if warm_start is not None and warm_start != self.root:
            dw = self._dist_one(warm_start, q)
            if dw < best_d or (dw == best_d and warm_start < best_id):
                best_id, best_d = warm_start, dw
        cand_ids = [self.root]
        cand_d = [d_root]
        maxdist = self._maxdist
        children = self._children
        sigma = self.sigma
        guard = np.inf if epsilon == 0.0 else (1.0 + 1.0 / epsilon)
        i = 0
        while i < self.i_max and cand_ids:
            if epsilon > 0.0 and sigma * 2.0 ** (-i + 1) * guard <= best_d:
                break
            i1 = i + 1
            new_ids: list[int] = []
            for cid in cand_ids:
                kids = children[cid].get(i1)
                if kids:
                    new_ids.extend(kids)
            if new_ids:
                # self-parent candidates keep their stored distances;
                # only the newly exposed children cost distance evaluations
                nd = self._dist_batch(new_ids, q)
                dmin = float(nd.min())
                if dmin < best_d:
                    best_d = dmin
                    best_id = min(n for n, dn in zip(new_ids, nd) if dn == dmin)
                elif dmin == best_d:
                    cand_min = min(n for n, dn in zip(new_ids, nd) if dn == dmin)
                    if cand_min < best_id:
                        best_id = cand_min
                cand_ids = cand_ids + new_ids
                cand_d = cand_d + list(nd)
            nxt_ids = []
            nxt_d = []
            for cid, d in zip(cand_ids, cand_d):
                if d <= best_d + maxdist[cid]:
                    nxt_ids.append(cid)
                    nxt_d.append(d)
            cand_ids, cand_d = nxt_ids, nxt_d
            i = i1
        return AnnsResult(index=best_id, distance=best_d,
                          cost=self.distance_count - cost0)

    # ------------------------------------------------------------------
    # diagnostics

    def verify_invariants(self, rel_tol: float = _REL_TOL) -> list[str]:
        """Check nesting/covering/separation and the maxdist bound.

        Returns a list of human-readable violation descriptions; an empty
        list means the structure is sound.  Nothing is raised.
        """
        from scipy.spatial.distance import pdist, squareform

        report: list[str] = []
        n = len(self._points)
        pts = self._points
        slack = 1.0 + rel_tol
        for i in range(n):
            par = self._parent[i]
            if i == self.root:
                if par != -1 or self._scale[i] != 0:
                    report.append(f"node {i}: malformed root record")
                continue
            if par < 0 or par >= n:
                report.append(f"node {i}: missing parent")
                continue
            if self._scale[i] <= self._scale[par]:
                report.append(
                    f"node {i}: scale {self._scale[i]} not below parent scale "
                    f"{self._scale[par]} (nesting)")
            d = float(np.linalg.norm(pts[i] - pts[par]))
            limit = self.sigma * 2.0 ** (-(self._scale[i] - 1))
            if d > limit * slack:
                report.append(
                    f"node {i}: covering violated, dist to parent {d:.6g} > "
                    f"{limit:.6g}")
        # coverage from root
        droot = np.linalg.norm(pts - pts[self.root], axis=1)
        if float(droot.max(initial=0.0)) > self.sigma * slack:
            report.append("sigma smaller than the maximal root distance")
        # separation, per scale over all nodes present at that scale
        embed = (np.concatenate([pts.real, pts.imag], axis=1)
                 if np.iscomplexobj(pts) else pts)
        scales = np.asarray(self._scale)
        if n > 1:
            dmat = squareform(pdist(embed))
            for i in range(self.i_max + 1):
                present = np.flatnonzero(scales <= i)
                if len(present) < 2:
                    continue
                sub = dmat[np.ix_(present, present)]
                sep = self.sigma * 2.0 ** (-i)
                iu = np.triu_indices(len(present), k=1)
                bad = (sub[iu] <= sep * (1.0 - rel_tol)) & (sub[iu] > 0.0)
                if bad.any():
                    a = int(np.flatnonzero(bad)[0])
                    report.append(
                        f"scale {i}: separation violated for a node pair at "
                        f"distance {sub[iu][a]:.6g} <= {sep:.6g}")
        # maxdist: stored value must match the true descendant maximum and
        # stay below sigma * 2^(-i+1)
        true_max = self._true_maxdist()
        for i in range(n):
            stored = self._maxdist[i]
            ref = true_max[i]
            if abs(stored - ref) > rel_tol * max(1.0, ref):
                report.append(
                    f"node {i}: stored maxdist {stored:.6g} != recomputed "
                    f"{ref:.6g}")
            bound = self.sigma * 2.0 ** (-self._scale[i] + 1)
            if ref > bound * slack and i != self.root:
                report.append(
                    f"node {i}: maxdist {ref:.6g} exceeds bound {bound:.6g}")
        return report

    def _true_maxdist(self) -> list[float]:
        n = len(self._points)
        out = [0.0] * n
        pts = self._points
        for i in range(n):
            if i == self.root:
                continue
            p = pts[i]
            a = self._parent[i]
            while a != -1:
                d = float(np.linalg.norm(p - pts[a]))
                if d > out[a]:
                    out[a] = d
                a = self._parent[a]
        return out

    # ------------------------------------------------------------------
    # serialization

    def save(self, path) -> None:
        """Write the node table to a versioned little-endian binary file."""
        n = len(self._points)
        is_complex = np.iscomplexobj(self._points)
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qqqdq", n, self.point_dim,
                                 self.i_max, self.sigma,
                                 1 if is_complex else 0))
            dtype = "<c16" if is_complex else "<f8"
            fh.write(np.ascontiguousarray(self._points, dtype=dtype).tobytes())
            fh.write(np.asarray(self._scale, dtype="<i8").tobytes())
            fh.write(np.asarray(self._parent, dtype="<i8").tobytes())
            fh.write(np.asarray(self._maxdist, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "CoverTree":
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise ValueError("not a cover tree file")
            header = fh.read(struct.calcsize("<qqqdq"))
            if len(header) != struct.calcsize("<qqqdq"):
                raise ValueError("truncated cover tree file")
            n, dim, i_max, sigma, is_complex = struct.unpack("<qqqdq", header)
            dtype = np.dtype("<c16" if is_complex else "<f8")
            need = n * dim * dtype.itemsize + 2 * n * 8 + n * 8
            blob = fh.read()
            if len(blob) < need:
                raise ValueError("truncated cover tree file")
            off = n * dim * dtype.itemsize
            points = np.frombuffer(blob[:off], dtype=dtype).reshape(n, dim)
            scale = np.frombuffer(blob[off:off + 8 * n], dtype="<i8")
            off += 8 * n
            parent = np.frombuffer(blob[off:off + 8 * n], dtype="<i8")
            off += 8 * n
            maxdist = np.frombuffer(blob[off:off + 8 * n], dtype="<f8")
        tree = cls.__new__(cls)
        tree._points = np.array(points)
        tree.point_dim = int(dim)
        tree.root = 0
        tree.sigma = float(sigma)
        tree.i_max = int(i_max)
        tree.distance_count = 0
        tree._scale = [int(s) for s in scale]
        tree._parent = [int(p) for p in parent]
        tree._maxdist = [float(m) for m in maxdist]
        tree._children = [dict() for _ in range(n)]
        for i in range(n):
            p = tree._parent[i]
            if p != -1:
                tree._children[p].setdefault(tree._scale[i], []).append(i)
        return tree


def build(points) -> CoverTree:
    """Build a cover tree by repeated insertion.

    The first point becomes the root and sigma is its maximal distance to
    the rest of the set, making builds deterministic in input order.
    """
    return CoverTree(points)


def aspect_ratio(points) -> float:
    """Max over min nonzero pairwise distance of a point set."""
    from scipy.spatial.distance import pdist

    points = np.atleast_2d(np.asarray(points))
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    embed = (np.concatenate([points.real, points.imag], axis=1)
             if np.iscomplexobj(points) else points)
    d = pdist(embed)
    nz = d[d > 0]
    if nz.size == 0:
        raise ValueError("degenerate aspect ratio")
    return float(d.max() / nz.min())
