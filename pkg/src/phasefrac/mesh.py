"""Quadtree meshes of axis-aligned squares with one hanging node per edge.

Cells are addressed by integer triples ``(level, i, j)``: cell ``(l, i, j)``
covers ``[i, i+1] x [j, j+1]`` scaled by ``base_h / 2**l``.  Level 0 is the
uniform start grid.  Vertices live on an integer lattice of resolution
``base_h / 2**KMAX`` so that coincidence tests are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import math

import numpy as np
import scipy.sparse as sp

KMAX = 20
_S = np.int64(1 << 28)

# corner offsets (di, dj) in the local order LL, LR, UR, UL
CORNERS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=np.int64)

# edge directions: (di, dj, outward normal); index 0 right, 1 top, 2 left, 3 bottom
_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))
# local corners spanning each edge, ordered along the edge
_EDGE_CORNERS = ((1, 2), (3, 2), (0, 3), (0, 1))

DOMAINS = ("unit-square", "l-shape")


class MeshError(ValueError):
    pass


def _key(level, i, j):
    return (np.asarray(level, dtype=np.int64) * _S + i) * _S + j


@dataclass
class Patch:
    """Geometric data of the node patch around a master vertex."""

    node: int
    cells: np.ndarray
    interior_sides: np.ndarray
    boundary_sides: np.ndarray
    # (cell, local corner) pairs; the sub-patch is the union of the squares
    # of edge h_cell/8 at these corners
    subpatch: list = field(default_factory=list)
    diameter: float = 0.0


class QuadMesh:
    """Leaf cells of a 2:1 balanced quadtree over a base grid.

    Parameters
    ----------
    domain : str
        Domain identifier, one of ``DOMAINS``.
    base_h : float
        Edge length of the level-0 cells.
    base_mask : ndarray of bool, shape (nby, nbx)
        Which base cells belong to the domain.
    leaves : ndarray of int, shape (n, 3)
        Leaf cells as ``(level, i, j)``.
    """

    def __init__(self, domain, base_h, base_mask, leaves):
        self.domain = domain
        self.base_h = float(base_h)
        self.base_mask = np.asarray(base_mask, dtype=bool)
        self.nby, self.nbx = self.base_mask.shape
        leaves = np.asarray(leaves, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((leaves[:, 2], leaves[:, 1], leaves[:, 0]))
        self.leaves = leaves[order]
        self._keys = _key(self.leaves[:, 0], self.leaves[:, 1], self.leaves[:, 2])
        self._build()

    # ------------------------------------------------------------------
    # lookup helpers
    # ------------------------------------------------------------------
    def _find(self, keys):
        """Index of each key among the leaves, -1 if absent."""
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        return np.where(hit, pos, -1)

    def _inside(self, level, i, j):
        bi = i >> level
        bj = j >> level
        ok = (i >= 0) & (j >= 0) & (bi < self.nbx) & (bj < self.nby)
        out = np.zeros(np.shape(i), dtype=bool)
        out[ok] = self.base_mask[bj[ok], bi[ok]]
        return out

    def _leaf_at_or_above(self, level, i, j):
        """Leaf that contains cell ``(level, i, j)`` (itself or an ancestor).

        Returns -1 where no such leaf exists (outside the domain or the
        region is refined beyond ``level``).
        """
        level = np.asarray(level, dtype=np.int64)
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        res = np.full(i.shape, -1, dtype=np.int64)
        for up in range(int(level.max(initial=0)) + 1):
            todo = (res < 0) & (level >= up)
            if not todo.any():
                break
            k = _key(level[todo] - up, i[todo] >> up, j[todo] >> up)
            res[todo] = self._find(k)
        return res

    # ------------------------------------------------------------------
    # topology
    # ------------------------------------------------------------------
    def _build(self):
        lv, ci, cj = self.leaves.T
        n = len(lv)
        shift = (KMAX - lv)[:, None]
        # lattice coordinates of the 4 corners
        lx = (ci[:, None] + CORNERS[None, :, 0]) << shift
        ly = (cj[:, None] + CORNERS[None, :, 1]) << shift
        vk = lx * (_S * 64) + ly
        uniq, inv = np.unique(vk.ravel(), return_inverse=True)
        self.cell_vertices = inv.reshape(n, 4)
        self.vertex_lattice = np.stack([uniq // (_S * 64), uniq % (_S * 64)], axis=1)
        unit = self.base_h / float(1 << KMAX)
        self.vertices = self.vertex_lattice.astype(float) * unit
        self.cell_h = self.base_h / (2.0 ** lv)
        self.cell_origin = np.stack([ci * self.cell_h, cj * self.cell_h], axis=1)
        self.cell_level = lv.copy()

        nv = len(uniq)
        hanging_masters = -np.ones((nv, 2), dtype=np.int64)
        side_a, side_b, side_dir, side_v = [], [], [], []
        for d, (di, dj) in enumerate(_DIRS):
            ni, nj = ci + di, cj + dj
            same = self._find(_key(lv, ni, nj))
            parent = np.full(n, -1, dtype=np.int64)
            mask = (same < 0) & (lv > 0)
            parent[mask] = self._find(_key(lv[mask] - 1, ni[mask] >> 1, nj[mask] >> 1))
            inside = self._inside(lv, ni, nj)
            finer = (same < 0) & (parent < 0) & inside
            boundary = ~inside
            c0, c1 = _EDGE_CORNERS[d]
            ev = self.cell_vertices[:, [c0, c1]]
            # equal neighbours: record once (right and top)
            if d in (0, 1):
                m = same >= 0
                side_a.append(np.nonzero(m)[0])
                side_b.append(same[m])
                side_dir.append(np.full(m.sum(), d))
                side_v.append(ev[m])
            m = parent >= 0
            side_a.append(np.nonzero(m)[0])
            side_b.append(parent[m])
            side_dir.append(np.full(m.sum(), d))
            side_v.append(ev[m])
            m = boundary
            side_a.append(np.nonzero(m)[0])
            side_b.append(np.full(m.sum(), -1))
            side_dir.append(np.full(m.sum(), d))
            side_v.append(ev[m])
            # hanging vertex at the midpoint of this edge when the neighbour is finer
            if finer.any():
                idx = np.nonzero(finer)[0]
                mid = (self.vertex_lattice[ev[idx, 0]] + self.vertex_lattice[ev[idx, 1]]) // 2
                hv = self._vertex_index(mid)
                if np.any(hv < 0):
                    raise MeshError("2:1 balance violated: missing hanging vertex")
                hanging_masters[hv] = ev[idx]
        self.side_cells = np.stack([np.concatenate(side_a), np.concatenate(side_b)], axis=1)
        self.side_dir = np.concatenate(side_dir).astype(np.int64)
        self.side_vertices = np.concatenate(side_v).reshape(-1, 2)
        normals = np.array(_DIRS, dtype=float)
        self.side_normal = normals[self.side_dir]
        self.side_length = self.cell_h[self.side_cells[:, 0]]
        p0 = self.vertices[self.side_vertices[:, 0]]
        p1 = self.vertices[self.side_vertices[:, 1]]
        self.side_midpoint = 0.5 * (p0 + p1)
        self.hanging_masters = hanging_masters
        self.hanging = hanging_masters[:, 0] >= 0
        self.boundary_vertex = np.zeros(nv, dtype=bool)
        bs = self.side_cells[:, 1] < 0
        self.boundary_vertex[self.side_vertices[bs].ravel()] = True

    def _vertex_index(self, lattice):
        keys = lattice[:, 0] * (_S * 64) + lattice[:, 1]
        all_keys = self.vertex_lattice[:, 0] * (_S * 64) + self.vertex_lattice[:, 1]
        pos = np.searchsorted(all_keys, keys)
        pos = np.minimum(pos, len(all_keys) - 1)
        return np.where(all_keys[pos] == keys, pos, -1)

    # ------------------------------------------------------------------
    # basic properties
    # ------------------------------------------------------------------
    @property
    def n_cells(self):
        return len(self.leaves)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_sides(self):
        return len(self.side_cells)

    @property
    def cell_diameter(self):
        return self.cell_h * math.sqrt(2.0)

    @property
    def cell_area(self):
        return self.cell_h ** 2

    @property
    def cell_center(self):
        return self.cell_origin + 0.5 * self.cell_h[:, None]

    @property
    def interior_sides(self):
        return np.nonzero(self.side_cells[:, 1] >= 0)[0]

    @property
    def boundary_sides(self):
        return np.nonzero(self.side_cells[:, 1] < 0)[0]

    @cached_property
    def master_vertices(self):
        return np.nonzero(~self.hanging)[0]

    @cached_property
    def prolongation(self):
        """Sparse map from master-vertex values to all vertex values.

        Hanging vertices take the mean of their edge's two endpoints;
        chains of hanging vertices are resolved transitively.
        """
        nv = self.n_vertices
        rows = np.arange(nv)
        h = self.hanging
        r = np.concatenate([rows[~h], rows[h], rows[h]])
        c = np.concatenate([rows[~h], self.hanging_masters[h, 0], self.hanging_masters[h, 1]])
        v = np.concatenate([np.ones((~h).sum()), np.full(h.sum(), 0.5), np.full(h.sum(), 0.5)])
        P = sp.csr_matrix((v, (r, c)), shape=(nv, nv))
        for _ in range(KMAX + 1):
            if not P[:, np.nonzero(h)[0]].nnz:
                break
            P = (P @ P).tocsr()
        else:  # pragma: no cover
            raise MeshError("unresolvable hanging-vertex chain")
        P = P[:, self.master_vertices].tocsr()
        P.eliminate_zeros()
        return P

    @cached_property
    def cell_support(self):
        """Boolean sparse (cells x masters): master basis function active on cell."""
        n = self.n_cells
        rows = np.repeat(np.arange(n), 4)
        C = sp.csr_matrix((np.ones(4 * n), (rows, self.cell_vertices.ravel())),
                          shape=(n, self.n_vertices))
        S = (C @ self.prolongation).tocsr()
        S.data[:] = 1.0
        return S

    # ------------------------------------------------------------------
    # point location
    # ------------------------------------------------------------------
    def locate(self, points):
        """Leaf cell containing each point and its reference coordinates.

        Points on cell boundaries are assigned to any adjacent leaf.
        Raises ``MeshError`` for points outside the domain.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cells = np.full(len(pts), -1, dtype=np.int64)
        levels = np.unique(self.cell_level)
        tiny = 1e-9 * self.cell_h.min()
        for dx, dy in ((tiny, tiny), (-tiny, tiny), (tiny, -tiny), (-tiny, -tiny)):
            todo = cells < 0
            if not todo.any():
                break
            q = pts[todo] + np.array([dx, dy])
            found = np.full(len(q), -1, dtype=np.int64)
            for lev in levels:
                hl = self.base_h / 2.0 ** lev
                i = np.floor(q[:, 0] / hl).astype(np.int64)
                j = np.floor(q[:, 1] / hl).astype(np.int64)
                k = _key(np.full(len(q), lev), i, j)
                f = self._find(k)
                found = np.where(found < 0, f, found)
            cells[todo] = found
        if np.any(cells < 0):
            raise MeshError("point outside the mesh domain")
        ref = (pts - self.cell_origin[cells]) / self.cell_h[cells, None]
        return cells, np.clip(ref, 0.0, 1.0)

    def is_refinement_of(self, coarse):
        """True when every leaf of ``self`` lies inside a leaf of ``coarse``."""
        if (coarse.domain, coarse.nbx, coarse.nby) != (self.domain, self.nbx, self.nby):
            return False
        if not np.isclose(coarse.base_h, self.base_h):
            return False
        lv, i, j = self.leaves.T
        return bool(np.all(coarse._leaf_at_or_above(lv, i, j) >= 0))

    def parent_cells(self, coarse):
        """Index of the ``coarse`` leaf containing each leaf of ``self``."""
        lv, i, j = self.leaves.T
        res = coarse._leaf_at_or_above(lv, i, j)
        if np.any(res < 0):
            raise MeshError("meshes are not nested")
        return res

    # ------------------------------------------------------------------
    # refinement
    # ------------------------------------------------------------------
    def refine(self, marked):
        """Split the marked leaves and close the mesh under 2:1 balance.

        Parameters
        ----------
        marked : iterable of int
            Indices of leaf cells to split.

        Returns
        -------
        QuadMesh
        """
        leaves = {tuple(c) for c in self.leaves.tolist()}

        def inside(l, i, j):
            bi, bj = i >> l, j >> l
            return 0 <= i and 0 <= j and bi < self.nbx and bj < self.nby and self.base_mask[bj, bi]

        def leaf_above(l, i, j):
            for up in range(l + 1):
                c = (l - up, i >> up, j >> up)
                if c in leaves:
                    return c
            return None

        def split(c):
            stack = [c]
            while stack:
                cur = stack[-1]
                if cur not in leaves:
                    stack.pop()
                    continue
                l, i, j = cur
                blocked = False
                for di, dj in _DIRS:
                    ni, nj = i + di, j + dj
                    if not inside(l, ni, nj):
                        continue
                    nb = leaf_above(l, ni, nj)
                    if nb is not None and nb[0] < l:
                        stack.append(nb)
                        blocked = True
                if blocked:
                    continue
                stack.pop()
                leaves.remove(cur)
                for di, dj in CORNERS.tolist():
                    leaves.add((l + 1, 2 * i + di, 2 * j + dj))

        for idx in np.unique(np.asarray(list(marked), dtype=np.int64)):
            c = tuple(self.leaves[idx].tolist())
            if c[0] + 1 > KMAX:
                raise MeshError("maximum refinement depth reached")
            split(c)
        return QuadMesh(self.domain, self.base_h, self.base_mask, np.array(sorted(leaves)))

    def refine_uniform(self, times=1):
        m = self
        for _ in range(times):
            m = m.refine(np.arange(m.n_cells))
        return m

    # ------------------------------------------------------------------
    # patches
    # ------------------------------------------------------------------
    @cached_property
    def _master_index(self):
        idx = -np.ones(self.n_vertices, dtype=np.int64)
        idx[self.master_vertices] = np.arange(len(self.master_vertices))
        return idx

    def patch_of(self, p):
        """Patch data of the master vertex ``p`` (a vertex index)."""
        if p < 0 or p >= self.n_vertices:
            raise MeshError(f"vertex {p} out of range")
        if self.hanging[p]:
            raise MeshError(f"vertex {p} is hanging; patches exist for master vertices only")
        col = self._master_index[p]
        S = self.cell_support.tocsc()
        cells = np.sort(S.indices[S.indptr[col]:S.indptr[col + 1]])
        inpatch = np.zeros(self.n_cells, dtype=bool)
        inpatch[cells] = True
        a, b = self.side_cells.T
        interior = np.nonzero((b >= 0) & inpatch[a] & inpatch[np.maximum(b, 0)])[0]
        bnd = np.nonzero((b < 0) & inpatch[a])[0]
        sub = []
        for c in cells:
            hits = np.nonzero(self.cell_vertices[c] == p)[0]
            for k in hits:
                sub.append((int(c), int(k)))
        lo = self.cell_origin[cells].min(axis=0)
        hi = (self.cell_origin[cells] + self.cell_h[cells, None]).max(axis=0)
        return Patch(int(p), cells, interior, bnd, sub, float(np.hypot(*(hi - lo))))

    @cached_property
    def patch_tables(self):
        """Sparse incidence of cells and sides with the master patches.

        Returns ``(cells, interior, boundary, diameter)``: boolean CSR
        matrices (cells x masters), (sides x masters) for sides strictly
        inside each patch, (sides x masters) for boundary sides of patch
        cells, and the bounding-box diameter of each patch.
        """
        S = self.cell_support
        a, b = self.side_cells.T
        inner = b >= 0
        Sa = S[a]
        Sb = S[np.maximum(b, 0)]
        I = Sa.multiply(Sb).tocsr()
        I = sp.diags(inner.astype(float)) @ I
        B = sp.diags((~inner).astype(float)) @ Sa
        I.eliminate_zeros()
        B = B.tocsr()
        B.eliminate_zeros()
        St = S.tocsc()
        lo = self.cell_origin
        hi = self.cell_origin + self.cell_h[:, None]
        rows = St.indices
        starts = St.indptr[:-1]
        diam = np.hypot(
            np.maximum.reduceat(hi[rows, 0], starts) - np.minimum.reduceat(lo[rows, 0], starts),
            np.maximum.reduceat(hi[rows, 1], starts) - np.minimum.reduceat(lo[rows, 1], starts),
        )
        return S, I.tocsr(), B, diam

    # ------------------------------------------------------------------
    # checks
    # ------------------------------------------------------------------
    def check_balance(self):
        """True when adjacent leaves differ by at most one level."""
        a, b = self.side_cells.T
        m = b >= 0
        return bool(np.all(np.abs(self.cell_level[a[m]] - self.cell_level[b[m]]) <= 1))

    def domain_area(self):
        return float(self.base_mask.sum()) * self.base_h ** 2


def build_initial_mesh(domain, target_h):
    """Uniform square mesh whose cell diameter is close to ``target_h``.

    The number of cells per direction is ``round(L * sqrt(2) / target_h)``,
    rounded to an even number on the L-shape so that the re-entrant corner
    is a mesh vertex.  ``L`` is 1 mm for the unit square and 500 mm for the
    L-shape.
    """
    if target_h <= 0:
        raise MeshError("target_h must be positive")
    if domain == "unit-square":
        length = 1.0
        n = max(1, int(round(length * math.sqrt(2.0) / target_h)))
        mask = np.ones((n, n), dtype=bool)
    elif domain == "l-shape":
        length = 500.0
        n = max(2, int(round(length * math.sqrt(2.0) / target_h)))
        n += n % 2
        mask = np.ones((n, n), dtype=bool)
        mask[: n // 2, n // 2:] = False  # lower-right quadrant removed
    else:
        raise MeshError(f"unknown domain {domain!r}")
    jj, ii = np.nonzero(mask)
    leaves = np.stack([np.zeros_like(ii), ii, jj], axis=1)
    return QuadMesh(domain, length / n, mask, leaves)
