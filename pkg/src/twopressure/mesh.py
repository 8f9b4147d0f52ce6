"""Conforming simplicial meshes in 1D and 2D with red-green refinement.

A mesh is immutable after construction: refinement returns a new mesh.
Boundary facets carry markers (Dirichlet / Robin / Neumann); in 1D the
facets are the vertices themselves and boundary integrals reduce to
point evaluation (counting measure).

Red refinement splits a triangle into four similar children via the
edge midpoints (child diameter is exactly half the parent's); cells
that end up with exactly one hanging midpoint are closed with a green
bisection.  Green halves are rolled back to their parent before that
parent is refined again, so repeated refinement cannot degrade shape
regularity.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _kernels


class Mark(IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    ROBIN = 2
    NEUMANN = 3


_MARK_NAMES = {
    Mark.DIRICHLET: "dirichlet",
    Mark.ROBIN: "robin",
    Mark.NEUMANN: "neumann",
}
_MARK_FROM_NAME = {v: k for k, v in _MARK_NAMES.items()}


class MeshError(ValueError):
    """Invalid mesh topology, geometry, or marker data."""


@dataclass(frozen=True)
class GreenPair:
    """Bookkeeping for one half of a green-bisected triangle."""

    partner: int
    parent: tuple
    split_edge: tuple
    midpoint: int


def _cell_edges(cell):
    if len(cell) == 2:
        return [(cell[0],), (cell[1],)]
    a, b, c = cell
    return [tuple(sorted((a, b))), tuple(sorted((b, c))), tuple(sorted((a, c)))]


class SimplexMesh:
    """Triangle (2D) or interval (1D) mesh over numpy arrays.

    Parameters
    ----------
    vertices : (nv, dim) float array
    cells : (nc, dim+1) int array, positively oriented
    boundary : dict mapping sorted boundary facet vertex tuples to Mark
    """

    def __init__(self, vertices, cells, boundary, green=None,
                 parent_cells=None, vertex_parents=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (1, 2):
            raise MeshError("vertices must be (nv, 1) or (nv, 2)")
        self.dim = self.vertices.shape[1]
        if self.cells.ndim != 2 or self.cells.shape[1] != self.dim + 1:
            raise MeshError("cells must be (nc, dim+1)")
        self.boundary = {tuple(k): Mark(v) for k, v in boundary.items()}
        self.green = dict(green) if green else {}
        nc = len(self.cells)
        nv = len(self.vertices)
        self.parent_cells = (np.arange(nc) if parent_cells is None
                             else np.asarray(parent_cells, dtype=np.int64))
        self.vertex_parents = (np.column_stack([np.arange(nv)] * 2).astype(np.int64)
                               if vertex_parents is None
                               else np.asarray(vertex_parents, dtype=np.int64))
        self._build_geometry()
        self._build_facets()
        self._validate()

    # -- construction ------------------------------------------------------

    def _build_geometry(self):
        if self.dim == 2:
            meas, grads = _kernels.tri_geometry(self.vertices, self.cells)
            p = self.vertices[self.cells]
            e = np.stack([p[:, 0] - p[:, 1], p[:, 1] - p[:, 2], p[:, 2] - p[:, 0]])
            self.cell_diameters = np.sqrt((e ** 2).sum(axis=2)).max(axis=0)
        else:
            meas, grads = _kernels.seg_geometry(self.vertices, self.cells)
            self.cell_diameters = meas.copy()
        self.cell_measures = meas
        self.shape_gradients = grads

    def _build_facets(self):
        nc = len(self.cells)
        if self.dim == 2:
            raw = np.sort(
                self.cells[:, [[0, 1], [1, 2], [0, 2]]].reshape(-1, 2), axis=1
            )
        else:
            raw = self.cells.reshape(-1, 1)
        self.facets, inv = np.unique(raw, axis=0, return_inverse=True)
        self.cell_facets = inv.reshape(nc, -1)
        nf = len(self.facets)
        fc = np.full((nf, 2), -1, dtype=np.int64)
        for c in range(nc):
            for f in self.cell_facets[c]:
                if fc[f, 0] == -1:
                    fc[f, 0] = c
                elif fc[f, 1] == -1:
                    fc[f, 1] = c
                else:
                    raise MeshError(f"facet {tuple(self.facets[f])} bounds >2 cells")
        self.facet_cells = fc
        if self.dim == 2:
            dv = self.vertices[self.facets[:, 1]] - self.vertices[self.facets[:, 0]]
            self.facet_measures = np.sqrt((dv ** 2).sum(axis=1))
        else:
            self.facet_measures = np.ones(nf)
        marks = np.zeros(nf, dtype=np.int64)
        key_to_idx = {tuple(f): i for i, f in enumerate(self.facets)}
        for key, mark in self.boundary.items():
            i = key_to_idx.get(key)
            if i is None:
                raise MeshError(f"marked facet {key} not in mesh")
            marks[i] = int(mark)
        self.facet_marks = marks

    def _validate(self):
        if np.any(self.cell_measures <= 0):
            bad = int(np.argmin(self.cell_measures))
            raise MeshError(f"cell {bad} has non-positive measure")
        used = np.zeros(len(self.vertices), dtype=bool)
        used[self.cells.ravel()] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.argmin(used))} not used by any cell")
        on_boundary = self.facet_cells[:, 1] == -1
        unmarked = on_boundary & (self.facet_marks == Mark.INTERIOR)
        if unmarked.any():
            f = tuple(self.facets[int(np.argmax(unmarked))])
            raise MeshError(f"boundary facet {f} has no marker")
        mismarked = ~on_boundary & (self.facet_marks != Mark.INTERIOR)
        if mismarked.any():
            f = tuple(self.facets[int(np.argmax(mismarked))])
            raise MeshError(f"interior facet {f} carries a boundary marker")

    # -- queries -----------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def total_measure(self):
        return float(self.cell_measures.sum())

    def boundary_facets(self, mark=None):
        """Indices of boundary facets, optionally restricted to one marker."""
        on_b = self.facet_cells[:, 1] == -1
        if mark is None:
            return np.nonzero(on_b)[0]
        return np.nonzero(on_b & (self.facet_marks == int(mark)))[0]

    def cell_centroids(self):
        return self.vertices[self.cells].mean(axis=1)

    def facet_normals(self):
        """Unit facet normals.

        Interior facets point from the lower-id to the higher-id incident
        cell; boundary facets point out of the domain.
        """
        if not hasattr(self, "_normals"):
            cents = self.cell_centroids()
            if self.dim == 2:
                dv = self.vertices[self.facets[:, 1]] - self.vertices[self.facets[:, 0]]
                n = np.column_stack([dv[:, 1], -dv[:, 0]])
                n /= np.linalg.norm(n, axis=1)[:, None]
            else:
                n = np.ones((len(self.facets), 1))
            mid = self.vertices[self.facets].mean(axis=1)
            lo = self.facet_cells[:, 0]
            hi = np.where(self.facet_cells[:, 1] == -1,
                          self.facet_cells[:, 0], self.facet_cells[:, 1])
            # reference direction: into the higher cell, or out of the domain
            ref = np.where((self.facet_cells[:, 1] == -1)[:, None],
                           mid - cents[lo], cents[hi] - cents[lo])
            flip = (n * ref).sum(axis=1) < 0
            n[flip] *= -1.0
            self._normals = n
        return self._normals

    def locate(self, points, tol=None):
        """Containing cell and barycentric coordinates for each point.

        Returns (cell_ids, bary); cell_ids is -1 for points outside.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if tol is None:
            tol = 1e-12 * (1.0 + float(self.cell_diameters.max()))
        return _kernels.locate(self.vertices, self.cells, pts, tol)

    # -- refinement --------------------------------------------------------

    def refine(self, marked):
        """Red-green refinement of the marked cells; returns a new mesh."""
        marked = np.unique(np.asarray(marked, dtype=np.int64))
        if marked.size and (marked.min() < 0 or marked.max() >= self.n_cells):
            raise MeshError("marked cell id out of range")
        if marked.size == 0:
            return self
        if self.dim == 1:
            return self._refine_1d(marked)
        return self._refine_2d(marked)

    def _refine_1d(self, marked):
        nv = self.n_vertices
        verts = [self.vertices]
        vparents = [np.column_stack([np.arange(nv)] * 2)]
        children = []
        child_parents = []
        next_vid = nv
        marked_set = set(int(m) for m in marked)
        for c in range(self.n_cells):
            a, b = self.cells[c]
            if c in marked_set:
                verts.append(0.5 * (self.vertices[a] + self.vertices[b])[None, :])
                vparents.append(np.array([[min(a, b), max(a, b)]]))
                m = next_vid
                next_vid += 1
                children += [(a, m), (m, b)]
                child_parents += [c, c]
            else:
                children.append((int(a), int(b)))
                child_parents.append(c)
        return SimplexMesh(
            np.vstack(verts), np.array(children), dict(self.boundary),
            parent_cells=np.array(child_parents), vertex_parents=np.vstack(vparents),
        )

    def _refine_2d(self, marked):
        cells = [tuple(int(v) for v in c) for c in self.cells]
        nc = len(cells)
        red = set()
        dissolved = set()
        red_parents = {}  # parent vertex tuple -> {split_edge: midpoint vid}
        anchor_of = {}  # min(half ids) -> parent vertex tuple

        def dissolve(cid):
            if cid in dissolved:
                return
            rec = self.green[cid]
            dissolved.add(cid)
            dissolved.add(rec.partner)
            red_parents[rec.parent] = {rec.split_edge: rec.midpoint}
            anchor_of[min(cid, rec.partner)] = rec.parent

        for c in marked:
            c = int(c)
            if c in self.green:
                dissolve(c)
            else:
                red.add(c)

        # closure: propagate hanging midpoints until stable
        while True:
            split = set()
            for c in red:
                split.update(_cell_edges(cells[c]))
            for parent in red_parents:
                split.update(_cell_edges(parent))
            changed = False
            for c in range(nc):
                if c in red or c in dissolved:
                    continue
                k = sum(1 for e in _cell_edges(cells[c]) if e in split)
                if c in self.green:
                    if k >= 1:
                        dissolve(c)
                        changed = True
                elif k >= 2:
                    red.add(c)
                    changed = True
            if changed:
                continue
            break

        split = set()
        for c in red:
            split.update(_cell_edges(cells[c]))
        for parent in red_parents:
            split.update(_cell_edges(parent))

        green_new = {}  # cell id -> split edge
        for c in range(nc):
            if c in red or c in dissolved:
                continue
            hit = [e for e in _cell_edges(cells[c]) if e in split]
            if len(hit) == 1:
                green_new[c] = hit[0]
            elif len(hit) > 1:
                raise MeshError("refinement closure failed")  # pragma: no cover

        # midpoint vertices: reuse green midpoints, create the rest in
        # lexicographic edge order for determinism
        mid_of = {}
        for mids in red_parents.values():
            mid_of.update(mids)
        needed = sorted(e for e in split if e not in mid_of)
        nv = self.n_vertices
        new_coords = []
        new_vparents = []
        for e in needed:
            mid_of[e] = nv + len(new_coords)
            new_coords.append(0.5 * (self.vertices[e[0]] + self.vertices[e[1]]))
            new_vparents.append(e)
        vertices = (np.vstack([self.vertices] + [np.array(new_coords)])
                    if new_coords else self.vertices.copy())
        vertex_parents = np.vstack(
            [np.column_stack([np.arange(nv)] * 2)]
            + ([np.array(new_vparents)] if new_vparents else [])
        )

        def red_children(tri):
            v0, v1, v2 = tri
            m01 = mid_of[tuple(sorted((v0, v1)))]
            m12 = mid_of[tuple(sorted((v1, v2)))]
            m02 = mid_of[tuple(sorted((v0, v2)))]
            return [(v0, m01, m02), (v1, m12, m01), (v2, m02, m12), (m01, m12, m02)]

        def bisect(tri, edge, mid):
            # children oriented like the parent; apex first
            pairs = [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
            for e0, e1 in pairs:
                if tuple(sorted((e0, e1))) == edge:
                    apex = [v for v in tri if v not in edge][0]
                    return [(apex, e0, mid), (apex, mid, e1)]
            raise MeshError("bisection edge not in cell")  # pragma: no cover

        children = []
        child_parents = []
        pair_records = []  # (idx_a, idx_b, parent, edge, mid)
        copy_map = {}
        for c in range(nc):
            if c in dissolved:
                parent = anchor_of.get(c)
                if parent is not None:
                    children += red_children(parent)
                    child_parents += [c] * 4
                continue
            if c in red:
                children += red_children(cells[c])
                child_parents += [c] * 4
            elif c in green_new:
                e = green_new[c]
                base = len(children)
                children += bisect(cells[c], e, mid_of[e])
                child_parents += [c, c]
                pair_records.append((base, base + 1, cells[c], e, mid_of[e]))
            else:
                copy_map[c] = len(children)
                children.append(cells[c])
                child_parents.append(c)

        # boundary markers: split edges inherit the parent's marker
        boundary = {}
        for key, mark in self.boundary.items():
            m = mid_of.get(key)
            if m is None:
                boundary[key] = mark
            else:
                boundary[tuple(sorted((key[0], m)))] = mark
                boundary[tuple(sorted((m, key[1])))] = mark

        # conformity sweep: bisect any cell whose full edge faces a pair of
        # half edges (can occur next to a rolled-back green pair)
        for _ in range(16):
            census = {}
            for ci, tri in enumerate(children):
                for e in _cell_edges(tri):
                    census.setdefault(e, []).append(ci)
            fixes = {}
            for e, cs in census.items():
                if len(cs) != 1 or e in boundary:
                    continue
                m = mid_of.get(e)
                if m is None:
                    continue
                lo = tuple(sorted((e[0], m)))
                hi = tuple(sorted((m, e[1])))
                if lo in census and hi in census:
                    ci = cs[0]
                    if ci in fixes:
                        raise MeshError("cell needs two closure bisections")
                    fixes[ci] = (e, m)
            if not fixes:
                break
            remap = {}
            out_cells, out_parents, out_pairs = [], [], []
            for ci, tri in enumerate(children):
                if ci in fixes:
                    e, m = fixes[ci]
                    base = len(out_cells)
                    out_cells += bisect(tri, e, m)
                    out_parents += [child_parents[ci]] * 2
                    out_pairs.append((base, base + 1, tri, e, m))
                else:
                    remap[ci] = len(out_cells)
                    out_cells.append(tri)
                    out_parents.append(child_parents[ci])
            pair_records = [
                (remap[a], remap[b], p, e, m) for a, b, p, e, m in pair_records
            ] + out_pairs
            copy_map = {c: remap[i] for c, i in copy_map.items()}
            children, child_parents = out_cells, out_parents
        else:  # pragma: no cover
            raise MeshError("conformity sweep did not terminate")

        green = {}
        for a, b, parent, edge, mid in pair_records:
            green[a] = GreenPair(b, tuple(parent), edge, mid)
            green[b] = GreenPair(a, tuple(parent), edge, mid)
        for c, rec in self.green.items():
            if c in copy_map:
                green[copy_map[c]] = GreenPair(
                    copy_map[rec.partner], rec.parent, rec.split_edge, rec.midpoint
                )

        return SimplexMesh(
            vertices, np.array(children), boundary, green=green,
            parent_cells=np.array(child_parents), vertex_parents=vertex_parents,
        )

    # -- serialization -----------------------------------------------------

    def dump(self):
        """Line-oriented text form: header, vertices, cells, boundary facets."""
        lines = []
        bkeys = sorted(self.boundary)
        lines.append(f"{self.dim} {self.n_vertices} {self.n_cells} {len(bkeys)}")
        for v in self.vertices:
            lines.append(" ".join("%.17g" % x for x in v))
        for c in self.cells:
            lines.append(" ".join(str(int(v)) for v in c))
        for key in bkeys:
            v0 = key[0]
            v1 = key[1] if len(key) == 2 else key[0]
            lines.append(f"{v0} {v1} {_MARK_NAMES[self.boundary[key]]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        dim, nv, nc, nb = (int(t) for t in rows[0])
        verts = np.array([[float(x) for x in r] for r in rows[1:1 + nv]])
        cells = np.array([[int(x) for x in r] for r in rows[1 + nv:1 + nv + nc]])
        boundary = {}
        for r in rows[1 + nv + nc:1 + nv + nc + nb]:
            v0, v1 = int(r[0]), int(r[1])
            key = (v0,) if dim == 1 else tuple(sorted((v0, v1)))
            boundary[key] = _MARK_FROM_NAME[r[2]]
        return cls(verts, cells, boundary)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read())


def refine(mesh, marked):
    """Functional alias for :meth:`SimplexMesh.refine`."""
    return mesh.refine(marked)


def build_uniform(bounds, n, marker="dirichlet"):
    """Uniform mesh over an axis-aligned box.

    Parameters
    ----------
    bounds : sequence of (lo, hi) pairs, one per axis (length 1 or 2)
    n : subdivisions per axis
    marker : "dirichlet" for an all-Dirichlet boundary, or a callable
        mapping a facet midpoint coordinate array to a Mark
    """
    bounds = [tuple(map(float, b)) for b in bounds]
    if n < 1:
        raise MeshError("n must be >= 1")
    for lo, hi in bounds:
        if not hi > lo:
            raise MeshError("empty axis in domain bounds")
    dim = len(bounds)
    if dim == 1:
        (x0, x1), = bounds
        verts = np.linspace(x0, x1, n + 1)[:, None]
        cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        bfacets = [(0,), (n,)]
    elif dim == 2:
        (x0, x1), (y0, y1) = bounds
        xs = np.linspace(x0, x1, n + 1)
        ys = np.linspace(y0, y1, n + 1)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        verts = np.column_stack([X.ravel(), Y.ravel()])
        vid = lambda ix, iy: iy * (n + 1) + ix
        cells = []
        for iy in range(n):
            for ix in range(n):
                v00, v10 = vid(ix, iy), vid(ix + 1, iy)
                v01, v11 = vid(ix, iy + 1), vid(ix + 1, iy + 1)
                cells.append((v00, v10, v11))
                cells.append((v00, v11, v01))
        cells = np.array(cells)
        bfacets = []
        for i in range(n):
            bfacets.append(tuple(sorted((vid(i, 0), vid(i + 1, 0)))))
            bfacets.append(tuple(sorted((vid(i, n), vid(i + 1, n)))))
            bfacets.append(tuple(sorted((vid(0, i), vid(0, i + 1)))))
            bfacets.append(tuple(sorted((vid(n, i), vid(n, i + 1)))))
    else:
        raise MeshError("only 1D and 2D domains are supported")
    boundary = {}
    for key in bfacets:
        if marker == "dirichlet":
            boundary[key] = Mark.DIRICHLET
        else:
            mid = verts[list(key)].mean(axis=0)
            boundary[key] = Mark(marker(mid))
    return SimplexMesh(verts, np.asarray(cells), boundary)


# -- patches ----------------------------------------------------------------


@dataclass
class PatchIndex:
    """Adjacency patches used by interpolation and estimation.

    cell_edge_nbrs[B]   cells sharing an edge with B, including B
    cell_vertex_nbrs[B] cells sharing a vertex with B, including B
    facet_patch[E]      cells incident to facet E
    vertex_patch[x]     cells incident to vertex x
    vertex_patch_measure[x]  total measure of vertex_patch[x]
    """

    cell_edge_nbrs: list
    cell_vertex_nbrs: list
    facet_patch: list
    vertex_patch: list
    vertex_patch_measure: np.ndarray


def patch_index(mesh):
    nv, nc = mesh.n_vertices, mesh.n_cells
    vertex_patch = [[] for _ in range(nv)]
    for c in range(nc):
        for v in mesh.cells[c]:
            vertex_patch[v].append(c)
    vertex_patch = [np.array(p, dtype=np.int64) for p in vertex_patch]
    vpm = np.array([mesh.cell_measures[p].sum() for p in vertex_patch])
    facet_patch = [
        fc[fc >= 0].copy() for fc in mesh.facet_cells
    ]
    cell_edge_nbrs = []
    cell_vertex_nbrs = []
    for c in range(nc):
        nbrs = {c}
        for f in mesh.cell_facets[c]:
            nbrs.update(int(x) for x in mesh.facet_cells[f] if x >= 0)
        cell_edge_nbrs.append(np.array(sorted(nbrs), dtype=np.int64))
        nbrs = {c}
        for v in mesh.cells[c]:
            nbrs.update(int(x) for x in vertex_patch[v])
        cell_vertex_nbrs.append(np.array(sorted(nbrs), dtype=np.int64))
    return PatchIndex(cell_edge_nbrs, cell_vertex_nbrs, facet_patch,
                      vertex_patch, vpm)
