"""Conforming 2D triangulations: generation, refinement, bisection, patches.

Meshes are immutable after construction; every refinement operation returns
a new mesh.  Local edge ``k`` of a triangle is the edge opposite local
vertex ``k``, i.e. it connects local vertices ``(k+1) % 3`` and
``(k+2) % 3``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mesh",
    "Patch",
    "generate_uniform_square",
    "generate_lshape",
    "regular_refine",
    "bisect",
    "build_patch",
    "transform",
    "write_mesh",
    "read_mesh",
    "validate_mesh",
]


class Mesh:
    """Conforming triangulation of a polygonal domain.

    Parameters
    ----------
    vertices : (nv, 2) float array
        Vertex coordinates.
    triangles : (nt, 3) int array
        Vertex indices per triangle, counterclockwise.
    refinement_edge : (nt,) int array, optional
        Local index of the bisection edge of each triangle.  Defaults to
        the longest edge (first one on ties), the standard initialization
        for newest-vertex bisection.
    generation : (nt,) int array, optional
        Refinement level of each triangle, 0 for an initial mesh.
    parent : Mesh, optional
        Mesh this one was refined from.
    new_vertex_pairs : (k, 2) int array, optional
        For each vertex appended by the refinement (indices
        ``parent.num_vertices`` onward, in order), the parent edge whose
        midpoint it is.  Enables exact transfer of piecewise-linear data.
    """

    def __init__(self, vertices, triangles, refinement_edge=None,
                 generation=None, parent=None, new_vertex_pairs=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must be an (nv, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be an (nt, 3) array")
        nv = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= nv):
            raise ValueError("triangle vertex index out of range")

        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            bad = int(np.argmin(areas))
            raise ValueError(
                f"triangle {bad} has non-positive area {areas[bad]:g}; "
                "triangles must be counterclockwise")

        self._build_edges()

        if refinement_edge is None:
            refinement_edge = self._longest_edge_labels()
        self.refinement_edge = np.ascontiguousarray(refinement_edge,
                                                    dtype=np.int64)
        if generation is None:
            generation = np.zeros(len(self.triangles), dtype=np.int64)
        self.generation = np.ascontiguousarray(generation, dtype=np.int64)

        self.parent = parent
        self.new_vertex_pairs = new_vertex_pairs
        self._vertex_to_triangles = None

    # -- derived structure ---------------------------------------------------

    def _build_edges(self):
        tri = self.triangles
        # local edge k is opposite local vertex k
        raw = np.concatenate([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]])
        edges, inverse, counts = np.unique(np.sort(raw, axis=1), axis=0,
                                           return_inverse=True,
                                           return_counts=True)
        if counts.size and counts.max() > 2:
            raise ValueError("non-conforming mesh: edge shared by >2 triangles")
        self.edges = edges                      # (ne, 2), sorted pairs
        self.triangle_edges = inverse.reshape(3, -1).T.copy()  # (nt, 3)
        self.edge_is_boundary = counts == 1
        self.boundary_vertex = np.zeros(len(self.vertices), dtype=bool)
        self.boundary_vertex[edges[self.edge_is_boundary].ravel()] = True

    def _longest_edge_labels(self):
        p = self.vertices[self.triangles]       # (nt, 3, 2)
        d = p[:, [2, 0, 1], :] - p[:, [1, 2, 0], :]   # edge k vector
        lengths = np.einsum("tkd,tkd->tk", d, d)
        return np.argmax(lengths, axis=1)

    # -- queries ---------------------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def boundary_edges(self):
        """Boundary edges as an (nb, 2) array of sorted vertex pairs."""
        return self.edges[self.edge_is_boundary]

    def boundary_edge_set(self):
        """Boundary edges as a set of sorted vertex-index tuples."""
        return {(int(a), int(b)) for a, b in self.boundary_edges}

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def h_max(self):
        """Mesh size: the maximum edge length."""
        return float(self.edge_lengths().max())

    def vertex_to_triangles(self):
        """List of triangle-index arrays incident to each vertex (cached)."""
        if self._vertex_to_triangles is None:
            flat = self.triangles.ravel()
            order = np.argsort(flat, kind="stable")
            tri_ids = order // 3
            starts = np.searchsorted(flat[order],
                                     np.arange(self.num_vertices + 1))
            self._vertex_to_triangles = [
                tri_ids[starts[v]:starts[v + 1]]
                for v in range(self.num_vertices)
            ]
        return self._vertex_to_triangles

    def prolong_from_parent(self, parent_values):
        """Transfer per-vertex data from the parent mesh to this one.

        Old vertices keep their values; appended vertices are edge
        midpoints and get the average of the parent edge endpoints, which
        is exact for piecewise-linear functions on the parent mesh.
        """
        if self.parent is None or self.new_vertex_pairs is None:
            raise ValueError("mesh has no recorded parent refinement")
        parent_values = np.asarray(parent_values, dtype=float)
        if len(parent_values) != self.parent.num_vertices:
            raise ValueError("value array does not match parent vertex count")
        mids = 0.5 * (parent_values[self.new_vertex_pairs[:, 0]]
                      + parent_values[self.new_vertex_pairs[:, 1]])
        return np.concatenate([parent_values, mids])


@dataclass(frozen=True)
class Patch:
    """Sampling patch around a vertex for quadratic least-squares fitting."""
    center: int
    sample_vertices: np.ndarray
    elements: np.ndarray


def generate_uniform_square(n):
    """Right-triangulated n-by-n grid of the unit square.

    All diagonals run in the same (southwest to northeast) direction;
    the mesh has (n+1)^2 vertices and 2 n^2 triangles.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    idx = np.arange((n + 1) * (n + 1)).reshape(n + 1, n + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])
    return Mesh(vertices, triangles)


def generate_lshape(n):
    """Uniform triangulation of the L-shaped domain.

    The domain is (-1,1)^2 with the quadrant [0,1) x (-1,0] removed; the
    reentrant corner at the origin is always a mesh vertex.  ``n`` cells
    per unit length, i.e. mesh cells of size 1/n.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    m = 2 * n                                   # cells across (-1, 1)
    side = np.linspace(-1.0, 1.0, m + 1)
    xx, yy = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])
    idx = np.arange((m + 1) * (m + 1)).reshape(m + 1, m + 1)

    centers = (np.arange(m) + 0.5) / n - 1.0
    cx, cy = np.meshgrid(centers, centers, indexing="xy")
    jj, ii = np.nonzero(~((cx > 0.0) & (cy < 0.0)))   # kept cells, row-major

    v00 = idx[jj, ii]
    v10 = idx[jj, ii + 1]
    v01 = idx[jj + 1, ii]
    v11 = idx[jj + 1, ii + 1]
    triangles = np.empty((2 * len(jj), 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])

    used = np.zeros(len(vertices), dtype=bool)
    used[triangles.ravel()] = True
    renumber = -np.ones(len(vertices), dtype=np.int64)
    renumber[used] = np.arange(used.sum())
    return Mesh(vertices[used], renumber[triangles])


def regular_refine(mesh):
    """Split every triangle into four similar children via edge midpoints."""
    nv = mesh.num_vertices
    midpoints = 0.5 * (mesh.vertices[mesh.edges[:, 0]]
                       + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.concatenate([mesh.vertices, midpoints])

    tri = mesh.triangles
    m = nv + mesh.triangle_edges                # (nt, 3): midpoint of edge k
    nt = mesh.num_triangles
    children = np.empty((4 * nt, 3), dtype=np.int64)
    children[0::4] = np.column_stack([tri[:, 0], m[:, 2], m[:, 1]])
    children[1::4] = np.column_stack([tri[:, 1], m[:, 0], m[:, 2]])
    children[2::4] = np.column_stack([tri[:, 2], m[:, 1], m[:, 0]])
    children[3::4] = m
    generation = np.repeat(mesh.generation + 1, 4)
    return Mesh(vertices, children, generation=generation,
                parent=mesh, new_vertex_pairs=mesh.edges.copy())


def bisect(mesh, marked):
    """Newest-vertex bisection of the marked triangles plus completion.

    Every marked triangle is split at least once; further triangles are
    bisected as needed so the result is conforming.  An empty marking
    returns the mesh unchanged.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size == 0:
        return mesh
    nt = mesh.num_triangles
    if marked.min() < 0 or marked.max() >= nt:
        raise ValueError("marked triangle index out of range")

    tri = mesh.triangles
    tri_edges = mesh.triangle_edges
    rows = np.arange(nt)
    k = mesh.refinement_edge
    k1 = (k + 1) % 3
    k2 = (k + 2) % 3
    e_ref = tri_edges[rows, k]

    cut = np.zeros(len(mesh.edges), dtype=bool)
    cut[e_ref[marked]] = True
    # closure: a triangle with any cut edge must cut its own refinement edge
    while True:
        need = cut[tri_edges].any(axis=1) & ~cut[e_ref]
        if not need.any():
            break
        cut[e_ref[need]] = True

    cut_ids = np.flatnonzero(cut)
    nv = mesh.num_vertices
    mid_of_edge = np.full(len(mesh.edges), -1, dtype=np.int64)
    mid_of_edge[cut_ids] = nv + np.arange(len(cut_ids))
    new_pairs = mesh.edges[cut_ids]
    vertices = np.concatenate([
        mesh.vertices,
        0.5 * (mesh.vertices[new_pairs[:, 0]] + mesh.vertices[new_pairs[:, 1]]),
    ])

    # per-triangle corners: peak p opposite the refinement edge (a, b)
    p, a, b = tri[rows, k], tri[rows, k1], tri[rows, k2]
    e_pa = tri_edges[rows, k2]                  # edge (p, a), opposite b
    e_bp = tri_edges[rows, k1]                  # edge (b, p), opposite a
    split = cut[e_ref]
    m = mid_of_edge[e_ref]
    m_pa = mid_of_edge[e_pa]
    m_bp = mid_of_edge[e_bp]
    gen = mesh.generation

    # First-level children of a split triangle (p,a,b) with midpoint m:
    #   left  = (p, a, m), refinement edge (p, a)  -> local 2
    #   right = (p, m, b), refinement edge (b, p)  -> local 1
    # A child whose inherited parent edge is also cut is split once more.
    chunks_tri, chunks_lab, chunks_gen = [], [], []

    def emit(sel, cols, label, extra_gen):
        if not sel.any():
            return
        chunks_tri.append(np.column_stack(cols)[sel[:, None].repeat(1, 1)]
                          if False else np.column_stack([c[sel] for c in cols]))
        chunks_lab.append(np.full(int(sel.sum()), label, dtype=np.int64))
        chunks_gen.append(gen[sel] + extra_gen)

    keep = ~split
    if keep.any():
        chunks_tri.append(tri[keep])
        chunks_lab.append(k[keep])
        chunks_gen.append(gen[keep])

    left_whole = split & ~cut[e_pa]
    left_split = split & cut[e_pa]
    right_whole = split & ~cut[e_bp]
    right_split = split & cut[e_bp]

    emit(left_whole, (p, a, m), 2, 1)
    emit(left_split, (m, p, m_pa), 2, 2)
    emit(left_split, (m, m_pa, a), 1, 2)
    emit(right_whole, (p, m, b), 1, 1)
    emit(right_split, (m, b, m_bp), 2, 2)
    emit(right_split, (m, m_bp, p), 1, 2)

    return Mesh(vertices, np.concatenate(chunks_tri),
                refinement_edge=np.concatenate(chunks_lab),
                generation=np.concatenate(chunks_gen),
                parent=mesh, new_vertex_pairs=new_pairs)


def patch_design_matrix(points, center):
    """Scaled quadratic Vandermonde matrix for a patch fit.

    Coordinates are shifted to the patch center and divided by the patch
    radius so the six columns [1, x, y, x^2, xy, y^2] are well scaled.
    Returns the matrix and the scaling length.
    """
    rel = points - center
    d = np.sqrt((rel * rel).sum(axis=1).max())
    if d <= 0.0:
        raise ValueError("degenerate patch: all sample points coincide")
    rel = rel / d
    x, y = rel[:, 0], rel[:, 1]
    cols = np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])
    return cols, d


MIN_PATCH_VERTICES = 6
PATCH_RANK_TOL = 1e-8


def patch_is_admissible(mesh, center, sample_vertices):
    """True when the sample supports a unique quadratic fit."""
    if len(sample_vertices) < MIN_PATCH_VERTICES:
        return False
    a, _ = patch_design_matrix(mesh.vertices[sample_vertices],
                               mesh.vertices[center])
    return np.linalg.svd(a, compute_uv=False)[-1] >= PATCH_RANK_TOL


def build_patch(mesh, z):
    """Grow a sampling patch around vertex ``z`` ring by ring.

    Growth stops at the first ring where the patch has at least six
    sample vertices and the quadratic fitting matrix has full column
    rank; both are required for polynomial-preserving recovery.
    """
    if not 0 <= z < mesh.num_vertices:
        raise ValueError("vertex index out of range")
    v2t = mesh.vertex_to_triangles()
    elems = set(v2t[z].tolist())
    verts = set(mesh.triangles[list(elems)].ravel().tolist())
    while True:
        sample = np.array(sorted(verts), dtype=np.int64)
        if patch_is_admissible(mesh, z, sample):
            return Patch(center=z, sample_vertices=sample,
                         elements=np.array(sorted(elems), dtype=np.int64))
        grown = set(elems)
        for v in verts:
            grown.update(v2t[v].tolist())
        if grown == elems:
            raise ValueError(
                f"mesh cannot supply an admissible patch around vertex {z}; "
                "too few vertices for quadratic recovery")
        elems = grown
        verts = set(mesh.triangles[list(elems)].ravel().tolist())


def transform(mesh, scale=1.0, shift=(0.0, 0.0)):
    """Uniformly scaled and shifted copy of a mesh (no lineage)."""
    if scale <= 0.0:
        raise ValueError("scale must be positive")
    return Mesh(mesh.vertices * scale + np.asarray(shift, dtype=float),
                mesh.triangles,
                refinement_edge=mesh.refinement_edge,
                generation=mesh.generation)


def validate_mesh(mesh):
    """Audit conformity invariants; raises AssertionError on violation."""
    assert np.all(mesh.signed_areas() > 0.0), "non-positive triangle area"
    tri = mesh.triangles
    raw = np.sort(np.concatenate([tri[:, [1, 2]], tri[:, [2, 0]],
                                  tri[:, [0, 1]]]), axis=1)
    _, counts = np.unique(raw, axis=0, return_counts=True)
    assert counts.max() <= 2, "edge shared by more than two triangles"
    onb = np.zeros(mesh.num_vertices, dtype=bool)
    onb[mesh.boundary_edges.ravel()] = True
    assert np.array_equal(onb, mesh.boundary_vertex), \
        "boundary_vertex inconsistent with boundary edges"
    assert tri.min() >= 0 and tri.max() < mesh.num_vertices


def write_mesh(mesh, node_path, ele_path):
    """Write the two-file plain-text mesh format (0-based indices)."""
    with open(node_path, "w", newline="\n") as f:
        f.write(f"{mesh.num_vertices}\n")
        for i, (x, y) in enumerate(mesh.vertices):
            flag = int(mesh.boundary_vertex[i])
            f.write(f"{i} {x!r} {y!r} {flag}\n")
    with open(ele_path, "w", newline="\n") as f:
        f.write(f"{mesh.num_triangles}\n")
        for i, (a, b, c) in enumerate(mesh.triangles):
            f.write(f"{i} {a} {b} {c}\n")


def read_mesh(node_path, ele_path):
    """Read the two-file plain-text mesh format written by write_mesh."""
    with open(node_path) as f:
        tokens = f.read().split()
    nv = int(tokens[0])
    rows = np.array(tokens[1:1 + 4 * nv], dtype=float).reshape(nv, 4)
    if not np.array_equal(rows[:, 0], np.arange(nv)):
        raise ValueError("node file indices must be 0..nv-1 in order")
    vertices = rows[:, 1:3]
    flags = rows[:, 3] != 0

    with open(ele_path) as f:
        tokens = f.read().split()
    nt = int(tokens[0])
    rows = np.array(tokens[1:1 + 4 * nt], dtype=np.int64).reshape(nt, 4)
    if not np.array_equal(rows[:, 0], np.arange(nt)):
        raise ValueError("element file indices must be 0..nt-1 in order")

    mesh = Mesh(vertices, rows[:, 1:4])
    if not np.array_equal(mesh.boundary_vertex, flags):
        raise ValueError("node boundary flags disagree with mesh topology")
    return mesh
