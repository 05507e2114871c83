"""Conforming 2D triangle meshes with bisection refinement and Doerfler marking.

Cells are vertex-index triples with positive (counterclockwise) orientation.
Local edge e of a cell is the edge opposite local vertex e, i.e. it joins
local vertices (e+1)%3 and (e+2)%3.  Each cell carries a refinement-edge tag
(the newest-vertex bookkeeping); bisection always splits the refinement edge
and hands the children their ancestor edges as new refinement edges, which
keeps the number of similarity classes finite.
"""

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "MarkedSet",
    "unit_square_mesh",
    "dorfler_mark",
    "refine",
    "uniform_refine",
    "validate",
    "min_angle",
    "mesh_to_dict",
    "write_mesh_json",
    "write_vtk",
]

_CLOSURE_PASS_FACTOR = 64


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation.

    Attributes:
        vertices: (nv, 2) float64 coordinates.
        cells: (nc, 3) int32 vertex triples, CCW.
        facets: (nf, 2) int32 vertex pairs, each sorted, lexicographic order.
        facet_cells: (nf, 2) int32 incident cells, ascending; -1 for the
            missing neighbor of a boundary facet.
        boundary_facet_flags: (nf,) bool, True iff exactly one incident cell.
        cell_facets: (nc, 3) int32 global facet index of each local edge.
        refinement_edge: (nc,) int8 local edge split by the next bisection.
    """

    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray = field(repr=False)
    facet_cells: np.ndarray = field(repr=False)
    boundary_facet_flags: np.ndarray = field(repr=False)
    cell_facets: np.ndarray = field(repr=False)
    refinement_edge: np.ndarray = field(repr=False)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    @property
    def num_facets(self):
        return self.facets.shape[0]

    def cell_coordinates(self):
        """(nc, 3, 2) coordinates of cell vertices."""
        return self.vertices[self.cells]


@dataclass(frozen=True)
class MarkedSet:
    """Cells selected for refinement together with the theta that produced them."""

    cells: np.ndarray
    theta: float


def _freeze(mesh):
    for arr in (
        mesh.vertices,
        mesh.cells,
        mesh.facets,
        mesh.facet_cells,
        mesh.boundary_facet_flags,
        mesh.cell_facets,
        mesh.refinement_edge,
    ):
        arr.setflags(write=False)
    return mesh


def _build_mesh(vertices, cells, refinement_edge=None):
    """Assemble adjacency from raw vertices/cells and wrap in a Mesh."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    cells = np.ascontiguousarray(cells, dtype=np.int32)
    nc = cells.shape[0]
    nv = vertices.shape[0]

    # Edge (e) of cell joins vertices (e+1)%3, (e+2)%3.  Encode each edge as
    # vmin*nv + vmax so facets sort lexicographically with a single 1D sort.
    a = cells[:, [1, 2, 0]]
    b = cells[:, [2, 0, 1]]
    vmin = np.minimum(a, b).astype(np.int64)
    vmax = np.maximum(a, b).astype(np.int64)
    keys = (vmin * nv + vmax).ravel()
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    facets = np.stack([unique_keys // nv, unique_keys % nv], axis=1).astype(np.int32)
    cell_facets = inverse.reshape(nc, 3).astype(np.int32)

    counts = np.bincount(inverse, minlength=len(unique_keys))
    if counts.max(initial=0) > 2:
        raise ValueError("non-manifold mesh: facet shared by more than two cells")

    # Incident cells per facet, ascending cell index (stable sort over the
    # flattened (cell, local edge) enumeration).
    order = np.argsort(inverse, kind="stable")
    incident = (order // 3).astype(np.int32)
    facet_cells = np.full((len(unique_keys), 2), -1, dtype=np.int32)
    starts = np.zeros(len(unique_keys) + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    facet_cells[:, 0] = incident[starts[:-1]]
    two = counts == 2
    facet_cells[two, 1] = incident[starts[:-1][two] + 1]

    boundary = counts == 1

    if refinement_edge is None:
        refinement_edge = _longest_edge(vertices, cells)
    refinement_edge = np.ascontiguousarray(refinement_edge, dtype=np.int8)

    return _freeze(
        Mesh(
            vertices=vertices,
            cells=cells,
            facets=facets,
            facet_cells=facet_cells,
            boundary_facet_flags=boundary,
            cell_facets=cell_facets,
            refinement_edge=refinement_edge,
        )
    )


def _longest_edge(vertices, cells):
    """Local index of each cell's longest edge; ties go to the lowest index."""
    pts = vertices[cells]
    lengths = np.empty((cells.shape[0], 3))
    for e in range(3):
        d = pts[:, (e + 1) % 3] - pts[:, (e + 2) % 3]
        lengths[:, e] = np.hypot(d[:, 0], d[:, 1])
    return np.argmax(lengths, axis=1).astype(np.int8)


def signed_areas(vertices, cells):
    pts = vertices[cells]
    d1 = pts[:, 1] - pts[:, 0]
    d2 = pts[:, 2] - pts[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def unit_square_mesh(n, scale=1.0):
    """Structured triangulation of (0, scale)^2 with 2*n^2 cells.

    Each grid square is split by one diagonal, alternating with the parity
    of the square so the pattern has the full symmetry of the square for
    even n.  Grid lines sit at multiples of scale/n, so for even n the
    midlines x = scale/2 and y = scale/2 are unions of mesh facets.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    coords = np.linspace(0.0, scale, n + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    vertices = np.stack([xx.ravel(), yy.ravel()], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    cells = np.empty((2 * n * n, 3), dtype=np.int32)
    k = 0
    for j in range(n):
        for i in range(n):
            ll, lr = vid(i, j), vid(i + 1, j)
            ur, ul = vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                cells[k] = (ll, lr, ur)
                cells[k + 1] = (ll, ur, ul)
            else:
                cells[k] = (ll, lr, ul)
                cells[k + 1] = (lr, ur, ul)
            k += 2
    return _build_mesh(vertices, cells)


def dorfler_mark(indicators, theta):
    """Greedy bulk marking: smallest descending-sorted prefix carrying theta^2 of the squared total.

    Ties between equal indicators are broken toward the lower cell index.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    eta2 = np.asarray(indicators, dtype=np.float64) ** 2
    if eta2.ndim != 1:
        raise ValueError("indicators must be one-dimensional")
    order = np.argsort(-eta2, kind="stable")
    csum = np.cumsum(eta2[order])
    total = csum[-1] if len(csum) else 0.0
    if total == 0.0:
        return MarkedSet(cells=np.empty(0, dtype=np.int64), theta=theta)
    target = theta * theta * total
    k = int(np.searchsorted(csum, target, side="left"))
    k = min(k, len(csum) - 1)
    return MarkedSet(cells=np.sort(order[: k + 1]), theta=theta)


def refine(mesh, marked):
    """Bisect the marked cells and everything conformity closure drags along.

    Returns (new_mesh, parent) where parent[j] is the index of the cell of
    ``mesh`` that child j descends from; unrefined cells are carried over as
    their own single child.
    """
    marked_cells = marked.cells if isinstance(marked, MarkedSet) else np.asarray(marked, dtype=np.int64)
    nc = mesh.num_cells
    if len(marked_cells) and (marked_cells.min() < 0 or marked_cells.max() >= nc):
        raise ValueError("marked set contains indices outside the mesh")

    ref_facet = mesh.cell_facets[np.arange(nc), mesh.refinement_edge]
    marked_edge = np.zeros(mesh.num_facets, dtype=bool)
    marked_edge[ref_facet[marked_cells]] = True

    # Conformity closure: a cell with any marked edge must have its
    # refinement edge marked too; iterate to the fixed point.
    for _ in range(_CLOSURE_PASS_FACTOR * max(nc, 1)):
        has_marked = marked_edge[mesh.cell_facets].any(axis=1)
        need = has_marked & ~marked_edge[ref_facet]
        if not need.any():
            break
        marked_edge[ref_facet[need]] = True
    else:
        raise RuntimeError("conformity closure did not terminate; refinement-edge state is malformed")

    marked_ids = np.flatnonzero(marked_edge)
    midpoint_vertex = np.full(mesh.num_facets, -1, dtype=np.int64)
    midpoint_vertex[marked_ids] = mesh.num_vertices + np.arange(len(marked_ids))
    midpoints = 0.5 * (
        mesh.vertices[mesh.facets[marked_ids, 0]] + mesh.vertices[mesh.facets[marked_ids, 1]]
    )
    new_vertices = np.vstack([mesh.vertices, midpoints])

    new_cells = []
    new_ref_edges = []
    parent = []
    cells = mesh.cells
    cell_facets = mesh.cell_facets
    ref_edge = mesh.refinement_edge

    def emit(tri, edge, par):
        new_cells.append(tri)
        new_ref_edges.append(edge)
        parent.append(par)

    for c in range(nc):
        local_marked = marked_edge[cell_facets[c]]
        if not local_marked.any():
            emit(tuple(cells[c]), ref_edge[c], c)
            continue
        e = ref_edge[c]
        p0, p1, p2 = cells[c, e], cells[c, (e + 1) % 3], cells[c, (e + 2) % 3]
        m0 = midpoint_vertex[cell_facets[c, e]]
        # Children (m0, p0, p1) and (m0, p2, p0) are CCW and store their
        # refinement edge (an original cell edge) as local edge 0.
        for child, parent_edge in (((m0, p0, p1), (e + 2) % 3), ((m0, p2, p0), (e + 1) % 3)):
            if marked_edge[cell_facets[c, parent_edge]]:
                m = midpoint_vertex[cell_facets[c, parent_edge]]
                q0, q1, q2 = child
                emit((m, q0, q1), 0, c)
                emit((m, q2, q0), 0, c)
            else:
                emit(child, 0, c)

    new_mesh = _build_mesh(
        new_vertices,
        np.array(new_cells, dtype=np.int32),
        refinement_edge=np.array(new_ref_edges, dtype=np.int8),
    )
    return new_mesh, np.array(parent, dtype=np.int64)


def uniform_refine(mesh):
    """Two all-cell bisection sweeps; every cell diameter is halved."""
    out = mesh
    for _ in range(2):
        out, _ = refine(out, np.arange(out.num_cells))
    return out


def validate(mesh):
    """Check conformity, orientation and boundary closure; raise ValueError on violation."""
    if np.any(signed_areas(mesh.vertices, mesh.cells) <= 0.0):
        raise ValueError("mesh contains a cell with nonpositive signed area")
    counts = np.where(mesh.facet_cells[:, 1] >= 0, 2, 1)
    if np.any((counts == 1) != mesh.boundary_facet_flags):
        raise ValueError("boundary flags disagree with facet incidence")
    # Conformity: every facet has one or two incident cells, and each cell's
    # local edges resolve to facets made of exactly its own vertex pairs.
    a = mesh.cells[:, [1, 2, 0]]
    b = mesh.cells[:, [2, 0, 1]]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    ref = mesh.facets[mesh.cell_facets]
    if np.any(ref[:, :, 0] != lo) or np.any(ref[:, :, 1] != hi):
        raise ValueError("cell-facet adjacency is inconsistent")
    if np.any(mesh.refinement_edge < 0) or np.any(mesh.refinement_edge > 2):
        raise ValueError("refinement-edge tags out of range")
    # Hanging vertices: a vertex lying strictly inside another cell's facet
    # would make that facet appear with > 2 incidences upstream; incidence
    # was already checked during construction, so nothing further here.
    return mesh


def min_angle(mesh):
    """Smallest interior angle over all cells, in radians."""
    pts = mesh.cell_coordinates()
    angles = np.empty((mesh.num_cells, 3))
    for i in range(3):
        u = pts[:, (i + 1) % 3] - pts[:, i]
        v = pts[:, (i + 2) % 3] - pts[:, i]
        dot = (u * v).sum(axis=1)
        cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
        angles[:, i] = np.arctan2(np.abs(cross), dot)
    return float(angles.min())


def mesh_to_dict(mesh):
    return {
        "vertices": mesh.vertices.tolist(),
        "cells": mesh.cells.tolist(),
    }


def write_mesh_json(mesh, path):
    with open(path, "w") as fh:
        json.dump(mesh_to_dict(mesh), fh)


def write_vtk(mesh, path, point_data=None, cell_data=None):
    """Legacy ASCII VTK unstructured grid (triangle cell type 5).

    ``point_data``/``cell_data`` map field names to 1D arrays.
    """
    nv, nc = mesh.num_vertices, mesh.num_cells
    lines = [
        "# vtk DataFile Version 3.0",
        "fracfem mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    for x, y in mesh.vertices:
        lines.append(f"{x!r} {y!r} 0.0")
    lines.append(f"CELLS {nc} {4 * nc}")
    for tri in mesh.cells:
        lines.append(f"3 {tri[0]} {tri[1]} {tri[2]}")
    lines.append(f"CELL_TYPES {nc}")
    lines.extend(["5"] * nc)
    if point_data:
        lines.append(f"POINT_DATA {nv}")
        for name, values in point_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{float(v)!r}" for v in values)
    if cell_data:
        lines.append(f"CELL_DATA {nc}")
        for name, values in cell_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{float(v)!r}" for v in values)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
