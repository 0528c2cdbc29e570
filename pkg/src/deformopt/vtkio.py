"""Legacy ASCII VTK unstructured-grid export/import for meshes and fields.

Only the subset used here is supported: POINTS, CELLS of triangles,
CELL_DATA region tags and POINT_DATA scalars/vectors.  Floats are written
with 17 significant digits so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh, MeshError


def _fmt(x):
    return format(float(x), ".17g")


def write_vtk(path, mesh: Mesh, point_scalars=None, point_vectors=None,
              title="deformopt mesh"):
    """Write mesh plus optional named nodal data to a legacy VTK file.

    point_scalars / point_vectors are dicts name -> array.
    """
    n = mesh.num_vertices
    ne = mesh.num_triangles
    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    for p in mesh.vertices:
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} 0")
    lines.append(f"CELLS {ne} {4 * ne}")
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    lines.append(f"CELL_TYPES {ne}")
    lines.extend(["5"] * ne)
    lines.append(f"CELL_DATA {ne}")
    lines.append("SCALARS region int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(r)) for r in mesh.region)
    if point_scalars or point_vectors:
        lines.append(f"POINT_DATA {n}")
        for name, vals in (point_scalars or {}).items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in np.asarray(vals))
        for name, vals in (point_vectors or {}).items():
            lines.append(f"VECTORS {name} double")
            for v in np.asarray(vals):
                lines.append(f"{_fmt(v[0])} {_fmt(v[1])} 0")
    # Connectivity metadata VTK cannot express; appended as comments so a
    # written mesh reloads with boundary tags and interface ordering intact.
    lines.append(f"METADATA boundary_edges {mesh.boundary_edges.shape[0]}")
    for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        lines.append(f"{i} {j} {tag}")
    lines.append(f"METADATA interface_vertices {mesh.interface_vertices.size}")
    lines.append(" ".join(str(int(i)) for i in mesh.interface_vertices))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Read a file written by write_vtk; returns (mesh, scalars, vectors)."""
    with open(path) as fh:
        tokens_lines = fh.read().splitlines()
    idx = 0

    def line():
        nonlocal idx
        out = tokens_lines[idx]
        idx += 1
        return out

    header = line()
    if not header.startswith("# vtk"):
        raise MeshError("not a legacy VTK file")
    line()  # title
    if line().strip() != "ASCII":
        raise MeshError("only ASCII VTK is supported")
    if line().strip() != "DATASET UNSTRUCTURED_GRID":
        raise MeshError("only unstructured grids are supported")

    kw, n, _ = line().split()
    assert kw == "POINTS"
    n = int(n)
    pts = np.array([line().split() for _ in range(n)], dtype=float)[:, :2]

    kw, ne, _ = line().split()
    assert kw == "CELLS"
    ne = int(ne)
    tris = np.array([line().split()[1:] for _ in range(ne)], dtype=np.int64)
    line()  # CELL_TYPES
    for _ in range(ne):
        line()

    region = None
    scalars, vectors = {}, {}
    bedges = btags = ifv = None
    while idx < len(tokens_lines):
        raw = line().strip()
        if not raw:
            continue
        parts = raw.split()
        if parts[0] == "CELL_DATA":
            pass
        elif parts[0] == "SCALARS" and region is None and parts[1] == "region":
            line()  # LOOKUP_TABLE
            region = np.array([line() for _ in range(ne)], dtype=np.int64)
        elif parts[0] == "POINT_DATA":
            pass
        elif parts[0] == "SCALARS":
            line()
            scalars[parts[1]] = np.array([line() for _ in range(n)], dtype=float)
        elif parts[0] == "VECTORS":
            vectors[parts[1]] = np.array(
                [line().split() for _ in range(n)], dtype=float)[:, :2]
        elif parts[0] == "METADATA" and parts[1] == "boundary_edges":
            nb = int(parts[2])
            data = np.array([line().split() for _ in range(nb)], dtype=np.int64)
            bedges, btags = data[:, :2], data[:, 2]
        elif parts[0] == "METADATA" and parts[1] == "interface_vertices":
            ifv = np.array(line().split(), dtype=np.int64)
        else:
            raise MeshError(f"unsupported VTK section: {raw}")

    if region is None or bedges is None or ifv is None:
        raise MeshError("VTK file lacks region tags or connectivity metadata")
    mesh = Mesh(pts, tris, bedges, btags, region, ifv)
    return mesh, scalars, vectors
