"""Minimal PLY reader/writer.

Covers what the pipeline needs: binary little-endian or ascii files
with a vertex element (positions plus optional uchar RGB or float
intensity) and an optional face element with triangle indices. The
writer emits binary little-endian; a file written here reads back
bit-exactly.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

_PROP_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


class IoFailure(OSError):
    """File did not parse as the expected PLY structure."""


def write_mesh(path, vertices: np.ndarray, faces: np.ndarray,
               properties: Optional[np.ndarray] = None,
               prop_kind: str = "none") -> None:
    """Write a triangle mesh as binary little-endian PLY.

    prop_kind "rgb" stores properties scaled to uchar red/green/blue;
    "intensity" stores one float channel; "none" writes bare positions.
    """
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    f = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    if prop_kind == "rgb":
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
        rgb = np.clip(np.asarray(properties)[:, :3] * 255.0 + 0.5,
                      0, 255).astype("<u1")
    elif prop_kind == "intensity":
        header += ["property float intensity"]
        inten = np.asarray(properties)[:, :1].astype("<f4")
    elif prop_kind != "none":
        raise ValueError(f"unknown prop_kind {prop_kind!r}")
    header += [f"element face {len(f)}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if prop_kind == "rgb":
            rec = np.zeros(len(v), dtype=[("xyz", "<f4", 3), ("rgb", "<u1", 3)])
            rec["xyz"] = v
            rec["rgb"] = rgb
        elif prop_kind == "intensity":
            rec = np.zeros(len(v), dtype=[("xyz", "<f4", 3), ("i", "<f4", 1)])
            rec["xyz"] = v
            rec["i"] = inten
        else:
            rec = np.zeros(len(v), dtype=[("xyz", "<f4", 3)])
            rec["xyz"] = v
        fh.write(rec.tobytes())
        frec = np.zeros(len(f), dtype=[("n", "<u1"), ("idx", "<i4", 3)])
        frec["n"] = 3
        frec["idx"] = f
        fh.write(frec.tobytes())


def write_points(path, points: np.ndarray,
                 properties: Optional[np.ndarray] = None,
                 prop_kind: str = "none") -> None:
    """Write a point cloud (vertex element only)."""
    write_mesh(path, points, np.zeros((0, 3), dtype=np.int32),
               properties, prop_kind)


def read_ply(path):
    """Parse a PLY file.

    Returns a dict with "vertices" (V, 3) float32, "faces" (T, 3) int32
    (empty if absent), and "properties" (V, P) float64 holding RGB
    scaled to [0, 1] or intensity when present (None otherwise).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise IoFailure(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = "binary_little_endian"
    elements = []          # (name, count, [(prop_name, type, is_list, count_type)])
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], tok[3], True, tok[2]))
            else:
                elements[-1][2].append((tok[2], tok[1], False, None))
    if fmt == "binary_big_endian":
        raise IoFailure(f"{path}: big-endian PLY not supported")

    out = {"vertices": np.zeros((0, 3), dtype=np.float32),
           "faces": np.zeros((0, 3), dtype=np.int32),
           "properties": None}
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            if any(p[2] for p in props):        # list property (faces)
                faces = []
                for _ in range(count):
                    n = int(rows[pos]); pos += 1
                    idx = [int(rows[pos + i]) for i in range(n)]
                    pos += n
                    for i in range(1, n - 1):
                        faces.append((idx[0], idx[i], idx[i + 1]))
                if name == "face":
                    out["faces"] = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
            else:
                vals = np.asarray(rows[pos:pos + count * len(props)],
                                  dtype=np.float64).reshape(count, len(props))
                pos += count * len(props)
                if name == "vertex":
                    _extract_vertex(out, vals, [p[0] for p in props])
        return out

    offset = 0
    for name, count, props in elements:
        if any(p[2] for p in props):
            faces = []
            count_t = _PROP_TYPES[props[0][3]][0]
            item_t, item_s = _PROP_TYPES[props[0][1]]
            csize = _PROP_TYPES[props[0][3]][1]
            for _ in range(count):
                n = int(np.frombuffer(body, dtype=count_t, count=1,
                                      offset=offset)[0])
                offset += csize
                idx = np.frombuffer(body, dtype=item_t, count=n, offset=offset)
                offset += n * item_s
                for i in range(1, n - 1):
                    faces.append((idx[0], idx[i], idx[i + 1]))
            if name == "face":
                out["faces"] = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
        else:
            dt = np.dtype([(p[0], _PROP_TYPES[p[1]][0]) for p in props])
            rec = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += dt.itemsize * count
            if name == "vertex":
                vals = np.stack([rec[p[0]].astype(np.float64) for p in props],
                                axis=1)
                _extract_vertex(out, vals, [p[0] for p in props], rec)
    return out


def _extract_vertex(out, vals, names, rec=None):
    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    if rec is not None:
        out["vertices"] = np.stack([rec["x"], rec["y"], rec["z"]],
                                   axis=1).astype(np.float32)
    else:
        out["vertices"] = vals[:, [ix, iy, iz]].astype(np.float32)
    if all(c in names for c in ("red", "green", "blue")):
        cols = [names.index(c) for c in ("red", "green", "blue")]
        out["properties"] = vals[:, cols] / 255.0
    elif "intensity" in names:
        out["properties"] = vals[:, [names.index("intensity")]]
