"""Incremental marching cubes over the fused grid.

Cells connect the centers of eight adjacent voxels; a cell belongs to
the leaf containing its lexicographically smallest corner, so each
leaf meshes its own 8^3 block of cells and reads a one-voxel halo from
its neighbors. Cells with any never-observed corner are skipped, which
leaves open boundaries at the observation frontier instead of inventing
geometry. Vertices are keyed by their grid edge so meshes of adjacent
leaves share vertices exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .grid import LEAF_LOG2, LEAF_SIZE, SparseGrid
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

_EDGE_TABLE = np.asarray(EDGE_TABLE, dtype=np.int64)
# lower corner offset and axis of each of the 12 cell edges
_EDGE_LOWER = []
_EDGE_AXIS = []
for _a, _b in EDGE_CORNERS:
    oa = np.asarray(CORNER_OFFSETS[_a])
    ob = np.asarray(CORNER_OFFSETS[_b])
    _EDGE_LOWER.append(np.minimum(oa, ob))
    _EDGE_AXIS.append(int(np.flatnonzero(oa != ob)[0]))

AREA_EPS = 1e-18


@dataclass
class LeafMesh:
    """Triangles produced by one leaf's cells.

    verts maps a global edge key (ix, iy, iz, axis) to (position,
    property) so identical vertices emitted by neighboring leaves can
    be merged exactly.
    """

    origin: tuple[int, int, int]
    verts: dict = field(default_factory=dict)
    tris: list = field(default_factory=list)


@dataclass
class TriangleMesh:
    vertices: np.ndarray            # (V, 3) float64
    triangles: np.ndarray           # (T, 3) int64
    properties: np.ndarray          # (V, P) float64
    vertex_leaf: np.ndarray         # (V, 3) int64 owning leaf origin

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @staticmethod
    def empty(prop_channels: int = 0) -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            np.zeros((0, prop_channels)),
                            np.zeros((0, 3), dtype=np.int64))


def mesh_leaf(grid: SparseGrid, origin) -> LeafMesh:
    """Run marching cubes over the cells owned by one leaf."""
    origin = tuple(int(v) for v in origin)
    h = grid.voxel_size
    dist, obs, prop = grid.gather_block(origin, (LEAF_SIZE + 1,) * 3)
    out = LeafMesh(origin)
    if not obs.any():
        return out

    case = np.zeros((LEAF_SIZE,) * 3, dtype=np.int64)
    valid = np.ones((LEAF_SIZE,) * 3, dtype=bool)
    for ci, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        block = dist[ox:ox + LEAF_SIZE, oy:oy + LEAF_SIZE, oz:oz + LEAF_SIZE]
        case |= (block < 0).astype(np.int64) << ci
        valid &= obs[ox:ox + LEAF_SIZE, oy:oy + LEAF_SIZE, oz:oz + LEAF_SIZE]
    cells = np.argwhere(valid & (_EDGE_TABLE[case] != 0))
    if len(cells) == 0:
        return out

    org = np.asarray(origin, dtype=np.int64)
    nprop = prop.shape[-1]
    for cx, cy, cz in cells:
        mask = EDGE_TABLE[case[cx, cy, cz]]
        cell = (int(cx), int(cy), int(cz))
        keys = [None] * 12
        for e in range(12):
            if not (mask >> e) & 1:
                continue
            lo = _EDGE_LOWER[e]
            axis = _EDGE_AXIS[e]
            lx, ly, lz = cell[0] + lo[0], cell[1] + lo[1], cell[2] + lo[2]
            key = (int(org[0] + lx), int(org[1] + ly), int(org[2] + lz), axis)
            keys[e] = key
            if key in out.verts:
                continue
            hxyz = [lx, ly, lz]
            hxyz[axis] += 1
            d0 = dist[lx, ly, lz]
            d1 = dist[hxyz[0], hxyz[1], hxyz[2]]
            t = d0 / (d0 - d1)
            pos = (org + np.array([lx, ly, lz], dtype=np.float64) + 0.5) * h
            pos[axis] += t * h
            if nprop:
                p0 = prop[lx, ly, lz]
                p1 = prop[hxyz[0], hxyz[1], hxyz[2]]
                pv = p0 + t * (p1 - p0)
            else:
                pv = np.zeros(0)
            out.verts[key] = (pos, pv)
        row = TRI_TABLE[case[cx, cy, cz]]
        for i in range(0, 16, 3):
            if row[i] < 0:
                break
            k1, k2, k3 = keys[row[i]], keys[row[i + 1]], keys[row[i + 2]]
            if k1 == k2 or k2 == k3 or k1 == k3:
                continue
            out.tris.append((k1, k2, k3))
    return out


def combine(leaf_meshes: Iterable[LeafMesh], voxel_size: float,
            prop_channels: int = 0) -> TriangleMesh:
    """Merge per-leaf meshes into one indexed triangle mesh.

    Vertices shared across leaves collapse through their edge keys.
    Zero-area triangles are dropped. Caller controls leaf order;
    passing leaves sorted by origin gives a canonical mesh.
    """
    index: dict = {}
    positions = []
    props = []
    tris = []
    for lm in leaf_meshes:
        for key, (pos, pv) in lm.verts.items():
            if key not in index:
                index[key] = len(positions)
                positions.append(pos)
                props.append(pv)
        for k1, k2, k3 in lm.tris:
            tris.append((index[k1], index[k2], index[k3]))
    if not positions:
        return TriangleMesh.empty(prop_channels)
    v = np.asarray(positions)
    t = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if len(t):
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
        t = t[area2 > 2.0 * AREA_EPS]
    p = (np.asarray(props).reshape(len(v), -1) if prop_channels
         else np.zeros((len(v), 0)))
    vleaf = (np.floor(v / voxel_size).astype(np.int64) >> LEAF_LOG2) << LEAF_LOG2
    return TriangleMesh(vertices=v, triangles=t, properties=p,
                        vertex_leaf=vleaf)


def marching_cubes(grid: SparseGrid, origins: Optional[Iterable] = None) -> TriangleMesh:
    """Mesh the given leaves (default: every leaf with observed voxels)."""
    if origins is None:
        origins = [leaf.origin for leaf in grid.leaves() if leaf.observed.any()]
    origins = sorted(tuple(int(v) for v in o) for o in origins)
    return combine((mesh_leaf(grid, o) for o in origins), grid.voxel_size,
                   grid.prop_channels)


def zero_crossings(mesh: TriangleMesh, voxel_size: float, cap: int = 512):
    """Group mesh vertices into per-leaf surface point lists.

    Vertices are binned by the leaf of their containing voxel, then
    reduced to one mean position (and mean property) per voxel so a
    leaf contributes at most `cap` training points.

    Returns {leaf origin: (positions, properties)}.
    """
    out = {}
    if mesh.n_vertices == 0:
        return out
    uniq_leaf, inv_leaf = np.unique(mesh.vertex_leaf, axis=0, return_inverse=True)
    voxels = np.floor(mesh.vertices / voxel_size).astype(np.int64)
    for li, org in enumerate(uniq_leaf):
        rows = np.flatnonzero(inv_leaf == li)
        vox, inv = np.unique(voxels[rows], axis=0, return_inverse=True)
        k = len(vox)
        pos = np.zeros((k, 3))
        cnt = np.zeros(k)
        np.add.at(pos, inv, mesh.vertices[rows])
        np.add.at(cnt, inv, 1.0)
        pos /= cnt[:, None]
        pr = np.zeros((k, mesh.properties.shape[1]))
        if mesh.properties.shape[1]:
            np.add.at(pr, inv, mesh.properties[rows])
            pr /= cnt[:, None]
        out[tuple(int(v) for v in org)] = (pos[:cap], pr[:cap])
    return out
