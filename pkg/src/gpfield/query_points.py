"""Fusion test-point generation.

For every measured voxel a ray is traced from the sensor origin with
an integer DDA. Voxels in a band around the endpoint always become
test points; free-space voxels along the ray are emitted only when the
fused map still holds a stale surface there, which is what lets moved
objects be carved away. Surface voxels additionally spawn test points
along their estimated normals so thin observations gain support on
both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .grid import SparseGrid, grid_to_world, world_to_grid

SOURCE_RAY = 0
SOURCE_BAND = 1
SOURCE_NORMAL = 2
SOURCE_NAMES = ("ray", "band", "normal")


@dataclass
class TestPoint:
    coord: tuple[int, int, int]
    position: np.ndarray
    sign: int
    source: str


class TestPointSet:
    """Column-wise container of deduplicated test points."""

    def __init__(self, coords, positions, signs, sources):
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.signs = np.asarray(signs, dtype=np.int8).reshape(-1)
        self.sources = np.asarray(sources, dtype=np.uint8).reshape(-1)

    def __len__(self) -> int:
        return len(self.coords)

    def __getitem__(self, i: int) -> TestPoint:
        return TestPoint(coord=tuple(int(v) for v in self.coords[i]),
                         position=self.positions[i],
                         sign=int(self.signs[i]),
                         source=SOURCE_NAMES[self.sources[i]])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @staticmethod
    def empty() -> "TestPointSet":
        return TestPointSet(np.zeros((0, 3)), np.zeros((0, 3)),
                            np.zeros(0), np.zeros(0))


def dedup_first(coords, positions, signs, sources) -> TestPointSet:
    """Keep the first entry per voxel coordinate (input order wins)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) == 0:
        return TestPointSet.empty()
    _, first = np.unique(coords, axis=0, return_index=True)
    first.sort()
    return TestPointSet(coords[first], np.asarray(positions)[first],
                        np.asarray(signs)[first], np.asarray(sources)[first])


def merge(*sets: TestPointSet) -> TestPointSet:
    """Concatenate sets, deduplicating; earlier sets take precedence."""
    return dedup_first(np.concatenate([s.coords for s in sets]),
                       np.concatenate([s.positions for s in sets]),
                       np.concatenate([s.signs for s in sets]),
                       np.concatenate([s.sources for s in sets]))


def traverse_ray(origin, end, voxel_size: float) -> np.ndarray:
    """Voxels pierced by the segment origin -> end, in visit order.

    Reference single-ray DDA; starts in the origin's voxel and stops in
    the endpoint's voxel.
    """
    coords, t, ray = _traverse([np.asarray(origin, dtype=np.float64)],
                               np.asarray(end, dtype=np.float64).reshape(1, 3),
                               voxel_size, extra=0.0)
    return coords


def _traverse(origin, ends: np.ndarray, voxel_size: float, extra: float):
    """Lockstep DDA over many rays from one origin.

    Returns flattened (coords, t_enter, ray_index) arrays covering each
    ray from the origin voxel until entry t exceeds its range + extra.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3)
    n = len(ends)
    h = voxel_size
    delta = ends - o
    rng = np.linalg.norm(delta, axis=1)
    ok = rng > 1e-12
    dirn = np.zeros_like(delta)
    dirn[ok] = delta[ok] / rng[ok, None]
    stop = rng + extra

    cur = np.tile(np.floor(o / h).astype(np.int64), (n, 1))
    step = np.where(dirn > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore"):
        t_delta = np.where(dirn != 0, h / np.abs(dirn), np.inf)
        lo = np.floor(o / h) * h
        t_max = np.where(dirn > 0, (lo + h - o) / dirn,
                         np.where(dirn < 0, (lo - o) / dirn, np.inf))

    alive = ok.copy()
    t_enter = np.zeros(n)
    coords_parts = [cur.copy()[alive]]
    t_parts = [t_enter[alive]]
    ray_parts = [np.flatnonzero(alive)]
    while alive.any():
        axis = np.argmin(t_max, axis=1)
        rows = np.arange(n)
        t_next = t_max[rows, axis]
        cur[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        t_enter = t_next
        alive &= t_enter <= stop
        if not alive.any():
            break
        coords_parts.append(cur[alive].copy())
        t_parts.append(t_enter[alive])
        ray_parts.append(np.flatnonzero(alive))
    return (np.concatenate(coords_parts),
            np.concatenate(t_parts),
            np.concatenate(ray_parts))


def generate(origin, coords: np.ndarray, centers: np.ndarray,
             grid: SparseGrid, band_width: int = 3) -> TestPointSet:
    """Ray-carving and endpoint-band test points for one frame.

    Args:
        origin: sensor position in world coordinates.
        coords/centers: voxelized measured cloud (see local_field.voxelize).
        grid: fused global grid; read-only here.
        band_width: half-width of the always-emitted endpoint band, in
            voxels, measured along the ray.

    Every measured voxel appears in the output. Signs are +1 on the
    sensor side of the endpoint and -1 behind it.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        return TestPointSet.empty()
    h = grid.voxel_size
    band = band_width * h
    vox, t_enter, ray = _traverse(origin, centers, h, extra=(band_width + 2) * h)

    dirs = centers - origin
    rng = np.linalg.norm(dirs, axis=1)
    dirn = dirs / np.maximum(rng, 1e-300)[:, None]
    vox_centers = grid_to_world(vox, h)
    t_center = np.einsum("ij,ij->i", vox_centers - origin, dirn[ray])

    in_band = np.abs(t_center - rng[ray]) <= band
    before = t_center < rng[ray] - band
    emit = in_band.copy()
    if before.any():
        # carve only where the fused map still believes in a surface
        cand = np.flatnonzero(before)
        found, dist, _, observed = grid.lookup(vox[cand])
        stale = found & observed & (np.abs(dist) <= band)
        emit[cand[stale]] = True

    keep = np.flatnonzero(emit)
    signs = np.where(t_center[keep] < rng[ray[keep]], 1, -1)
    sources = np.where(in_band[keep], SOURCE_BAND, SOURCE_RAY).astype(np.uint8)
    return dedup_first(vox[keep], vox_centers[keep], signs, sources)


def estimate_normals(centers: np.ndarray, origin, k: int = 10):
    """Per-point surface normals from k-NN covariance.

    The normal is the smallest-eigenvector of the neighborhood
    covariance, oriented toward the sensor origin. Points whose two
    smallest eigenvalues are comparable (ratio > 0.9) or whose
    neighborhood is rank-deficient get valid=False.

    Returns (normals, valid) arrays.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    m = len(centers)
    normals = np.zeros((m, 3))
    valid = np.zeros(m, dtype=bool)
    if m < 3:
        return normals, valid
    kk = min(k + 1, m)
    tree = cKDTree(centers)
    _, idx = tree.query(centers, k=kk)
    nbrs = centers[idx]                      # (m, kk, 3)
    mean = nbrs.mean(axis=1, keepdims=True)
    d = nbrs - mean
    cov = np.einsum("mki,mkj->mij", d, d) / kk
    evals, evecs = np.linalg.eigh(cov)      # ascending eigenvalues
    lam0, lam1, lam2 = evals[:, 0], evals[:, 1], evals[:, 2]
    scale = np.maximum(lam2, np.finfo(np.float64).tiny)
    planar = (lam1 > 1e-9 * scale) & (lam0 <= 0.9 * lam1)
    n = evecs[:, :, 0]
    flip = np.einsum("ij,ij->i", n, origin - centers) < 0.0
    n[flip] *= -1.0
    normals[planar] = n[planar]
    valid[planar] = True
    return normals, valid


def normal_augment(coords: np.ndarray, centers: np.ndarray,
                   normals: np.ndarray, valid: np.ndarray,
                   voxel_size: float, reach: int = 3) -> TestPointSet:
    """Test points stepped along each valid normal.

    Emits positions at offsets {-reach..-1, +1..+reach} * voxel_size
    along the normal; positive offsets (sensor side) carry sign +1.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    rows = np.flatnonzero(valid)
    if len(rows) == 0 or reach < 1:
        return TestPointSet.empty()
    offsets = np.concatenate([np.arange(1, reach + 1),
                              -np.arange(1, reach + 1)]) * voxel_size
    pos = (centers[rows, None, :]
           + offsets[None, :, None] * normals[rows, None, :])
    signs = np.broadcast_to(np.where(offsets > 0, 1, -1), pos.shape[:2])
    pos = pos.reshape(-1, 3)
    c = world_to_grid(pos, voxel_size)
    src = np.full(len(pos), SOURCE_NORMAL, dtype=np.uint8)
    return dedup_first(c, grid_to_world(c, voxel_size), signs.reshape(-1), src)
