"""Per-frame local distance field.

Each incoming point cloud is posed into the world frame, collapsed to
the centers of the voxels it touches, and partitioned by the leaves of
the sparse grid. One GP is trained per populated leaf; leaves with too
few points are folded into their nearest neighbor so every model has a
usable support. Queries route to the single model whose training
centroid is closest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import gp
from .grid import LEAF_LOG2, SparseGrid, VoxelState, grid_to_world, world_to_grid


class EmptyFrame(ValueError):
    """Frame carried no points."""


@dataclass
class Frame:
    """One posed sensor observation.

    points are in the sensor frame; rotation/translation map sensor to
    world. properties, when present, is an (N, P) array aligned with
    points.
    """

    points: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    properties: Optional[np.ndarray] = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=1e-6):
            raise ValueError("rotation determinant must be +1")
        if self.properties is not None:
            self.properties = np.asarray(self.properties, dtype=np.float64)
            self.properties = self.properties.reshape(len(self.points), -1)

    def points_world(self) -> np.ndarray:
        return self.points @ self.rotation.T + self.translation

    @property
    def origin(self) -> np.ndarray:
        return self.translation


def voxelize(frame: Frame, voxel_size: float):
    """Collapse a frame to unique voxel centers.

    Returns (coords, centers, props): integer voxel coordinates in
    lexicographic order, their world-space centers, and per-voxel mean
    properties (None if the frame has none). Raises EmptyFrame on an
    empty cloud.
    """
    if len(frame.points) == 0:
        raise EmptyFrame("frame has no points")
    world = frame.points_world()
    coords = world_to_grid(world, voxel_size)
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    centers = grid_to_world(uniq, voxel_size)
    props = None
    if frame.properties is not None and frame.properties.shape[1] > 0:
        p = frame.properties
        sums = np.zeros((len(uniq), p.shape[1]))
        counts = np.zeros(len(uniq))
        np.add.at(sums, inverse, p)
        np.add.at(counts, inverse, 1.0)
        props = sums / counts[:, None]
    return uniq, centers, props


class LocalField:
    """Per-leaf GP models over one frame's voxelized cloud."""

    def __init__(self, models: list[gp.GpLeafModel],
                 model_origins: list[tuple[int, int, int]],
                 leaf_to_model: dict[tuple[int, int, int], int],
                 local_grid: SparseGrid, params: gp.KernelParams,
                 prop_clip=None):
        self.models = models
        self.model_origins = model_origins
        self.leaf_to_model = leaf_to_model
        self.local_grid = local_grid
        self.params = params
        self.prop_clip = prop_clip
        self.centroids = np.array([m.centroid for m in models]).reshape(-1, 3)
        self._tree = cKDTree(self.centroids) if len(models) else None

    @property
    def has_properties(self) -> bool:
        return bool(self.models) and self.models[0].alpha_prop is not None

    def nearest_model(self, points: np.ndarray) -> np.ndarray:
        """Index of the routing model per query point.

        Exact centroid-distance ties resolve to the model whose leaf
        origin sorts first lexicographically (models are stored in that
        order, so the smaller index wins).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = min(2, len(self.models))
        dist, idx = self._tree.query(pts, k=k)
        if k == 1:
            return np.atleast_1d(idx).reshape(len(pts))
        dist = dist.reshape(len(pts), k)
        idx = idx.reshape(len(pts), k)
        best = idx[:, 0].copy()
        tied = dist[:, 0] == dist[:, 1]
        best[tied] = np.minimum(idx[tied, 0], idx[tied, 1])
        return best

    def query(self, point: np.ndarray):
        """Distance, distance variance, property mean and property
        variance inferred by the nearest model at one point."""
        d, v, c, w = self.query_batch(np.asarray(point).reshape(1, 3))
        return (float(d[0]), float(v[0]),
                None if c is None else c[0],
                None if w is None else float(w[0]))

    def query_batch(self, points: np.ndarray):
        """Vectorized query; groups points by routing model."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(pts)
        if not self.models:
            raise EmptyFrame("local field has no models")
        owner = self.nearest_model(pts)
        d = np.zeros(n)
        v = np.zeros(n)
        has_prop = self.has_properties
        c = np.zeros((n, self.models[0].alpha_prop.shape[1])) if has_prop else None
        w = np.zeros(n) if has_prop else None
        for mi in np.unique(owner):
            rows = np.flatnonzero(owner == mi)
            model = self.models[mi]
            o, u = gp.infer_occupancy(model, pts[rows])
            d[rows] = gp.revert_distance(o, self.params)
            v[rows] = gp.propagate_variance(u, o, self.params)
            if has_prop:
                cm, wm = gp.infer_property(model, pts[rows], self.prop_clip)
                c[rows] = cm
                w[rows] = wm
        return d, v, c, w


def build(frame: Frame, voxel_size: float, params: gp.KernelParams,
          min_leaf_points: int = 4, prop_clip=None) -> LocalField:
    """Voxelize a frame and train one GP per populated leaf.

    Leaves holding fewer than min_leaf_points voxels are merged into
    the nearest sufficiently populated leaf (by training centroid); if
    no leaf is large enough everything trains as-is.
    """
    coords, centers, props = voxelize(frame, voxel_size)
    return build_voxelized(coords, centers, props, voxel_size, params,
                           min_leaf_points, prop_clip)


def build_voxelized(coords: np.ndarray, centers: np.ndarray,
                    props: Optional[np.ndarray], voxel_size: float,
                    params: gp.KernelParams, min_leaf_points: int = 4,
                    prop_clip=None) -> LocalField:
    """Train per-leaf models from an already voxelized cloud."""
    leaf_keys = coords >> LEAF_LOG2
    uniq_leaves, inverse = np.unique(leaf_keys, axis=0, return_inverse=True)
    groups = [np.flatnonzero(inverse == i) for i in range(len(uniq_leaves))]
    origins = [tuple(int(v) << LEAF_LOG2 for v in u) for u in uniq_leaves]

    big = [i for i, g in enumerate(groups) if len(g) >= min_leaf_points]
    merged_into = list(range(len(groups)))
    if big and len(big) < len(groups):
        big_centroids = np.array([centers[groups[i]].mean(axis=0) for i in big])
        tree = cKDTree(big_centroids)
        for i, g in enumerate(groups):
            if len(g) >= min_leaf_points:
                continue
            _, nearest = tree.query(centers[g].mean(axis=0))
            merged_into[i] = big[int(nearest)]

    # hosts in lexicographic leaf-origin order for deterministic routing
    hosts = sorted(set(merged_into), key=lambda i: origins[i])
    models = []
    model_origins = []
    leaf_to_model = {}
    for slot, host in enumerate(hosts):
        rows = np.concatenate([groups[i] for i in range(len(groups))
                               if merged_into[i] == host])
        rows.sort()
        model = gp.train(centers[rows], params,
                         None if props is None else props[rows])
        models.append(model)
        model_origins.append(origins[host])
        for i in range(len(groups)):
            if merged_into[i] == host:
                leaf_to_model[origins[i]] = slot

    local_grid = SparseGrid(voxel_size)
    for coord in coords:
        local_grid.set(coord, VoxelState(observed=True))
    return LocalField(models, model_origins, leaf_to_model, local_grid,
                      params, prop_clip)
