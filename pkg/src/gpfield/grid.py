"""Sparse hierarchical voxel grid.

Four levels: a hash-map root over upper internal nodes spanning 4096
voxels per axis, internal nodes of 32^3 and 16^3 children, and leaves
of 8^3 voxels backed by dense numpy arrays. Signed voxel coordinates
are decomposed with arithmetic shifts and masks, so lookups cost one
hash probe plus three child dereferences regardless of map extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

LEAF_LOG2 = 3
INT1_LOG2 = 4
INT2_LOG2 = 5
LEAF_SIZE = 1 << LEAF_LOG2
LEAF_VOXELS = LEAF_SIZE ** 3
# voxels per axis spanned by the two internal levels
INT1_SPAN_LOG2 = LEAF_LOG2 + INT1_LOG2
ROOT_SPAN_LOG2 = INT1_SPAN_LOG2 + INT2_LOG2
ROOT_SPAN = 1 << ROOT_SPAN_LOG2


def world_to_grid(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Map world positions to integer voxel coordinates (floor)."""
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def grid_to_world(coords: np.ndarray, voxel_size: float) -> np.ndarray:
    """Map integer voxel coordinates to voxel center positions."""
    return (np.asarray(coords, dtype=np.float64) + 0.5) * voxel_size


def leaf_origin_of(coords: np.ndarray) -> np.ndarray:
    """Leaf origin (multiple of 8) containing each voxel coordinate."""
    c = np.asarray(coords, dtype=np.int64)
    return (c >> LEAF_LOG2) << LEAF_LOG2


@dataclass
class VoxelState:
    """Fused per-voxel quantities.

    distance/dist_weight carry the running distance mean and its
    accumulated weight; prop/prop_weight the same for surface property
    channels. ``observed`` records whether the voxel ever received a
    near-surface measurement, as opposed to free-space carving only.
    """

    distance: float = 0.0
    dist_weight: float = 0.0
    prop: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prop_weight: float = 0.0
    observed: bool = False


class LeafNode:
    """Dense 8^3 block of voxel state."""

    __slots__ = ("origin", "distance", "dist_weight", "prop", "prop_weight",
                 "observed", "value_mask", "active")

    def __init__(self, origin: tuple[int, int, int], prop_channels: int = 0):
        self.origin = origin
        self.distance = np.zeros(LEAF_VOXELS, dtype=np.float32)
        self.dist_weight = np.zeros(LEAF_VOXELS, dtype=np.float32)
        self.prop = np.zeros((LEAF_VOXELS, prop_channels), dtype=np.float32)
        self.prop_weight = np.zeros(LEAF_VOXELS, dtype=np.float32)
        self.observed = np.zeros(LEAF_VOXELS, dtype=bool)
        self.value_mask = np.zeros(LEAF_VOXELS, dtype=bool)
        self.active = False

    def local_index(self, coord) -> int:
        lx = int(coord[0]) & (LEAF_SIZE - 1)
        ly = int(coord[1]) & (LEAF_SIZE - 1)
        lz = int(coord[2]) & (LEAF_SIZE - 1)
        return (lx << (2 * LEAF_LOG2)) | (ly << LEAF_LOG2) | lz

    def set_coords(self) -> np.ndarray:
        """Global coordinates of voxels with the value mask on."""
        flat = np.flatnonzero(self.value_mask)
        local = np.stack([flat >> (2 * LEAF_LOG2),
                          (flat >> LEAF_LOG2) & (LEAF_SIZE - 1),
                          flat & (LEAF_SIZE - 1)], axis=1)
        return local + np.asarray(self.origin, dtype=np.int64)


class _Internal:
    __slots__ = ("children",)

    def __init__(self):
        self.children: dict[int, object] = {}


def local_flat_index(coords: np.ndarray) -> np.ndarray:
    """Vectorized within-leaf flat index for integer coordinates."""
    c = np.asarray(coords, dtype=np.int64)
    m = LEAF_SIZE - 1
    return ((c[..., 0] & m) << (2 * LEAF_LOG2)) | ((c[..., 1] & m) << LEAF_LOG2) | (c[..., 2] & m)


class SparseGrid:
    """Top-level container; allocates branches on first write."""

    def __init__(self, voxel_size: float, prop_channels: int = 0):
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        self.voxel_size = float(voxel_size)
        self.prop_channels = int(prop_channels)
        self._root: dict[tuple[int, int, int], _Internal] = {}
        self._leaves: dict[tuple[int, int, int], LeafNode] = {}
        self._active: dict[tuple[int, int, int], LeafNode] = {}
        # bumped on every mutation; lets callers cache derived structures
        self.version = 0

    # -- coordinate helpers ------------------------------------------------

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        return world_to_grid(points, self.voxel_size)

    def grid_to_world(self, coords: np.ndarray) -> np.ndarray:
        return grid_to_world(coords, self.voxel_size)

    @staticmethod
    def root_key_of(coord) -> tuple[int, int, int]:
        return (int(coord[0]) >> ROOT_SPAN_LOG2,
                int(coord[1]) >> ROOT_SPAN_LOG2,
                int(coord[2]) >> ROOT_SPAN_LOG2)

    # -- node access --------------------------------------------------------

    def access_path(self, coord):
        """(upper internal, lower internal, leaf) chain for a coordinate.

        Returns None if any branch is unallocated. The chain length is
        the access depth below the root hash map.
        """
        i, j, k = int(coord[0]), int(coord[1]), int(coord[2])
        upper = self._root.get((i >> ROOT_SPAN_LOG2, j >> ROOT_SPAN_LOG2,
                                k >> ROOT_SPAN_LOG2))
        if upper is None:
            return None
        m2 = (1 << INT2_LOG2) - 1
        idx2 = ((((i >> INT1_SPAN_LOG2) & m2) << (2 * INT2_LOG2))
                | (((j >> INT1_SPAN_LOG2) & m2) << INT2_LOG2)
                | ((k >> INT1_SPAN_LOG2) & m2))
        lower = upper.children.get(idx2)
        if lower is None:
            return None
        m1 = (1 << INT1_LOG2) - 1
        idx1 = ((((i >> LEAF_LOG2) & m1) << (2 * INT1_LOG2))
                | (((j >> LEAF_LOG2) & m1) << INT1_LOG2)
                | ((k >> LEAF_LOG2) & m1))
        leaf = lower.children.get(idx1)
        if leaf is None:
            return None
        return (upper, lower, leaf)

    def find_leaf(self, coord) -> Optional[LeafNode]:
        path = self.access_path(coord)
        return None if path is None else path[2]

    def get_or_create_leaf(self, coord) -> LeafNode:
        """Leaf containing the coordinate, allocating branch nodes as needed."""
        i, j, k = int(coord[0]), int(coord[1]), int(coord[2])
        rk = (i >> ROOT_SPAN_LOG2, j >> ROOT_SPAN_LOG2, k >> ROOT_SPAN_LOG2)
        upper = self._root.get(rk)
        if upper is None:
            upper = self._root[rk] = _Internal()
        m2 = (1 << INT2_LOG2) - 1
        idx2 = ((((i >> INT1_SPAN_LOG2) & m2) << (2 * INT2_LOG2))
                | (((j >> INT1_SPAN_LOG2) & m2) << INT2_LOG2)
                | ((k >> INT1_SPAN_LOG2) & m2))
        lower = upper.children.get(idx2)
        if lower is None:
            lower = upper.children[idx2] = _Internal()
        m1 = (1 << INT1_LOG2) - 1
        idx1 = ((((i >> LEAF_LOG2) & m1) << (2 * INT1_LOG2))
                | (((j >> LEAF_LOG2) & m1) << INT1_LOG2)
                | ((k >> LEAF_LOG2) & m1))
        leaf = lower.children.get(idx1)
        if leaf is None:
            origin = ((i >> LEAF_LOG2) << LEAF_LOG2,
                      (j >> LEAF_LOG2) << LEAF_LOG2,
                      (k >> LEAF_LOG2) << LEAF_LOG2)
            leaf = lower.children[idx1] = LeafNode(origin, self.prop_channels)
            self._leaves[origin] = leaf
            self.version += 1
        return leaf

    # -- single voxel API ----------------------------------------------------

    def set(self, coord, state: VoxelState) -> None:
        leaf = self.get_or_create_leaf(coord)
        n = leaf.local_index(coord)
        leaf.distance[n] = state.distance
        leaf.dist_weight[n] = state.dist_weight
        if self.prop_channels:
            leaf.prop[n] = state.prop
        leaf.prop_weight[n] = state.prop_weight
        leaf.observed[n] = state.observed
        leaf.value_mask[n] = True
        self.version += 1

    def get(self, coord) -> Optional[VoxelState]:
        leaf = self.find_leaf(coord)
        if leaf is None:
            return None
        n = leaf.local_index(coord)
        if not leaf.value_mask[n]:
            return None
        return VoxelState(distance=float(leaf.distance[n]),
                          dist_weight=float(leaf.dist_weight[n]),
                          prop=leaf.prop[n].copy(),
                          prop_weight=float(leaf.prop_weight[n]),
                          observed=bool(leaf.observed[n]))

    # -- iteration -----------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self._leaves)

    def leaves(self) -> Iterator[LeafNode]:
        """All allocated leaves, in insertion order."""
        return iter(self._leaves.values())

    def active_leaves(self) -> Iterator[LeafNode]:
        """Leaves touched since the last clear_active(), in touch order."""
        return iter(self._active.values())

    def mark_active(self, leaf: LeafNode) -> None:
        if not leaf.active:
            leaf.active = True
            self._active[leaf.origin] = leaf

    def clear_active(self) -> None:
        for leaf in self._active.values():
            leaf.active = False
        self._active.clear()

    # -- bulk access ---------------------------------------------------------

    def lookup(self, coords: np.ndarray):
        """Vectorized voxel lookup.

        Args:
            coords: (N, 3) integer voxel coordinates, duplicates allowed.

        Returns:
            (found, distance, dist_weight, observed) arrays of length N.
            Voxels without a set value report found=False and zeros.
        """
        coords = np.asarray(coords, dtype=np.int64)
        n = len(coords)
        found = np.zeros(n, dtype=bool)
        dist = np.zeros(n, dtype=np.float64)
        weight = np.zeros(n, dtype=np.float64)
        obs = np.zeros(n, dtype=bool)
        if n == 0:
            return found, dist, weight, obs
        origins = leaf_origin_of(coords)
        uniq, inverse = np.unique(origins, axis=0, return_inverse=True)
        flat = local_flat_index(coords)
        for u, org in enumerate(uniq):
            leaf = self.find_leaf(org)
            if leaf is None:
                continue
            rows = np.flatnonzero(inverse == u)
            idx = flat[rows]
            mask = leaf.value_mask[idx]
            rows = rows[mask]
            idx = idx[mask]
            found[rows] = True
            dist[rows] = leaf.distance[idx]
            weight[rows] = leaf.dist_weight[idx]
            obs[rows] = leaf.observed[idx]
        return found, dist, weight, obs

    def gather_block(self, origin, shape):
        """Dense copy of an axis-aligned block of voxels.

        Args:
            origin: (3,) integer coordinate of the block's low corner.
            shape: (3,) block extent in voxels.

        Returns:
            (distance, observed, prop) arrays of the block shape; voxels
            without values are zero / unobserved.
        """
        origin = np.asarray(origin, dtype=np.int64)
        shape = tuple(int(s) for s in shape)
        dist = np.zeros(shape, dtype=np.float64)
        obs = np.zeros(shape, dtype=bool)
        prop = np.zeros(shape + (self.prop_channels,), dtype=np.float64)
        lo_leaf = origin >> LEAF_LOG2
        hi_leaf = (origin + np.asarray(shape) - 1) >> LEAF_LOG2
        for li in range(int(lo_leaf[0]), int(hi_leaf[0]) + 1):
            for lj in range(int(lo_leaf[1]), int(hi_leaf[1]) + 1):
                for lk in range(int(lo_leaf[2]), int(hi_leaf[2]) + 1):
                    lorg = (li << LEAF_LOG2, lj << LEAF_LOG2, lk << LEAF_LOG2)
                    leaf = self._leaves.get(lorg)
                    if leaf is None:
                        continue
                    # overlap of this leaf with the requested block
                    lo = np.maximum(origin, np.asarray(lorg))
                    hi = np.minimum(origin + shape, np.asarray(lorg) + LEAF_SIZE)
                    bs = tuple(slice(int(a - o), int(b - o))
                               for a, b, o in zip(lo, hi, origin))
                    ll = lo - np.asarray(lorg)
                    lh = hi - np.asarray(lorg)
                    d = leaf.distance.reshape(LEAF_SIZE, LEAF_SIZE, LEAF_SIZE)
                    m = leaf.value_mask.reshape(LEAF_SIZE, LEAF_SIZE, LEAF_SIZE)
                    o_ = leaf.observed.reshape(LEAF_SIZE, LEAF_SIZE, LEAF_SIZE)
                    sl = tuple(slice(int(a), int(b)) for a, b in zip(ll, lh))
                    dist[bs] = np.where(m[sl], d[sl], 0.0)
                    obs[bs] = o_[sl] & m[sl]
                    if self.prop_channels:
                        p = leaf.prop.reshape(LEAF_SIZE, LEAF_SIZE, LEAF_SIZE, -1)
                        prop[bs] = p[sl]
        return dist, obs, prop

    def observed_voxels(self):
        """Coordinates, distances and weights of all observed voxels."""
        coords = []
        dists = []
        for leaf in self._leaves.values():
            flat = np.flatnonzero(leaf.value_mask & leaf.observed)
            if len(flat) == 0:
                continue
            local = np.stack([flat >> (2 * LEAF_LOG2),
                              (flat >> LEAF_LOG2) & (LEAF_SIZE - 1),
                              flat & (LEAF_SIZE - 1)], axis=1)
            coords.append(local + np.asarray(leaf.origin, dtype=np.int64))
            dists.append(leaf.distance[flat].astype(np.float64))
        if not coords:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0)
        return np.concatenate(coords), np.concatenate(dists)
