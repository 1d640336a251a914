"""Surface extraction and PLY round trips."""

import numpy as np
import pytest

from gpfield.grid import SparseGrid, VoxelState, grid_to_world, world_to_grid
from gpfield.meshing import (
    TriangleMesh,
    marching_cubes,
    mesh_leaf,
    zero_crossings,
)
from gpfield.ply import IoFailure, read_ply, write_mesh, write_points

H = 0.05


def fill_sdf_band(grid, sdf, band, lo, hi, props=None):
    """Store exact SDF values at every voxel center inside |sdf| <= band."""
    axes = [np.arange(lo, hi)] * 3
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = grid_to_world(coords, grid.voxel_size)
    d = sdf(centers)
    keep = np.abs(d) <= band
    for c, di, p in zip(coords[keep], d[keep], centers[keep]):
        state = VoxelState(distance=float(di), dist_weight=1.0, observed=True)
        if props is not None:
            state.prop = props(p)
            state.prop_weight = 1.0
        grid.set(c, state)
    return int(keep.sum())


def sphere_sdf(p, r=1.0):
    return np.linalg.norm(np.atleast_2d(p), axis=1) - r


def sphere_grid(h=H, r=1.0, band=3, props=None):
    grid = SparseGrid(voxel_size=h, prop_channels=1 if props else 0)
    n = int(np.ceil((r + (band + 2) * h) / h))
    fill_sdf_band(grid, lambda p: sphere_sdf(p, r), band * h, -n, n + 1,
                  props=props)
    return grid


def test_empty_grid_gives_empty_mesh():
    mesh = marching_cubes(SparseGrid(voxel_size=H))
    assert mesh.n_vertices == 0
    assert mesh.n_triangles == 0
    assert mesh.vertices.shape == (0, 3)
    assert mesh.triangles.shape == (0, 3)


def test_uniform_sign_produces_no_triangles():
    grid = SparseGrid(voxel_size=H)
    for x in range(8):
        for y in range(8):
            for z in range(8):
                grid.set((x, y, z),
                         VoxelState(distance=H, dist_weight=1.0, observed=True))
    mesh = marching_cubes(grid)
    assert mesh.n_triangles == 0


def test_single_negative_corner_yields_midpoint_triangle():
    # Cell corners (-h, +h x 7) cross at t = 0.5 on three edges.
    grid = SparseGrid(voxel_size=H)
    for x in range(2):
        for y in range(2):
            for z in range(2):
                d = -H if (x, y, z) == (0, 0, 0) else H
                grid.set((x, y, z),
                         VoxelState(distance=d, dist_weight=1.0, observed=True))
    mesh = marching_cubes(grid)
    assert mesh.n_triangles == 1
    assert mesh.n_vertices == 3
    want = {(H, H / 2, H / 2), (H / 2, H, H / 2), (H / 2, H / 2, H)}
    got = {tuple(np.round(v, 12)) for v in mesh.vertices}
    assert got == {tuple(np.round(w, 12)) for w in want}


def test_cells_with_unobserved_corner_are_skipped():
    # Same sign pattern, but one positive corner was never measured.
    grid = SparseGrid(voxel_size=H)
    for x in range(2):
        for y in range(2):
            for z in range(2):
                d = -H if (x, y, z) == (0, 0, 0) else H
                grid.set((x, y, z),
                         VoxelState(distance=d, dist_weight=1.0,
                                    observed=(x, y, z) != (1, 1, 1)))
    mesh = marching_cubes(grid)
    assert mesh.n_triangles == 0


def test_sphere_vertices_sit_on_the_surface():
    mesh = marching_cubes(sphere_grid())
    assert mesh.n_triangles > 1000
    radii = np.linalg.norm(mesh.vertices, axis=1)
    # Linear interpolation of the exact SDF: error far below half a voxel.
    assert np.max(np.abs(radii - 1.0)) < 0.5 * H


def test_sphere_mesh_is_watertight():
    mesh = marching_cubes(sphere_grid())
    edges = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            edges[key] = edges.get(key, 0) + 1
    counts = np.array(list(edges.values()))
    assert np.all(counts == 2)


def test_vertices_are_shared_across_triangles_and_leaves():
    mesh = marching_cubes(sphere_grid())
    # Edge-keyed construction merges coincident vertices exactly, so no
    # two rows agree even across leaf boundaries.
    rounded = {tuple(np.round(v, 9)) for v in mesh.vertices}
    assert len(rounded) == mesh.n_vertices
    # Sphere spans many leaves.
    assert len({tuple(l) for l in mesh.vertex_leaf}) > 8
    used = np.unique(mesh.triangles)
    assert used.size == mesh.n_vertices


def test_marching_cubes_is_deterministic():
    a = marching_cubes(sphere_grid())
    b = marching_cubes(sphere_grid())
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.triangles, b.triangles)
    np.testing.assert_array_equal(a.vertex_leaf, b.vertex_leaf)


def test_explicit_leaf_list_restricts_extraction():
    grid = sphere_grid()
    full = marching_cubes(grid)
    some = sorted({tuple(l) for l in full.vertex_leaf})[:4]
    part = marching_cubes(grid, origins=some)
    assert 0 < part.n_triangles < full.n_triangles


def test_mesh_leaf_reports_leaf_origin():
    grid = sphere_grid()
    origin = sorted(tuple(leaf.origin) for leaf in grid.leaves())[0]
    lm = mesh_leaf(grid, origin)
    assert tuple(lm.origin) == tuple(origin)


def test_mesh_properties_interpolated_along_edges():
    # Property = x coordinate of the voxel center; the interpolated value
    # at each vertex must match the vertex's own x position.
    def props(p):
        return np.array([p[0]])

    mesh = marching_cubes(sphere_grid(props=props))
    assert mesh.properties is not None
    assert mesh.properties.shape == (mesh.n_vertices, 1)
    np.testing.assert_allclose(mesh.properties[:, 0], mesh.vertices[:, 0],
                               atol=1e-6)


def test_zero_crossings_empty_mesh():
    mesh = TriangleMesh.empty()
    assert zero_crossings(mesh, H) == {}


def test_zero_crossings_groups_by_leaf_and_voxel():
    mesh = marching_cubes(sphere_grid())
    groups = zero_crossings(mesh, H)
    assert groups
    total = 0
    for origin, (pos, _) in groups.items():
        origin = np.asarray(origin)
        np.testing.assert_array_equal(origin & 7, 0)
        vox = world_to_grid(pos, H)
        # Every crossing lies inside the leaf it is filed under.
        np.testing.assert_array_equal((vox >> 3) << 3,
                                      np.broadcast_to(origin, vox.shape))
        # One entry per voxel.
        assert len({tuple(v) for v in vox}) == len(pos)
        total += len(pos)
    radii = np.concatenate([np.linalg.norm(p, axis=1)
                            for p, _ in groups.values()])
    assert np.max(np.abs(radii - 1.0)) < 0.5 * H
    assert total <= mesh.n_vertices


def test_zero_crossings_average_vertices_in_same_voxel():
    verts = np.array([
        [0.01, 0.01, 0.01],
        [0.03, 0.02, 0.04],   # same voxel as the first
        [0.30, 0.30, 0.30],
    ])
    tris = np.array([[0, 1, 2]])
    props = np.array([[1.0], [3.0], [5.0]])
    leaf = np.zeros((3, 3), dtype=np.int64)
    mesh = TriangleMesh(vertices=verts, triangles=tris, properties=props,
                        vertex_leaf=leaf)
    groups = zero_crossings(mesh, H)
    pos, pr = groups[(0, 0, 0)]
    assert len(pos) == 2
    got = {tuple(np.round(p, 9)): float(v) for p, v in zip(pos, pr[:, 0])}
    key = tuple(np.round(np.array([0.02, 0.015, 0.025]), 9))
    assert got[key] == pytest.approx(2.0)
    assert got[tuple(np.round(verts[2], 9))] == pytest.approx(5.0)


def test_zero_crossings_cap_limits_each_leaf():
    mesh = marching_cubes(sphere_grid())
    capped = zero_crossings(mesh, H, cap=5)
    assert max(len(p) for p, _ in capped.values()) <= 5
    full = zero_crossings(mesh, H, cap=512)
    assert sum(len(p) for p, _ in full.values()) >= sum(
        len(p) for p, _ in capped.values())


def test_ply_mesh_round_trip(tmp_path):
    mesh = marching_cubes(sphere_grid())
    path = tmp_path / "sphere.ply"
    write_mesh(path, mesh.vertices, mesh.triangles)
    back = read_ply(path)
    np.testing.assert_array_equal(back["vertices"],
                                  mesh.vertices.astype(np.float32))
    np.testing.assert_array_equal(back["faces"], mesh.triangles)
    assert back["properties"] is None


def test_ply_rgb_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    verts = rng.uniform(-1, 1, size=(40, 3))
    faces = rng.integers(0, 40, size=(20, 3))
    props = rng.uniform(0, 1, size=(40, 3))
    path = tmp_path / "color.ply"
    write_mesh(path, verts, faces, properties=props, prop_kind="rgb")
    back = read_ply(path)
    assert back["properties"].shape == (40, 3)
    # Quantised through uint8.
    np.testing.assert_allclose(back["properties"], props, atol=0.5 / 255)


def test_ply_intensity_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    verts = rng.uniform(-1, 1, size=(10, 3)).astype(np.float32)
    props = rng.uniform(0, 2, size=(10, 1))
    path = tmp_path / "gray.ply"
    write_mesh(path, verts, np.zeros((0, 3), dtype=np.int64),
               properties=props, prop_kind="intensity")
    back = read_ply(path)
    np.testing.assert_allclose(back["properties"], props, atol=1e-6)
    assert back["faces"].shape == (0, 3)


def test_ply_header_counts(tmp_path):
    mesh = marching_cubes(sphere_grid())
    path = tmp_path / "hdr.ply"
    write_mesh(path, mesh.vertices, mesh.triangles)
    header = path.read_bytes().split(b"end_header")[0].decode("ascii")
    assert f"element vertex {mesh.n_vertices}" in header
    assert f"element face {mesh.n_triangles}" in header
    assert "binary_little_endian" in header


def test_ply_empty_mesh_is_valid(tmp_path):
    path = tmp_path / "empty.ply"
    write_mesh(path, np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    back = read_ply(path)
    assert back["vertices"].shape == (0, 3)
    assert back["faces"].shape == (0, 3)


def test_write_points_round_trip(tmp_path):
    pts = np.random.default_rng(5).normal(size=(25, 3))
    path = tmp_path / "cloud.ply"
    write_points(path, pts)
    back = read_ply(path)
    np.testing.assert_array_equal(back["vertices"], pts.astype(np.float32))
    assert back["faces"].shape == (0, 3)


def test_ply_rejects_unknown_property_kind(tmp_path):
    with pytest.raises(ValueError):
        write_mesh(tmp_path / "bad.ply", np.zeros((1, 3)),
                   np.zeros((0, 3), dtype=np.int64),
                   properties=np.zeros((1, 1)), prop_kind="bgr")


def test_read_ply_rejects_non_ply(tmp_path):
    path = tmp_path / "junk.ply"
    path.write_bytes(b"OFF\n0 0 0\n")
    with pytest.raises(IoFailure):
        read_ply(path)
