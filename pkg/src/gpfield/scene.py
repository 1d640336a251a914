"""Analytic test scenes and a noisy range sensor simulator.

Scenes are compositions of sphere, box and plane primitives with exact
signed distance functions, optionally gated to a time interval so that
objects can appear or vanish mid-sequence. A sphere-tracing sensor
renders range images from arbitrary poses; the same SDF serves as the
ground-truth oracle for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

HIT_TOLERANCE = 1e-5
MAX_TRACE_STEPS = 256


@dataclass
class Primitive:
    """One analytic shape with an optional active time window [t0, t1)."""

    kind: str                       # "sphere" | "box" | "plane"
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0             # sphere
    half_extents: np.ndarray = field(default_factory=lambda: np.ones(3))  # box
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0             # plane: dot(normal, p) = offset
    prop: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.prop = np.asarray(self.prop, dtype=np.float64)

    def is_active(self, t: float) -> bool:
        return self.active[0] <= t < self.active[1]

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "sphere":
            return np.linalg.norm(p - self.center, axis=1) - self.radius
        if self.kind == "box":
            q = np.abs(p - self.center) - self.half_extents
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        if self.kind == "plane":
            return p @ self.normal - self.offset
        raise ValueError(f"unknown primitive kind {self.kind!r}")


class SyntheticScene:
    """Min-composition of primitives with exact signed distances."""

    def __init__(self, primitives: list[Primitive], prop_channels: int = 0):
        self.primitives = list(primitives)
        self.prop_channels = int(prop_channels)

    def sdf(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        """Scene signed distance; +inf where no primitive is active."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = np.full(len(p), np.inf)
        for prim in self.primitives:
            if prim.is_active(t):
                d = np.minimum(d, prim.sdf(p))
        return d if np.ndim(points) > 1 else d[0]

    def sdf_and_prim(self, points: np.ndarray, t: float = 0.0):
        """Signed distance and the index of the nearest primitive."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = np.full(len(p), np.inf)
        idx = np.full(len(p), -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            if prim.is_active(t):
                di = prim.sdf(p)
                take = di < d
                d[take] = di[take]
                idx[take] = i
        return d, idx


@dataclass
class SensorModel:
    """Pinhole or spinning range sensor.

    Pinhole rays look along +z in the sensor frame with x right and y
    down; focal length is in pixels. The lidar variant emits a grid of
    azimuth/elevation rays around the sensor origin.
    """

    kind: str = "pinhole"           # "pinhole" | "lidar"
    width: int = 64
    height: int = 48
    focal: float = 60.0
    azimuth_steps: int = 64
    elevation_steps: int = 16
    elevation_range: tuple[float, float] = (-0.4, 0.4)   # radians
    max_range: float = 10.0
    noise_sigma: float = 0.0
    seed: int = 0

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, fixed ordering."""
        if self.kind == "pinhole":
            u = np.arange(self.width) - (self.width - 1) / 2.0
            v = np.arange(self.height) - (self.height - 1) / 2.0
            uu, vv = np.meshgrid(u, v, indexing="xy")
            d = np.stack([uu / self.focal, vv / self.focal,
                          np.ones_like(uu)], axis=-1).reshape(-1, 3)
        elif self.kind == "lidar":
            az = np.linspace(0.0, 2.0 * np.pi, self.azimuth_steps,
                             endpoint=False)
            el = np.linspace(self.elevation_range[0], self.elevation_range[1],
                             self.elevation_steps)
            aa, ee = np.meshgrid(az, el, indexing="ij")
            # spin about the vertical (-y) axis; azimuth 0 is +z forward
            d = np.stack([np.cos(ee) * np.sin(aa),
                          -np.sin(ee),
                          np.cos(ee) * np.cos(aa)], axis=-1).reshape(-1, 3)
        else:
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def sphere_trace(scene: SyntheticScene, origins: np.ndarray,
                 directions: np.ndarray, t: float,
                 max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """March rays through the scene SDF.

    Returns (ranges, hit_mask); misses report range = +inf.
    """
    o = np.atleast_2d(origins).astype(np.float64)
    d = np.atleast_2d(directions).astype(np.float64)
    if len(o) == 1 and len(d) > 1:
        o = np.repeat(o, len(d), axis=0)
    ranges = np.zeros(len(d))
    alive = np.ones(len(d), dtype=bool)
    hit = np.zeros(len(d), dtype=bool)
    for _ in range(MAX_TRACE_STEPS):
        if not alive.any():
            break
        p = o[alive] + ranges[alive, None] * d[alive]
        s = scene.sdf(p, t)
        idx = np.flatnonzero(alive)
        newly_hit = s < HIT_TOLERANCE
        hit[idx[newly_hit]] = True
        alive[idx[newly_hit]] = False
        ranges[idx[~newly_hit]] += s[~newly_hit]
        over = ranges[idx] > max_range
        alive[idx[over]] = False
    ranges[~hit] = np.inf
    return ranges, hit


def render_frame(scene: SyntheticScene, sensor: SensorModel,
                 pose: tuple[np.ndarray, np.ndarray], t: float = 0.0):
    """Render one noisy range frame.

    Args:
        pose: (rotation, translation) mapping sensor to world.
        t: scene time; also salts the per-frame noise stream so that
           identical (seed, pose, scene, t) render bit-identical frames.

    Returns:
        A local_field.Frame with points in the sensor frame and the hit
        primitives' property vectors attached (None when the scene has
        no property channels).
    """
    from .local_field import Frame

    rot = np.asarray(pose[0], dtype=np.float64)
    trans = np.asarray(pose[1], dtype=np.float64)
    dirs_sensor = sensor.ray_directions()
    dirs_world = dirs_sensor @ rot.T
    ranges, hit = sphere_trace(scene, trans, dirs_world, t, sensor.max_range)
    if sensor.noise_sigma > 0.0:
        rng = np.random.default_rng([sensor.seed, int(round(t * 1e6)) & 0x7FFFFFFF])
        noise = rng.standard_normal(len(dirs_sensor)) * sensor.noise_sigma
        ranges = ranges + noise
    points = dirs_sensor[hit] * ranges[hit, None]
    props = None
    if scene.prop_channels:
        world_pts = trans + dirs_world[hit] * ranges[hit, None]
        _, prim_idx = scene.sdf_and_prim(world_pts, t)
        props = np.zeros((hit.sum(), scene.prop_channels))
        for i, pi in enumerate(prim_idx):
            if pi >= 0 and len(scene.primitives[pi].prop):
                props[i] = scene.primitives[pi].prop
    return Frame(points=points, rotation=rot, translation=trans,
                 properties=props, timestamp=t)


def orbit_trajectory(center, radius: float, n_frames: int,
                     elevation: float = 0.0,
                     start_azimuth: float = 0.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Circle of look-at poses around a point, z-up.

    The sensor +z axis points at the center; elevation (radians) lifts
    the circle above the center's horizontal plane.
    """
    center = np.asarray(center, dtype=np.float64)
    poses = []
    up = np.array([0.0, 0.0, 1.0])
    for i in range(n_frames):
        a = start_azimuth + 2.0 * np.pi * i / n_frames
        eye = center + radius * np.array([np.cos(elevation) * np.cos(a),
                                          np.cos(elevation) * np.sin(a),
                                          np.sin(elevation)])
        poses.append(look_at(eye, center, up))
    return poses


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Pose with sensor +z toward the target, x right, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        # looking along up; pick an arbitrary horizontal right axis
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return rot, eye


def surface_samples(scene: SyntheticScene, bounds, resolution: float,
                    t: float = 0.0, tol: float = 1e-4) -> np.ndarray:
    """Near-uniform samples of the scene surface inside a box.

    Lattice points within one cell of the surface are projected along
    the numerical SDF gradient; the composed SDF has unit slope away
    from seams so a few Newton steps converge. Points that fail to
    reach |sdf| < tol (seams, inactive scenes) are dropped.
    """
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    axes = [np.arange(a, b + resolution * 0.5, resolution)
            for a, b in zip(lo, hi)]
    g = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([a.ravel() for a in g], axis=1)
    d = scene.sdf(pts, t)
    pts = pts[np.abs(d) <= resolution]
    eps = 1e-5
    basis = np.eye(3) * eps
    for _ in range(4):
        if not len(pts):
            break
        d = scene.sdf(pts, t)
        grad = np.stack([scene.sdf(pts + e, t) - scene.sdf(pts - e, t)
                         for e in basis], axis=1) / (2.0 * eps)
        norm2 = np.maximum(np.sum(grad * grad, axis=1), 1e-12)
        pts = pts - (d / norm2)[:, None] * grad
    keep = np.abs(scene.sdf(pts, t)) < tol
    keep &= np.all(pts >= lo, axis=1) & np.all(pts <= hi, axis=1)
    return pts[keep]


# -- scene description files --------------------------------------------------
#
# One primitive per line:
#   sphere CX CY CZ RADIUS [prop V...] [active T0 T1]
#   box CX CY CZ HX HY HZ [prop V...] [active T0 T1]
#   plane NX NY NZ OFFSET [prop V...] [active T0 T1]
# Blank lines and '#' comments are ignored.

def parse_scene(text: str, prop_channels: int = 0) -> SyntheticScene:
    prims = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0].lower()
        counts = {"sphere": 4, "box": 6, "plane": 4}
        if kind not in counts:
            raise ValueError(f"line {ln}: unknown primitive {kind!r}")
        nums = counts[kind]
        vals = [float(v) for v in tok[1:1 + nums]]
        rest = tok[1 + nums:]
        prop = np.zeros(0)
        active = (-np.inf, np.inf)
        i = 0
        while i < len(rest):
            if rest[i] == "prop":
                j = i + 1
                acc = []
                while j < len(rest) and rest[j] != "active":
                    acc.append(float(rest[j]))
                    j += 1
                prop = np.asarray(acc)
                i = j
            elif rest[i] == "active":
                active = (float(rest[i + 1]), float(rest[i + 2]))
                i += 3
            else:
                raise ValueError(f"line {ln}: unexpected token {rest[i]!r}")
        if kind == "sphere":
            prim = Primitive("sphere", center=vals[:3], radius=vals[3],
                             prop=prop, active=active)
        elif kind == "box":
            prim = Primitive("box", center=vals[:3], half_extents=vals[3:6],
                             prop=prop, active=active)
        else:
            prim = Primitive("plane", normal=vals[:3], offset=vals[3],
                             prop=prop, active=active)
        prims.append(prim)
    return SyntheticScene(prims, prop_channels=prop_channels)


def load_scene(path, prop_channels: int = 0) -> SyntheticScene:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scene(f.read(), prop_channels=prop_channels)


def format_scene(scene: SyntheticScene) -> str:
    lines = []
    for p in scene.primitives:
        if p.kind == "sphere":
            body = "sphere %.17g %.17g %.17g %.17g" % (*p.center, p.radius)
        elif p.kind == "box":
            body = "box %.17g %.17g %.17g %.17g %.17g %.17g" % (
                *p.center, *p.half_extents)
        else:
            body = "plane %.17g %.17g %.17g %.17g" % (*p.normal, p.offset)
        if len(p.prop):
            body += " prop " + " ".join("%.17g" % v for v in p.prop)
        if np.isfinite(p.active[0]) or np.isfinite(p.active[1]):
            body += " active %.17g %.17g" % p.active
        lines.append(body)
    return "\n".join(lines) + "\n"
