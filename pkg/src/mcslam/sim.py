"""Synthetic worlds, ray-cast range scans and noisy odometry.

Worlds are lists of analytic primitives (bounded planes, boxes, vertical
cylinders), each carrying its own pose, so scans can be checked against
closed-form ray intersections.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .filter import MotionDelta, noise_factor
from .pointcloud import Scan
from .se3 import Pose, compose, exp, inverse

_T_EPS = 1e-9


class EmptyScanError(RuntimeError):
    """No ray hit anything."""


def _pose_to_json(p: Pose) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def _pose_from_json(d: dict) -> Pose:
    return Pose(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))


def yaw_pose(x: float, y: float, z: float, yaw: float = 0.0) -> Pose:
    c, s = math.cos(yaw), math.sin(yaw)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), [x, y, z])


# --------------------------------------------------------------------------- primitives


@dataclass
class Primitive:
    pose: Pose
    tag: str = ""

    kind = "primitive"

    def _local(self, origin, dirs):
        R = self.pose.rotation
        o = R.T @ (np.asarray(origin, dtype=float) - self.pose.translation)
        d = dirs @ R
        return o, d

    def intersect(self, origin, dirs) -> np.ndarray:
        raise NotImplementedError

    def corners(self) -> np.ndarray:
        """World-frame vertices of the local bounding box (for bounds checks)."""
        h = self._half()
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return (signs * h) @ self.pose.rotation.T + self.pose.translation

    def _half(self) -> np.ndarray:
        raise NotImplementedError

    def transformed(self, p: Pose) -> "Primitive":
        d = dict(self.__dict__)
        d["pose"] = compose(p, self.pose)
        return type(self)(**d)

    def to_json(self) -> dict:
        d = {"kind": self.kind, "tag": self.tag, "pose": _pose_to_json(self.pose)}
        d.update({k: v for k, v in self.__dict__.items() if k not in ("pose", "tag")})
        return d


@dataclass
class Plane(Primitive):
    """Rectangle in the local z = 0 plane; ``half_x``/``half_y`` may be infinite."""

    half_x: float = math.inf
    half_y: float = math.inf
    kind = "plane"

    def intersect(self, origin, dirs):
        o, d = self._local(origin, dirs)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[2] / d[:, 2]
            x = o[0] + t * d[:, 0]
            y = o[1] + t * d[:, 1]
        ok = (t > _T_EPS) & (np.abs(x) <= self.half_x) & (np.abs(y) <= self.half_y) & np.isfinite(t)
        return np.where(ok, t, np.inf)

    def _half(self):
        return np.array([self.half_x, self.half_y, 0.0])


@dataclass
class Box(Primitive):
    half_extents: tuple = (0.5, 0.5, 0.5)
    kind = "box"

    def __post_init__(self):
        self.half_extents = tuple(float(v) for v in self.half_extents)

    def intersect(self, origin, dirs):
        o, d = self._local(origin, dirs)
        h = np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        hi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
        # rays parallel to a slab: inside the slab -> unconstrained, outside -> miss
        par = d == 0
        inside = np.abs(o) <= h
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        tmin = lo.max(axis=1)
        tmax = hi.min(axis=1)
        t = np.where(tmin > _T_EPS, tmin, tmax)
        ok = (tmax >= tmin) & (t > _T_EPS)
        return np.where(ok, t, np.inf)

    def _half(self):
        return np.asarray(self.half_extents)


@dataclass
class Cylinder(Primitive):
    """Lateral surface of a cylinder around the local z axis."""

    radius: float = 0.3
    half_height: float = 1.0
    kind = "cylinder"

    def intersect(self, origin, dirs):
        o, d = self._local(origin, dirs)
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2.0 * (o[0] * d[:, 0] + o[1] * d[:, 1])
        c = o[0] ** 2 + o[1] ** 2 - self.radius ** 2
        disc = b * b - 4.0 * a * c
        out = np.full(len(d), np.inf)
        ok = (a > 0) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
                z = o[2] + t * d[:, 2]
                good = ok & (t > _T_EPS) & (np.abs(z) <= self.half_height) & np.isinf(out)
                out = np.where(good, t, out)
        return out

    def _half(self):
        return np.array([self.radius, self.radius, self.half_height])


_KINDS = {"plane": Plane, "box": Box, "cylinder": Cylinder}


def primitive_from_json(d: dict) -> Primitive:
    d = dict(d)
    cls = _KINDS[d.pop("kind")]
    d["pose"] = _pose_from_json(d["pose"])
    return cls(**d)


@dataclass
class World:
    surfaces: list[Primitive]
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]]
    kind: str = "custom"
    info: dict = field(default_factory=dict)

    def transformed(self, p: Pose) -> "World":
        """The same world expressed in a frame moved by ``p`` (every primitive left-multiplied)."""
        prims = [s.transformed(p) for s in self.surfaces]
        pts = np.concatenate([_finite_corners(s) for s in prims]) if prims else np.zeros((1, 3))
        return World(prims, (tuple(pts.min(0)), tuple(pts.max(0))), self.kind, dict(self.info))

    def contains(self, x) -> bool:
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9))

    def to_json(self) -> dict:
        return {"kind": self.kind, "bounds": [list(self.bounds[0]), list(self.bounds[1])], "info": self.info,
                "surfaces": [s.to_json() for s in self.surfaces]}

    @classmethod
    def from_json(cls, d: dict) -> "World":
        return cls([primitive_from_json(s) for s in d["surfaces"]],
                   (tuple(d["bounds"][0]), tuple(d["bounds"][1])), d.get("kind", "custom"), d.get("info", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_json(json.loads(Path(path).read_text()))


def _finite_corners(p: Primitive) -> np.ndarray:
    c = p.corners()
    return c[np.all(np.isfinite(c), axis=1)] if np.isfinite(c).any() else p.pose.translation[None]


# --------------------------------------------------------------------------- world generators


def _wall(x0, y0, x1, y1, z0, z1, tag="wall") -> Plane:
    """Vertical rectangle between (x0, y0) and (x1, y1), spanning z0..z1."""
    dx, dy = x1 - x0, y1 - y0
    length = math.hypot(dx, dy)
    u = np.array([dx, dy, 0.0]) / length
    n = np.array([-u[1], u[0], 0.0])
    R = np.column_stack([u, [0.0, 0.0, 1.0], n])
    c = [(x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2]
    return Plane(Pose(R, c), tag, half_x=length / 2, half_y=(z1 - z0) / 2)


def _slab(x0, y0, x1, y1, z, tag="slab") -> Plane:
    return Plane(Pose(np.eye(3), [(x0 + x1) / 2, (y0 + y1) / 2, z]), tag, half_x=(x1 - x0) / 2, half_y=(y1 - y0) / 2)


def _box(x0, y0, z0, x1, y1, z1, tag="box") -> Box:
    return Box(Pose(np.eye(3), [(x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2]), tag,
               half_extents=((x1 - x0) / 2, (y1 - y0) / 2, (z1 - z0) / 2))


def _wall_with_doors(x0, y0, x1, y1, z_top, doors, door_height, floor_height, floors, tag="wall"):
    """Wall from (x0,y0) to (x1,y1) with the same door span [s0, s1] (along the wall) on each floor."""
    length = math.hypot(x1 - x0, y1 - y0)
    ux, uy = (x1 - x0) / length, (y1 - y0) / length

    def at(s):
        return x0 + ux * s, y0 + uy * s

    out = []
    cuts = sorted(doors)
    s_prev = 0.0
    for s0, s1 in cuts:
        if s0 > s_prev:
            out.append(_wall(*at(s_prev), *at(s0), 0.0, z_top, tag))
        for f in range(floors):
            zb = f * floor_height
            out.append(_wall(*at(s0), *at(s1), zb + door_height, zb + floor_height, tag))
        s_prev = s1
    if s_prev < length:
        out.append(_wall(*at(s_prev), *at(length), 0.0, z_top, tag))
    return out


def forest_grid(pitch: float = 5.0, rows: int = 10, cols: int = 10, radius: float = 0.3,
                radius_jitter: float = 0.08, position_jitter: float = 0.0, tree_height: float = 8.0,
                ground: bool = True, seed: int = 0) -> World:
    if pitch <= 0 or rows < 1 or cols < 1 or radius <= 0 or tree_height <= 0:
        raise ValueError("forest_grid: pitch, rows, cols, radius and tree_height must be positive")
    if radius + radius_jitter >= pitch / 2 or radius_jitter < 0 or radius - radius_jitter <= 0:
        raise ValueError("forest_grid: radius jitter must keep trees positive and non-overlapping")
    g = rngmod.stream(seed, "world-forest")
    surfaces: list[Primitive] = []
    for i in range(rows):
        for j in range(cols):
            r = radius + g.uniform(-radius_jitter, radius_jitter)
            off = g.uniform(-position_jitter, position_jitter, size=2) if position_jitter > 0 else np.zeros(2)
            surfaces.append(Cylinder(Pose(np.eye(3), [i * pitch + off[0], j * pitch + off[1], tree_height / 2]),
                                     "tree", radius=float(r), half_height=tree_height / 2))
    margin = pitch
    lo = (-margin, -margin, 0.0)
    hi = ((rows - 1) * pitch + margin, (cols - 1) * pitch + margin, tree_height)
    if ground:
        surfaces.append(_slab(lo[0], lo[1], hi[0], hi[1], 0.0, "ground"))
    return World(surfaces, (lo, hi), "forest_grid", {"pitch": pitch, "rows": rows, "cols": cols})


def loop_corridor(length: float = 40.0, width: float = 30.0, corridor_width: float = 4.0, wall_height: float = 3.0,
                  feature_count: int = 14, seed: int = 0) -> World:
    if length <= 2 * corridor_width or width <= 2 * corridor_width or corridor_width <= 0 or wall_height <= 0:
        raise ValueError("loop_corridor: the corridor must fit inside the outer rectangle")
    L, W, c, h = length, width, corridor_width, wall_height
    surfaces: list[Primitive] = [
        _wall(0, 0, L, 0, 0, h), _wall(L, 0, L, W, 0, h), _wall(L, W, 0, W, 0, h), _wall(0, W, 0, 0, 0, h),
        _box(c, c, 0, L - c, W - c, h, "block"),
        _slab(0, 0, L, W, 0.0, "ground"),
        _slab(0, 0, L, W, h, "ceiling"),
    ]
    # irregular pilasters along the outer walls break the along-corridor degeneracy
    g = rngmod.stream(seed, "world-corridor")
    perim = 2 * (L + W)
    for s in np.sort(g.uniform(0, perim, size=feature_count)):
        d = g.uniform(0.3, 0.6)
        if s < L:
            surfaces.append(_box(s - 0.3, 0, 0, s + 0.3, d, h, "feature"))
        elif s < L + W:
            y = s - L
            surfaces.append(_box(L - d, y - 0.3, 0, L, y + 0.3, h, "feature"))
        elif s < 2 * L + W:
            x = L - (s - L - W)
            surfaces.append(_box(x - 0.3, W - d, 0, x + 0.3, W, h, "feature"))
        else:
            y = W - (s - 2 * L - W)
            surfaces.append(_box(0, y - 0.3, 0, d, y + 0.3, h, "feature"))
    return World(surfaces, ((0.0, 0.0, 0.0), (L, W, h)), "loop_corridor",
                 {"length": L, "width": W, "corridor_width": c, "wall_height": h})


def multi_floor(floors: int = 3, floor_height: float = 3.5, length: float = 30.0, width: float = 16.0,
                corridor_width: float = 4.0, door_height: float = 2.4, shaft_size: float = 2.2,
                stair_size: float = 5.0, seed: int = 0) -> World:
    """Stacked identical corridor-loop floors with one distinguishing box per floor.

    A stairwell annex sits on the west side and an elevator shaft on the
    east side; both connect to every floor through door openings.
    """
    if floors < 1 or floor_height <= door_height or corridor_width <= 0 or length <= 2 * corridor_width \
            or width <= 2 * corridor_width:
        raise ValueError("multi_floor: degenerate building parameters")
    F, h, L, W, c = floors, floor_height, length, width, corridor_width
    top = F * h
    ymid = W / 2
    sy0, sy1 = ymid - stair_size / 2, ymid + stair_size / 2
    ey0, ey1 = ymid - shaft_size / 2, ymid + shaft_size / 2
    surfaces: list[Primitive] = []
    # outer shell, door cuts toward the stairwell (west) and the shaft (east)
    surfaces += [_wall(0, 0, L, 0, 0, top), _wall(L, W, 0, W, 0, top)]
    surfaces += _wall_with_doors(0, W, 0, 0, top, [(W - sy1 + 1.0, W - sy0 - 1.0)], door_height, h, F)
    surfaces += _wall_with_doors(L, 0, L, W, top, [(ey0 + 0.3, ey1 - 0.3)], door_height, h, F)
    surfaces.append(_box(c, c, 0, L - c, W - c, top, "block"))
    for f in range(F + 1):
        surfaces.append(_slab(0, 0, L, W, f * h, "slab"))
    # stairwell annex (open shaft, no stair geometry)
    sx = -stair_size
    surfaces += [_wall(sx, sy0, 0, sy0, 0, top, "stair"), _wall(0, sy1, sx, sy1, 0, top, "stair"),
                 _wall(sx, sy1, sx, sy0, 0, top, "stair"),
                 _slab(sx, sy0, 0, sy1, 0.0, "stair"), _slab(sx, sy0, 0, sy1, top, "stair")]
    # elevator shaft annex
    ex = L + shaft_size
    surfaces += [_wall(L, ey0, ex, ey0, 0, top, "shaft"), _wall(ex, ey1, L, ey1, 0, top, "shaft"),
                 _wall(ex, ey0, ex, ey1, 0, top, "shaft"),
                 _slab(L, ey0, ex, ey1, 0.0, "shaft"), _slab(L, ey0, ex, ey1, top, "shaft")]
    # repeated pilasters (identical on every floor)
    for x in (5.0, 11.5, 19.0, 24.5):
        if x < L - 1:
            surfaces.append(_box(x - 0.3, 0, 0, x + 0.3, 0.5, top, "pilaster"))
            surfaces.append(_box(x + 1.2, W - 0.5, 0, x + 1.8, W, top, "pilaster"))
    # one distinguishing feature per floor, at a floor-specific spot
    feats = []
    spots = [(L * 0.25, c / 2, "south"), (L * 0.3, W - c / 2, "north"), (L * 0.6, c / 2, "south"),
             (L * 0.7, W - c / 2, "north")]
    for f in range(F):
        x, y, side = spots[f % len(spots)]
        y0 = 0.0 if side == "south" else W - 1.2
        surfaces.append(_box(x - 0.6, y0, f * h, x + 0.6, y0 + 1.2, f * h + 1.4, f"feature{f}"))
        feats.append([x, y0 + 0.6, f * h])
    return World(surfaces, ((sx, 0.0, 0.0), (ex, W, top)), "multi_floor",
                 {"floors": F, "floor_height": h, "length": L, "width": W, "corridor_width": c,
                  "stair": [sx, sy0, 0.0, sy1], "shaft": [L, ey0, ex, ey1], "features": feats})


def generate_world(kind: str, params: dict | None = None) -> World:
    params = dict(params or {})
    gens = {"forest_grid": forest_grid, "multi_floor": multi_floor, "loop_corridor": loop_corridor}
    if kind not in gens:
        raise ValueError(f"unknown world kind {kind!r}")
    try:
        return gens[kind](**params)
    except TypeError as exc:
        raise ValueError(f"{kind}: {exc}") from None


# --------------------------------------------------------------------------- sensing


@dataclass
class SensorModel:
    ray_count: int = 2000
    max_range: float = 30.0
    hfov: float = 2 * math.pi
    vfov: float = math.radians(30.0)
    range_noise_sigma: float = 0.01
    backward_crop: bool = False
    # "grid": fixed elevation-major lattice; "random": fresh uniform directions every scan
    pattern: str = "grid"

    def validate(self, prefix: str = "") -> None:
        if self.ray_count < 1:
            raise ValueError(f"{prefix}ray_count: must be >= 1")
        if not self.max_range > 0:
            raise ValueError(f"{prefix}max_range: must be > 0")
        if not (0 < self.hfov <= 2 * math.pi) or not (0 <= self.vfov < math.pi):
            raise ValueError(f"{prefix}hfov/vfov: out of range")
        if self.range_noise_sigma < 0:
            raise ValueError(f"{prefix}range_noise_sigma: must be >= 0")
        if self.pattern not in ("grid", "random"):
            raise ValueError(f"{prefix}pattern: must be 'grid' or 'random'")

    def directions(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Unit ray directions in the sensor frame (x forward, z up)."""
        if self.pattern == "random":
            if rng is None:
                raise ValueError("a random generator is required for the random ray pattern")
            az = rng.uniform(-self.hfov / 2, self.hfov / 2, self.ray_count)
            # uniform on the sphere band |elevation| <= vfov / 2
            zmax = math.sin(self.vfov / 2)
            z = rng.uniform(-zmax, zmax, self.ray_count)
            c = np.sqrt(1.0 - z * z)
            return np.stack([c * np.cos(az), c * np.sin(az), z], axis=-1)
        n_v = max(1, int(round(math.sqrt(self.ray_count * max(self.vfov, 1e-9) / self.hfov))))
        if self.vfov == 0:
            n_v = 1
        n_h = int(math.ceil(self.ray_count / n_v))
        el = np.linspace(-self.vfov / 2, self.vfov / 2, n_v) if n_v > 1 else np.zeros(1)
        az = -self.hfov / 2 + (np.arange(n_h) + 0.5) * self.hfov / n_h
        E, A = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
        return d[: self.ray_count]


def cast_rays(world: World, origin, dirs) -> np.ndarray:
    t = np.full(len(dirs), np.inf)
    for s in world.surfaces:
        t = np.minimum(t, s.intersect(origin, dirs))
    return t


def simulate_scan(world: World, true_pose: Pose, model: SensorModel, rng: np.random.Generator | None = None,
                  timestamp: float = 0.0) -> Scan:
    """First-hit returns in the sensor frame. Raises EmptyScanError when nothing is hit.

    Covariances in the returned scan are placeholders (identity); run
    ``estimate_covariances`` on ``scan.means`` before registration.
    """
    d_sensor = model.directions(rng)
    if model.backward_crop:
        d_sensor = d_sensor[d_sensor[:, 0] >= 0]
    d_world = d_sensor @ true_pose.rotation.T
    t = cast_rays(world, true_pose.translation, d_world)
    hit = t <= model.max_range
    if model.range_noise_sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when range noise is enabled")
        t = t + model.range_noise_sigma * rng.standard_normal(len(t))
        hit &= t > 0
    if not hit.any():
        raise EmptyScanError("no ray returned a hit")
    pts = d_sensor[hit] * t[hit, None]
    if model.backward_crop:
        pts = pts[pts[:, 0] >= 0]
    return Scan(pts, timestamp=timestamp)


def scan_world(world: World, true_pose: Pose, cabin_height: float = 2.5, eye_height: float = 1.2) -> World:
    """World seen from ``true_pose``: inside a multi-floor shaft footprint the
    sensor sees only a closed cabin that travels with it."""
    shaft = world.info.get("shaft")
    if shaft is None:
        return world
    x0, y0, x1, y1 = shaft
    x, y, z = true_pose.translation
    if not (x0 < x < x1 and y0 < y < y1):
        return world
    zb = z - eye_height
    cabin = _box(x0 + 0.05, y0 + 0.05, zb, x1 - 0.05, y1 - 0.05, zb + cabin_height, "cabin")
    return World([cabin], world.bounds, world.kind, {})


def detect_elevator(scan: Scan, threshold: float = 2.0) -> bool:
    """Confined-space test: median point range below ``threshold``."""
    if len(scan) == 0:
        raise ValueError("empty scan")
    return bool(np.median(np.linalg.norm(scan.means, axis=1)) < threshold)


# --------------------------------------------------------------------------- trajectories and odometry


@dataclass
class TrajectoryScript:
    waypoints: list[tuple[float, Pose]]
    odom_noise: np.ndarray
    elevator_segments: list[tuple[float, float, float]] = field(default_factory=list)
    odom_bias: np.ndarray = field(default_factory=lambda: np.zeros(6))
    elevator_covariance_scale: float = 4.0

    def __post_init__(self):
        self.odom_noise = np.asarray(self.odom_noise, dtype=float).reshape(6, 6)
        self.odom_bias = np.asarray(self.odom_bias, dtype=float).reshape(6)
        ts = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("waypoint timestamps must be strictly increasing")

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([w[0] for w in self.waypoints])

    def in_elevator(self, t0: float, t1: float) -> bool:
        mid = 0.5 * (t0 + t1)
        return any(s <= mid <= e for s, e, _ in self.elevator_segments)

    def to_json(self) -> dict:
        return {
            "waypoints": [{"t": t, "pose": _pose_to_json(p)} for t, p in self.waypoints],
            "odom_noise": self.odom_noise.tolist(),
            "odom_bias": self.odom_bias.tolist(),
            "elevator_segments": [list(s) for s in self.elevator_segments],
            "elevator_covariance_scale": self.elevator_covariance_scale,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrajectoryScript":
        return cls([(float(w["t"]), _pose_from_json(w["pose"])) for w in d["waypoints"]],
                   np.array(d["odom_noise"]), [tuple(s) for s in d.get("elevator_segments", [])],
                   np.array(d.get("odom_bias", np.zeros(6))), float(d.get("elevator_covariance_scale", 4.0)))


def simulate_odometry(script: TrajectoryScript, seed: int = 0) -> list[MotionDelta]:
    """One MotionDelta per consecutive waypoint pair (len(waypoints) - 1 entries)."""
    if len(script.waypoints) < 2:
        raise ValueError("need at least two waypoints")
    L = noise_factor(script.odom_noise)
    out = []
    for k in range(1, len(script.waypoints)):
        (t0, p0), (t1, p1) = script.waypoints[k - 1], script.waypoints[k]
        if script.in_elevator(t0, t1):
            out.append(MotionDelta(Pose.identity(), script.odom_noise * script.elevator_covariance_scale))
            continue
        gt = compose(inverse(p0), p1)
        z = rngmod.stream(seed, "odometry", k).standard_normal(6)
        noise = script.odom_bias + L @ z
        out.append(MotionDelta(compose(gt, exp(noise)) if np.any(noise) else gt, script.odom_noise.copy()))
    return out


def dead_reckoning(initial: Pose, deltas: list[MotionDelta]) -> list[Pose]:
    poses = [initial]
    for m in deltas:
        poses.append(compose(poses[-1], m.delta))
    return poses


def diagonal_noise(sigma_xyz: float, sigma_rpy: float) -> np.ndarray:
    return np.diag([sigma_xyz ** 2] * 3 + [sigma_rpy ** 2] * 3)


def build_route(legs: list[dict], start: tuple[float, float, float], dt: float = 1.0, step: float = 1.0,
                vertical_step: float = 0.5, yaw0: float = 0.0) -> tuple[list[tuple[float, Pose]], list[tuple[float, float, float]]]:
    """Sample poses along a polyline.

    ``legs`` is a list of ``{"to": [x, y, z], "mode": "walk" | "elevator"}``;
    walking legs move ``step`` metres per frame with the heading along the
    direction of travel, vertical legs move ``vertical_step`` per frame and
    keep the heading. Elevator legs are reported as elevator segments.
    """
    pts = [np.asarray(start, dtype=float)]
    yaw = yaw0
    poses: list[tuple[float, Pose]] = [(0.0, yaw_pose(*pts[0], yaw))]
    segments = []
    t = 0.0
    cur = pts[0]
    for leg in legs:
        dst = np.asarray(leg["to"], dtype=float)
        mode = leg.get("mode", "walk")
        delta = dst - cur
        horiz = math.hypot(delta[0], delta[1])
        per = step if horiz > 1e-9 else vertical_step
        n = max(1, int(math.ceil(np.linalg.norm(delta) / per - 1e-9)))
        target_yaw = math.atan2(delta[1], delta[0]) if horiz > 1e-9 else yaw
        turn = (target_yaw - yaw + math.pi) % (2 * math.pi) - math.pi
        t_start = t
        for i in range(1, n + 1):
            t += dt
            # spread the heading change over the first frames of the leg
            frac_turn = min(1.0, i / 3.0)
            p = cur + delta * (i / n)
            poses.append((round(t, 9), yaw_pose(*p, yaw + turn * frac_turn)))
        yaw = yaw + turn
        if mode == "elevator":
            segments.append((t_start, t, float(delta[2])))
        cur = dst
    return poses, segments
