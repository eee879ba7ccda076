"""Raycast depth and flat-shaded RGB cameras mounted on the drone.

Rasters are row-major with row 0 looking up and column 0 looking left;
columns increase toward increasing yaw (toward +x when facing +y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .world import DroneState, RoomSpec, inside_room

KINECT_HFOV = math.radians(58.0)
RECOVERY_OFFSET = math.radians(15.0)
EXPERT_DEPTH_RANGE = 4.0
# the student's depth camera sees the whole room; see README "Observations"
STUDENT_DEPTH_RANGE = 40.0

_EPS_DIR = 1e-12


@dataclass(frozen=True)
class CameraModel:
    width: int = 32
    height: int = 24
    horizontal_fov: float = KINECT_HFOV
    yaw_offset: float = 0.0
    max_range: float = EXPERT_DEPTH_RANGE

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")
        if not 0 < self.horizontal_fov < math.pi:
            raise ValueError("horizontal fov must lie in (0, pi)")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return (self.width / 2) / math.tan(self.horizontal_fov / 2)

    @property
    def vertical_fov(self) -> float:
        return 2 * math.atan((self.height / 2) / self.focal)

    def column_of_bearing(self, bearing: float) -> float:
        """Continuous column coordinate of a horizontal bearing relative to the camera axis."""
        return self.width / 2 + self.focal * math.tan(bearing)


@dataclass(frozen=True)
class CameraRig:
    center: CameraModel
    left: CameraModel
    right: CameraModel
    recovery_offset: float = RECOVERY_OFFSET

    @classmethod
    def around(cls, center: CameraModel, recovery_offset: float = RECOVERY_OFFSET) -> "CameraRig":
        return cls(
            center=replace(center, yaw_offset=0.0),
            left=replace(center, yaw_offset=+recovery_offset),
            right=replace(center, yaw_offset=-recovery_offset),
            recovery_offset=recovery_offset,
        )


def expert_camera() -> CameraModel:
    return CameraModel(32, 24, max_range=EXPERT_DEPTH_RANGE)


def student_depth_camera() -> CameraModel:
    return CameraModel(32, 24, max_range=STUDENT_DEPTH_RANGE)


def student_rgb_camera() -> CameraModel:
    return CameraModel(128, 72, max_range=STUDENT_DEPTH_RANGE)


def ray_directions(state: DroneState, cam: CameraModel) -> np.ndarray:
    """Unit ray directions, shape (height*width, 3), row-major."""
    yaw = state.yaw + cam.yaw_offset
    forward = np.array([math.sin(yaw), math.cos(yaw), 0.0])
    right = np.array([math.cos(yaw), -math.sin(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    u = (np.arange(cam.width) + 0.5 - cam.width / 2) / cam.focal
    v = (cam.height / 2 - np.arange(cam.height) - 0.5) / cam.focal
    d = forward + u[None, :, None] * right + v[:, None, None] * up
    d = d.reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def cast_rays(room: RoomSpec, origin, dirs: np.ndarray):
    """First hit of each ray against obstacles and the room shell.

    Returns (distance, surface id, outward normal toward the ray origin).
    Surface ids 0..5 are the room shell (x-, x+, y-, y+, floor, ceiling);
    6 + k is obstacle k.
    """
    o = np.asarray(origin, dtype=float)
    d = np.where(np.abs(dirs) < _EPS_DIR, _EPS_DIR, dirs)
    inv = 1.0 / d
    half = np.array([room.width_x / 2, room.length_y / 2, room.height_z])
    lower = np.array([-half[0], -half[1], 0.0])
    # exit through the shell
    t_shell = np.where(d > 0, (half - o) * inv, (lower - o) * inv)
    axis = np.argmin(t_shell, axis=1)
    dist = t_shell[np.arange(len(d)), axis]
    positive = d[np.arange(len(d)), axis] > 0
    surface = 2 * axis + positive
    normal = np.zeros_like(d)
    normal[np.arange(len(d)), axis] = np.where(positive, -1.0, 1.0)
    for k, (bmin, bmax) in enumerate(room.boxes()):
        t1 = (bmin - o) * inv
        t2 = (bmax - o) * inv
        tmin = np.minimum(t1, t2)
        near_axis = np.argmax(tmin, axis=1)
        t_near = tmin[np.arange(len(d)), near_axis]
        t_far = np.min(np.maximum(t1, t2), axis=1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < dist)
        if not hit.any():
            continue
        dist = np.where(hit, t_near, dist)
        surface = np.where(hit, 6 + k, surface)
        n = np.zeros_like(d)
        n[np.arange(len(d)), near_axis] = -np.sign(d[np.arange(len(d)), near_axis])
        normal = np.where(hit[:, None], n, normal)
    return dist, surface, normal


def _check_inside(room: RoomSpec, state: DroneState):
    if not inside_room(room, state):
        raise ValueError(f"drone at {tuple(state.position)} is outside room {room.id}")


def raycast_depth(room: RoomSpec, state: DroneState, cam: CameraModel) -> np.ndarray:
    """Depth raster (height, width) of distances clipped to the camera range."""
    _check_inside(room, state)
    dist, _, _ = cast_rays(room, state.position, ray_directions(state, cam))
    return np.minimum(dist, cam.max_range).reshape(cam.height, cam.width)


def surface_albedo(room: RoomSpec, surface: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Per-hit RGB albedo: a seeded base color per surface times a unit checker."""
    rng = np.random.default_rng(room.albedo_seed)
    base = rng.uniform(0.35, 1.0, size=(6 + len(room.obstacles), 3))
    cells = np.floor(points).astype(np.int64).sum(axis=1)
    checker = np.where(cells % 2 == 0, 1.0, 0.6)
    return base[surface] * checker[:, None]


def min_albedo(room: RoomSpec) -> float:
    rng = np.random.default_rng(room.albedo_seed)
    return float(rng.uniform(0.35, 1.0, size=(6 + len(room.obstacles), 3)).min() * 0.6)


def render_rgb(room: RoomSpec, state: DroneState, cam: CameraModel) -> np.ndarray:
    """Flat-shaded RGB raster (height, width, 3) of uint8."""
    _check_inside(room, state)
    dirs = ray_directions(state, cam)
    dist, surface, normal = cast_rays(room, state.position, dirs)
    points = np.asarray(state.position) + dist[:, None] * dirs
    # nudge off the surface so the checker is stable on the face itself
    points = points + 1e-6 * normal
    albedo = surface_albedo(room, surface, points)
    light = np.asarray(room.light_dir, dtype=float)
    shade = np.maximum(0.2, normal @ (light / np.linalg.norm(light)))
    rgb = np.rint(np.clip(albedo * shade[:, None], 0.0, 1.0) * 255)
    return rgb.astype(np.uint8).reshape(cam.height, cam.width, 3)


def render(room: RoomSpec, state: DroneState, cam: CameraModel, kind: str) -> np.ndarray:
    if kind == "depth":
        return raycast_depth(room, state, cam)
    if kind == "rgb":
        return render_rgb(room, state, cam)
    raise ValueError(f"unknown observation kind {kind!r}")


def recovery_views(room: RoomSpec, state: DroneState, rig: CameraRig, kind: str):
    """(left, right) observations from the yaw-offset recovery cameras."""
    return render(room, state, rig.left, kind), render(room, state, rig.right, kind)


def write_ppm(path, raster: np.ndarray, max_range: float = None) -> None:
    """Debug export: binary PPM (P6) for RGB rasters, PGM (P5) for depth."""
    raster = np.asarray(raster)
    if raster.ndim == 3:
        h, w, _ = raster.shape
        header, payload = f"P6\n{w} {h}\n255\n", raster.astype(np.uint8).tobytes()
    else:
        h, w = raster.shape
        scale = max_range if max_range else float(raster.max()) or 1.0
        grey = np.rint(np.clip(raster / scale, 0, 1) * 255).astype(np.uint8)
        header, payload = f"P5\n{w} {h}\n255\n", grey.tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)
