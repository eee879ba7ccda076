"""Room Crossing worlds and a point-mass kinematic drone.

Coordinates: x across the room (width 20), y along it (length 40), z up
(height 4), origin at the room center. The drone spawns near y = -16 and
has to reach y = +16.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

ROOM_LENGTH = 40.0
ROOM_WIDTH = 20.0
ROOM_HEIGHT = 4.0
SPAWN_Y = -16.0
GOAL_Y = 16.0

OBSTACLE_KINDS = ("block", "wall", "overhang")
ROOM_TWO_ROLES = ("train-initial", "dagger-1", "dagger-2", "dagger-3", "test-unknown")
ROOM_TWO_COUNTS = {"train-initial": 5, "dagger-1": 2, "dagger-2": 2, "dagger-3": 2, "test-unknown": 4}
ROOM_TWO_BASE_SEED = 1000

BLOCK_HEIGHTS = (0.75, 1.125, 1.5)
OPENING_WIDTHS = (10.0, 7.5, 5.0)
CLEARANCES = (1.5, 1.25)

# command channels
CX, CY, CZ, ROLL, PITCH, YAW = range(6)


class Vec3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class ObstacleSpec:
    kind: str
    y_center: float
    thickness_y: float
    block_height: Optional[float] = None
    clearance: Optional[float] = None
    opening_width: Optional[float] = None
    side: Optional[str] = None

    def box(self, room: "RoomSpec") -> np.ndarray:
        """Axis-aligned volume as a (2, 3) array of (min corner, max corner)."""
        hx, hz = room.width_x / 2, room.height_z
        y0, y1 = self.y_center - self.thickness_y / 2, self.y_center + self.thickness_y / 2
        if self.kind == "block":
            lo, hi = (-hx, y0, 0.0), (hx, y1, self.block_height)
        elif self.kind == "overhang":
            lo, hi = (-hx, y0, self.clearance), (hx, y1, hz)
        elif self.kind == "wall":
            if self.side == "left":
                lo, hi = (-hx, y0, 0.0), (hx - self.opening_width, y1, hz)
            else:
                lo, hi = (-hx + self.opening_width, y0, 0.0), (hx, y1, hz)
        else:
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        return np.array([lo, hi], dtype=float)

    def opening_center_x(self, room: "RoomSpec") -> float:
        hx = room.width_x / 2
        if self.side == "left":
            return hx - self.opening_width / 2
        return -hx + self.opening_width / 2


@dataclass(frozen=True)
class RoomSpec:
    id: int
    obstacles: tuple
    light_dir: Vec3 = Vec3(0.3, -0.4, math.sqrt(1 - 0.25))
    albedo_seed: int = 0
    length_y: float = ROOM_LENGTH
    width_x: float = ROOM_WIDTH
    height_z: float = ROOM_HEIGHT

    def __post_init__(self):
        kinds = sorted(o.kind for o in self.obstacles)
        if kinds != sorted(OBSTACLE_KINDS):
            raise ValueError(f"room {self.id}: need one block, wall and overhang, got {kinds}")
        ys = [o.y_center for o in self.obstacles]
        if any(b <= a for a, b in zip(ys, ys[1:])) or not all(-16 < y < 16 for y in ys):
            raise ValueError(f"room {self.id}: obstacle y-centers must increase inside (-16, 16)")

    def boxes(self) -> np.ndarray:
        return np.stack([o.box(self) for o in self.obstacles])

    def obstacle(self, kind: str) -> ObstacleSpec:
        return next(o for o in self.obstacles if o.kind == kind)

    def mirrored(self) -> "RoomSpec":
        """The same room reflected across the x = 0 plane."""
        flip = {"left": "right", "right": "left", None: None}
        obstacles = tuple(replace(o, side=flip[o.side]) for o in self.obstacles)
        lx, ly, lz = self.light_dir
        return replace(self, obstacles=obstacles, light_dir=Vec3(-lx, ly, lz))


@dataclass(frozen=True)
class DroneState:
    position: Vec3
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", Vec3(*map(float, self.position)))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def heading(self) -> np.ndarray:
        return np.array([math.sin(self.yaw), math.cos(self.yaw), 0.0])


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    v_max: float = 0.5
    omega_max: float = math.radians(30.0)
    collision_radius: float = 0.3
    max_steps: int = 1500

    def __post_init__(self):
        if self.dt <= 0 or self.v_max <= 0 or self.omega_max <= 0:
            raise ValueError("dt, v_max and omega_max must be positive")


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def command(cx=0.0, cy=0.0, cz=0.0, c_roll=0.0, c_pitch=0.0, c_yaw=0.0) -> np.ndarray:
    return np.clip(np.array([cx, cy, cz, c_roll, c_pitch, c_yaw], dtype=float), -1.0, 1.0)


def make_room_one(index: int) -> RoomSpec:
    if not 0 <= index <= 17:
        raise ValueError(f"Room One index must be in [0, 17], got {index}")
    b, w, o = index % 3, (index // 3) % 3, index // 9
    obstacles = (
        ObstacleSpec("block", -8.0, 1.0, block_height=BLOCK_HEIGHTS[b]),
        ObstacleSpec("wall", 0.0, 0.5, opening_width=OPENING_WIDTHS[w],
                     side="left" if index % 2 == 0 else "right"),
        ObstacleSpec("overhang", 8.0, 1.0, clearance=CLEARANCES[o]),
    )
    return RoomSpec(id=index, obstacles=obstacles, albedo_seed=index)


def _role_code(role: str) -> int:
    if role not in ROOM_TWO_ROLES:
        raise ValueError(f"unknown Room Two role {role!r}")
    return ROOM_TWO_ROLES.index(role)


def make_room_two(seed: int, role: str) -> RoomSpec:
    rng = np.random.default_rng([seed, _role_code(role)])
    order = rng.permutation(3)
    jitter = rng.uniform(-1.0, 1.0, size=3)
    block_height = rng.uniform(0.75, 1.5)
    opening = rng.uniform(5.0, 10.0)
    side = ("left", "right")[rng.integers(2)]
    clearance = CLEARANCES[rng.integers(2)]
    obstacles = []
    for slot, kind_index in enumerate(order):
        kind = OBSTACLE_KINDS[kind_index]
        y = (-8.0, 0.0, 8.0)[slot] + float(jitter[slot])
        if kind == "block":
            obstacles.append(ObstacleSpec("block", y, 1.0, block_height=float(block_height)))
        elif kind == "wall":
            obstacles.append(ObstacleSpec("wall", y, 0.5, opening_width=float(opening), side=side))
        else:
            obstacles.append(ObstacleSpec("overhang", y, 1.0, clearance=clearance))
    azimuth = rng.uniform(-math.pi, math.pi)
    elevation = rng.uniform(math.radians(20), math.radians(80))
    light = Vec3(math.cos(elevation) * math.sin(azimuth),
                 math.cos(elevation) * math.cos(azimuth),
                 math.sin(elevation))
    return RoomSpec(id=seed, obstacles=tuple(obstacles), light_dir=light,
                    albedo_seed=int(rng.integers(2**31)))


def room_one_catalog() -> list:
    return [("train", make_room_one(i)) for i in range(18)]


def room_two_catalog(base_seed: int = ROOM_TWO_BASE_SEED) -> list:
    """(role, room) pairs: 5 train-initial, 3x2 dagger, 4 test-unknown."""
    catalog, seed = [], base_seed
    for role in ROOM_TWO_ROLES:
        for _ in range(ROOM_TWO_COUNTS[role]):
            catalog.append((role, make_room_two(seed, role)))
            seed += 1
    return catalog


def step(state: DroneState, cmd: Sequence[float], cfg: SimConfig = SimConfig()) -> DroneState:
    cmd = np.asarray(cmd, dtype=float)
    if cmd.shape != (6,):
        raise ValueError(f"command must have 6 channels, got shape {cmd.shape}")
    if not (np.all(np.isfinite(cmd)) and np.all(np.isfinite(state.position)) and math.isfinite(state.yaw)):
        raise ValueError("NaN or infinite value in state or command")
    if np.any(np.abs(cmd) > 1.0):
        raise ValueError("command channels must lie in [-1, 1]")
    cx, cz, c_yaw = cmd[CX], cmd[CZ], cmd[YAW]
    if cx == 0.0 and cz == 0.0 and c_yaw == 0.0:
        return state
    x, y, z = state.position
    s, c = math.sin(state.yaw), math.cos(state.yaw)
    v = cfg.dt * cfg.v_max
    pos = Vec3(x + v * cx * s, y + v * cx * c, z + v * cz)
    return DroneState(pos, state.yaw + cfg.dt * cfg.omega_max * c_yaw)


def inside_room(room: RoomSpec, state: DroneState) -> bool:
    x, y, z = state.position
    return abs(x) < room.width_x / 2 and abs(y) < room.length_y / 2 and 0.0 < z < room.height_z


def box_distance(point, boxes: np.ndarray) -> np.ndarray:
    """Euclidean distance from a point to each (min, max) box; 0 inside."""
    p = np.asarray(point, dtype=float)
    d = np.maximum(boxes[:, 0] - p, 0.0) + np.maximum(p - boxes[:, 1], 0.0)
    return np.sqrt((d * d).sum(axis=1))


def check_collision(room: RoomSpec, state: DroneState, cfg: SimConfig = SimConfig()) -> bool:
    r = cfg.collision_radius
    x, y, z = state.position
    if z < r or z > room.height_z - r:
        return True
    if abs(x) > room.width_x / 2 - r or abs(y) > room.length_y / 2 - r:
        return True
    return bool(np.any(box_distance(state.position, room.boxes()) < r))


def check_success(state: DroneState) -> bool:
    return state.position.y >= GOAL_Y


def room_to_text(room: RoomSpec) -> str:
    """Plain `key=value` lines; obstacle fields are prefixed `obstacle.N.`."""
    lines = [
        f"id={room.id}",
        f"length_y={room.length_y!r}",
        f"width_x={room.width_x!r}",
        f"height_z={room.height_z!r}",
        "light_dir=" + ",".join(repr(float(v)) for v in room.light_dir),
        f"albedo_seed={room.albedo_seed}",
    ]
    for n, o in enumerate(room.obstacles):
        for key in ("kind", "y_center", "thickness_y", "block_height", "clearance", "opening_width", "side"):
            value = getattr(o, key)
            if value is not None:
                lines.append(f"obstacle.{n}.{key}={value if isinstance(value, str) else repr(float(value))}")
    return "\n".join(lines) + "\n"


def room_from_text(text: str) -> RoomSpec:
    fields, obstacles = {}, {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key.startswith("obstacle."):
            _, n, name = key.split(".", 2)
            obstacles.setdefault(int(n), {})[name] = value if name in ("kind", "side") else float(value)
        else:
            fields[key] = value
    obs = tuple(ObstacleSpec(**obstacles[n]) for n in sorted(obstacles))
    return RoomSpec(
        id=int(fields["id"]),
        obstacles=obs,
        light_dir=Vec3(*(float(v) for v in fields["light_dir"].split(","))),
        albedo_seed=int(fields["albedo_seed"]),
        length_y=float(fields["length_y"]),
        width_x=float(fields["width_x"]),
        height_z=float(fields["height_z"]),
    )
