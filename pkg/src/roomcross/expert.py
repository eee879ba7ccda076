"""Behavior-arbitration expert: waypoint seeking plus depth-based avoidance.

The expert sees ground-truth pose and the room layout (for its waypoints) and
a short-range depth image (for avoidance). Each behavior emits a command and
a per-channel activation; the arbitration blends them channel by channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .world import CX, CZ, YAW, DroneState, RoomSpec, SimConfig, Vec3, command, wrap_angle

TERMINAL_Y = 16.5


@dataclass(frozen=True)
class ExpertConfig:
    cruise_cx: float = 0.8
    cruise_z: float = 1.5
    d_react: float = 2.0
    yaw_gain: float = 1.5
    z_gain: float = 1.0
    avoid_strength: float = 0.8
    min_speed_factor: float = 0.3
    waypoint_switch_margin: float = 1.0
    # altitude bands around blocks and overhangs (ground-truth layout)
    band_lead: float = 3.0
    band_tail: float = 0.5
    block_margin: float = 0.7
    tie_tolerance: float = 0.05
    # perturbations of the applied command while collecting data, redrawn every jitter_hold steps
    yaw_jitter: float = 0.05
    z_jitter: float = 0.0
    jitter_hold: int = 1

    def __post_init__(self):
        gains = (self.d_react, self.yaw_gain, self.z_gain, self.avoid_strength, self.min_speed_factor)
        if min(gains) <= 0:
            raise ValueError("expert gains must be positive")
        if not 0 < self.cruise_cx <= 1:
            raise ValueError("cruise_cx must lie in (0, 1]")


@dataclass
class WaypointPlan:
    targets: List[Vec3]
    active: int = 0
    # (y_start, y_end, target altitude) where the cruise altitude is overridden
    bands: List[tuple] = field(default_factory=list)

    def target_altitude(self, y: float, cruise_z: float) -> float:
        for y0, y1, z in self.bands:
            if y0 <= y <= y1:
                return z
        return cruise_z

    def current(self) -> Vec3:
        return self.targets[self.active]

    def advance(self, state: DroneState, margin: float) -> None:
        """Move past every waypoint the drone is within `margin` (in y) of."""
        while self.active < len(self.targets) - 1 and state.position.y > self.targets[self.active].y - margin:
            self.active += 1


@dataclass
class BehaviorOutput:
    command: np.ndarray
    activation: np.ndarray = field(default_factory=lambda: np.zeros(6))


def plan_waypoints(room: RoomSpec, cfg: ExpertConfig = ExpertConfig()) -> WaypointPlan:
    targets = []
    for o in sorted(room.obstacles, key=lambda o: o.y_center):
        if o.kind == "wall":
            targets.append(Vec3(o.opening_center_x(room), o.y_center, cfg.cruise_z))
    last_x = targets[-1].x if targets else 0.0
    targets.append(Vec3(last_x, TERMINAL_Y, cfg.cruise_z))
    bands = []
    for o in room.obstacles:
        y0 = o.y_center - o.thickness_y / 2 - cfg.band_lead
        y1 = o.y_center + o.thickness_y / 2 + cfg.band_tail
        if o.kind == "block":
            bands.append((y0, y1, max(cfg.cruise_z, o.block_height + cfg.block_margin)))
        elif o.kind == "overhang":
            bands.append((y0, y1, min(cfg.cruise_z, o.clearance / 2)))
    return WaypointPlan(targets, bands=sorted(bands))


def bearing_to(state: DroneState, target: Vec3) -> float:
    x, y, _ = state.position
    return math.atan2(target.x - x, target.y - y)


def goal_behavior(state: DroneState, plan: WaypointPlan, cfg: ExpertConfig = ExpertConfig()) -> BehaviorOutput:
    plan.advance(state, cfg.waypoint_switch_margin)
    error = wrap_angle(bearing_to(state, plan.current()) - state.yaw)
    z_target = plan.target_altitude(state.position.y, cfg.cruise_z)
    cmd = command(cx=cfg.cruise_cx, cz=cfg.z_gain * (z_target - state.position.z),
                  c_yaw=cfg.yaw_gain * error)
    activation = np.zeros(6)
    activation[[CX, YAW]] = 1.0
    activation[CZ] = 0.5
    return BehaviorOutput(cmd, activation)


def avoid_behavior(depth: np.ndarray, cfg: ExpertConfig = ExpertConfig()) -> BehaviorOutput:
    """Vertical evasion from the central third of the depth image.

    The nearest depth in the central columns sets the strength and the nearer
    half sets the direction. When both halves see the same nearest depth (a
    frontal face straddling the horizon) the half that is nearer on average
    decides, so the drone moves toward the free space; full ties climb.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    c0 = w // 3
    central = depth[:, c0:w - c0]
    top, bottom = central[: h // 2], central[h // 2:]
    d_top, d_bot = float(top.min()), float(bottom.min())
    d_front = min(d_top, d_bot)
    cmd = command()
    activation = np.zeros(6)
    if d_front >= cfg.d_react:
        return BehaviorOutput(cmd, activation)
    strength = cfg.avoid_strength * (1.0 - d_front / cfg.d_react)
    if abs(d_top - d_bot) > cfg.tie_tolerance:
        climb = d_bot < d_top
    else:
        climb = bottom.mean() <= top.mean()
    cmd[CZ] = strength if climb else -strength
    activation[CZ] = 1.0
    cmd[CX] = float(np.clip(d_front / cfg.d_react, cfg.min_speed_factor, 1.0))
    activation[CX] = 1.0
    return BehaviorOutput(cmd, activation)


def arbitrate(goal: BehaviorOutput, avoid: BehaviorOutput) -> np.ndarray:
    """Blend per channel; avoidance takes the vertical channel when active,
    scales the goal's forward speed, and never touches yaw."""
    a = avoid.activation[CZ]
    cz = a * avoid.command[CZ] + (1.0 - a) * goal.command[CZ]
    speed = avoid.command[CX] if avoid.activation[CX] > 0 else 1.0
    return command(cx=goal.command[CX] * speed, cz=cz, c_yaw=goal.command[YAW])


def expert_command(room: RoomSpec, state: DroneState, depth: np.ndarray, plan: WaypointPlan,
                   cfg: ExpertConfig = ExpertConfig()) -> np.ndarray:
    return arbitrate(goal_behavior(state, plan, cfg), avoid_behavior(depth, cfg))


def recovery_label(base, yaw_offset: float, recovery_time: float = 2.0,
                   cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Label for a camera rotated by `yaw_offset`: turn that angle back in `recovery_time`."""
    if abs(yaw_offset) >= math.pi / 2:
        raise ValueError("recovery yaw offset must be smaller than 90 degrees")
    out = np.array(base, dtype=float)
    out[YAW] = np.clip(out[YAW] + yaw_offset / (recovery_time * cfg.omega_max), -1.0, 1.0)
    return out


class Expert:
    """Stateful wrapper holding the waypoint cursor for one rollout."""

    name = "expert"

    def __init__(self, cfg: ExpertConfig = ExpertConfig()):
        self.cfg = cfg
        self.room = None
        self.plan = None

    def reset(self, room: RoomSpec) -> None:
        self.room = room
        self.plan = plan_waypoints(room, self.cfg)

    def __call__(self, state: DroneState, depth: np.ndarray) -> np.ndarray:
        return expert_command(self.room, state, depth, self.plan, self.cfg)
