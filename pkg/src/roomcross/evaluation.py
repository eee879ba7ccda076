"""Closed-loop rollouts, imitation metrics, report tables and trajectory export."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .data import Dataset, Episode, frame_features, observation_kind
from .expert import Expert, ExpertConfig
from .sensors import expert_camera, raycast_depth, render, student_depth_camera, student_rgb_camera
from .world import (CZ, GOAL_Y, YAW, DroneState, RoomSpec, SimConfig, check_collision, check_success,
                    inside_room, step)

OUTCOMES = ("success", "collision", "timeout", "diverged")
TEST_START = DroneState((0.0, -16.0, 1.5), 0.0)
ROOM_ONE_STARTS = tuple((x, z) for x in (-0.5, 0.0, 0.5) for z in (1.0, 2.0))
RUNNING_WINDOW = 100
TABLE_COLUMNS = ("network", "success known", "success unknown",
                 "imitation loss known (unknown)", "max y known (unknown)")


class ExpertFailure(RuntimeError):
    def __init__(self, room_id: int, outcome: str):
        super().__init__(f"expert failed in room {room_id}: {outcome}")
        self.room_id = room_id
        self.outcome = outcome


# ---------------------------------------------------------------- controllers

class ExpertController:
    """Applies the expert's own label, optionally perturbed.

    Perturbations are uniform offsets on the yaw rate (``jitter``, rad/s) and the
    climb command (``z_jitter``, command units), redrawn every ``hold`` steps so
    the drone actually drifts off the expert's path before being corrected.
    """

    observes = None

    def __init__(self, jitter: float = 0.0, seed: Optional[int] = None, sim_cfg: SimConfig = SimConfig(),
                 name: str = "expert", z_jitter: float = 0.0, hold: int = 1):
        if hold < 1:
            raise ValueError("hold must be at least one step")
        self.amplitude = np.zeros(6)
        self.amplitude[YAW] = jitter / sim_cfg.omega_max
        self.amplitude[CZ] = z_jitter
        self.hold = hold
        self.seed = seed
        self.name = name
        self.reset(None)

    def reset(self, room: Optional[RoomSpec]) -> None:
        self.rng = np.random.default_rng(self.seed) if self.amplitude.any() else None
        self.offset = np.zeros(6)
        self.k = 0

    def act(self, state: DroneState, label: np.ndarray, views: dict) -> np.ndarray:
        if self.rng is None:
            return label
        if self.k % self.hold == 0:
            self.offset = self.rng.uniform(-1.0, 1.0, size=6) * self.amplitude
        self.k += 1
        return np.clip(label + self.offset, -1.0, 1.0)


class ConstantController:
    observes = None

    def __init__(self, cmd, name: str = "constant"):
        self.cmd = np.asarray(cmd, dtype=float)
        self.name = name

    def reset(self, room: RoomSpec) -> None:
        pass

    def act(self, state, label, views):
        return self.cmd


class StudentController:
    """A network flying from camera frames alone; recurrent state runs across the whole rollout."""

    def __init__(self, spec: nn.NetworkSpec, params, name: Optional[str] = None, camera=None):
        self.spec = spec
        self.params = params
        self.name = name or spec.variant
        self.observes = observation_kind(spec)
        if camera is None:
            camera = student_depth_camera() if self.observes == "depth" else student_rgb_camera()
            if len(spec.input_shape) == 3 and spec.input_shape[1:] != (camera.height, camera.width):
                camera = replace(camera, height=spec.input_shape[1], width=spec.input_shape[2])
        self.camera = camera
        self.dtype = next(iter(params.values())).dtype
        self.reset(None)

    def reset(self, room) -> None:
        self.state = nn.zero_state(self.spec, 1, self.dtype)
        self.history = []

    def act(self, state, label, views):
        x = frame_features(views[self.observes][None], self.spec, self.observes, self.dtype)[0]
        k = self.spec.frames_per_step
        if k > 1:
            self.history = (self.history or [x] * k)[1:] + [x]
            x = np.concatenate(self.history, axis=0)
        out, self.state = nn.forward_window(self.spec, self.params, x[None, None], self.state)
        return np.clip(out[0, 0].astype(float), -1.0, 1.0)


# ---------------------------------------------------------------- rollout

@dataclass
class Trajectory:
    room_id: int
    controller: str
    states: List[DroneState]
    applied: np.ndarray
    expert: np.ndarray
    final_state: DroneState
    outcome: str
    observations: Dict[str, np.ndarray] = field(default_factory=dict)
    dt: float = 0.1

    def __len__(self):
        return len(self.states)

    @property
    def poses(self) -> np.ndarray:
        return np.array([[*s.position, s.yaw] for s in self.states]).reshape(-1, 4)

    @property
    def max_y(self) -> float:
        ys = [s.position.y for s in self.states] + [self.final_state.position.y]
        return float(max(ys))

    @property
    def frame_losses(self) -> np.ndarray:
        return np.linalg.norm(self.applied - self.expert, axis=1)

    @property
    def running_loss(self) -> np.ndarray:
        return running_average(self.frame_losses, RUNNING_WINDOW)


def _as_state(start) -> DroneState:
    if isinstance(start, DroneState):
        return start
    x, y, z, *yaw = start
    return DroneState((x, y, z), yaw[0] if yaw else 0.0)


def rollout(room: RoomSpec, controller, start, cfg: SimConfig = SimConfig(),
            expert_cfg: ExpertConfig = ExpertConfig(), record: Sequence[str] = (),
            cameras: Optional[dict] = None) -> Trajectory:
    """Fly ``controller`` from ``start`` until success, collision, divergence or timeout.

    Every visited state is labeled by the expert. ``record`` names observation
    kinds ("depth", "rgb") to keep, rendered with the student cameras.
    """
    expert = Expert(expert_cfg)
    expert.reset(room)
    controller.reset(room)
    cams = {"depth": student_depth_camera(), "rgb": student_rgb_camera()}
    if getattr(controller, "camera", None) is not None:
        cams[controller.observes] = controller.camera
    cams.update(cameras or {})
    kinds = sorted(set(record) | ({controller.observes} - {None}))
    ecam = expert_camera()
    state = _as_state(start)
    states, applied, labels = [], [], []
    obs = {k: [] for k in record}
    outcome = "timeout"
    for k in range(cfg.max_steps + 1):
        if check_success(state):
            outcome = "success"
            break
        if not inside_room(room, state):
            outcome = "diverged"
            break
        if check_collision(room, state, cfg):
            outcome = "collision"
            break
        if k == cfg.max_steps:
            break
        views = {kind: render(room, state, cams[kind], kind) for kind in kinds}
        depth = _expert_depth(room, state, ecam, views.get("depth"), cams["depth"])
        label = expert(state, depth)
        cmd = np.asarray(controller.act(state, label, views), dtype=float)
        states.append(state)
        applied.append(cmd)
        labels.append(label)
        for kind in record:
            obs[kind].append(views[kind])
        try:
            state = step(state, cmd, cfg)
        except ValueError:
            outcome = "diverged"
            break
    return Trajectory(
        room_id=room.id, controller=getattr(controller, "name", "controller"), states=states,
        applied=np.array(applied, dtype=float).reshape(-1, 6), expert=np.array(labels, dtype=float).reshape(-1, 6),
        final_state=state, outcome=outcome,
        observations={kind: np.array(v) for kind, v in obs.items()}, dt=cfg.dt)


def _expert_depth(room, state, ecam, student_depth, student_cam):
    # same ray geometry, longer range: clipping the student raster is exact
    if student_depth is not None and replace(student_cam, max_range=ecam.max_range) == ecam \
            and student_cam.max_range >= ecam.max_range:
        return np.minimum(student_depth, ecam.max_range)
    return raycast_depth(room, state, ecam)


def trajectory_to_episode(traj: Trajectory, provenance: str = "expert-initial", camera: str = "center") -> Episode:
    if len(traj) == 0:
        raise ValueError(f"trajectory in room {traj.room_id} has no frames")
    depth = traj.observations.get("depth")
    rgb = traj.observations.get("rgb")
    return Episode(
        room_id=traj.room_id,
        poses=traj.poses.astype(np.float32),
        expert=traj.expert.astype(np.float32),
        applied=traj.applied.astype(np.float32),
        depth=None if depth is None else depth.astype(np.float32),
        rgb=None if rgb is None else rgb.astype(np.uint8),
        camera=camera, provenance=provenance)


def room_two_start(room: RoomSpec, seed: int = 0) -> DroneState:
    rng = np.random.default_rng([seed, room.id])
    return DroneState((rng.uniform(-0.5, 0.5), -16.0, rng.uniform(1.0, 2.0)), 0.0)


def collect_expert(rooms_and_starts, obs_kind: str = "depth", expert_cfg: ExpertConfig = ExpertConfig(),
                   sim_cfg: SimConfig = SimConfig(), seed: int = 0, log=None) -> Dataset:
    """Expert demonstrations from (room, start) pairs; any failed flight raises ExpertFailure.

    With ``obs_kind="both"`` the rgb frames are rendered at the depth camera's
    resolution so one episode file can hold both.
    """
    kinds = ("depth", "rgb") if obs_kind == "both" else (obs_kind,)
    cameras = None
    if obs_kind == "both":
        d = student_depth_camera()
        cameras = {"rgb": replace(student_rgb_camera(), width=d.width, height=d.height)}
    episodes = []
    for n, (room, start) in enumerate(rooms_and_starts):
        controller = ExpertController(expert_cfg.yaw_jitter, seed=[seed, n], sim_cfg=sim_cfg,
                                      z_jitter=expert_cfg.z_jitter, hold=expert_cfg.jitter_hold)
        traj = rollout(room, controller, start, sim_cfg, expert_cfg, record=kinds, cameras=cameras)
        if traj.outcome != "success":
            raise ExpertFailure(room.id, traj.outcome)
        episodes.append(trajectory_to_episode(traj))
        if log:
            log(f"collected\t{n}\troom {room.id}\t{len(traj)} frames")
    return Dataset().aggregate(episodes)


def room_one_starts(rooms) -> list:
    return [(room, DroneState((x, -16.0, z), 0.0)) for room in rooms for x, z in ROOM_ONE_STARTS]


# ---------------------------------------------------------------- metrics

def running_average(values: np.ndarray, window: int = RUNNING_WINDOW) -> np.ndarray:
    """Mean of the last ``window`` values at every index (fewer at the start)."""
    values = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def imitation_loss(traj: Trajectory) -> float:
    """Whole-trajectory mean of the per-frame 2-norm between applied and expert commands."""
    if len(traj.applied) == 0:
        raise ValueError("imitation loss needs at least one frame")
    return float(traj.frame_losses.mean())


@dataclass
class RoomResult:
    room_id: int
    outcome: str
    imitation_loss: float
    max_y: float
    frames: int


@dataclass
class Metrics:
    per_room: List[RoomResult]
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return len(self.per_room)

    @property
    def successes(self) -> int:
        return sum(r.outcome == "success" for r in self.per_room)

    @property
    def collisions(self) -> int:
        return sum(r.outcome == "collision" for r in self.per_room)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else 0.0

    @property
    def success_text(self) -> str:
        return f"{self.successes}/{self.n}"

    @property
    def imitation_loss(self) -> float:
        return float(np.mean([r.imitation_loss for r in self.per_room])) if self.per_room else float("nan")

    @property
    def max_y(self) -> float:
        return float(np.mean([r.max_y for r in self.per_room])) if self.per_room else float("nan")


def evaluate_suite(controller, rooms: Sequence[RoomSpec], start=TEST_START, cfg: SimConfig = SimConfig(),
                   expert_cfg: ExpertConfig = ExpertConfig(), keep_trajectories: bool = True) -> Metrics:
    results, trajs = [], []
    for room in rooms:
        traj = rollout(room, controller, start, cfg, expert_cfg)
        loss = imitation_loss(traj) if len(traj) else 0.0
        results.append(RoomResult(room.id, traj.outcome, loss, traj.max_y, len(traj)))
        if keep_trajectories:
            trajs.append(traj)
    return Metrics(results, trajs)


def _pair(known: float, unknown: Optional[float], fmt: str) -> str:
    text = format(known, fmt)
    return text if unknown is None else f"{text} ({format(unknown, fmt)})"


def table_header() -> str:
    return "\t".join(TABLE_COLUMNS)


def table_row(name: str, known: Metrics, unknown: Optional[Metrics] = None) -> str:
    return "\t".join([
        name,
        known.success_text,
        unknown.success_text if unknown is not None else "-",
        _pair(known.imitation_loss, unknown.imitation_loss if unknown else None, ".3f"),
        _pair(known.max_y, unknown.max_y if unknown else None, ".2f"),
    ])


def sweep_table(rows) -> str:
    """Window-size report: rows of (network, scheme, w, seed, Metrics)."""
    lines = ["network\tscheme\tw\tseed\tsuccess\timitation loss\tmax y"]
    for name, scheme, w, seed, m in rows:
        lines.append(f"{name}\t{scheme}\t{w}\t{seed}\t{m.success_text}\t{m.imitation_loss:.3f}\t{m.max_y:.2f}")
    return "\n".join(lines) + "\n"


def per_room_table(metrics: Metrics) -> str:
    lines = ["room\toutcome\timitation loss\tmax y\tframes"]
    for r in metrics.per_room:
        lines.append(f"{r.room_id}\t{r.outcome}\t{r.imitation_loss:.4f}\t{r.max_y:.3f}\t{r.frames}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- export

CSV_COLUMNS = ["t", "x", "y", "z", "yaw"] + [f"applied_{i}" for i in range(6)] + [f"expert_{i}" for i in range(6)]
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
_SCALE, _MARGIN = 10.0, 10.0


def trajectory_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for n, s in enumerate(traj.states):
        row = [n * traj.dt, *s.position, s.yaw, *traj.applied[n], *traj.expert[n]]
        w.writerow([f"{v:.6f}" for v in row])
    return buf.getvalue()


def read_trajectory_csv(path) -> np.ndarray:
    """(n, 17) array of a csv written by ``export_trajectories``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, len(CSV_COLUMNS))


def _csv_name(controller: str, room_id: int) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in controller)
    return f"{safe}__room{room_id}.csv"


def parse_csv_name(name: str):
    stem = Path(name).stem
    controller, _, room = stem.rpartition("__room")
    return controller, int(room)


def room_svg(room_id: int, paths: Dict[str, np.ndarray], room: Optional[RoomSpec] = None) -> str:
    """Top-down plot: room outline, obstacle footprints, one polyline per controller.

    ``paths`` maps controller name to an (n, 2) array of (x, y); the expert is
    drawn thick and black, other controllers in palette order of sorted names.
    """
    width_x, length_y = (room.width_x, room.length_y) if room else (20.0, 40.0)
    W = width_x * _SCALE + 2 * _MARGIN
    H = length_y * _SCALE + 2 * _MARGIN

    def px(x, y):
        return (x + width_x / 2) * _SCALE + _MARGIN, (length_y / 2 - y) * _SCALE + _MARGIN

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'viewBox="0 0 {W:.0f} {H:.0f}">',
           f'<title>room {room_id}</title>',
           f'<rect x="{_MARGIN:.3f}" y="{_MARGIN:.3f}" width="{width_x * _SCALE:.3f}" '
           f'height="{length_y * _SCALE:.3f}" fill="white" stroke="black"/>']
    fills = {"block": "#bbbbbb", "wall": "#555555", "overhang": "#9ecae1"}
    if room is not None:
        for o in room.obstacles:
            (x0, y0, _), (x1, y1, _) = o.box(room)
            left, top = px(x0, y1)
            out.append(f'<rect class="{o.kind}" x="{left:.3f}" y="{top:.3f}" width="{(x1 - x0) * _SCALE:.3f}" '
                       f'height="{(y1 - y0) * _SCALE:.3f}" fill="{fills[o.kind]}" fill-opacity="0.7"/>')
    goal = px(-width_x / 2, GOAL_Y)
    out.append(f'<line x1="{goal[0]:.3f}" y1="{goal[1]:.3f}" x2="{goal[0] + width_x * _SCALE:.3f}" '
               f'y2="{goal[1]:.3f}" stroke="green" stroke-dasharray="4 3"/>')
    others = [name for name in sorted(paths) if name != "expert"]
    for name in (["expert"] if "expert" in paths else []) + others:
        pts = " ".join("{:.3f},{:.3f}".format(*px(x, y)) for x, y in np.asarray(paths[name]).reshape(-1, 2))
        if name == "expert":
            style = 'stroke="black" stroke-width="2.5"'
        else:
            style = f'stroke="{PALETTE[others.index(name) % len(PALETTE)]}" stroke-width="1.5"'
        out.append(f'<polyline data-controller="{name}" points="{pts}" fill="none" {style}/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _write(path: Path, text: str) -> Path:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def export_trajectories(trajs: Sequence[Trajectory], out_dir, fmt: str = "csv",
                        rooms: Optional[Dict[int, RoomSpec]] = None) -> List[Path]:
    """csv: one file per trajectory; svg: one overlay per room."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from exc
    if fmt == "csv":
        return [_write(out / _csv_name(t.controller, t.room_id), trajectory_csv(t)) for t in trajs]
    if fmt != "svg":
        raise ValueError(f"unknown export format {fmt!r}")
    by_room: Dict[int, Dict[str, np.ndarray]] = {}
    for t in trajs:
        xy = np.array([[s.position.x, s.position.y] for s in t.states + [t.final_state]])
        by_room.setdefault(t.room_id, {})[t.controller] = xy
    rooms = rooms or {}
    return [_write(out / f"room{rid}.svg", room_svg(rid, paths, rooms.get(rid)))
            for rid, paths in sorted(by_room.items())]
