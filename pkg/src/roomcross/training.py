"""Training schemes for the control networks and the DAgger driver.

Three ways to cut episodes into gradient steps:

* ``full``: whole episodes, padded to the batch maximum and loss-masked.
* ``sliding``: windows of length w advancing by ``stride`` from t = 0, the
  recurrent state after the first ``stride`` steps carried into the next window.
* ``window``: windows at random positions. The initial state of each window is
  recovered by a forward-only replay of the episode prefix.
"""
from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import nn
from .data import Dataset, Episode, frame_features, observation_kind
from .expert import recovery_label
from .nn import AdamState, NetworkSpec
from .sensors import CameraRig, render, student_depth_camera, student_rgb_camera
from .world import DroneState, SimConfig

SCHEMES = ("full", "sliding", "window")
REPLAY_MODES = ("exact", "epoch")


@dataclass(frozen=True)
class WindowSample:
    episode: int
    start: int
    length: int

    def __post_init__(self):
        if self.start < 0 or self.length < 1:
            raise ValueError(f"invalid window {self}")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "window"
    window: int = 20
    stride: Optional[int] = None
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-4
    # when set, the rate decays geometrically from lr (first epoch) to lr_final (last epoch)
    lr_final: Optional[float] = None
    # per-step decay of an exponential moving average of the weights; the
    # average, not the last iterate, is what training returns when set
    ema: Optional[float] = None
    seed: int = 0
    # uniform random window lengths on [window_min, window_max] when both are set
    window_min: Optional[int] = None
    window_max: Optional[int] = None
    # "exact" replays prefixes with the current parameters before every batch;
    # "epoch" replays all of an epoch's prefixes once with the epoch-start parameters
    replay: str = "epoch"
    finetune_from: Optional[str] = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.window < 1 or self.effective_stride < 1:
            raise ValueError("window and stride must be at least 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.replay not in REPLAY_MODES:
            raise ValueError(f"unknown replay mode {self.replay!r}")
        if (self.window_min is None) != (self.window_max is None):
            raise ValueError("window_min and window_max go together")
        if self.window_min is not None and not 1 <= self.window_min <= self.window_max:
            raise ValueError("need 1 <= window_min <= window_max")
        if self.lr <= 0 or (self.lr_final is not None and self.lr_final <= 0):
            raise ValueError("learning rates must be positive")
        if self.ema is not None and not 0.0 <= self.ema < 1.0:
            raise ValueError("ema decay must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        if self.lr_final is None or self.epochs < 2:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (epoch / (self.epochs - 1))

    @property
    def effective_stride(self) -> int:
        return self.window if self.stride is None else self.stride

    def to_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in asdict(self).items()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kinds = {"scheme": str, "replay": str, "dtype": str, "finetune_from": str, "lr": float,
                 "lr_final": float, "ema": float}
        values = {}
        for line in text.splitlines():
            if "=" not in line:
                continue
            key, _, raw = line.partition("=")
            if key not in cls.__dataclass_fields__:
                continue
            values[key] = None if raw == "None" else kinds.get(key, int)(raw)
        return cls(**values)


@dataclass(frozen=True)
class DaggerConfig:
    iterations: int = 4
    # rooms per iteration, as Room Two roles; iteration k uses schedule[min(k, len) - 1]
    schedule: tuple = (
        ("train-initial",),
        ("train-initial", "dagger-1"),
        ("train-initial", "dagger-1", "dagger-2"),
        ("train-initial", "dagger-1", "dagger-2", "dagger-3"),
    )
    finetune: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("DAgger needs at least one iteration")
        if not self.schedule:
            raise ValueError("empty DAgger schedule")

    def roles(self, k: int) -> tuple:
        return self.schedule[min(k, len(self.schedule)) - 1]


# ---------------------------------------------------------------- sequence data

class SequenceData:
    """Lazy network inputs for a dataset.

    Raw observations stay as stored (f32 depth or u8 rgb) and are normalized
    and frame-stacked only for the slices a batch asks for.
    """

    def __init__(self, dataset: Dataset, spec: NetworkSpec, dtype=np.float32):
        if not len(dataset):
            raise ValueError("empty dataset")
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.kind = observation_kind(spec)
        self.obs, self.labels = [], []
        for e in dataset.episodes:
            obs = e.depth if self.kind == "depth" else e.rgb
            if obs is None:
                raise ValueError(f"episode {e.episode_id} lacks {self.kind} observations needed by {spec.variant}")
            self.obs.append(obs)
            self.labels.append(np.asarray(e.expert, dtype=self.dtype))
        frame_features(self.obs[0][:1], spec, self.kind, self.dtype)  # shape check
        self.lengths = np.array([len(o) for o in self.obs])

    def __len__(self):
        return len(self.obs)

    @property
    def total_frames(self) -> int:
        return int(self.lengths.sum())

    def inputs(self, i: int, start: int, stop: int) -> np.ndarray:
        k = self.spec.frames_per_step
        if k == 1:
            return frame_features(self.obs[i][start:stop], self.spec, self.kind, self.dtype)
        idx = np.maximum(np.arange(start, stop)[:, None] + np.arange(-(k - 1), 1)[None, :], 0)
        x = frame_features(self.obs[i][idx.reshape(-1)], self.spec, self.kind, self.dtype)
        n = stop - start
        return x.reshape((n, k * x.shape[1]) + x.shape[2:])

    def batch(self, items):
        """Padded (X, Y, mask) for (episode, start, length) triples."""
        L = max(length for _, _, length in items)
        B = len(items)
        X = np.zeros((B, L) + self.spec.step_shape, dtype=self.dtype)
        Y = np.zeros((B, L, nn.N_OUT), dtype=self.dtype)
        M = np.zeros((B, L), dtype=self.dtype)
        for r, (i, start, length) in enumerate(items):
            X[r, :length] = self.inputs(i, start, start + length)
            Y[r, :length] = self.labels[i][start:start + length]
            M[r, :length] = 1
        return X, Y, M


# ---------------------------------------------------------------- window sampling

def sample_windows_ww(lengths, cfg: TrainConfig, rng: np.random.Generator) -> List[WindowSample]:
    """One epoch of random windows: N = ceil(total frames / w) draws, episodes
    chosen proportionally to length, t_x uniform on [0, T - w]."""
    lengths = np.asarray(lengths, dtype=np.int64)
    w_lo = cfg.window_min if cfg.window_min is not None else cfg.window
    w_hi = cfg.window_max if cfg.window_max is not None else cfg.window
    weights = np.where(lengths >= w_lo, lengths, 0).astype(float)
    if weights.sum() == 0:
        raise ValueError(f"every episode is shorter than the window ({w_lo})")
    n = math.ceil(lengths.sum() / cfg.window)
    episodes = rng.choice(len(lengths), size=n, p=weights / weights.sum())
    samples = []
    for i in episodes:
        T = int(lengths[i])
        w = int(rng.integers(w_lo, min(w_hi, T) + 1)) if w_hi != w_lo else w_lo
        samples.append(WindowSample(int(i), int(rng.integers(0, T - w + 1)), w))
    return samples


def windows_sliding(length: int, w: int, stride: Optional[int] = None):
    """Ordered (WindowSample, carry) pairs for one episode.

    ``carry`` is the number of steps after which the state is handed to the
    next window (None for the last). A shorter final window covers any tail.
    """
    stride = w if stride is None else stride
    if w < 1 or stride < 1:
        raise ValueError("window and stride must be at least 1")
    if length <= w:
        return [(WindowSample(0, 0, length), None)]
    starts = list(range(0, length - w + 1, stride))
    if starts[-1] + w < length:
        starts.append(starts[-1] + stride)
    out = []
    for n, s in enumerate(starts):
        last = n == len(starts) - 1
        out.append((WindowSample(0, s, min(w, length - s)), None if last else stride))
    return out


# ---------------------------------------------------------------- replay

def replay_state(spec: NetworkSpec, params, inputs: np.ndarray, t_x: int) -> nn.LstmState:
    """State after a gradient-free pass over inputs[:t_x] from the zero state."""
    if t_x > len(inputs):
        raise ValueError(f"t_x = {t_x} exceeds the episode length {len(inputs)}")
    dtype = next(iter(params.values())).dtype
    if not spec.is_recurrent or t_x == 0:
        return nn.zero_state(spec, 1, dtype)
    _, state = nn.forward_window(spec, params, np.asarray(inputs[:t_x])[None])
    return state


def replay_states(spec: NetworkSpec, params, data: SequenceData, samples, chunk: int = 32) -> nn.LstmState:
    """Initial states for many windows at once, one row per sample.

    Prefixes of the same episode share one forward pass; episodes are batched
    in chunks of similar prefix length.
    """
    dtype = next(iter(params.values())).dtype
    state = nn.zero_state(spec, len(samples), dtype)
    if not spec.is_recurrent:
        return state
    wanted = defaultdict(list)
    for r, s in enumerate(samples):
        if s.start > 0:
            wanted[s.episode].append(r)
    episodes = sorted(wanted, key=lambda i: max(samples[r].start for r in wanted[i]))
    for c in range(0, len(episodes), chunk):
        group = episodes[c:c + chunk]
        prefix = [max(samples[r].start for r in wanted[i]) for i in group]
        X, _, _ = data.batch([(i, 0, p) for i, p in zip(group, prefix)])
        _, _, cache = nn._forward(spec, params, X, None)
        rows, cols, steps = [], [], []
        for g, i in enumerate(group):
            for r in wanted[i]:
                rows.append(r)
                cols.append(g)
                steps.append(samples[r].start)
        # states_after indexes per batch row; expand to one entry per sample
        for n, (_, _, _, hs, cs, _) in enumerate(cache["layers"]):
            idx = np.asarray(steps) - 1
            state[n][0][rows] = hs[cols, idx]
            state[n][1][rows] = cs[cols, idx]
    return state


def _take(state: nn.LstmState, rows) -> nn.LstmState:
    return [(h[rows], c[rows]) for h, c in state]


# ---------------------------------------------------------------- epochs

def _step(spec, params, opt, X, Y, M, state0, lr, average=None, decay=0.0):
    loss, grads, cache = nn.loss_and_grad(spec, params, X, Y, state0, M)
    params, opt = nn.adam_update(params, grads, opt, lr)
    if average is not None:
        for k, v in params.items():
            average[k] *= decay
            average[k] += (1.0 - decay) * v
    return params, opt, loss, cache


def train_epoch(spec: NetworkSpec, params, opt: AdamState, data, cfg: TrainConfig,
                rng: np.random.Generator, lr: Optional[float] = None, average: Optional[dict] = None):
    """One pass of the configured scheme; returns (params, opt, mean batch loss).

    ``average`` (updated in place after every step with decay ``cfg.ema``)
    holds the running weight average.
    """
    lr = cfg.lr if lr is None else lr
    avg = dict(average=average, decay=cfg.ema or 0.0)
    if not isinstance(data, SequenceData):
        data = SequenceData(data, spec, next(iter(params.values())).dtype)
    if data.spec.step_shape != spec.step_shape:
        raise ValueError(f"data built for {data.spec.step_shape}, network expects {spec.step_shape}")
    bs = cfg.batch_size
    losses = []
    if cfg.scheme == "window":
        samples = sample_windows_ww(data.lengths, cfg, rng)
        if cfg.replay == "epoch":
            states = replay_states(spec, params, data, samples)
        for b in range(0, len(samples), bs):
            batch = samples[b:b + bs]
            if cfg.replay == "exact":
                s0 = replay_states(spec, params, data, batch)
            else:
                s0 = _take(states, slice(b, b + len(batch)))
            X, Y, M = data.batch([(s.episode, s.start, s.length) for s in batch])
            params, opt, loss, _ = _step(spec, params, opt, X, Y, M, s0, lr, **avg)
            losses.append(loss)
    elif cfg.scheme == "sliding":
        stride = cfg.effective_stride
        for g in range(0, len(data), bs):
            group = list(range(g, min(g + bs, len(data))))
            plans = [windows_sliding(int(data.lengths[i]), cfg.window, stride) for i in group]
            dtype = next(iter(params.values())).dtype
            state = nn.zero_state(spec, len(group), dtype)
            for k in range(max(len(p) for p in plans)):
                rows = [r for r, p in enumerate(plans) if k < len(p)]
                items = [(group[r], plans[r][k][0].start, plans[r][k][0].length) for r in rows]
                X, Y, M = data.batch(items)
                params, opt, loss, cache = _step(spec, params, opt, X, Y, M, _take(state, rows), lr, **avg)
                losses.append(loss)
                carried = [j for j, r in enumerate(rows) if plans[r][k][1]]
                if spec.is_recurrent and carried:
                    steps = [min(plans[r][k][1] or 1, items[j][2]) for j, r in enumerate(rows)]
                    dest = [rows[j] for j in carried]
                    for n, (h, c) in enumerate(nn.states_after(cache, steps)):
                        state[n][0][dest] = h[carried]
                        state[n][1][dest] = c[carried]
    else:
        order = rng.permutation(len(data))
        for b in range(0, len(order), bs):
            items = [(int(i), 0, int(data.lengths[i])) for i in order[b:b + bs]]
            X, Y, M = data.batch(items)
            params, opt, loss, _ = _step(spec, params, opt, X, Y, M, None, lr, **avg)
            losses.append(loss)
    return params, opt, float(np.mean(losses)) if losses else float("nan")


def dataset_loss(spec: NetworkSpec, params, data, chunk: int = 32) -> float:
    """Frame-weighted mean loss of full-episode passes from the zero state."""
    if not isinstance(data, SequenceData):
        data = SequenceData(data, spec, next(iter(params.values())).dtype)
    total, frames = 0.0, 0
    order = np.argsort(data.lengths)
    for c in range(0, len(order), chunk):
        items = [(int(i), 0, int(data.lengths[i])) for i in order[c:c + chunk]]
        X, Y, M = data.batch(items)
        out, _, _ = nn._forward(spec, params, X, None)
        loss, _ = nn.loss_rms(out, Y, M)
        total += loss * M.sum()
        frames += M.sum()
    return float(total / frames)


@dataclass
class TrainResult:
    params: dict
    opt: AdamState
    history: List[tuple] = field(default_factory=list)  # (epoch, mean loss, wall seconds)
    averaged: Optional[dict] = None

    @property
    def final(self) -> dict:
        """The weights to deploy: the moving average when one was kept."""
        return self.params if self.averaged is None else self.averaged


def log_line(epoch: int, cfg: TrainConfig, loss: float, wall: float) -> str:
    return f"{epoch}\t{cfg.scheme}\t{cfg.window}\t{loss:.6f}\t{wall:.2f}"


def train(spec: NetworkSpec, dataset, cfg: TrainConfig, params=None, opt: Optional[AdamState] = None,
          log: Optional[Callable[[str], None]] = print) -> TrainResult:
    """Run ``cfg.epochs`` epochs; a fresh Glorot init is seeded by ``cfg.seed``."""
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = nn.init_params(spec, cfg.seed, dtype)
    else:
        expected = nn.param_shapes(spec)
        got = {k: v.shape for k, v in params.items()}
        if got != {k: tuple(s) for k, s in expected.items()}:
            raise ValueError(f"parameters do not fit {spec.variant}")
        params = {k: v.astype(dtype) for k, v in params.items()}
    opt = opt or AdamState.zeros_like(params)
    data = dataset if isinstance(dataset, SequenceData) else SequenceData(dataset, spec, dtype)
    result = TrainResult(params, opt)
    if cfg.ema is not None:
        result.averaged = {k: v.copy() for k, v in params.items()}
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        result.params, result.opt, loss = train_epoch(spec, result.params, result.opt, data, cfg, rng,
                                                      cfg.lr_at(epoch), result.averaged)
        wall = time.perf_counter() - t0
        result.history.append((epoch, loss, wall))
        if log:
            log(log_line(epoch, cfg, loss, wall))
    return result


def guideline_report(spec: NetworkSpec, total_frames: int, window: int) -> str:
    """Rule of thumb: ~1e5 parameters want at least ~1e3 non-overlapping windows."""
    params = nn.param_count(spec)
    samples = total_frames // window
    wanted = max(1, round(1000 * params / 1e5))
    verdict = "ok" if samples >= wanted else "below guideline"
    return (f"parameters\t{params}\nnon-overlapping windows\t{samples}\n"
            f"suggested minimum\t{wanted}\nverdict\t{verdict}\n")


# ---------------------------------------------------------------- recovery augmentation

def augment_recovery(dataset: Dataset, rooms: dict, rig: Optional[CameraRig] = None,
                     rgb_rig: Optional[CameraRig] = None, cfg: SimConfig = SimConfig()) -> Dataset:
    """Add a left and a right recovery episode for every center episode.

    The yaw-offset views are re-rendered from the stored poses; labels steer
    back toward the original heading. Existing episodes are left untouched.
    """
    rig = rig or CameraRig.around(student_depth_camera())
    rgb_rig = rgb_rig or CameraRig.around(student_rgb_camera())
    added = []
    for e in dataset.episodes:
        if e.camera != "center":
            continue
        if e.poses is None or e.room_id not in rooms:
            raise ValueError(f"episode {e.episode_id}: need poses and room {e.room_id} to re-render")
        room = rooms[e.room_id]
        states = [DroneState(p[:3], p[3]) for p in np.asarray(e.poses, dtype=float)]
        for tag, cam_depth, cam_rgb, sign in (("left", rig.left, rgb_rig.left, -1.0),
                                              ("right", rig.right, rgb_rig.right, +1.0)):
            depth = rgb = None
            if e.depth is not None:
                depth = np.stack([render(room, s, cam_depth, "depth") for s in states]).astype(e.depth.dtype)
            if e.rgb is not None:
                rgb = np.stack([render(room, s, cam_rgb, "rgb") for s in states])
            offset = rig.recovery_offset
            labels = np.stack([recovery_label(c, sign * offset, cfg=cfg) for c in e.expert])
            added.append(Episode(e.room_id, e.poses.copy(), labels.astype(e.expert.dtype), e.applied.copy(),
                                 depth, rgb, camera=tag, provenance="recovery"))
    return dataset.aggregate(added)


# ---------------------------------------------------------------- DAgger

@dataclass
class DaggerRecord:
    iteration: int
    rooms: List[int]
    episodes_added: int
    dataset_size: int
    step0_finetune: float
    step0_fresh: float
    metrics: object = None


def dagger_iterate(spec: NetworkSpec, params, catalog, dataset: Dataset, dcfg: DaggerConfig,
                   tcfg: TrainConfig, iteration: int, eval_rooms=None, expert_cfg=None,
                   sim_cfg: SimConfig = SimConfig(), log=print):
    """One DAgger round: fly the student, label with the expert, aggregate, retrain.

    ``catalog`` is a list of (role, room) pairs. Returns (params, dataset, record).
    """
    from .evaluation import StudentController, TEST_START, evaluate_suite, rollout, trajectory_to_episode
    from .expert import ExpertConfig

    expert_cfg = expert_cfg or ExpertConfig()
    roles = dcfg.roles(iteration)
    rooms = [room for role, room in catalog if role in roles]
    if not rooms:
        raise ValueError(f"no rooms with roles {roles} in the catalog")
    kind = observation_kind(spec)
    student = StudentController(spec, params)
    new = []
    for room in rooms:
        traj = rollout(room, student, TEST_START, sim_cfg, expert_cfg, record=(kind,))
        new.append(trajectory_to_episode(traj, provenance=f"dagger-{iteration}"))
    dataset = dataset.aggregate(new)
    dtype = np.dtype(tcfg.dtype)
    data = SequenceData(dataset, spec, dtype)
    fresh = nn.init_params(spec, tcfg.seed + iteration, dtype)
    warm = {k: v.astype(dtype) for k, v in params.items()}
    step0_fresh = dataset_loss(spec, fresh, data)
    step0_warm = dataset_loss(spec, warm, data)
    start = warm if dcfg.finetune else fresh
    result = train(spec, data, replace(tcfg, seed=tcfg.seed + iteration), params=start, log=log)
    metrics = None
    if eval_rooms is not None:
        metrics = evaluate_suite(StudentController(spec, result.final), eval_rooms, TEST_START, sim_cfg, expert_cfg)
    record = DaggerRecord(iteration, [r.id for r in rooms], len(new), len(dataset),
                          step0_warm, step0_fresh, metrics)
    return result.final, dataset, record
