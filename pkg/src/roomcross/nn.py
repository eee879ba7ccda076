"""From-scratch control networks: dense, ReLU, conv2d and LSTM layers with
exact backward passes, the per-frame RMS loss, Adam, and a finite-difference
gradient checker.

Sequences are batched as (B, T, *step_shape). Dense weights are stored as
(out, in) so that y = W x + b. LSTM gate blocks are stacked in the order
input, forget, output, candidate.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

VARIANTS = ("FC", "FC5", "LSTM", "CNN-FC", "CNN-LSTM", "CNN-FC5")
VARIANT_CODES = {v: i for i, v in enumerate(VARIANTS)}
DEFAULT_HIDDEN = {"FC": (400, 400), "FC5": (100, 100), "LSTM": (100, 100)}
CONV_STAGES = ((8, 5, 2), (16, 5, 2), (32, 3, 2))
N_OUT = 6

ParamSet = Dict[str, np.ndarray]
LstmState = List[Tuple[np.ndarray, np.ndarray]]

# names of deliberately broken backward rules, for checking the checker
_faults: set = set()


@contextlib.contextmanager
def fault_injection(kind: str):
    """Temporarily corrupt one backward rule: 'lstm-forget', 'dense-weight' or 'conv-weight'."""
    _faults.add(kind)
    try:
        yield
    finally:
        _faults.discard(kind)


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    input_shape: tuple
    hidden: tuple = ()
    conv: tuple = CONV_STAGES
    stack: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown network variant {self.variant!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.hidden:
            object.__setattr__(self, "hidden", DEFAULT_HIDDEN[self.head])
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in s) for s in self.conv))
        if self.is_conv and len(self.input_shape) != 3:
            raise ValueError("convolutional variants take (channels, height, width) frames")
        if not self.is_conv and len(self.input_shape) not in (1, 3):
            raise ValueError("dense variants take flat or (channels, height, width) frames")
        if self.is_conv:
            self.conv_shapes()

    @property
    def head(self) -> str:
        return self.variant.replace("CNN-", "")

    @property
    def is_conv(self) -> bool:
        return self.variant.startswith("CNN-")

    @property
    def is_recurrent(self) -> bool:
        return self.head == "LSTM"

    @property
    def frames_per_step(self) -> int:
        return self.stack if self.head == "FC5" else 1

    @property
    def step_shape(self) -> tuple:
        """Shape of one time step's input (stacked variants concatenate on axis 0)."""
        k = self.frames_per_step
        return (self.input_shape[0] * k,) + self.input_shape[1:]

    def conv_shapes(self) -> list:
        """Output shape (filters, height, width) after each conv stage."""
        c, h, w = self.input_shape
        shapes = []
        for filters, k, s in self.conv:
            h, w = (h - k) // s + 1, (w - k) // s + 1
            if h < 1 or w < 1:
                raise ValueError(f"conv stage {filters}x{k}x{k}/{s} leaves no output for {self.input_shape}")
            shapes.append((filters, h, w))
        return shapes

    @property
    def feature_dim(self) -> int:
        """Width of the vector entering the control head."""
        if self.is_conv:
            f, h, w = self.conv_shapes()[-1]
            return f * h * w * self.frames_per_step
        return int(np.prod(self.input_shape)) * self.frames_per_step


# ---------------------------------------------------------------- layers

def dense(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"dense: input {x.shape} incompatible with weight {W.shape} / bias {b.shape}")
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ W.T).reshape(lead + (W.shape[0],)) + b


def dense_grad(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients (dx, dW, db) of y = W x + b over a (N, in) batch."""
    dW = dy.T @ x
    if "dense-weight" in _faults:
        dW = -dW
    return dy @ W, dW, dy.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of (N, C, H, W) with (F, C, k, k) filters."""
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2 or stride < 1:
        raise ValueError(f"conv2d: input {x.shape} incompatible with filters {w.shape}, stride {stride}")
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    if oh < 1 or ow < 1 or h < k or wd < k:
        raise ValueError(f"conv2d: output would be {oh}x{ow}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, F)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_grad(dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1):
    """Gradients (dx, dw, db) of conv2d."""
    k = w.shape[2]
    oh, ow = dy.shape[2], dy.shape[3]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, k, k)
    if "conv-weight" in _faults:
        dw = -dw
    db = dy.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += \
                np.einsum("nfhw,fc->nchw", dy, w[:, :, i, j])
    return dx, dw, db


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(Wx, Wh, b, x, state):
    """One gated update. Returns (h', (h', c'))."""
    h, c = state
    H = Wh.shape[1]
    z = x @ Wx.T + h @ Wh.T + b
    i, f, o = sigmoid(z[..., :H]), sigmoid(z[..., H:2 * H]), sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, (h_new, c_new)


def _lstm_forward(Wx, Wh, b, X, h0, c0):
    B, T, _ = X.shape
    H = Wh.shape[1]
    Zx = (X.reshape(B * T, -1) @ Wx.T).reshape(B, T, 4 * H) + b
    gates = np.empty((B, T, 4 * H), dtype=Zx.dtype)
    hs = np.empty((B, T, H), dtype=Zx.dtype)
    cs = np.empty((B, T, H), dtype=Zx.dtype)
    h, c = h0, c0
    WhT = np.ascontiguousarray(Wh.T)
    for t in range(T):
        z = Zx[:, t] + h @ WhT
        a = gates[:, t]
        a[:, :3 * H] = sigmoid(z[:, :3 * H])
        a[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 3 * H:]
        h = a[:, 2 * H:3 * H] * np.tanh(c)
        hs[:, t], cs[:, t] = h, c
    return hs, cs, gates


def _lstm_backward(Wx, Wh, X, h0, c0, hs, cs, gates, dH, dhT=None, dcT=None, need_dx=True):
    B, T, H = hs.shape
    dZ = np.empty_like(gates)
    dh_next = np.zeros_like(h0) if dhT is None else dhT.copy()
    dc_next = np.zeros_like(c0) if dcT is None else dcT.copy()
    forget_sign = -1.0 if "lstm-forget" in _faults else 1.0
    for t in range(T - 1, -1, -1):
        a = gates[:, t]
        i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        c_prev = cs[:, t - 1] if t > 0 else c0
        tc = np.tanh(cs[:, t])
        dh = dH[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dZ[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = forget_sign * dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz @ Wh
    h_prev = np.concatenate([h0[:, None], hs[:, :-1]], axis=1)
    flat = dZ.reshape(B * T, 4 * H)
    dWx = flat.T @ X.reshape(B * T, -1)
    dWh = flat.T @ h_prev.reshape(B * T, H)
    db = flat.sum(axis=0)
    dX = (flat @ Wx).reshape(B, T, -1) if need_dx else None
    return dX, dWx, dWh, db, (dh_next, dc_next)


# ---------------------------------------------------------------- networks

def param_shapes(spec: NetworkSpec) -> Dict[str, tuple]:
    shapes = {}
    if spec.is_conv:
        c = spec.input_shape[0]
        for n, (filters, k, _) in enumerate(spec.conv):
            shapes[f"conv{n}.weight"] = (filters, c, k, k)
            shapes[f"conv{n}.bias"] = (filters,)
            c = filters
    d = spec.feature_dim
    for n, width in enumerate(spec.hidden):
        if spec.is_recurrent:
            shapes[f"lstm{n}.weight_x"] = (4 * width, d)
            shapes[f"lstm{n}.weight_h"] = (4 * width, width)
            shapes[f"lstm{n}.bias"] = (4 * width,)
        else:
            shapes[f"dense{n}.weight"] = (width, d)
            shapes[f"dense{n}.bias"] = (width,)
        d = width
    shapes["head.weight"] = (N_OUT, d)
    shapes["head.bias"] = (N_OUT,)
    return shapes


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def init_params(spec: NetworkSpec, seed: int, dtype=np.float64) -> ParamSet:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("bias"):
            p = np.zeros(shape)
            if name.startswith("lstm"):
                width = shape[0] // 4
                p[width:2 * width] = 1.0
        else:
            if len(shape) == 4:
                receptive = shape[2] * shape[3]
                fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
            else:
                fan_out, fan_in = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            p = rng.uniform(-limit, limit, size=shape)
        params[name] = p.astype(dtype)
    return params


def zero_state(spec: NetworkSpec, batch: int = 1, dtype=np.float64) -> LstmState:
    if not spec.is_recurrent:
        return []
    return [(np.zeros((batch, w), dtype), np.zeros((batch, w), dtype)) for w in spec.hidden]


def _forward(spec: NetworkSpec, params: ParamSet, x: np.ndarray, state0: Optional[LstmState]):
    B, T = x.shape[:2]
    if x.shape[2:] != spec.step_shape:
        raise ValueError(f"input steps have shape {x.shape[2:]}, network expects {spec.step_shape}")
    cache = {"B": B, "T": T, "conv": [], "layers": []}
    feats = x.reshape((B * T,) + spec.step_shape)
    if spec.is_conv:
        k = spec.frames_per_step
        a = feats.reshape((B * T * k,) + spec.input_shape)
        for n, (_, _, stride) in enumerate(spec.conv):
            z = conv2d(a, params[f"conv{n}.weight"], params[f"conv{n}.bias"], stride)
            cache["conv"].append((a, z))
            a = relu(z)
        feats = a.reshape(B * T, -1)
    feats = feats.reshape(B, T, -1)
    if state0 is None:
        state0 = zero_state(spec, B, feats.dtype)
    final_state = []
    for n in range(len(spec.hidden)):
        if spec.is_recurrent:
            Wx, Wh, b = params[f"lstm{n}.weight_x"], params[f"lstm{n}.weight_h"], params[f"lstm{n}.bias"]
            h0, c0 = state0[n]
            hs, cs, gates = _lstm_forward(Wx, Wh, b, feats, h0, c0)
            cache["layers"].append((feats, h0, c0, hs, cs, gates))
            final_state.append((hs[:, -1], cs[:, -1]))
            feats = hs
        else:
            z = dense(feats, params[f"dense{n}.weight"], params[f"dense{n}.bias"])
            cache["layers"].append((feats, z))
            feats = relu(z)
    cache["head_in"] = feats
    out = dense(feats, params["head.weight"], params["head.bias"])
    return out, final_state, cache


def _backward(spec: NetworkSpec, params: ParamSet, cache, d_out: np.ndarray, d_state=None):
    B, T = cache["B"], cache["T"]
    grads = {}
    feats = cache["head_in"]
    dx, grads["head.weight"], grads["head.bias"] = dense_grad(
        d_out.reshape(B * T, -1), feats.reshape(B * T, -1), params["head.weight"])
    dx = dx.reshape(B, T, -1)
    d_state0 = [None] * len(spec.hidden)
    for n in range(len(spec.hidden) - 1, -1, -1):
        if spec.is_recurrent:
            X, h0, c0, hs, cs, gates = cache["layers"][n]
            dhT, dcT = d_state[n] if d_state else (None, None)
            dx, dWx, dWh, db, d_state0[n] = _lstm_backward(
                params[f"lstm{n}.weight_x"], params[f"lstm{n}.weight_h"], X, h0, c0, hs, cs, gates, dx, dhT, dcT,
                need_dx=n > 0 or spec.is_conv)
            grads[f"lstm{n}.weight_x"], grads[f"lstm{n}.weight_h"], grads[f"lstm{n}.bias"] = dWx, dWh, db
        else:
            X, z = cache["layers"][n]
            dz = relu_grad(dx, z)
            dxf, grads[f"dense{n}.weight"], grads[f"dense{n}.bias"] = dense_grad(
                dz.reshape(B * T, -1), X.reshape(B * T, -1), params[f"dense{n}.weight"])
            dx = dxf.reshape(B, T, -1)
    if spec.is_conv:
        da = dx.reshape((len(cache["conv"][-1][1]),) + cache["conv"][-1][1].shape[1:])
        for n in range(len(spec.conv) - 1, -1, -1):
            a, z = cache["conv"][n]
            dz = relu_grad(da, z)
            da, grads[f"conv{n}.weight"], grads[f"conv{n}.bias"] = conv2d_grad(
                dz, a, params[f"conv{n}.weight"], spec.conv[n][2])
    return {name: grads[name] for name in params}, d_state0


def _batched(inputs: np.ndarray, spec: NetworkSpec):
    inputs = np.asarray(inputs)
    single = inputs.ndim == len(spec.step_shape) + 1
    return (inputs[None] if single else inputs), single


def forward_window(spec: NetworkSpec, params: ParamSet, inputs: np.ndarray,
                   state0: Optional[LstmState] = None):
    """Run a window of steps; returns (outputs (..., T, 6), final state).

    `inputs` is (T, *step) or (B, T, *step); stacked variants expect frames
    already stacked (see data.stack_frames).
    """
    x, single = _batched(inputs, spec)
    out, state, _ = _forward(spec, params, x, state0)
    return (out[0] if single else out), state


def states_after(cache, steps: np.ndarray) -> LstmState:
    """Recurrent state of each batch row after consuming `steps[b]` (>= 1) inputs."""
    rows = np.arange(cache["B"])
    idx = np.asarray(steps) - 1
    return [(hs[rows, idx], cs[rows, idx]) for _, _, _, hs, cs, _ in cache["layers"]]


def loss_rms(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None, eps: float = 1e-8):
    """Mean over frames of sqrt(eps + mean squared channel error); returns (loss, dloss/dpred)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    per_frame = np.sqrt(eps + np.mean(diff * diff, axis=-1))
    if mask is None:
        mask = np.ones(per_frame.shape, dtype=pred.dtype)
    count = mask.sum()
    loss = float((per_frame * mask).sum() / count)
    grad = (mask / (count * per_frame * diff.shape[-1]))[..., None] * diff
    return loss, grad.astype(pred.dtype, copy=False)


def loss_and_grad(spec: NetworkSpec, params: ParamSet, inputs, targets, state0=None, mask=None):
    """Forward, loss and full backward over a batch of windows.

    Returns (loss, grads, cache); the cache also exposes per-step states
    through `states_after`.
    """
    x, single = _batched(inputs, spec)
    y = targets[None] if single else targets
    m = None if mask is None else (mask[None] if single else mask)
    out, _, cache = _forward(spec, params, x, state0)
    loss, d_out = loss_rms(out, y, m)
    grads, _ = _backward(spec, params, cache, d_out)
    return loss, grads, cache


def window_loss(spec, params, inputs, targets, state0=None, mask=None) -> float:
    x, single = _batched(inputs, spec)
    y = targets[None] if single else targets
    m = None if mask is None else (mask[None] if single else mask)
    out, _, _ = _forward(spec, params, x, state0)
    return loss_rms(out, y, m)[0]


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_update(params: ParamSet, grads: ParamSet, opt: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns new (params, opt)."""
    if not opt.m:
        opt = AdamState.zeros_like(params)
    t = opt.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    scale, root_c2 = lr / c1, math.sqrt(c2)
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = opt.m[k] * beta1
        m += (1 - beta1) * g
        v = opt.v[k] * beta2
        v += (1 - beta2) * (g * g)
        denom = np.sqrt(v)
        denom /= root_c2
        denom += eps
        new_params[k] = p - scale * m / denom
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t)


# ---------------------------------------------------------------- gradient check

def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); the floor keeps vanishing gradients from dominating."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class GradCheck(NamedTuple):
    error: float
    worst: Optional[str]
    skipped: int


def _loss_and_pattern(spec, params, inputs, targets, state0, mask):
    x, single = _batched(inputs, spec)
    y = targets[None] if single else targets
    m = None if mask is None else (mask[None] if single else mask)
    out, _, cache = _forward(spec, params, x, state0)
    zs = [z for _, z in cache["conv"]] + [layer[-1] for layer in cache["layers"] if len(layer) == 2]
    return loss_rms(out, y, m)[0], [z > 0 for z in zs]


def grad_check(spec: NetworkSpec, params: ParamSet, inputs, targets, state0=None, mask=None,
               eps: float = 1e-5) -> GradCheck:
    """Max relative error of the analytic gradient against central differences.

    An entry whose +eps and -eps passes switch any ReLU on or off sits on a
    kink, where the central difference is not a derivative; such entries are
    left out and counted in ``skipped``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    _, analytic, _ = loss_and_grad(spec, params, inputs, targets, state0, mask)
    worst, worst_name, skipped = 0.0, None, 0
    for name, p in params.items():
        numeric = np.zeros_like(p)
        valid = np.ones(p.size, dtype=bool)
        flat, nflat = p.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up, up_pattern = _loss_and_pattern(spec, params, inputs, targets, state0, mask)
            flat[i] = keep - eps
            down, down_pattern = _loss_and_pattern(spec, params, inputs, targets, state0, mask)
            flat[i] = keep
            nflat[i] = (up - down) / (2 * eps)
            valid[i] = all(np.array_equal(a, b) for a, b in zip(up_pattern, down_pattern))
        skipped += int((~valid).sum())
        errors = relative_error(analytic[name].reshape(-1), nflat)[valid]
        err = float(errors.max()) if errors.size else 0.0
        if err > worst or worst_name is None:
            worst, worst_name = err, name
    return GradCheck(worst, worst_name, skipped)
