"""Single-layer LSTM regressor in numpy with exact BPTT gradients.

Gate blocks are stacked in the order input, forget, candidate, output, so
``w_x`` has shape ``(4H, F)``, ``w_h`` ``(4H, H)`` and ``b`` ``(4H,)``.
The prediction is an affine head on the final hidden state.

``log_a`` lives here so that one object holds every learnable value, but
the recurrence itself never reads it; its gradient is produced by the
caller that feeds the soil-backscatter channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

PARAM_NAMES = ("w_x", "w_h", "b", "w_head", "b_head", "log_a")


def sigmoid(z):
    # split by sign to stay finite for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmParams:
    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray
    w_head: np.ndarray
    b_head: np.ndarray
    log_a: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        H = self.hidden
        if self.w_x.ndim != 2 or self.w_x.shape[0] != 4 * H:
            raise DimensionMismatch(f"w_x must be (4H, F), got {self.w_x.shape} with H={H}")
        if self.w_h.shape != (4 * H, H):
            raise DimensionMismatch(f"w_h must be {(4 * H, H)}, got {self.w_h.shape}")
        if self.b.shape != (4 * H,):
            raise DimensionMismatch(f"b must be {(4 * H,)}, got {self.b.shape}")
        if self.b_head.shape != () or self.log_a.shape != ():
            raise DimensionMismatch("b_head and log_a must be scalars")

    @property
    def hidden(self) -> int:
        return self.w_head.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.w_x.shape[1]

    @property
    def a(self) -> float:
        return math.exp(float(self.log_a))

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "LstmParams":
        return LstmParams(**{k: v.copy() for k, v in self.arrays().items()})

    def with_arrays(self, arrays: dict) -> "LstmParams":
        d = self.arrays()
        d.update(arrays)
        return LstmParams(**d)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.arrays().items()}

    @classmethod
    def from_json(cls, d: dict) -> "LstmParams":
        return cls(**{k: np.asarray(d[k], dtype=float) for k in PARAM_NAMES})

    @classmethod
    def zeros(cls, n_inputs: int, hidden: int, log_a: float = 0.0) -> "LstmParams":
        return cls(
            np.zeros((4 * hidden, n_inputs)), np.zeros((4 * hidden, hidden)),
            np.zeros(4 * hidden), np.zeros(hidden), np.float64(0.0), np.float64(log_a),
        )


def init_params(n_inputs: int, hidden: int, seed: int = 0, a0: float = 0.05,
                forget_bias: float = 1.0) -> LstmParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias ``forget_bias``."""
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(hidden)
    u = lambda *shape: rng.uniform(-k, k, shape)
    b = u(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return LstmParams(
        w_x=u(4 * hidden, n_inputs), w_h=u(4 * hidden, hidden), b=b,
        w_head=u(hidden), b_head=np.float64(0.0), log_a=np.float64(math.log(a0)),
    )


def lstm_forward(x: np.ndarray, params: LstmParams):
    """Run the recurrence over ``x`` of shape ``(B, n, F)``.

    Returns ``(pred, cache)`` with ``pred`` of shape ``(B,)``.  Initial
    hidden and cell states are zero.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[2] != params.n_inputs:
        raise DimensionMismatch(f"expected input (B, n, {params.n_inputs}), got {x.shape}")
    B, n, _ = x.shape
    if n < 1:
        raise DimensionMismatch("window length must be >= 1")
    H = params.hidden
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    xw = x @ params.w_x.T + params.b  # (B, n, 4H)
    hs, cs, gates = [h], [c], []
    for t in range(n):
        z = xw[:, t] + h @ params.w_h.T
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates.append((i, f, g, o))
        hs.append(h)
        cs.append(c)
    pred = h @ params.w_head + params.b_head
    return pred, {"x": x, "h": hs, "c": cs, "gates": gates}


def lstm_backward(cache: dict, params: LstmParams, dpred: np.ndarray) -> dict:
    """Backpropagate ``dpred = dL/dpred`` through time.

    Returns gradients for every array in :data:`PARAM_NAMES` (``log_a``
    is zero here) plus ``"inputs"``, the gradient w.r.t. ``x``.
    """
    x = cache["x"]
    B, n, F = x.shape
    H = params.hidden
    dpred = np.asarray(dpred, dtype=float)
    if dpred.shape != (B,):
        raise DimensionMismatch(f"upstream gradient must have shape {(B,)}, got {dpred.shape}")
    hs, cs, gates = cache["h"], cache["c"], cache["gates"]

    g_head = hs[-1].T @ dpred
    g_bhead = dpred.sum()
    dh = np.outer(dpred, params.w_head)
    dc = np.zeros((B, H))
    dz_all = np.empty((B, n, 4 * H))
    g_wh = np.zeros_like(params.w_h)
    for t in range(n - 1, -1, -1):
        i, f, g, o = gates[t]
        tc = np.tanh(cs[t + 1])
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * cs[t]
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        dz_all[:, t] = dz
        g_wh += dz.T @ hs[t]
        dh = dz @ params.w_h
        dc = dc * f
    dz_flat = dz_all.reshape(B * n, 4 * H)
    return {
        "w_x": dz_flat.T @ x.reshape(B * n, F),
        "w_h": g_wh,
        "b": dz_flat.sum(axis=0),
        "w_head": g_head,
        "b_head": np.float64(g_bhead),
        "log_a": np.float64(0.0),
        "inputs": dz_all @ params.w_x,
    }


# --------------------------------------------------------------------------
# gradient oracle


@dataclass
class GradientReport:
    max_rel_error: float
    per_parameter_errors: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)


def central_difference(f, theta: float, h: float) -> float:
    if not h > 0:
        raise ValueError("step h must be positive")
    return (f(theta + h) - f(theta - h)) / (2.0 * h)


def relative_error(analytic, numeric, abs_floor: float = 1e-12):
    """Elementwise ``|a - n| / max(|a|, |n|)``; absolute error below ``abs_floor``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.where(scale < abs_floor, diff, diff / np.where(scale < abs_floor, 1.0, scale))


def finite_difference_gradients(params: LstmParams, loss_fn, h: float = 1e-5,
                                analytic: dict | None = None) -> GradientReport:
    """Central-difference gradient of ``loss_fn(params)`` for every scalar.

    If ``analytic`` is given, the report carries the per-array maximum
    relative error against it.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    numeric = {}
    for name in PARAM_NAMES:
        base = getattr(params, name)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            def f(v, name=name, idx=idx):
                arr = base.copy()
                arr[idx] = v
                return loss_fn(params.with_arrays({name: arr}))
            grad[idx] = central_difference(f, float(base[idx]), h)
        numeric[name] = grad
    errors = {}
    if analytic is not None:
        for name in PARAM_NAMES:
            e = relative_error(analytic[name], numeric[name])
            errors[name] = float(e.max()) if e.size else 0.0
    return GradientReport(max(errors.values(), default=0.0), errors, numeric)


# --------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: LstmParams) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.arrays().items()},
                   {k: np.zeros_like(v) for k, v in params.arrays().items()}, 0)

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()}, self.t)

    def to_json(self) -> dict:
        return {"t": self.t, "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "AdamState":
        arr = lambda m: {k: np.asarray(v, dtype=float) for k, v in m.items()}
        return cls(arr(d["m"]), arr(d["v"]), int(d["t"]))


def optimizer_step(params: LstmParams, grads: dict, state: AdamState,
                   config: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.t + 1
    new, m, v = {}, {}, {}
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in params.arrays().items():
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise DimensionMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m[name] = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v[name] = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        step = config.learning_rate * (m[name] / c1) / (np.sqrt(v[name] / c2) + config.eps)
        new[name] = p - step
    return LstmParams(**new), AdamState(m, v, t)


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(grads[k]))) for k in PARAM_NAMES))


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale all gradients together so their joint L2 norm is <= ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: (v * scale if k in PARAM_NAMES else v) for k, v in grads.items()}
    return grads, norm
