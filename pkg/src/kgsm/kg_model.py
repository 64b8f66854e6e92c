"""Knowledge-guided LSTM: vegetation-corrected backscatter feeds the recurrence.

Each time step's radar observation is stripped of its vegetation
contribution using the current ``A = exp(log_a)``, converted to dB,
standardized with frozen training statistics and concatenated with the
auxiliary features.  The loss is the soil-moisture MSE plus a penalty on
predictions outside [0, 1].  Gradients flow through the isolation step
into ``log_a``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, DimensionMismatch, EmptyBatch, NonFiniteLoss
from .features import (
    AUX_FEATURES,
    SequenceBatch,
    Standardization,
    build_dataset,
    build_windows,
    compute_standardization,
    stats_from_values,
)
from .lstm import (
    AdamConfig,
    AdamState,
    LstmParams,
    clip_by_global_norm,
    init_params,
    lstm_backward,
    lstm_forward,
    optimizer_step,
)
from .wcm import DEFAULT_CLAMP_FLOOR, GRASSLAND_B, WcmParams, isolate_soil_backscatter_clamped, vwc_from_ndvi

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "kgsm-checkpoint"
CHECKPOINT_VERSION = 1
_DB_PER_NEPER = 10.0 / math.log(10.0)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    clamp_floor: float = DEFAULT_CLAMP_FLOOR

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.clamp_floor > 0:
            raise ValueError(f"clamp_floor must be > 0, got {self.clamp_floor}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    soil_mse: float
    boundary: float
    clamped_fraction: float


def _check_pair(pred, obs=None):
    pred = np.asarray(pred, dtype=float)
    if pred.size == 0:
        raise EmptyBatch("empty batch")
    if obs is not None:
        obs = np.asarray(obs, dtype=float)
        if obs.shape != pred.shape:
            raise DimensionMismatch(f"pred {pred.shape} and obs {obs.shape} differ")
    return pred, obs


def baseline_mse_loss(pred, obs) -> float:
    """Plain mean squared error between predicted and observed SM."""
    pred, obs = _check_pair(pred, obs)
    return float(np.mean((pred - obs) ** 2))


def boundary_loss(pred, lam: float) -> float:
    """``lam`` times the mean distance of predictions outside [0, 1]."""
    if not lam >= 0:
        raise ValueError("lambda must be >= 0")
    pred, _ = _check_pair(pred)
    excess = np.maximum(0.0, -pred) + np.maximum(0.0, pred - 1.0)
    return float(lam * np.mean(excess))


def soil_channel(raw_obs: np.ndarray, log_a: float, b: float = GRASSLAND_B,
                 floor: float = DEFAULT_CLAMP_FLOOR):
    """Vegetation-corrected soil backscatter for every step of a window.

    ``raw_obs[..., :]`` holds (sigma_obs dB, vwc, theta rad).  Returns
    ``(sigma_soil_db, d sigma_soil / d log_a, clamped)``.  The derivative
    is zero where the residual hit the floor.
    """
    obs_db, vwc, theta = raw_obs[..., 0], raw_obs[..., 1], raw_obs[..., 2]
    a = math.exp(log_a)
    p = WcmParams(a=a, b=b)
    soil_db, clamped = isolate_soil_backscatter_clamped(obs_db, vwc, p, theta=theta, floor=floor)
    veg = a * np.cos(theta) * (1.0 - np.exp(-2.0 * b * vwc / np.cos(theta)))
    resid = np.power(10.0, obs_db / 10.0) - veg
    dsoil = np.where(clamped, 0.0, -_DB_PER_NEPER * veg / np.where(clamped, 1.0, resid))
    return soil_db, dsoil, clamped


def model_inputs(batch: SequenceBatch, params: LstmParams, soil_stats: Standardization,
                 b: float = GRASSLAND_B, floor: float = DEFAULT_CLAMP_FLOOR):
    soil_db, dsoil, clamped = soil_channel(batch.raw_obs, float(params.log_a), b, floor)
    z = (soil_db - soil_stats.mean[0]) / soil_stats.std[0]
    x = np.concatenate([z[..., None], batch.features], axis=2)
    return x, dsoil / soil_stats.std[0], clamped


def _clamped_fraction(clamped, pad_mask) -> float:
    live = ~pad_mask
    n = int(live.sum())
    return float((clamped & live).sum()) / n if n else 0.0


def kg_loss(batch: SequenceBatch, params: LstmParams, config: LossConfig,
            soil_stats: Standardization, b: float = GRASSLAND_B, with_grad: bool = True):
    """Dual loss and its gradient for one batch.

    Returns ``(breakdown, grads, pred)``; ``grads`` is None when
    ``with_grad`` is False.
    """
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    y = batch.targets
    if np.any(np.isnan(y)):
        raise ValueError("batch contains unlabelled windows")
    if batch.features.shape[2] + 1 != params.n_inputs:
        raise DimensionMismatch(
            f"model expects {params.n_inputs - 1} auxiliary features, batch has {batch.features.shape[2]}"
        )
    x, dz_dloga, clamped = model_inputs(batch, params, soil_stats, b, config.clamp_floor)
    pred, cache = lstm_forward(x, params)
    soil = baseline_mse_loss(pred, y)
    bound = boundary_loss(pred, config.lam)
    out = LossBreakdown(soil + bound, soil, bound, _clamped_fraction(clamped, batch.pad_mask))
    if not with_grad:
        return out, None, pred
    N = pred.shape[0]
    dpred = 2.0 * (pred - y) / N + config.lam / N * ((pred > 1.0).astype(float) - (pred < 0.0))
    grads = lstm_backward(cache, params, dpred)
    grads["log_a"] = np.float64(np.sum(grads["inputs"][..., 0] * dz_dloga))
    del grads["inputs"]
    return out, grads, pred


def kg_predict(batch: SequenceBatch, params: LstmParams, soil_stats: Standardization,
               b: float = GRASSLAND_B, floor: float = DEFAULT_CLAMP_FLOOR) -> np.ndarray:
    if len(batch) == 0:
        return np.zeros(0)
    x, _, _ = model_inputs(batch, params, soil_stats, b, floor)
    return lstm_forward(x, params)[0]


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    window: int = 8
    hidden: int = 32
    lam: float = 1.0
    learning_rate: float = 5e-3
    epochs: int = 500
    patience: int = 20
    batch_size: int = 32
    clamp_floor: float = DEFAULT_CLAMP_FLOOR
    clip_norm: float = 5.0
    a0: float = 0.05
    b: float = GRASSLAND_B
    vwc_coeff: float = 1.0
    aux_features: tuple = AUX_FEATURES
    seed: int = 0

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.clamp_floor)


@dataclass
class LstmModel:
    """Everything needed to reproduce predictions."""

    params: LstmParams
    aux_stats: Standardization
    soil_stats: Standardization
    config: TrainConfig
    optimizer: AdamState | None = None

    @property
    def a(self) -> float:
        return self.params.a

    def windows(self, series, labelled_only=True) -> SequenceBatch:
        return build_windows(series, self.config.window, self.aux_stats, self.config.vwc_coeff, labelled_only)

    def predict_batch(self, batch: SequenceBatch) -> np.ndarray:
        return kg_predict(batch, self.params, self.soil_stats, self.config.b, self.config.clamp_floor)

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        cfg["aux_features"] = list(cfg["aux_features"])
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": self.params.to_json(),
            "optimizer": self.optimizer.to_json() if self.optimizer else None,
            "aux_stats": self.aux_stats.to_json(),
            "soil_stats": self.soil_stats.to_json(),
            "config": cfg,
            "loss_config": asdict(self.config.loss),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LstmModel":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format {d.get('format')!r} version {d.get('version')!r} "
                f"is not {CHECKPOINT_FORMAT!r} version {CHECKPOINT_VERSION}"
            )
        cfg = dict(d["config"])
        cfg["aux_features"] = tuple(cfg["aux_features"])
        return cls(
            params=LstmParams.from_json(d["params"]),
            aux_stats=Standardization.from_json(d["aux_stats"]),
            soil_stats=Standardization.from_json(d["soil_stats"]),
            config=TrainConfig(**cfg),
            optimizer=AdamState.from_json(d["optimizer"]) if d.get("optimizer") else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LstmModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainResult:
    model: LstmModel
    log: list = field(default_factory=list)
    best_epoch: int = 0
    final_batch: SequenceBatch | None = None
    final_predictions: np.ndarray | None = None


def soil_standardization(sites, log_a: float, b: float, vwc_coeff: float,
                         floor: float = DEFAULT_CLAMP_FLOOR) -> Standardization:
    """Statistics of the isolated soil backscatter over every acquisition."""
    vals = []
    for s in sites:
        raw = np.column_stack([s.sigma_obs_db, vwc_from_ndvi(s.ndvi, vwc_coeff), np.radians(s.incidence_deg)])
        vals.append(soil_channel(raw, log_a, b, floor)[0])
    return stats_from_values(("sigma_soil",), np.concatenate(vals), [s.site_id for s in sites])


def train(train_batch: SequenceBatch, val_batch: SequenceBatch | None, config: TrainConfig,
          aux_stats: Standardization, soil_stats: Standardization,
          init: LstmParams | None = None) -> TrainResult:
    """Minibatch Adam on the dual loss with early stopping.

    Early stopping watches the validation soil MSE (the training batch
    stands in when ``val_batch`` is empty).  Epoch 0 in the log is the
    evaluation before any update.  Returns the best-validation model.
    """
    if len(train_batch) == 0:
        raise EmptyBatch("no training windows")
    if val_batch is None or len(val_batch) == 0:
        val_batch = train_batch
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else init_params(
        1 + len(aux_stats.names), config.hidden, seed=config.seed, a0=config.a0
    )
    state = AdamState.zeros_like(params)
    adam = AdamConfig(learning_rate=config.learning_rate)
    lcfg = config.loss

    def evaluate(p):
        return kg_loss(val_batch, p, lcfg, soil_stats, config.b, with_grad=False)[0]

    v0 = evaluate(params)
    history = [{
        "epoch": 0, "train_total": None, "train_soil": None, "train_boundary": None,
        "val_soil_mse": v0.soil_mse, "clamped_fraction": v0.clamped_fraction, "a": params.a,
    }]
    best, best_state, best_val, best_epoch, wait = params.copy(), state.copy(), v0.soil_mse, 0, 0
    N = len(train_batch)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(N)
        sums = np.zeros(3)
        clamped = 0.0
        for start in range(0, N, config.batch_size):
            idx = perm[start:start + config.batch_size]
            mb = train_batch.subset(idx)
            parts, grads, _ = kg_loss(mb, params, lcfg, soil_stats, config.b)
            if not math.isfinite(parts.total):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(sites {sorted(set(mb.site_ids))}, a={params.a:.4g})"
                )
            grads, _ = clip_by_global_norm(grads, config.clip_norm)
            params, state = optimizer_step(params, grads, state, adam)
            if not np.isfinite(params.log_a):
                raise NonFiniteLoss(f"log_a became non-finite at epoch {epoch}")
            sums += len(idx) * np.array([parts.total, parts.soil_mse, parts.boundary])
            clamped += len(idx) * parts.clamped_fraction
        v = evaluate(params)
        history.append({
            "epoch": epoch,
            "train_total": sums[0] / N, "train_soil": sums[1] / N, "train_boundary": sums[2] / N,
            "val_soil_mse": v.soil_mse, "clamped_fraction": clamped / N, "a": params.a,
        })
        if v.soil_mse < best_val:
            best, best_state, best_val, best_epoch, wait = params.copy(), state.copy(), v.soil_mse, epoch, 0
        else:
            wait += 1
            if wait >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    model = LstmModel(best, aux_stats, soil_stats, config, best_state)
    return TrainResult(model, history, best_epoch, train_batch, model.predict_batch(train_batch))


def fit(train_sites, val_sites, config: TrainConfig = TrainConfig(), a_init: float | None = None) -> TrainResult:
    """Standardize on ``train_sites``, build windows and train.

    ``a_init`` (e.g. a calibrated WCM A) overrides ``config.a0``.
    """
    train_sites = list(train_sites)
    val_sites = list(val_sites or [])
    if a_init is not None:
        config = TrainConfig(**{**asdict(config), "a0": float(a_init)})
    aux = compute_standardization(train_sites, config.aux_features)
    soil = soil_standardization(train_sites, math.log(config.a0), config.b, config.vwc_coeff, config.clamp_floor)
    tb = build_dataset(train_sites, config.window, aux, config.vwc_coeff)
    vb = build_dataset(val_sites, config.window, aux, config.vwc_coeff) if val_sites else None
    return train(tb, vb, config, aux, soil)


@dataclass
class Prediction:
    site_id: str
    timestamps: np.ndarray
    sm_pred: np.ndarray
    padded: np.ndarray


def predict(model: LstmModel, series) -> Prediction:
    """Soil moisture at every acquisition of ``series``.

    Early acquisitions whose window reaches before the start of the
    series are computed on a left-padded window and flagged.
    """
    batch = model.windows(series, labelled_only=False)
    return Prediction(series.site_id, batch.timestamps, model.predict_batch(batch), batch.padded)
