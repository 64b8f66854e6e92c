"""Metrics, spatial cross-validation of WCM vs. the knowledge-guided LSTM, and export."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .calibrate import CalibrationProblem, NelderMeadConfig, calibrate_wcm
from .errors import DegenerateInput, DimensionMismatch, EmptyInput, KgsmError
from .kg_model import TrainConfig, fit
from .wcm import GRASSLAND_B, vwc_from_ndvi, wcm_invert_sm_clamped

log = logging.getLogger(__name__)

METHODS = ("wcm", "kg_lstm")
REPORT_FORMAT = "kgsm-report"
REPORT_VERSION = 1
SUMMARY_COLUMNS = ("fold", "method", "n", "rmse", "r", "bias", "fitted_a")


def _pair(pred, obs):
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape:
        raise DimensionMismatch(f"pred has {pred.size} values, obs has {obs.size}")
    if pred.size == 0:
        raise EmptyInput("no values")
    return pred, obs


def rmse(pred, obs) -> float:
    pred, obs = _pair(pred, obs)
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


def bias(pred, obs) -> float:
    pred, obs = _pair(pred, obs)
    return float(np.mean(pred - obs))


def pearson_r(pred, obs) -> float:
    """Sample Pearson correlation.

    Raises :class:`DegenerateInput` for fewer than two values or a
    constant array; correlation is undefined there, not zero.
    """
    pred, obs = _pair(pred, obs)
    if pred.size < 2:
        raise DegenerateInput("need at least two values")
    # test the range, not the centred values: the mean of a constant
    # array need not equal its elements in floating point
    if np.ptp(pred) == 0 or np.ptp(obs) == 0:
        raise DegenerateInput("constant input")
    dp = pred - pred.mean()
    do = obs - obs.mean()
    sp, so = np.sqrt(np.dot(dp, dp)), np.sqrt(np.dot(do, do))
    return float(np.clip(np.dot(dp, do) / (sp * so), -1.0, 1.0))


@dataclass(frozen=True)
class MetricSet:
    rmse: float
    pearson_r: float | None
    bias: float
    n: int

    @classmethod
    def of(cls, pred, obs) -> "MetricSet":
        pred, obs = _pair(pred, obs)
        try:
            r = pearson_r(pred, obs)
        except DegenerateInput:
            r = None
        return cls(rmse(pred, obs), r, bias(pred, obs), int(pred.size))

    def to_json(self) -> dict:
        return {"rmse": self.rmse, "r": self.pearson_r, "bias": self.bias, "n": self.n}


# --------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CVConfig:
    training: TrainConfig = TrainConfig()
    calibration: NelderMeadConfig = NelderMeadConfig()
    b: float = GRASSLAND_B
    vwc_coeff: float = 1.0
    val_fraction: float = 0.2
    warm_start_a: bool = True
    seed: int = 0
    threads: int | None = None


@dataclass
class Pairs:
    predicted: np.ndarray
    observed: np.ndarray
    site_ids: np.ndarray
    timestamps: np.ndarray


@dataclass
class FoldResult:
    fold: int
    train_sites: list
    val_sites: list
    test_sites: list
    metrics: dict  # method -> MetricSet
    fitted_a: dict  # method -> float
    pairs: dict  # method -> Pairs
    calibration: dict
    provenance: dict
    train_log: list = field(default_factory=list)


@dataclass
class EvalReport:
    fold_count: int
    seed: int
    per_fold: list
    aggregate: dict  # method -> MetricSet

    def to_json(self) -> dict:
        methods = {}
        for m in METHODS:
            methods[m] = {
                "folds": {
                    str(fr.fold): {**fr.metrics[m].to_json(), "fitted_a": fr.fitted_a[m]}
                    for fr in self.per_fold
                },
                "pooled": self.aggregate[m].to_json(),
            }
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "fold_count": self.fold_count,
            "seed": self.seed,
            "methods": methods,
            "folds": {
                str(fr.fold): {
                    "train_sites": fr.train_sites,
                    "val_sites": fr.val_sites,
                    "test_sites": fr.test_sites,
                    "provenance": fr.provenance,
                    "calibration": fr.calibration,
                    "kg_epochs": len(fr.train_log) - 1,
                }
                for fr in self.per_fold
            },
        }


def split_validation(train_ids, fraction: float, seed: int, fold: int):
    """Hold out whole sites from the training fold for early stopping."""
    ids = sorted(train_ids)
    if len(ids) < 2 or fraction <= 0:
        return ids, []
    n_val = min(len(ids) - 1, max(1, int(round(fraction * len(ids)))))
    perm = np.random.default_rng([seed, fold]).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    return [s for s in ids if s not in set(val)], val


def _wcm_pairs(sites, params, vwc_coeff):
    pred, obs, sid, ts = [], [], [], []
    for s in sites:
        have = s.labelled
        sm, _ = wcm_invert_sm_clamped(
            s.sigma_obs_db[have], vwc_from_ndvi(s.ndvi[have], vwc_coeff), params,
            theta=np.radians(s.incidence_deg[have]),
        )
        pred.append(sm)
        obs.append(s.sm_ref[have])
        sid.append(np.array([s.site_id] * int(have.sum()), dtype=object))
        ts.append(s.timestamps[have])
    return Pairs(*(np.concatenate(v) for v in (pred, obs, sid, ts)))


def _assert_disjoint(name, used, held_out):
    leaked = set(used) & set(held_out)
    if leaked:
        raise AssertionError(f"{name} used held-out sites {sorted(leaked)}")


def run_fold(sites_by_id: dict, folds, fold: int, config: CVConfig) -> FoldResult:
    test_ids = sorted(folds.test_sites(fold))
    train_ids = sorted(folds.train_sites(fold))
    fit_ids, val_ids = split_validation(train_ids, config.val_fraction, config.seed, fold)
    pick = lambda ids: [sites_by_id[i] for i in ids]

    try:
        problem = CalibrationProblem.from_sites(pick(train_ids), b=config.b, vwc_coeff=config.vwc_coeff)
        cal = calibrate_wcm(problem, config.calibration)
        wcm_pairs = _wcm_pairs(pick(test_ids), cal.params, config.vwc_coeff)

        tcfg = replace(config.training, b=config.b, vwc_coeff=config.vwc_coeff)
        res = fit(pick(fit_ids), pick(val_ids), tcfg,
                  a_init=cal.params.a if config.warm_start_a else None)
    except KgsmError as exc:
        raise type(exc)(f"fold {fold}: {exc}") from exc

    model = res.model
    kg_pred, kg_obs, kg_sid, kg_ts = [], [], [], []
    for s in pick(test_ids):
        b = model.windows(s)
        kg_pred.append(model.predict_batch(b))
        kg_obs.append(b.targets)
        kg_sid.append(b.site_ids)
        kg_ts.append(b.timestamps)
    kg_pairs = Pairs(*(np.concatenate(v) for v in (kg_pred, kg_obs, kg_sid, kg_ts)))

    provenance = {
        "calibration_sites": train_ids,
        "aux_stats_sites": sorted(model.aux_stats.site_ids),
        "soil_stats_sites": sorted(model.soil_stats.site_ids),
        "early_stopping_sites": val_ids,
    }
    for name, used in provenance.items():
        _assert_disjoint(name, used, test_ids)

    pairs = {"wcm": wcm_pairs, "kg_lstm": kg_pairs}
    return FoldResult(
        fold=fold,
        train_sites=fit_ids,
        val_sites=val_ids,
        test_sites=test_ids,
        metrics={m: MetricSet.of(p.predicted, p.observed) for m, p in pairs.items()},
        fitted_a={"wcm": cal.params.a, "kg_lstm": model.a},
        pairs=pairs,
        calibration=cal.to_json(),
        provenance=provenance,
        train_log=res.log,
    )


def run_cross_validation(sites, folds, config: CVConfig = CVConfig()) -> EvalReport:
    """Calibrate the WCM and train the KG-LSTM on each training fold, score on its test fold.

    Folds run on up to ``config.threads`` threads; results are merged in
    fold order so the report does not depend on scheduling.
    """
    sites_by_id = {s.site_id: s for s in sites}
    if set(sites_by_id) != set(folds.site_to_fold):
        raise ValueError("fold assignment does not match the site list")
    threads = config.threads or os.cpu_count() or 1
    fold_ids = list(range(folds.fold_count))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(fold_ids))) as ex:
            results = list(ex.map(lambda f: run_fold(sites_by_id, folds, f, config), fold_ids))
    else:
        results = [run_fold(sites_by_id, folds, f, config) for f in fold_ids]

    aggregate = {}
    for m in METHODS:
        pred = np.concatenate([r.pairs[m].predicted for r in results])
        obs = np.concatenate([r.pairs[m].observed for r in results])
        aggregate[m] = MetricSet.of(pred, obs)
    return EvalReport(folds.fold_count, config.seed, results, aggregate)


# --------------------------------------------------------------------------
# export


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def summary_table(report: EvalReport) -> str:
    rows = [SUMMARY_COLUMNS]
    for fr in report.per_fold:
        for m in METHODS:
            ms = fr.metrics[m]
            rows.append((str(fr.fold), m, str(ms.n), _num(ms.rmse), _num(ms.pearson_r),
                         _num(ms.bias), f"{fr.fitted_a[m]:.4g}"))
    for m in METHODS:
        ms = report.aggregate[m]
        rows.append(("pooled", m, str(ms.n), _num(ms.rmse), _num(ms.pearson_r), _num(ms.bias), "-"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(SUMMARY_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def export_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``report.json``, one scatter CSV per fold and method, and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "report.json"
    p.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(p)
    for fr in report.per_fold:
        for m in METHODS:
            pairs = fr.pairs[m]
            p = out / f"scatter_fold{fr.fold}_{m}.csv"
            lines = ["predicted,observed"]
            lines += [f"{a!r},{b!r}" for a, b in zip(pairs.predicted.tolist(), pairs.observed.tolist())]
            p.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(p)
    p = out / "summary.txt"
    p.write_text(summary_table(report), encoding="utf-8")
    written.append(p)
    return written
