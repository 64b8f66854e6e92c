"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line with the measured quantity;
the lines are printed in the pytest terminal summary (see conftest) and
when this file is run directly with ``python tests/test_acceptance.py``.
"""

import json
import math
import time

import numpy as np

from kgsm.calibrate import CalibrationProblem, calibrate_wcm
from kgsm.data import (
    SyntheticConfig,
    assign_spatial_folds,
    generate_synthetic,
    load_csv,
    write_csv,
)
from kgsm.evaluation import CVConfig, MetricSet, export_report, pearson_r, rmse, run_cross_validation
from kgsm.errors import DegenerateInput
from kgsm.features import SequenceBatch, stats_from_values
from kgsm.kg_model import LossConfig, TrainConfig, boundary_loss, fit, kg_loss
from kgsm.lstm import finite_difference_gradients, init_params
from kgsm.wcm import WcmParams, wcm_forward, wcm_invert_sm

from conftest import SAMPLE_CSV

RESULTS = []


def record(number, title, ok, detail):
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_1_wcm_round_trip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        p = WcmParams.from_degrees(
            rng.uniform(25, 50), a=rng.uniform(0.005, 0.1), b=rng.uniform(0.02, 0.2),
            c=rng.uniform(-30, -15), d=rng.uniform(10, 50),
        )
        sm, vwc = rng.uniform(0.02, 0.45), rng.uniform(0.0, 3.0)
        worst = max(worst, abs(float(wcm_invert_sm(wcm_forward(sm, vwc, p), vwc, p)) - sm))
    dt = time.perf_counter() - t0
    record(1, "WCM forward/inverse round trip", worst <= 1e-10 and dt < 1.0,
           f"max error {worst:.2e} m3/m3 over 1000 draws, {dt:.2f} s")


def test_2_calibration_recovery():
    cfg = SyntheticConfig(n_sites=20, n_timesteps=60, seed=0)
    sites, truth = generate_synthetic(cfg)
    t0 = time.perf_counter()
    res = calibrate_wcm(CalibrationProblem.from_sites(sites))
    dt = time.perf_counter() - t0
    rel = {k: abs(getattr(res.params, k) / getattr(truth.params, k) - 1) for k in ("a", "c", "d")}
    ok = max(rel.values()) <= 0.01 and res.params.a > 0 and dt < 30
    record(2, "calibration recovers A, C, D", ok,
           ", ".join(f"{k} rel err {v:.1e}" for k, v in rel.items()) + f", A={res.params.a:.6g}, {dt:.2f} s")


def _gradient_batch(rng, B=3, n=5, F=2):
    raw = np.stack([
        rng.uniform(-16, -8, (B, n)),
        rng.uniform(0.1, 0.9, (B, n)),
        np.radians(rng.uniform(30, 45, (B, n))),
    ], axis=2)
    return SequenceBatch(rng.normal(size=(B, n, F)), raw, rng.uniform(-0.2, 1.2, B),
                         np.zeros((B, n), bool), np.array(["S"] * B, dtype=object),
                         np.arange(B).astype("datetime64[D]"))


def test_3_gradient_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(10):
        rng = np.random.default_rng(trial)
        batch = _gradient_batch(rng)
        params = init_params(3, 4, seed=trial, a0=rng.uniform(0.01, 0.08))
        stats = stats_from_values(("s",), np.array([-20.0, -10.0]), ["S"])
        cfg = LossConfig(lam=1.0)
        _, grads, _ = kg_loss(batch, params, cfg, stats)
        rep = finite_difference_gradients(
            params, lambda p: kg_loss(batch, p, cfg, stats, with_grad=False)[0].total, 1e-5, grads)
        worst = max(worst, rep.max_rel_error)
    dt = time.perf_counter() - t0
    record(3, "analytic vs central-difference gradients incl. log_a", worst < 1e-4 and dt < 10,
           f"max rel error {worst:.1e} over 10 trials, {dt:.2f} s")


def test_4_boundary_loss():
    value = boundary_loss([-0.1, 0.5, 1.2], 1.0)
    exact = abs(value - 0.1) <= 4 * np.spacing(0.1)

    sites, _ = generate_synthetic(SyntheticConfig(n_sites=12, noise_db=0.5, nonlinear=True, seed=4))
    res = fit(sites[:9], sites[9:], TrainConfig(lam=10.0, seed=4))
    pred = np.concatenate([res.model.predict_batch(res.model.windows(s)) for s in sites[9:]])
    outside = float(np.mean((pred < 0) | (pred > 1)))
    record(4, "boundary loss oracle and lambda=10 range control", exact and outside < 0.01,
           f"boundary_loss={value!r}, {outside:.2%} of {pred.size} validation predictions outside [0, 1]")


def test_5_knowledge_guided_improvement():
    t0 = time.perf_counter()
    sites, _ = generate_synthetic(SyntheticConfig(n_sites=24, noise_db=0.5, nonlinear=True, seed=0))
    folds = assign_spatial_folds(sites, 4, seed=0)
    rep = run_cross_validation(sites, folds, CVConfig(seed=0))
    dt = time.perf_counter() - t0
    w, k = rep.aggregate["wcm"], rep.aggregate["kg_lstm"]
    ok = k.rmse <= w.rmse - 0.01 and k.pearson_r >= w.pearson_r and dt < 300
    record(5, "KG-LSTM beats calibrated WCM on nonlinear data", ok,
           f"RMSE {k.rmse:.4f} vs {w.rmse:.4f} (gap {w.rmse - k.rmse:.4f}), "
           f"R {k.pearson_r:.3f} vs {w.pearson_r:.3f}, {dt:.0f} s")


def test_6_cross_validation_hygiene(tmp_path):
    sites, _ = generate_synthetic(SyntheticConfig(n_sites=24, n_timesteps=40, noise_db=0.5, nonlinear=True, seed=6))
    folds = assign_spatial_folds(sites, 4, seed=6)
    cfg = CVConfig(training=TrainConfig(hidden=8, epochs=15), seed=6, threads=2)
    bodies = []
    for name in ("a", "b"):
        rep = run_cross_validation(sites, folds, cfg)  # provenance is asserted inside every fold
        export_report(rep, tmp_path / name)
        bodies.append((tmp_path / name / "report.json").read_bytes())
    tested = sorted(s for fr in rep.per_fold for s in fr.test_sites)
    once = tested == sorted(s.site_id for s in sites)
    clean = all(not set(u) & set(fr.test_sites) for fr in rep.per_fold for u in fr.provenance.values())
    same = bodies[0] == bodies[1]
    record(6, "fold partition, leakage provenance, reproducible report", once and clean and same,
           f"each site tested once: {once}, provenance disjoint: {clean}, "
           f"report.json bit-identical: {same} ({len(bodies[0])} bytes)")


def _naive_rmse(p, o):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, o)) / len(p))


def _naive_r(p, o):
    n = len(p)
    mp, mo = sum(p) / n, sum(o) / n
    cov = sum((a - mp) * (b - mo) for a, b in zip(p, o))
    return cov / math.sqrt(sum((a - mp) ** 2 for a in p) * sum((b - mo) ** 2 for b in o))


def test_7_metric_oracles():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 300))
        p, o = rng.uniform(0, 0.5, n), rng.uniform(0, 0.5, n)
        worst = max(worst, abs(rmse(p, o) - _naive_rmse(p.tolist(), o.tolist())),
                    abs(pearson_r(p, o) - _naive_r(p.tolist(), o.tolist())))
    try:
        pearson_r(np.full(5, 0.3), rng.uniform(size=5))
        raised = False
    except DegenerateInput:
        raised = True
    missing = MetricSet.of(np.full(5, 0.3), rng.uniform(size=5)).pearson_r is None
    record(7, "rmse and Pearson R against direct formulas", worst <= 1e-12 and raised and missing,
           f"max abs difference {worst:.1e} over 100 vectors, constant-input R reported missing: {missing}")


def test_8_csv_round_trip(tmp_path):
    sites = load_csv(SAMPLE_CSV)
    write_csv(sites, tmp_path / "rt.csv")
    again = load_csv(tmp_path / "rt.csv")
    ok = len(again) == len(sites) and all(a.equals(b) for a, b in zip(sites, again))
    record(8, "CSV load-write-load on the shipped fixture", ok,
           f"{len(sites)} sites, {sum(len(s) for s in sites)} rows, field-identical: {ok}")


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                pass
    print(f"{sum('PASS' in r for r in RESULTS)}/{len(RESULTS)} criteria pass")
