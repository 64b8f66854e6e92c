import json
import math

import numpy as np
import pytest

from kgsm.data import SyntheticConfig, generate_synthetic
from kgsm.errors import CheckpointVersionError, EmptyBatch, NonFiniteLoss
from kgsm.features import SequenceBatch, build_dataset, compute_standardization, stats_from_values
from kgsm.kg_model import (
    LossConfig,
    LstmModel,
    TrainConfig,
    baseline_mse_loss,
    boundary_loss,
    fit,
    kg_loss,
    predict,
    soil_channel,
    train,
)
from kgsm.lstm import finite_difference_gradients, init_params
from kgsm.wcm import WcmParams, isolate_soil_backscatter_clamped

ULP = np.spacing(0.1)


def random_batch(B=3, n=5, F=2, seed=0):
    rng = np.random.default_rng(seed)
    raw = np.stack([
        rng.uniform(-16, -8, (B, n)),      # sigma_obs [dB], well above the vegetation term
        rng.uniform(0.1, 0.9, (B, n)),     # vwc
        np.radians(rng.uniform(30, 45, (B, n))),
    ], axis=2)
    return SequenceBatch(
        features=rng.normal(size=(B, n, F)),
        raw_obs=raw,
        targets=rng.uniform(-0.2, 1.2, B),  # some targets outside [0, 1] to exercise the penalty
        pad_mask=np.zeros((B, n), bool),
        site_ids=np.array(["S"] * B, dtype=object),
        timestamps=np.arange(B).astype("datetime64[D]"),
    )


def small_sites(seed=0, **kw):
    cfg = SyntheticConfig(n_sites=6, n_timesteps=40, noise_db=0.3, fold_count=2, seed=seed, **kw)
    return generate_synthetic(cfg)[0]


class TestLosses:
    def test_boundary_oracle(self):
        assert abs(boundary_loss([-0.1, 0.5, 1.2], 1.0) - 0.1) <= 4 * ULP

    def test_boundary_inside_is_zero(self):
        assert boundary_loss(np.linspace(0, 1, 11), 5.0) == 0.0

    def test_boundary_scales_with_lambda(self):
        p = [-0.3, 1.5]
        assert boundary_loss(p, 10.0) == pytest.approx(10 * boundary_loss(p, 1.0), rel=1e-15)

    def test_mse_oracle(self):
        assert baseline_mse_loss([0.1, 0.2], [0.2, 0.4]) == pytest.approx((0.01 + 0.04) / 2, rel=1e-14)

    def test_empty(self):
        with pytest.raises(EmptyBatch):
            boundary_loss([], 1.0)
        with pytest.raises(EmptyBatch):
            baseline_mse_loss([], [])

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            LossConfig(lam=-1.0)


class TestSoilChannel:
    def test_matches_isolation(self):
        b = random_batch()
        la = math.log(0.04)
        soil, _, clamped = soil_channel(b.raw_obs, la)
        ref, ref_clamped = isolate_soil_backscatter_clamped(
            b.raw_obs[..., 0], b.raw_obs[..., 1], WcmParams(a=math.exp(la)), theta=b.raw_obs[..., 2])
        assert np.array_equal(soil, ref)
        assert np.array_equal(clamped, ref_clamped)

    def test_derivative(self):
        b = random_batch(seed=3)
        la = math.log(0.04)
        _, d, _ = soil_channel(b.raw_obs, la)
        h = 1e-6
        num = (soil_channel(b.raw_obs, la + h)[0] - soil_channel(b.raw_obs, la - h)[0]) / (2 * h)
        assert np.allclose(d, num, rtol=1e-6, atol=1e-9)

    def test_clamped_steps_have_zero_derivative(self):
        b = random_batch()
        raw = b.raw_obs.copy()
        raw[0, 0, 0] = -60.0  # far below the vegetation term
        _, d, clamped = soil_channel(raw, math.log(0.5))
        assert clamped[0, 0] and d[0, 0] == 0.0


class TestGradient:
    @pytest.mark.parametrize("seed", range(4))
    def test_kg_loss_gradient(self, seed):
        batch = random_batch(seed=seed)
        params = init_params(3, 4, seed=seed, a0=0.03)
        stats = stats_from_values(("s",), np.array([-20.0, -10.0]), ["S"])
        cfg = LossConfig(lam=2.0)
        _, grads, _ = kg_loss(batch, params, cfg, stats)
        loss = lambda p: kg_loss(batch, p, cfg, stats, with_grad=False)[0].total
        report = finite_difference_gradients(params, loss, 1e-5, grads)
        assert report.max_rel_error < 1e-5, report.per_parameter_errors

    def test_log_a_gradient_nonzero(self):
        batch = random_batch(seed=1)
        params = init_params(3, 4, seed=1, a0=0.05)
        stats = stats_from_values(("s",), np.array([-20.0, -10.0]), ["S"])
        _, grads, _ = kg_loss(batch, params, LossConfig(), stats)
        assert grads["log_a"] != 0.0


class TestTraining:
    @pytest.fixture(scope="class")
    @classmethod
    def trained(cls):
        sites = small_sites()
        cfg = TrainConfig(hidden=8, epochs=40, patience=40, window=4)
        return sites, fit(sites[:4], sites[4:], cfg)

    def test_log_structure(self, trained):
        _, res = trained
        assert res.log[0]["epoch"] == 0 and res.log[0]["train_total"] is None
        keys = {"epoch", "train_total", "train_soil", "train_boundary", "val_soil_mse", "clamped_fraction", "a"}
        assert all(set(r) == keys for r in res.log)
        assert res.log[res.best_epoch]["val_soil_mse"] == min(r["val_soil_mse"] for r in res.log)

    def test_training_reduces_loss(self, trained):
        _, res = trained
        assert res.log[-1]["train_soil"] < res.log[1]["train_soil"]
        assert res.log[res.best_epoch]["val_soil_mse"] < res.log[0]["val_soil_mse"]

    def test_deterministic(self, trained):
        sites, res = trained
        again = fit(sites[:4], sites[4:], res.model.config)
        assert np.array_equal(again.final_predictions, res.final_predictions)
        assert again.model.a == res.model.a

    def test_checkpoint_round_trip(self, trained, tmp_path):
        sites, res = trained
        path = tmp_path / "m.json"
        res.model.save(path)
        loaded = LstmModel.load(path)
        b = res.model.windows(sites[5])
        assert np.array_equal(loaded.predict_batch(b), res.model.predict_batch(b))
        assert loaded.config == res.model.config

    def test_checkpoint_version(self, trained, tmp_path):
        _, res = trained
        d = res.model.to_json()
        d["version"] = 99
        path = tmp_path / "old.json"
        path.write_text(json.dumps(d))
        with pytest.raises(CheckpointVersionError, match="version"):
            LstmModel.load(path)

    def test_predict_every_acquisition(self, trained):
        sites, res = trained
        s = sites[5]
        pr = predict(res.model, s)
        assert np.array_equal(pr.timestamps, s.timestamps)
        assert pr.padded.sum() == res.model.config.window - 1
        # labelled windows agree with the training-style batch
        b = res.model.windows(s)
        assert np.array_equal(pr.sm_pred[s.labelled], res.model.predict_batch(b))

    def test_non_finite_loss(self):
        sites = small_sites()
        cfg = TrainConfig(hidden=4, epochs=2, window=3)
        aux = compute_standardization(sites, cfg.aux_features)
        soil = stats_from_values(("s",), np.array([-20.0, -10.0]), ["x"])
        tb = build_dataset(sites, cfg.window, aux)
        tb.features[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLoss, match="epoch 1"):
            train(tb, None, cfg, aux, soil)

    def test_strong_penalty_keeps_predictions_in_range(self):
        sites = small_sites(seed=5, nonlinear=True)
        res = fit(sites[:4], sites[4:], TrainConfig(hidden=8, epochs=60, window=4, lam=10.0))
        pred = np.concatenate([res.model.predict_batch(res.model.windows(s)) for s in sites[4:]])
        assert np.mean((pred < 0) | (pred > 1)) < 0.01
