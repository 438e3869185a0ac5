import csv
import math
from datetime import timedelta

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from citycast.data import format_utc
from citycast.errors import ConfigError, DataError, InsufficientDataError
from citycast.evaluation import (
    compute_metrics,
    eval_starts,
    export_predictions,
    history_mean_forecast,
    measure_latency,
    scaling_experiment,
    seasonal_naive_forecast,
    zero_shot_eval,
)
from citycast.training import Checkpoint, TrainConfig, prepare_dataset, pretrain
from citycast.model import init_params

from conftest import daily_config, tiny_city


def hourly_city(r=5, days=8, seed=0, **kw):
    return tiny_city(r=r, days=days, seed=seed, rate=60, **kw)


@pytest.fixture(scope="module")
def ckpt():
    torch.manual_seed(0)
    tc = TrainConfig(max_epochs=2, batch_size=4, split=(0.6, 0.2, 0.2))
    return pretrain([hourly_city(seed=1), hourly_city(r=7, seed=2, kind="grid")], daily_config(), tc).checkpoint


class TestMetrics:
    def test_single_value(self):
        m = compute_metrics([[110.0]], [[100.0]])
        assert (m.mae, m.rmse) == (10.0, 10.0)
        assert m.mape == pytest.approx(10.0)

    def test_floor_masks_zero_targets(self):
        m = compute_metrics([[5.0, 110.0]], [[0.0, 100.0]], mape_floor=1.0)
        assert m.mape == pytest.approx(10.0) and m.mae == 7.5

    def test_undefined_mape(self):
        assert compute_metrics([[1.0, 2.0]], [[0.0, 0.0]], mape_floor=0.5).mape is None

    def test_unmasked_keeps_small_targets(self):
        m = compute_metrics([[0.2]], [[0.1]], mape_floor=1.0, unmasked_mape=True)
        assert m.mape == pytest.approx(100.0)

    def test_empty(self):
        with pytest.raises(DataError):
            compute_metrics(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            compute_metrics(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_per_horizon(self):
        pred = np.zeros((2, 3, 4))
        target = np.arange(4.0)[None, None].repeat(3, 1).repeat(2, 0)
        m = compute_metrics(pred, target)
        assert m.per_horizon_mae == [0.0, 1.0, 2.0, 3.0]
        assert (m.num_windows, m.num_regions) == (2, 3)

    @pytest.mark.parametrize("scale", [1e-270, 1e200])
    def test_rmse_extreme_scales(self, scale):
        m = compute_metrics(np.full((3, 5), scale), np.zeros((3, 5)))
        assert m.rmse == pytest.approx(scale, rel=1e-12)
        assert m.mae == pytest.approx(scale, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)),
           arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
    def test_mae_le_rmse(self, a, b):
        m = compute_metrics(a, b, mape_floor=1e-6)
        assert m.mae <= m.rmse * (1 + 1e-12) + 1e-300
        assert m.mae >= 0


class TestBaselines:
    @pytest.fixture
    def history(self):
        return np.random.default_rng(0).normal(size=(3, 4, 48))

    def test_history_mean(self, history):
        out = history_mean_forecast(history, 6)
        for w in range(3):
            for r in range(4):
                assert np.allclose(out[w, r], sum(history[w, r]) / 48, atol=1e-9, rtol=0)

    def test_seasonal_naive_loop_oracle(self, history):
        lag, f = 24, 30
        out = seasonal_naive_forecast(history, f, lag)
        for j in range(f):
            # step t+j copies t+j-lag, recursing through earlier forecasts
            src = j - lag
            while src >= 0:
                src -= lag
            assert np.array_equal(out[..., j], history[..., 48 + src])

    def test_seasonal_lag_too_long(self, history):
        with pytest.raises(ConfigError):
            seasonal_naive_forecast(history, 4, 49)


class TestZeroShot:
    def test_no_parameter_writes(self, ckpt):
        before = {k: v.clone() for k, v in ckpt.params.items()}
        rep = zero_shot_eval(ckpt, hourly_city(seed=5))
        assert all(torch.equal(before[k], ckpt.params[k]) for k in before)
        assert len(rep.model.per_horizon_mae) == 24
        assert rep.model.num_regions == 5

    def test_baselines_share_windows(self, ckpt):
        rep = zero_shot_eval(ckpt, hourly_city(seed=5))
        assert rep.model.num_windows == rep.history_mean.num_windows == rep.seasonal_naive.num_windows

    def test_report_dict_excludes_timing(self, ckpt):
        d = zero_shot_eval(ckpt, hourly_city(seed=5)).to_dict()
        assert "wall_clock_seconds" not in d["model"]

    def test_geometry(self, ckpt):
        with pytest.raises(ConfigError, match="geometry"):
            zero_shot_eval(ckpt, tiny_city(rate=15))

    def test_too_short(self, ckpt):
        with pytest.raises(InsufficientDataError):
            zero_shot_eval(ckpt, hourly_city(days=2))

    def test_subsets(self, ckpt):
        prep = prepare_dataset(hourly_city(), ckpt.model_config)
        with pytest.raises(ConfigError):
            eval_starts(prep, ckpt.model_config, "holdout")
        assert len(eval_starts(prep, ckpt.model_config, "all")) == 7


class TestScaling:
    small = dict(d=8, heads=2, layers=1, k=2)

    @pytest.fixture(scope="class")
    @staticmethod
    def rows():
        # 10% of a 21-day train split still holds two one-day windows
        corpus = [hourly_city(days=35, seed=1), hourly_city(r=6, days=35, seed=2, kind="grid")]
        tc = TrainConfig(max_epochs=1, batch_size=4, split=(0.6, 0.2, 0.2))
        return scaling_experiment(corpus, hourly_city(seed=7), tc=tc, model_overrides=TestScaling.small)

    def test_grid_complete(self, rows):
        assert [(r.preset, r.fraction) for r in rows] == [
            (p, f) for p in ("mini", "base", "plus") for f in (0.1, 0.5, 1.0)
        ]
        ref = next(r for r in rows if r.preset == "plus" and r.fraction == 1.0)
        assert ref.relative_error == 1.0

    def test_fractions_are_prefixes(self, rows):
        for preset in ("mini", "base", "plus"):
            cells = sorted((r for r in rows if r.preset == preset), key=lambda r: r.fraction)
            for a, b in zip(cells, cells[1:]):
                assert a.train_windows <= b.train_windows
                assert all(x <= y for x, y in zip(a.train_end_steps, b.train_end_steps))

    def test_insufficient_fraction(self):
        with pytest.raises(InsufficientDataError):
            scaling_experiment([hourly_city(days=4)], hourly_city(seed=7), fractions=(0.1,),
                               presets=("mini",), tc=TrainConfig(max_epochs=1), model_overrides=self.small)


class TestDeployment:
    def test_latency_stable(self, ckpt):
        ds = hourly_city(r=30)
        one = measure_latency(ckpt, ds, repeats=1)
        five = measure_latency(ckpt, ds, repeats=5)
        assert len(five.samples) == 5 and five.num_regions == 30
        assert five.median_seconds > 0
        # a single cold sample may include allocator warm-up; allow a wide band
        assert abs(one.median_seconds - five.median_seconds) <= max(0.5 * five.median_seconds, 0.05)

    def test_export(self, ckpt, tmp_path):
        ds = hourly_city(seed=5)
        path = tmp_path / "p.csv"
        n = export_predictions(ckpt, ds, path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["region_index", "timestamp_iso", "predicted_value"]
        prep = prepare_dataset(ds, ckpt.model_config, TrainConfig(split=(0.5, 0.1, 0.4)))
        starts = prep.test_starts
        assert n == len(rows) - 1 == len(starts) * 5 * 24
        first = rows[1]
        assert first[0] == "0" and first[1] == format_utc(ds.start_timestamp + timedelta(hours=int(starts[0])))
        # round trip: MAE from the file equals the zero-shot report
        pred = np.array([float(r[2]) for r in rows[1:]]).reshape(len(starts), 5, 24)
        target = np.stack([ds.values[:, s:s + 24] for s in starts])
        rep = zero_shot_eval(ckpt, ds)
        assert math.isclose(float(np.abs(pred - target).mean()), rep.model.mae, rel_tol=1e-12)

    def test_export_unwritable(self, ckpt, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            export_predictions(ckpt, hourly_city(seed=5), blocker / "p.csv")

    def test_untrained_checkpoint_runs(self):
        ck = Checkpoint.from_model(init_params(daily_config(), 0))
        assert measure_latency(ck, hourly_city(), repeats=1).median_seconds > 0
