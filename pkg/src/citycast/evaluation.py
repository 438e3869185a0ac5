"""Metrics, reference baselines, zero-shot evaluation, the scaling grid,
deployment latency and prediction export."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import EPS_SIGMA, TrafficDataset, build_batch, denormalize, format_utc, window_starts
from .errors import ConfigError, DataError, InsufficientDataError
from .model import CityForecaster, count_parameters, preset_config
from .numerics import flush_denormals
from .training import (
    Checkpoint,
    PreparedDataset,
    TrainConfig,
    check_geometry,
    iter_batches,
    prepare_dataset,
    pretrain,
)

log = logging.getLogger(__name__)

ZERO_SHOT_SPLIT = (0.5, 0.1, 0.4)
MAPE_FLOOR_NORMALIZED = 1e-3


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: float | None  # percent; None when every target is below the floor
    per_horizon_mae: list[float]
    num_windows: int
    num_regions: int
    wall_clock_seconds: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock_seconds")
        return d


def compute_metrics(pred, target, mape_floor: float = 0.0, unmasked_mape: bool = False) -> MetricsReport:
    """MAE, RMSE and MAPE over (W, R, F) or (R, F) arrays.

    MAPE only counts entries with |target| > mape_floor; ``unmasked_mape``
    drops the floor and keeps every non-zero target.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"prediction shape {pred.shape} differs from target {target.shape}")
    if pred.size == 0:
        raise DataError("cannot compute metrics on empty input")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    err = pred - target
    abs_err = np.abs(err)
    mask = np.abs(target) > (0.0 if unmasked_mape else mape_floor)
    mape = float(np.mean(abs_err[mask] / np.abs(target[mask])) * 100.0) if mask.any() else None
    # scale by the largest error so squaring neither underflows nor overflows
    top = float(abs_err.max())
    rmse = top * float(np.sqrt(np.mean((abs_err / top) ** 2))) if top > 0 else 0.0
    return MetricsReport(
        mae=float(abs_err.mean()),
        rmse=rmse,
        mape=mape,
        per_horizon_mae=abs_err.reshape(-1, abs_err.shape[-1]).mean(axis=0).tolist(),
        num_windows=int(np.prod(pred.shape[:-2])),
        num_regions=int(pred.shape[-2]),
    )


def history_mean_forecast(history: np.ndarray, f: int) -> np.ndarray:
    """Repeat each region's history mean over the horizon."""
    return np.repeat(history.mean(axis=-1, keepdims=True), f, axis=-1)


def seasonal_naive_forecast(history: np.ndarray, f: int, lag: int) -> np.ndarray:
    """Value one season (``lag`` steps) earlier, recursing past the horizon."""
    h = history.shape[-1]
    if lag > h:
        raise ConfigError(f"seasonal lag {lag} exceeds history length {h}")
    idx = h - lag + (np.arange(f) % lag)
    return history[..., idx]


@dataclass
class Forecasts:
    pred: np.ndarray  # (W, R, F) raw units
    target: np.ndarray
    history: np.ndarray  # (W, R, H)
    sigma: np.ndarray  # (W, R)
    starts: np.ndarray


@flush_denormals()
def forecast_windows(model: CityForecaster, prep: PreparedDataset, starts, batch_size: int = 8) -> Forecasts:
    cfg = model.cfg
    if len(starts) == 0:
        raise InsufficientDataError(f"{prep.name!r}: no evaluation window fits the split")
    preds, targets, hists, sigmas = [], [], [], []
    with torch.no_grad():
        for batch in iter_batches(prep, np.asarray(starts), cfg, batch_size):
            out = model.forward_batch(batch, prep.phi, prep.a_norm).double().numpy()
            preds.append(denormalize(out, batch.stats))
            targets.append(batch.target)
            hists.append(batch.history)
            sigmas.append(batch.stats.sigma)
    return Forecasts(np.concatenate(preds), np.concatenate(targets), np.concatenate(hists),
                     np.concatenate(sigmas), np.asarray(starts))


def eval_starts(prep: PreparedDataset, cfg, which: str) -> np.ndarray:
    if which == "all":
        return window_starts(0, prep.ds.num_steps, cfg.H, cfg.F, cfg.F)
    if which == "test":
        return prep.test_starts
    if which == "val":
        return prep.val_starts
    if which == "train":
        return window_starts(0, prep.ds.split_bounds(ZERO_SHOT_SPLIT)[0][1], cfg.H, cfg.F, cfg.F)
    raise ConfigError(f"unknown evaluation subset {which!r}")


@dataclass
class ZeroShotReport:
    dataset: str
    model: MetricsReport
    history_mean: MetricsReport
    seasonal_naive: MetricsReport
    mape_floor: float

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "dataset": self.dataset,
            "mape_floor": self.mape_floor,
            "model": self.model.to_dict(timing),
            "history_mean": self.history_mean.to_dict(timing),
            "seasonal_naive": self.seasonal_naive.to_dict(timing),
        }


def zero_shot_eval(
    ckpt: Checkpoint,
    ds: TrafficDataset,
    split=ZERO_SHOT_SPLIT,
    which: str = "test",
    unmasked_mape: bool = False,
    batch_size: int = 8,
) -> ZeroShotReport:
    """Evaluate a checkpoint on a dataset it never saw, without any update.

    The model and both reference baselines are scored on the same
    non-overlapping windows (stride F) of the chosen split.
    """
    cfg = ckpt.model_config
    check_geometry(cfg, ds)
    prep = prepare_dataset(ds, cfg, TrainConfig(split=split))
    model = ckpt.model()
    t0 = time.perf_counter()
    fc = forecast_windows(model, prep, eval_starts(prep, cfg, which), batch_size)
    elapsed = time.perf_counter() - t0

    floor = MAPE_FLOOR_NORMALIZED * float(np.mean(np.maximum(fc.sigma, EPS_SIGMA)))
    report = compute_metrics(fc.pred, fc.target, floor, unmasked_mape)
    report.wall_clock_seconds = elapsed
    hm = compute_metrics(history_mean_forecast(fc.history, cfg.F), fc.target, floor, unmasked_mape)
    sn = compute_metrics(seasonal_naive_forecast(fc.history, cfg.F, ds.steps_per_day), fc.target,
                         floor, unmasked_mape)
    return ZeroShotReport(ds.name, report, hm, sn, floor)


# ---------------------------------------------------------------------------
# scaling grid


@dataclass
class ScalingRow:
    preset: str
    fraction: float
    num_parameters: int
    train_windows: int
    train_end_steps: list[int]
    mae: float
    relative_error: float = float("nan")


def scaling_experiment(
    corpus: Sequence[TrafficDataset],
    heldout: TrafficDataset,
    presets: Sequence[str] = ("mini", "base", "plus"),
    fractions: Sequence[float] = (0.1, 0.5, 1.0),
    tc: TrainConfig | None = None,
    seed: int = 0,
    model_overrides: dict | None = None,
) -> list[ScalingRow]:
    """Train every (preset, fraction) cell with one protocol and report
    zero-shot MAE on ``heldout`` relative to the plus@100% cell."""
    tc = tc or TrainConfig()
    rate = heldout.sample_rate_minutes
    overrides = model_overrides or {}
    rows = []
    for preset in presets:
        for frac in fractions:
            cfg = preset_config(preset, rate, **overrides)
            cell_tc = replace(tc, train_fraction=frac, seed=seed)
            preps = [prepare_dataset(ds, cfg, cell_tc) for ds in corpus]
            for p in preps:
                if len(p.train_starts) == 0:
                    raise InsufficientDataError(
                        f"fraction {frac} of {p.name!r} keeps no full training window"
                    )
            result = pretrain(corpus, cfg, cell_tc)
            zs = zero_shot_eval(result.checkpoint, heldout)
            rows.append(ScalingRow(
                preset=preset,
                fraction=frac,
                num_parameters=count_parameters(cfg),
                train_windows=int(sum(len(p.train_starts) for p in preps)),
                train_end_steps=[int(p.train_starts.max() + cfg.F) for p in preps],
                mae=zs.model.mae,
            ))
            log.info("scaling cell %s@%.0f%%: MAE %.4f", preset, 100 * frac, zs.model.mae)
    ref = next((r.mae for r in rows if r.preset == "plus" and r.fraction == 1.0), None)
    if ref is None:
        ref = max(r.mae for r in rows)
    for r in rows:
        r.relative_error = r.mae / ref
    return rows


# ---------------------------------------------------------------------------
# deployment


@dataclass
class LatencyReport:
    median_seconds: float
    samples: list[float]
    num_regions: int


@flush_denormals()
def measure_latency(ckpt: Checkpoint, ds: TrafficDataset, repeats: int = 5) -> LatencyReport:
    """Median wall-clock of one next-day forecast for every region: normalise
    and patch the last day, run the forward pass, denormalise."""
    cfg = ckpt.model_config
    check_geometry(cfg, ds)
    prep = prepare_dataset(ds, cfg, TrainConfig(split=(1.0, 0.0, 0.0)))
    model = ckpt.model()
    start = ds.num_steps - cfg.F
    samples = []
    with torch.no_grad():
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            batch = build_batch(ds, [start], cfg.H, cfg.F, cfg.P, cfg.S)
            out = model.forward_batch(batch, prep.phi, prep.a_norm)
            denormalize(out.double().numpy(), batch.stats)
            samples.append(time.perf_counter() - t0)
    return LatencyReport(statistics.median(samples), samples, ds.num_regions)


def export_predictions(ckpt: Checkpoint, ds: TrafficDataset, path, split=ZERO_SHOT_SPLIT,
                       which: str = "test") -> int:
    """Write region_index,timestamp_iso,predicted_value rows; returns the row count."""
    cfg = ckpt.model_config
    check_geometry(cfg, ds)
    prep = prepare_dataset(ds, cfg, TrainConfig(split=split))
    fc = forecast_windows(ckpt.model(), prep, eval_starts(prep, cfg, which))
    path = Path(path)
    rows = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region_index", "timestamp_iso", "predicted_value"])
            for wi, start in enumerate(fc.starts):
                stamps = [format_utc(ds.timestamp(int(start) + j)) for j in range(cfg.F)]
                for r in range(fc.pred.shape[1]):
                    for j in range(cfg.F):
                        w.writerow([r, stamps[j], repr(float(fc.pred[wi, r, j]))])
                        rows += 1
    except OSError as exc:
        raise DataError(f"cannot write predictions to {path}: {exc}") from exc
    return rows
