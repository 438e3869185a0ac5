"""Traffic datasets: on-disk format, synthetic cities, instance normalisation,
patching, calendar context and window sampling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .errors import (
    AsymmetricAdjacencyError,
    DataError,
    InsufficientDataError,
    MetaMismatchError,
    MissingFileError,
    MissingValuesError,
    ParameterError,
    ShapeError,
)
from .graph import SYM_TOL, TrafficGraph, build_adjacency, normalize_adjacency

EPS_SIGMA = 1e-5
MINUTES_PER_DAY = 24 * 60
EPOCH_WEEKDAY = 3  # 1970-01-01 was a Thursday (Monday = 0)


def parse_utc(ts: str | datetime) -> datetime:
    if isinstance(ts, datetime):
        dt = ts
    else:
        dt = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_utc(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class TrafficDataset:
    name: str
    values: np.ndarray  # (R, T)
    sample_rate_minutes: int
    start_timestamp: datetime
    network_kind: Literal["sensor", "grid"]
    adjacency: np.ndarray  # (R, R)
    grid_shape: tuple[int, int] | None = None
    region_scale: np.ndarray | None = field(default=None, repr=False)  # synthetic cities only

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.start_timestamp = parse_utc(self.start_timestamp)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ShapeError(f"values must be a non-empty R x T matrix, got {self.values.shape}")
        r = self.values.shape[0]
        if self.adjacency.shape != (r, r):
            raise ShapeError(f"adjacency shape {self.adjacency.shape} does not match R={r}")
        if np.max(np.abs(self.adjacency - self.adjacency.T), initial=0.0) > SYM_TOL:
            raise AsymmetricAdjacencyError(f"dataset {self.name!r}: adjacency is not symmetric")
        if np.any(np.diag(self.adjacency) != 0) or np.any(self.adjacency < 0):
            raise DataError(f"dataset {self.name!r}: adjacency needs zero diagonal, weights >= 0")
        if self.sample_rate_minutes <= 0 or MINUTES_PER_DAY % self.sample_rate_minutes:
            raise ParameterError(
                f"sample rate {self.sample_rate_minutes} min does not divide a day evenly"
            )

    @property
    def num_regions(self) -> int:
        return self.values.shape[0]

    @property
    def num_steps(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.sample_rate_minutes

    @property
    def graph(self) -> TrafficGraph:
        return TrafficGraph(self.adjacency, self.network_kind)

    def timestamp(self, step: int) -> datetime:
        return self.start_timestamp + timedelta(minutes=int(step) * self.sample_rate_minutes)

    def split_bounds(self, ratios=(0.7, 0.1, 0.2)) -> list[tuple[int, int]]:
        """Contiguous [lo, hi) step ranges for train/val/test by time."""
        if len(ratios) != 3 or any(x < 0 for x in ratios) or sum(ratios) > 1 + 1e-9:
            raise ParameterError(f"invalid split ratios {ratios}")
        t = self.num_steps
        a = int(round(ratios[0] * t))
        b = int(round((ratios[0] + ratios[1]) * t))
        c = int(round(min(1.0, sum(ratios)) * t))
        return [(0, a), (a, b), (b, c)]


# ---------------------------------------------------------------------------
# disk format


def _interpolate_nans(values: np.ndarray) -> np.ndarray:
    out = values.copy()
    steps = np.arange(out.shape[1])
    for r in range(out.shape[0]):
        bad = np.isnan(out[r])
        if not bad.any():
            continue
        if bad.all():
            raise MissingValuesError(f"region {r} has no observed values to impute from")
        # np.interp holds the edge values constant, i.e. forward/back fill
        out[r, bad] = np.interp(steps[bad], steps[~bad], out[r, ~bad])
    return out


def load_dataset(path: str | Path, impute: bool = False) -> TrafficDataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise MissingFileError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    try:
        r, t = int(meta["num_regions"]), int(meta["num_steps"])
        rate = int(meta["sample_rate_minutes"])
        network = meta["network"]
        start = meta["start_timestamp"]
    except KeyError as exc:
        raise MetaMismatchError(f"{meta_path}: missing field {exc}") from None

    bin_path, csv_path = root / "data.f32", root / "data.csv"
    if bin_path.is_file():
        raw = np.fromfile(bin_path, dtype="<f4")
        if raw.size != r * t:
            raise MetaMismatchError(
                f"{bin_path} holds {raw.size} values, meta.json declares {r}x{t}={r * t}"
            )
        values = raw.reshape(r, t).astype(np.float64)
    elif csv_path.is_file():
        rows = [
            [float(v) if v.strip() not in ("", "nan", "NaN") else np.nan for v in row]
            for row in csv.reader(csv_path.open())
            if row
        ]
        if len(rows) != r or any(len(row) != t for row in rows):
            raise MetaMismatchError(f"{csv_path} shape does not match meta.json ({r}x{t})")
        values = np.array(rows, dtype=np.float64)
    else:
        raise MissingFileError(f"neither data.f32 nor data.csv found in {root}")

    adj_path = root / "adjacency.csv"
    if not adj_path.is_file():
        raise MissingFileError(f"{adj_path} not found")
    adjacency = np.zeros((r, r))
    seen = np.zeros((r, r), dtype=bool)
    with adj_path.open() as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["src", "dst", "weight"]:
            raise MetaMismatchError(f"{adj_path}: header must be src,dst,weight")
        for row in reader:
            i, j, w = int(row["src"]), int(row["dst"]), float(row["weight"])
            if not (0 <= i < r and 0 <= j < r):
                raise MetaMismatchError(f"{adj_path}: edge ({i},{j}) outside 0..{r - 1}")
            if i == j:
                raise DataError(f"{adj_path}: self-loop on node {i}")
            if seen[i, j] and adjacency[i, j] != w:
                raise AsymmetricAdjacencyError(
                    f"{adj_path}: edge ({i},{j}) has weights {adjacency[i, j]} and {w}"
                )
            adjacency[i, j] = adjacency[j, i] = w
            seen[i, j] = seen[j, i] = True

    if np.isnan(values).any():
        if not impute:
            n = int(np.isnan(values).sum())
            raise MissingValuesError(f"{root}: {n} missing values; pass impute=True to fill")
        values = _interpolate_nans(values)

    grid_shape = None
    if network == "grid" and "grid_rows" in meta:
        grid_shape = (int(meta["grid_rows"]), int(meta["grid_cols"]))
    return TrafficDataset(
        name=meta.get("name", root.name),
        values=values,
        sample_rate_minutes=rate,
        start_timestamp=start,
        network_kind=network,
        adjacency=adjacency,
        grid_shape=grid_shape,
    )


def save_dataset(ds: TrafficDataset, path: str | Path, fmt: Literal["f32", "csv"] = "f32") -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": ds.name,
        "num_regions": ds.num_regions,
        "num_steps": ds.num_steps,
        "sample_rate_minutes": ds.sample_rate_minutes,
        "start_timestamp": format_utc(ds.start_timestamp),
        "network": ds.network_kind,
    }
    if ds.grid_shape is not None:
        meta["grid_rows"], meta["grid_cols"] = ds.grid_shape
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    if fmt == "f32":
        ds.values.astype("<f4").tofile(root / "data.f32")
    else:
        with (root / "data.csv").open("w", newline="") as fh:
            csv.writer(fh).writerows(ds.values.tolist())
    with (root / "adjacency.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight"])
        ii, jj = np.nonzero(np.triu(ds.adjacency, 1))
        for i, j in zip(ii, jj):
            w.writerow([int(i), int(j), repr(float(ds.adjacency[i, j]))])
    return root


# ---------------------------------------------------------------------------
# synthetic cities


@dataclass
class SyntheticSpec:
    num_regions: int = 20
    days: int = 28
    sample_rate_minutes: int = 5
    network_kind: Literal["sensor", "grid"] = "sensor"
    base_volume: float = 100.0
    region_scale_spread: float = 0.5
    noise_level: float = 0.15
    seed: int = 0
    name: str = "synthetic"
    start_timestamp: str = "2020-01-06T00:00:00Z"
    # daily profile: 1 + m(dow) * (a1 sin(w(h - phi1)) + a2 sin(2w(h - phi2)))
    amplitude: float = 0.55
    second_harmonic: float = 0.25
    peak_hour: float = 14.0
    phase_jitter_hours: float = 1.5
    weekend_factor: float = 0.4
    # noise: seasonal AR(1) at a one-day lag on top of a short-memory AR(1)
    day_persistence: float = 0.6
    step_persistence: float = 0.0
    spatial_mixing: float = 0.5

    def validate(self) -> None:
        if self.num_regions < 2:
            raise ParameterError("synthetic city needs num_regions >= 2")
        if self.days < 2:
            raise ParameterError("synthetic city needs days >= 2")
        if self.sample_rate_minutes <= 0 or MINUTES_PER_DAY % self.sample_rate_minutes:
            raise ParameterError("sample_rate_minutes must divide a day evenly")
        if self.network_kind not in ("sensor", "grid"):
            raise ParameterError(f"unknown network kind {self.network_kind!r}")
        if self.base_volume <= 0 or self.noise_level < 0 or self.region_scale_spread < 0:
            raise ParameterError("base_volume > 0, noise_level >= 0, region_scale_spread >= 0")
        if abs(self.amplitude) + abs(self.second_harmonic) >= 1.0:
            raise ParameterError("amplitude + second_harmonic must stay below 1")
        for name in ("day_persistence", "step_persistence", "spatial_mixing"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        aliases = {"R": "num_regions"}
        kwargs = {aliases.get(k, k): v for k, v in d.items()}
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown synthetic-city fields: {sorted(unknown)}")
        return cls(**kwargs)


def _grid_dims(n: int) -> tuple[int, int]:
    rows = int(math.isqrt(n))
    while n % rows:
        rows -= 1
    return rows, n // rows


def generate_synthetic_city(spec: SyntheticSpec | dict) -> TrafficDataset:
    """Generate a reproducible synthetic city.

    Each region follows scale * base * (1 + m(dow) * daily_shape(t)) plus
    spatially mixed autoregressive noise, clipped at zero.  The daily shape
    integrates to zero over a day so noise-free daily means equal
    ``scale * base_volume``.
    """
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    spec.validate()
    rng = np.random.default_rng(np.random.Philox(spec.seed))
    r, spd = spec.num_regions, MINUTES_PER_DAY // spec.sample_rate_minutes
    t = spec.days * spd

    grid_shape = None
    if spec.network_kind == "grid":
        grid_shape = _grid_dims(r)
        graph = build_adjacency("grid", grid_shape)
    else:
        xy = rng.uniform(0.0, 1.0, size=(r, 2))
        sigma = 1.5 / math.sqrt(r)
        graph = build_adjacency("sensor", xy, kernel_sigma=sigma, threshold=0.05)

    start = parse_utc(spec.start_timestamp)
    minutes = start.hour * 60 + start.minute + np.arange(t) * spec.sample_rate_minutes
    hours = (minutes % MINUTES_PER_DAY) / 60.0
    days_since_epoch = (start - datetime(1970, 1, 1, tzinfo=timezone.utc)).days
    dow = (days_since_epoch + EPOCH_WEEKDAY + minutes // MINUTES_PER_DAY) % 7
    week_mod = np.where(dow >= 5, spec.weekend_factor, 1.0)

    scale = np.exp(rng.normal(0.0, spec.region_scale_spread, size=r))
    phase = spec.peak_hour - 6.0 + rng.normal(0.0, spec.phase_jitter_hours, size=r)
    w = 2.0 * math.pi / 24.0
    shape = spec.amplitude * np.sin(w * (hours[None, :] - phase[:, None])) + (
        spec.second_harmonic * np.sin(2.0 * w * (hours[None, :] - phase[:, None] - 1.0))
    )
    signal = scale[:, None] * spec.base_volume * (1.0 + week_mod[None, :] * shape)

    if spec.noise_level > 0:
        a_norm = normalize_adjacency(graph)
        mix = (1.0 - spec.spatial_mixing) * np.eye(r) + spec.spatial_mixing * a_norm
        z = mix @ rng.standard_normal((r, t))
        z /= z.std(axis=1, keepdims=True) + 1e-12
        rho, phi = spec.step_persistence, spec.day_persistence
        short = np.empty_like(z)
        short[:, 0] = z[:, 0]
        gain = math.sqrt(1.0 - rho * rho)
        for i in range(1, t):
            short[:, i] = rho * short[:, i - 1] + gain * z[:, i]
        noise = np.empty_like(short)
        noise[:, :spd] = short[:, :spd]
        gain = math.sqrt(1.0 - phi * phi)
        for d in range(1, spec.days):
            sl = slice(d * spd, (d + 1) * spd)
            noise[:, sl] = phi * noise[:, (d - 1) * spd : d * spd] + gain * short[:, sl]
        signal = signal + spec.noise_level * spec.base_volume * scale[:, None] * noise

    return TrafficDataset(
        name=spec.name,
        values=np.clip(signal, 0.0, None),
        sample_rate_minutes=spec.sample_rate_minutes,
        start_timestamp=start,
        network_kind=spec.network_kind,
        adjacency=graph.adjacency,
        grid_shape=grid_shape,
        region_scale=scale,
    )


# ---------------------------------------------------------------------------
# normalisation and patching


@dataclass
class NormStats:
    mu: np.ndarray  # (..., R)
    sigma: np.ndarray  # (..., R)


def instance_normalize(hist: np.ndarray, eps_sigma: float = EPS_SIGMA):
    """Standardise each region (last axis = time) by its own mean and
    population std, with the std floored at ``eps_sigma``."""
    hist = np.asarray(hist, dtype=np.float64)
    mu = hist.mean(axis=-1)
    sigma = np.maximum(hist.std(axis=-1), eps_sigma)
    return (hist - mu[..., None]) / sigma[..., None], NormStats(mu, sigma)


def denormalize(pred, stats: NormStats):
    """Invert ``instance_normalize`` on a (..., R, F) prediction.

    Works for numpy arrays and torch tensors alike."""
    mu, sigma = np.asarray(stats.mu), np.asarray(stats.sigma)
    if tuple(pred.shape[:-1]) != mu.shape:
        raise ShapeError(
            f"prediction leading shape {tuple(pred.shape[:-1])} does not match stats {mu.shape}"
        )
    if isinstance(pred, np.ndarray):
        return pred * sigma[..., None] + mu[..., None]
    import torch

    s = torch.as_tensor(sigma, dtype=pred.dtype)
    m = torch.as_tensor(mu, dtype=pred.dtype)
    return pred * s[..., None] + m[..., None]


def num_patches(t: int, p: int, s: int) -> int:
    if p < 1 or s < 1:
        raise ShapeError(f"patch length and stride must be positive, got P={p}, S={s}")
    if t < p:
        raise ShapeError(f"series of length {t} is shorter than patch length {p}")
    if (t - p) % s:
        raise ShapeError(f"(T - P) = {t - p} is not divisible by stride {s}")
    return (t - p) // s + 1


def make_patches(series: np.ndarray, p: int, s: int) -> np.ndarray:
    """Cut the last axis into N = (T-P)/S + 1 patches of length P."""
    series = np.asarray(series)
    n = num_patches(series.shape[-1], p, s)
    idx = np.arange(n)[:, None] * s + np.arange(p)[None, :]
    return series[..., idx]


def extract_temporal_context(start, sample_rate_minutes: int, token_starts) -> tuple[np.ndarray, np.ndarray]:
    """Hour-of-day and day-of-week (Monday = 0) of each token's first step."""
    start = parse_utc(start)
    offsets = np.asarray(token_starts, dtype=np.int64)
    base = int((start - datetime(1970, 1, 1, tzinfo=timezone.utc)).total_seconds() // 60)
    minutes = base + offsets * int(sample_rate_minutes)
    tod = (minutes % MINUTES_PER_DAY) // 60
    dow = (minutes // MINUTES_PER_DAY + EPOCH_WEEKDAY) % 7
    return tod.astype(np.int64), dow.astype(np.int64)


# ---------------------------------------------------------------------------
# windows


@dataclass
class PatchedWindow:
    hist_patches: np.ndarray  # (R, N_h, P)
    tod_hist: np.ndarray  # (N_h,)
    dow_hist: np.ndarray
    tod_fut: np.ndarray  # (N_f,)
    dow_fut: np.ndarray
    target: np.ndarray  # (R, F) raw units
    stats: NormStats
    start: int  # first forecast step
    history: np.ndarray | None = field(default=None, repr=False)  # (R, H) raw


@dataclass
class WindowBatch:
    """Several windows of one dataset stacked along a leading batch axis."""

    hist_patches: np.ndarray  # (B, R, N_h, P)
    tod_hist: np.ndarray  # (B, N_h)
    dow_hist: np.ndarray
    tod_fut: np.ndarray  # (B, N_f)
    dow_fut: np.ndarray
    target: np.ndarray  # (B, R, F)
    stats: NormStats  # mu/sigma (B, R)
    starts: np.ndarray  # (B,)
    history: np.ndarray  # (B, R, H)

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def target_normalized(self) -> np.ndarray:
        return (self.target - self.stats.mu[..., None]) / self.stats.sigma[..., None]


def build_batch(ds: TrafficDataset, starts, h: int, f: int, p: int, s: int) -> WindowBatch:
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size == 0:
        raise InsufficientDataError("empty window batch")
    if starts.min() < h or starts.max() + f > ds.num_steps:
        raise InsufficientDataError(
            f"window starts must lie in [{h}, {ds.num_steps - f}] for H={h}, F={f}"
        )
    hist_idx = starts[:, None] + np.arange(-h, 0)[None, :]
    fut_idx = starts[:, None] + np.arange(f)[None, :]
    history = np.transpose(ds.values[:, hist_idx], (1, 0, 2))  # (B, R, H)
    target = np.transpose(ds.values[:, fut_idx], (1, 0, 2))
    normed, stats = instance_normalize(history)
    patches = make_patches(normed, p, s)
    n_h, n_f = num_patches(h, p, s), num_patches(f, p, s)
    hist_tok = starts[:, None] - h + np.arange(n_h)[None, :] * s
    fut_tok = starts[:, None] + np.arange(n_f)[None, :] * s
    tod_h, dow_h = extract_temporal_context(ds.start_timestamp, ds.sample_rate_minutes, hist_tok)
    tod_f, dow_f = extract_temporal_context(ds.start_timestamp, ds.sample_rate_minutes, fut_tok)
    return WindowBatch(patches, tod_h, dow_h, tod_f, dow_f, target, stats, starts, history)


def window_starts(lo: int, hi: int, h: int, f: int, stride: int, history_floor: int = 0) -> np.ndarray:
    """Forecast starts s with targets inside [lo, hi) and history at or after
    ``history_floor``, taken every ``stride`` steps from the first valid one."""
    first = max(lo, history_floor + h)
    last = hi - f
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, stride, dtype=np.int64)


def make_windows(
    ds: TrafficDataset,
    h: int,
    f: int,
    mode: Literal["train", "eval"] = "eval",
    stride: int | None = None,
    seed: int | None = None,
    p: int | None = None,
    s: int | None = None,
    split: tuple[float, float, float] = (0.7, 0.1, 0.2),
    num_windows: int | None = None,
) -> Iterator[PatchedWindow]:
    """Stream patched windows.

    eval mode: deterministic starts H, H + stride, ... <= T - F over the whole
    series (stride defaults to F).  train mode: ``num_windows`` uniformly random
    starts whose history and target both lie in the train split.
    """
    p = p or max(1, 60 // ds.sample_rate_minutes)
    s = s or p
    if ds.num_steps < h + f:
        raise InsufficientDataError(f"{ds.name}: T={ds.num_steps} < H+F={h + f}")
    if mode == "eval":
        starts = window_starts(0, ds.num_steps, h, f, stride or f)
    elif mode == "train":
        lo, hi = ds.split_bounds(split)[0]
        valid = window_starts(lo, hi, h, f, 1)
        if valid.size == 0:
            raise InsufficientDataError(f"{ds.name}: train split too short for H+F={h + f}")
        rng = np.random.default_rng(np.random.Philox(0 if seed is None else seed))
        count = num_windows if num_windows is not None else valid.size
        starts = rng.choice(valid, size=count, replace=True)
    else:
        raise ParameterError(f"unknown window mode {mode!r}")
    for st in starts:
        b = build_batch(ds, [st], h, f, p, s)
        yield PatchedWindow(
            hist_patches=b.hist_patches[0],
            tod_hist=b.tod_hist[0],
            dow_hist=b.dow_hist[0],
            tod_fut=b.tod_fut[0],
            dow_fut=b.dow_fut[0],
            target=b.target[0],
            stats=NormStats(b.stats.mu[0], b.stats.sigma[0]),
            start=int(st),
            history=b.history[0],
        )
