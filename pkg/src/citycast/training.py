"""Loss, Adam, multi-dataset pre-training, head-only fine-tuning and
checkpoint persistence."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import TrafficDataset, WindowBatch, build_batch, window_starts
from .errors import (
    CheckpointManifestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    InsufficientDataError,
    ShapeError,
    TrainingError,
)
from .graph import normalize_adjacency, region_embeddings
from .model import CityForecaster, ModelConfig, init_params
from .numerics import flush_denormals

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<Q")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 20
    early_stop_patience: int = 15
    seed: int = 0
    grad_clip: float | None = None
    train_stride: int | None = None  # spacing of enumerated train windows; default P
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    train_fraction: float = 1.0  # contiguous prefix of each train split

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.split = tuple(self.split)
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size >= 1 and max_epochs >= 0 required")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return (pred - target).abs().mean()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def clip_gradients(params: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm.

    Returns the norm measured before clipping."""
    total = math.sqrt(sum(float(p.grad.double().pow(2).sum()) for p in params.values()))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad.mul_(scale)
    return total


def adam_step(params: dict[str, torch.Tensor], state: AdamState, tc: TrainConfig) -> AdamState:
    """One bias-corrected Adam update of every parameter in ``params``."""
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
        if not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    if tc.grad_clip is not None:
        clip_gradients(params, tc.grad_clip)
    b1, b2 = tc.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(tc.lr * (m / c1) / (torch.sqrt(v / c2) + tc.adam_eps))
    return state


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, torch.Tensor]
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def model(self) -> CityForecaster:
        m = CityForecaster(self.model_config)
        m.load_state_dict({k: v.clone() for k, v in self.params.items()}, strict=True)
        return m

    @classmethod
    def from_model(cls, model: CityForecaster, **kw) -> "Checkpoint":
        params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model_config=copy.deepcopy(model.cfg), params=params, **kw)


_DTYPE_CODES = {torch.float32: "<f4", torch.float64: "<f8", torch.uint8: "|u1", torch.int64: "<i8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().contiguous().cpu().numpy().astype(_DTYPE_CODES[t.dtype], copy=False).tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Header length (u64 LE) + JSON header + raw tensor payloads."""
    tensors: list[tuple[str, torch.Tensor]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for k in ckpt.adam.m:
        tensors.append((f"adam_m/{k}", ckpt.adam.m[k]))
        tensors.append((f"adam_v/{k}", ckpt.adam.v[k]))
    torch_rng = ckpt.rng_state.get("torch")
    if torch_rng is not None:
        tensors.append(("rng/torch", torch_rng))

    manifest, offset = [], 0
    for name, t in tensors:
        nbytes = t.numel() * t.element_size()
        manifest.append({
            "name": name, "shape": list(t.shape), "dtype": _DTYPE_CODES[t.dtype],
            "offset": offset, "nbytes": nbytes,
        })
        offset += nbytes
    header = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.model_config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step,
        "rng_numpy": ckpt.rng_state.get("numpy"),
        "history": ckpt.history,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_HEADER_LEN.pack(len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(_tensor_bytes(t))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_LEN.size:
        raise CheckpointTruncatedError(f"{path}: file too short for a header")
    (hlen,) = _HEADER_LEN.unpack_from(raw)
    if len(raw) < _HEADER_LEN.size + hlen:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(raw[_HEADER_LEN.size:_HEADER_LEN.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointManifestError(f"{path}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {version}, this build reads {FORMAT_VERSION}"
        )
    payload = memoryview(raw)[_HEADER_LEN.size + hlen:]
    manifest = header.get("manifest", [])
    expected = 0
    for entry in manifest:
        code = entry.get("dtype")
        if code not in _CODE_DTYPES:
            raise CheckpointManifestError(f"{path}: unknown dtype {code!r} for {entry.get('name')}")
        itemsize = np.dtype(code).itemsize
        if entry["offset"] != expected or entry["nbytes"] != itemsize * math.prod(entry["shape"]):
            raise CheckpointManifestError(
                f"{path}: manifest entry {entry['name']} disagrees with its shape/offset"
            )
        expected += entry["nbytes"]
    if len(payload) < expected:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} bytes, manifest needs {expected}"
        )
    if len(payload) > expected:
        raise CheckpointManifestError(f"{path}: {len(payload) - expected} trailing bytes")

    params, adam_m, adam_v, rng = {}, {}, {}, {}
    for entry in manifest:
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=math.prod(entry["shape"]),
                            offset=entry["offset"]).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        kind, _, name = entry["name"].partition("/")
        {"param": params, "adam_m": adam_m, "adam_v": adam_v, "rng": rng}[kind][name] = t
    cfg = ModelConfig.from_dict(header["model_config"])
    rng_state = {}
    if "torch" in rng:
        rng_state["torch"] = rng["torch"]
    if header.get("rng_numpy") is not None:
        rng_state["numpy"] = header["rng_numpy"]
    return Checkpoint(
        model_config=cfg,
        params=params,
        adam=AdamState(step=header.get("adam_step", 0), m=adam_m, v=adam_v),
        epoch=header.get("epoch", 0),
        rng_state=rng_state,
        history=header.get("history", {}),
        format_version=version,
    )


# ---------------------------------------------------------------------------
# data preparation


def check_geometry(cfg: ModelConfig, ds: TrafficDataset) -> None:
    if cfg.sample_rate_minutes != ds.sample_rate_minutes:
        raise ConfigError(
            f"geometry mismatch: model expects {cfg.sample_rate_minutes}-minute data "
            f"(P={cfg.P}, H={cfg.H}, F={cfg.F} steps) but {ds.name!r} is sampled every "
            f"{ds.sample_rate_minutes} minutes"
        )
    if ds.num_steps < cfg.H + cfg.F:
        raise InsufficientDataError(f"{ds.name!r}: T={ds.num_steps} < H+F={cfg.H + cfg.F}")


@dataclass
class PreparedDataset:
    """A dataset with its graph tensors and window starts computed once."""

    ds: TrafficDataset
    phi: np.ndarray
    a_norm: np.ndarray
    train_starts: np.ndarray
    val_starts: np.ndarray
    test_starts: np.ndarray

    @property
    def name(self) -> str:
        return self.ds.name


def prepare_dataset(ds: TrafficDataset, cfg: ModelConfig, tc: TrainConfig | None = None,
                    split=None) -> PreparedDataset:
    check_geometry(cfg, ds)
    tc = tc or TrainConfig()
    split = tuple(split or tc.split)
    (tr_lo, tr_hi), (va_lo, va_hi), (te_lo, te_hi) = ds.split_bounds(split)
    tr_hi = tr_lo + int(round(tc.train_fraction * (tr_hi - tr_lo)))
    stride = tc.train_stride or cfg.P
    emb = region_embeddings(ds.graph, cfg.k)
    return PreparedDataset(
        ds=ds,
        phi=emb.phi,
        a_norm=normalize_adjacency(ds.graph),
        train_starts=window_starts(tr_lo, tr_hi, cfg.H, cfg.F, stride, history_floor=tr_lo),
        val_starts=window_starts(va_lo, va_hi, cfg.H, cfg.F, cfg.F),
        test_starts=window_starts(te_lo, te_hi, cfg.H, cfg.F, cfg.F),
    )


def iter_batches(prep: PreparedDataset, starts: np.ndarray, cfg: ModelConfig, batch_size: int):
    for i in range(0, len(starts), batch_size):
        yield build_batch(prep.ds, starts[i:i + batch_size], cfg.H, cfg.F, cfg.P, cfg.S)


def normalized_mae(model: CityForecaster, prep: PreparedDataset, starts, batch_size=8) -> tuple[float, int]:
    """Sum of |error| in normalised units and element count over eval windows."""
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in iter_batches(prep, starts, model.cfg, batch_size):
            pred = model.forward_batch(batch, prep.phi, prep.a_norm).double()
            err = (pred - torch.as_tensor(batch.target_normalized)).abs()
            total += float(err.sum())
            count += err.numel()
    return total, count


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: dict
    model: CityForecaster


def _named_trainable(model: CityForecaster, names: Sequence[str] | None = None) -> dict[str, torch.nn.Parameter]:
    params = dict(model.named_parameters())
    if names is None:
        return params
    return {n: params[n] for n in names}


class DatasetSampler:
    """Draws a dataset index with probability proportional to its window count."""

    def __init__(self, counts, rng: np.random.Generator):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.size == 0 or np.any(counts < 0) or counts.sum() <= 0:
            raise InsufficientDataError(f"cannot sample from window counts {counts.tolist()}")
        self.probs = counts / counts.sum()
        self.rng = rng

    def draw(self) -> int:
        return int(self.rng.choice(len(self.probs), p=self.probs))


@flush_denormals()
def pretrain(
    datasets: Sequence[TrafficDataset],
    cfg: ModelConfig,
    tc: TrainConfig,
    init_seed: int | None = None,
    on_epoch_end: Callable[[int, CityForecaster, dict], bool | None] | None = None,
) -> TrainResult:
    """Train one model across several datasets.

    Every step draws a dataset with probability proportional to its number of
    training windows, then a batch of windows from it.  An epoch holds enough
    steps to cover all training windows once in expectation.  Early stopping
    watches the normalised validation MAE and restores the best weights.
    """
    if not datasets:
        raise InsufficientDataError("pretrain needs at least one dataset")
    preps = [prepare_dataset(ds, cfg, tc) for ds in datasets]
    counts = np.array([len(p.train_starts) for p in preps], dtype=np.float64)
    for p, n in zip(preps, counts):
        if n == 0:
            raise InsufficientDataError(
                f"{p.name!r}: train split holds no window of H+F={cfg.H + cfg.F} steps"
            )
    steps_per_epoch = max(1, math.ceil(counts.sum() / tc.batch_size))

    model = init_params(cfg, tc.seed if init_seed is None else init_seed)
    params = _named_trainable(model, model.active_parameters())
    state = AdamState()
    rng = np.random.Generator(np.random.Philox(tc.seed))
    sampler = DatasetSampler(counts, rng)
    gen = torch.Generator().manual_seed(tc.seed)

    history = {"train_loss": [], "val_mae": [], "epoch_seconds": [], "steps_per_epoch": steps_per_epoch}
    has_val = any(len(p.val_starts) for p in preps)
    best_val, best_state, best_epoch, stale = math.inf, None, 0, 0
    epoch = 0
    for epoch in range(1, tc.max_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(steps_per_epoch):
            prep = preps[sampler.draw()]
            pool = prep.train_starts
            starts = rng.choice(pool, size=tc.batch_size, replace=len(pool) < tc.batch_size)
            batch = build_batch(prep.ds, starts, cfg.H, cfg.F, cfg.P, cfg.S)
            for p in params.values():
                p.grad = None
            pred = model.forward_batch(batch, prep.phi, prep.a_norm, training=True, generator=gen)
            loss = mae_loss(pred, model.tensors(batch.target_normalized))
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss.item()} in epoch {epoch}")
            loss.backward()
            adam_step(params, state, tc)
            losses.append(float(loss.detach()))
        history["train_loss"].append(float(np.mean(losses)))

        if has_val:
            tot = cnt = 0
            for prep in preps:
                s, c = normalized_mae(model, prep, prep.val_starts, tc.batch_size)
                tot, cnt = tot + s, cnt + c
            val = tot / cnt
        else:
            val = history["train_loss"][-1]
        history["val_mae"].append(val)
        history["epoch_seconds"].append(time.perf_counter() - t0)
        log.info("epoch %d  train %.4f  val %.4f", epoch, history["train_loss"][-1], val)

        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
        if on_epoch_end is not None and on_epoch_end(epoch, model, history):
            break
        if stale >= tc.early_stop_patience:
            log.info("early stop after epoch %d (best %d)", epoch, best_epoch)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    history["best_epoch"] = best_epoch
    history["epochs_run"] = epoch
    ckpt = Checkpoint.from_model(
        model,
        adam=state,
        epoch=epoch,
        rng_state={"numpy": numpy_rng_state(rng), "torch": gen.get_state()},
        history=history_without_timing(history),
    )
    return TrainResult(ckpt, history, model)


def numpy_rng_state(rng: np.random.Generator) -> dict:
    """JSON-ready copy of a numpy bit-generator state."""

    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return [int(v) for v in x.tolist()]
        if isinstance(x, np.integer):
            return int(x)
        return x

    return conv(rng.bit_generator.state)


def restore_numpy_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    st = copy.deepcopy(state)
    st["state"] = {k: np.array(v, dtype=np.uint64) for k, v in st["state"].items()}
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    bg.state = st
    return np.random.Generator(bg)


def history_without_timing(history: dict) -> dict:
    return {k: v for k, v in history.items() if k != "epoch_seconds"}


# ---------------------------------------------------------------------------
# head-only fine-tuning


@flush_denormals()
def finetune_head(
    ckpt: Checkpoint,
    ds: TrafficDataset,
    max_epochs: int = 3,
    tc: TrainConfig | None = None,
) -> TrainResult:
    """Adapt a checkpoint to ``ds`` by training only the prediction head.

    The frozen encoder runs in eval mode, so its features are computed once
    and reused across epochs.
    """
    tc = tc or TrainConfig(split=(0.5, 0.1, 0.4))
    cfg = ckpt.model_config
    check_geometry(cfg, ds)
    prep = prepare_dataset(ds, cfg, tc)
    if len(prep.train_starts) == 0:
        raise InsufficientDataError(f"{ds.name!r}: no training window for fine-tuning")
    model = ckpt.model()
    for p in model.parameters():
        p.requires_grad_(False)
    head = _named_trainable(model, model.head_parameters())
    for p in head.values():
        p.requires_grad_(True)

    feats, targets = [], []
    with torch.no_grad():
        for batch in iter_batches(prep, prep.train_starts, cfg, tc.batch_size):
            feats.append(model.encode(
                model.tensors(batch.hist_patches),
                torch.as_tensor(batch.tod_hist), torch.as_tensor(batch.dow_hist),
                torch.as_tensor(batch.tod_fut), torch.as_tensor(batch.dow_fut),
                model.tensors(prep.phi), model.tensors(prep.a_norm),
            ))
            targets.append(model.tensors(batch.target_normalized))
    feats = torch.cat(feats)
    targets = torch.cat(targets)

    rng = np.random.Generator(np.random.Philox(tc.seed))
    state = AdamState()
    history = {"train_loss": []}
    for _ in range(max_epochs):
        order = rng.permutation(len(feats))
        losses = []
        for i in range(0, len(order), tc.batch_size):
            idx = torch.as_tensor(order[i:i + tc.batch_size])
            for p in head.values():
                p.grad = None
            loss = mae_loss(model.head(feats[idx]), targets[idx])
            loss.backward()
            adam_step(head, state, tc)
            losses.append(float(loss.detach()))
        history["train_loss"].append(float(np.mean(losses)))

    params = {k: v.clone() for k, v in ckpt.params.items()}
    for name, p in head.items():
        params[name] = p.detach().clone()
    out = Checkpoint(
        model_config=copy.deepcopy(cfg),
        params=params,
        adam=state,
        epoch=max_epochs,
        rng_state={"numpy": numpy_rng_state(rng)},
        history={"finetune": history, **ckpt.history},
    )
    for p in model.parameters():
        p.requires_grad_(True)
    return TrainResult(out, history, out.model())
