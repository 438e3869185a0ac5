"""Command-line entry point.

Every subcommand reads a JSON config (``--config``), takes ``--seed`` and
writes its artifacts under ``--out``.  Reports go to JSON files, diagnostics
to stderr.  Exit codes: 0 ok, 1 usage, 2 data/config, 3 training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .data import SyntheticSpec, generate_synthetic_city, load_dataset, save_dataset
from .errors import CheckpointError, CityCastError, DataError, TrainingError
from .evaluation import (
    ZERO_SHOT_SPLIT,
    export_predictions,
    measure_latency,
    scaling_experiment,
    zero_shot_eval,
)
from .model import ModelConfig, preset_config
from .training import (
    TrainConfig,
    finetune_head,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

log = logging.getLogger("citycast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_config(path: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must hold a JSON object")
    return cfg


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise DataError(f"config is missing required key {key!r}")
    return cfg[key]


def _train_config(cfg: dict, seed: int | None) -> TrainConfig:
    tc = dict(cfg.get("train", {}))
    if seed is not None:
        tc["seed"] = seed
    return TrainConfig.from_dict(tc)


def _model_config(cfg: dict, rate: int) -> ModelConfig:
    m = dict(cfg.get("model", {"preset": "mini"}))
    preset = m.pop("preset", "custom")
    if preset in ("mini", "base", "plus"):
        return preset_config(preset, m.pop("sample_rate_minutes", rate), **m)
    m.setdefault("sample_rate_minutes", rate)
    return ModelConfig.from_dict(m)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict, seed: int | None, out: Path) -> None:
    """{"cities": [SyntheticSpec fields...], "format": "f32"|"csv"}"""
    cities = cfg.get("cities", [cfg])
    written = []
    for i, spec in enumerate(cities):
        spec = dict(spec)
        if seed is not None:
            spec["seed"] = seed + i
        ds = generate_synthetic_city(SyntheticSpec.from_dict(spec))
        path = save_dataset(ds, out / ds.name, cfg.get("format", "f32"))
        written.append({"name": ds.name, "path": str(path), "num_regions": ds.num_regions,
                        "num_steps": ds.num_steps})
        log.info("wrote %s (R=%d, T=%d)", path, ds.num_regions, ds.num_steps)
    _write_json(out / "synth.json", {"datasets": written})


def cmd_pretrain(cfg: dict, seed: int | None, out: Path) -> None:
    """{"datasets": [dirs], "model": {"preset": "mini", ...}, "train": {...}}"""
    datasets = [load_dataset(p) for p in _require(cfg, "datasets")]
    if not datasets:
        raise DataError("pretrain needs at least one dataset")
    mcfg = _model_config(cfg, datasets[0].sample_rate_minutes)
    tc = _train_config(cfg, seed)
    result = pretrain(datasets, mcfg, tc)
    ckpt_path = save_checkpoint(result.checkpoint, out / "checkpoint.ckpt")
    _write_json(out / "history.json", result.checkpoint.history)
    _write_json(out / "timing.json", {"epoch_seconds": result.history["epoch_seconds"]})
    log.info("checkpoint written to %s", ckpt_path)


def cmd_eval_zeroshot(cfg: dict, seed: int | None, out: Path, unmasked_mape: bool = False) -> None:
    """{"checkpoint": path, "dataset": dir, "split": [a, b, c], "subset": "test"}"""
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    ds = load_dataset(_require(cfg, "dataset"))
    rep = zero_shot_eval(ckpt, ds, tuple(cfg.get("split", ZERO_SHOT_SPLIT)),
                         cfg.get("subset", "test"), unmasked_mape)
    _write_json(out / "zeroshot.json", rep.to_dict())
    _write_json(out / "timing.json", {"wall_clock_seconds": rep.model.wall_clock_seconds})
    log.info("zero-shot MAE %.4f (history mean %.4f, seasonal naive %.4f)",
             rep.model.mae, rep.history_mean.mae, rep.seasonal_naive.mae)


def cmd_finetune(cfg: dict, seed: int | None, out: Path, unmasked_mape: bool = False) -> None:
    """{"checkpoint": path, "dataset": dir, "max_epochs": 3, "train": {...}}"""
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    ds = load_dataset(_require(cfg, "dataset"))
    train = dict(cfg.get("train", {}))
    train.setdefault("split", list(ZERO_SHOT_SPLIT))
    tc = _train_config({"train": train}, seed)
    before = zero_shot_eval(ckpt, ds, tc.split, unmasked_mape=unmasked_mape)
    result = finetune_head(ckpt, ds, int(cfg.get("max_epochs", 3)), tc)
    after = zero_shot_eval(result.checkpoint, ds, tc.split, unmasked_mape=unmasked_mape)
    save_checkpoint(result.checkpoint, out / "finetuned.ckpt")
    _write_json(out / "finetune.json", {
        "zero_shot": before.model.to_dict(),
        "finetuned": after.model.to_dict(),
        "train_loss": result.history["train_loss"],
    })


def cmd_scaling(cfg: dict, seed: int | None, out: Path) -> None:
    """{"corpus": [dirs], "heldout": dir, "presets": [...], "fractions": [...],
    "train": {...}, "model": {overrides}}"""
    corpus = [load_dataset(p) for p in _require(cfg, "corpus")]
    heldout = load_dataset(_require(cfg, "heldout"))
    tc = _train_config(cfg, seed)
    rows = scaling_experiment(
        corpus, heldout,
        presets=cfg.get("presets", ("mini", "base", "plus")),
        fractions=cfg.get("fractions", (0.1, 0.5, 1.0)),
        tc=tc, seed=tc.seed, model_overrides=cfg.get("model"),
    )
    table = [asdict(r) for r in rows]
    _write_json(out / "scaling.json", {"rows": table})
    with (out / "scaling.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "fraction", "num_parameters", "train_windows", "mae", "relative_error"])
        for r in rows:
            w.writerow([r.preset, r.fraction, r.num_parameters, r.train_windows, repr(r.mae),
                        repr(r.relative_error)])


def cmd_latency(cfg: dict, seed: int | None, out: Path) -> None:
    """{"checkpoint": path, "dataset": dir, "repeats": 5}"""
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    ds = load_dataset(_require(cfg, "dataset"))
    rep = measure_latency(ckpt, ds, int(cfg.get("repeats", 5)))
    _write_json(out / "latency.json", asdict(rep))
    log.info("median latency %.3f s over %d regions", rep.median_seconds, rep.num_regions)


def cmd_predict(cfg: dict, seed: int | None, out: Path) -> None:
    """{"checkpoint": path, "dataset": dir, "split": [a, b, c], "subset": "test"}"""
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    ds = load_dataset(_require(cfg, "dataset"))
    n = export_predictions(ckpt, ds, out / "predictions.csv",
                           tuple(cfg.get("split", ZERO_SHOT_SPLIT)), cfg.get("subset", "test"))
    log.info("wrote %d prediction rows", n)


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "eval-zeroshot": cmd_eval_zeroshot,
    "finetune": cmd_finetune,
    "scaling": cmd_scaling,
    "latency": cmd_latency,
    "predict": cmd_predict,
}
_MAPE_COMMANDS = {"eval-zeroshot", "finetune"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="citycast", description="City-scale traffic forecasting toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").split("\n")[0])
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="artifact directory (default: cwd)")
        if name in _MAPE_COMMANDS:
            p.add_argument("--unmasked-mape", action="store_true",
                           help="score MAPE over every non-zero target")
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out)
    kwargs = {"unmasked_mape": args.unmasked_mape} if args.command in _MAPE_COMMANDS else {}
    try:
        cfg = _read_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.seed, out, **kwargs)
    except TrainingError as exc:
        print(f"citycast: training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (CityCastError, CheckpointError, ValueError, OSError) as exc:
        print(f"citycast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())
