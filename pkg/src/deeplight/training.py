"""Training runs, checkpoint selection, evaluation and ablation variants."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import metrics
from .estimator import DeepLightForecaster, PersistenceForecaster
from .exceptions import ConfigError
from .grid import DatasetManifest, build_windows, normalize_array, stack_windows
from .loss import LossConfig
from .network import ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_hazy", "no_multibranch", "inception_block", "minus_D", "minus_R", "minus_L")
OPTIMIZER = {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 0.0}
LOG_NAME = "train_log.jsonl"
BEST_NAME = "best"
LAST_NAME = "last"
CONFIG_NAME = "train_config.json"


@dataclass
class TrainConfig:
    data: str = ""
    out: str = "runs/deeplight"
    epochs: int = 200
    learning_rate: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    stride: int = 1
    threshold: float = 0.5
    clip_norm: float | None = 1.0
    deterministic: bool = True
    variant: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.stride < 1:
            raise ConfigError("batch_size and stride must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss" in d:
            try:
                d["loss"] = LossConfig(**d["loss"])
            except TypeError as exc:
                raise ConfigError(f"bad loss config: {exc}") from None
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def ablate(config: TrainConfig, variant: str) -> TrainConfig:
    """Derive the config for one ablation arm."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "inception_block":
        raise ConfigError("the inception_block variant is not supported by this package")
    model, loss = config.model, config.loss
    if variant == "no_hazy":
        loss = dataclasses.replace(loss, hazy=False)
    elif variant == "no_multibranch":
        model = dataclasses.replace(model, kernel_sizes=(3,))
    elif variant == "minus_D":
        model = dataclasses.replace(model, use_cloud=False)
    elif variant == "minus_R":
        model = dataclasses.replace(model, use_radar=False)
    elif variant == "minus_L":
        model = dataclasses.replace(model, use_lightning=False)
    return dataclasses.replace(config, model=model, loss=loss, variant=variant)


def make_estimator(config: TrainConfig) -> DeepLightForecaster:
    m, lc = config.model, config.loss
    return DeepLightForecaster(
        horizon=m.h, branch_channels=m.branch_channels, hidden_channels=m.hidden_channels,
        stem_channels=m.stem_channels, cstem_stages=m.cstem_stages, kernel_sizes=m.kernel_sizes,
        use_lightning=m.use_lightning, use_radar=m.use_radar, use_cloud=m.use_cloud,
        epochs=config.epochs, learning_rate=config.learning_rate, batch_size=config.batch_size,
        pos_weight=lc.pos_weight, spatial_value=lc.spatial_value, temporal_value=lc.temporal_value,
        value_is_variance=lc.value_is_variance, hazy=lc.hazy, clip_norm=config.clip_norm,
        threshold=config.threshold, random_state=config.seed,
    )


def load_split(manifest: DatasetManifest, split: str, s: int, h: int, stride: int = 1,
               stats: dict | None = None) -> tuple[np.ndarray, np.ndarray, list]:
    """Stacked, normalized (X, y) plus anchor times for one split; empty arrays if no window fits."""
    windows = build_windows(manifest, s, h, stride, split=split, normalize=False)
    if not windows:
        R, C = manifest.grid.shape
        return np.zeros((0, s, 7, R, C), np.float32), np.zeros((0, h, R, C), np.float32), []
    X, y = stack_windows(windows)
    X = normalize_array(X, stats or manifest.normalization_stats)
    return X, y, [w.anchor_time for w in windows]


def set_determinism(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def train(config: TrainConfig, force: bool = False) -> Path:
    """Run one training job; returns the path of the best checkpoint's sidecar.

    The run directory receives ``train_config.json``, ``train_log.jsonl``
    (one record per epoch) and the ``best`` and ``last`` checkpoints.
    """
    manifest = DatasetManifest.load(config.data)
    model_cfg = dataclasses.replace(config.model, rows=manifest.grid.rows, cols=manifest.grid.cols)
    config = dataclasses.replace(config, model=model_cfg)
    out = Path(config.out)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass force=True to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / CONFIG_NAME)
    set_determinism(config.seed, config.deterministic)

    s, h = model_cfg.s, model_cfg.h
    X, y, _ = load_split(manifest, "train", s, h, config.stride)
    if len(X) == 0:
        raise ConfigError("the training split yields no complete window")
    X_val, y_val, _ = load_split(manifest, "val", s, h, 1)
    eval_set = (X_val, y_val) if len(X_val) else None
    if eval_set is None:
        log.warning("no validation windows; the last epoch doubles as the best checkpoint")

    log_path = out / LOG_NAME
    log_path.write_text("", encoding="utf-8")
    base_meta = {
        "train_config": config.to_dict(),
        "optimizer": dict(OPTIMIZER, lr=config.learning_rate),
        "normalization_stats": manifest.normalization_stats,
        "dataset": str(Path(config.data).resolve()),
        "selection_metric": "strict_1h_cumulative_ets",
    }
    best = {"val_ets": -float("inf")}
    started = time.perf_counter()

    def on_epoch_end(record: dict, est: DeepLightForecaster) -> None:
        record = dict(record, clipped_steps=est.n_clipped_, elapsed_s=round(time.perf_counter() - started, 3))
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        meta = dict(base_meta, epoch=record["epoch"], train_loss=record["train_loss"],
                    val_ets=record.get("val_ets"))
        save_checkpoint(out / LAST_NAME, est.model_, meta)
        score = record.get("val_ets", -float("inf"))
        if eval_set is None or score > best["val_ets"]:
            best["val_ets"] = score
            save_checkpoint(out / BEST_NAME, est.model_, meta)

    est = make_estimator(config)
    est.fit(X, y, eval_set=eval_set, on_epoch_end=on_epoch_end)
    return (out / BEST_NAME).with_suffix(".json")


def read_log(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / LOG_NAME
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def load_forecaster(checkpoint: str | Path, threshold: float = 0.5) -> tuple[DeepLightForecaster, dict]:
    model, meta = load_checkpoint(checkpoint)
    return DeepLightForecaster.from_model(model, threshold=threshold), meta


def evaluate(
    checkpoint: str | Path | None,
    data: str | Path,
    split: str = "test",
    thresholds: Sequence[float] = (0.5,),
    modes: Sequence[str] = metrics.MODES,
    baseline: str | None = None,
    s: int = 6,
    h: int = 6,
    pooling: str = "counts",
) -> dict:
    """Score a checkpoint (or the persistence baseline) on one split.

    Returns a report with one cumulative-score table per threshold.
    """
    manifest = DatasetManifest.load(data)
    if baseline is not None:
        if baseline != "persistence":
            raise ConfigError(f"unknown baseline {baseline!r}")
        forecaster = PersistenceForecaster(horizon=h)
        stats, source = manifest.normalization_stats, "persistence"
    else:
        if checkpoint is None:
            raise ConfigError("evaluate needs a checkpoint or a baseline")
        forecaster, meta = load_forecaster(checkpoint)
        cfg = forecaster.config_
        if (cfg.rows, cfg.cols) != manifest.grid.shape:
            raise ConfigError(f"checkpoint grid {(cfg.rows, cfg.cols)} does not match dataset {manifest.grid.shape}")
        s, h = cfg.s, cfg.h
        stats = meta.get("metadata", {}).get("normalization_stats") or manifest.normalization_stats
        source = str(checkpoint)
    X, y, anchors = load_split(manifest, split, s, h, 1, stats)
    horizons = [k for k in metrics.DEFAULT_HORIZONS if k <= h]
    report = {
        "model": source,
        "dataset": str(Path(data).resolve()),
        "split": split,
        "n_windows": int(len(X)),
        "s": s,
        "h": h,
        "pooling": pooling,
        "horizons": horizons,
        "results": [],
    }
    if len(X) == 0:
        log.warning("split %s has no complete window", split)
        return report
    proba = forecaster.predict_proba(X)
    for th in thresholds:
        table = metrics.cumulative_scores(proba, y, horizons, modes, th, pooling)
        report["results"].append({"threshold": float(th), "table": _json_table(table)})
    return report


def _json_table(table: dict) -> dict:
    return {mode: {str(k): v for k, v in rows.items()} for mode, rows in table.items()}


def report_to_tsv(report: dict) -> str:
    chunks = []
    for res in report["results"]:
        table = {m: {int(k): v for k, v in rows.items()} for m, rows in res["table"].items()}
        title = f"{report['model']} split={report['split']} threshold={res['threshold']} windows={report['n_windows']}"
        chunks.append(metrics.format_table(table, title))
    return "".join(chunks)
