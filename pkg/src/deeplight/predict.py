"""Single-window forecasts, the prediction container and case-study plots."""

from __future__ import annotations

import json
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .exceptions import ManifestError, StorageError
from .grid import FEATURES, DatasetManifest, GridSpec, format_hour, load_frame, normalize_array, parse_hour
from .training import load_forecaster

PREDICTION_KIND = "prediction"
PREDICTION_FEATURE = "lightning_probability"
PANEL_PX = 250  # each lead time gets a PANEL_PX x (2 * PANEL_PX) column
DPI = 100


def forecast_at(checkpoint, data, anchor) -> tuple[np.ndarray, list[datetime], DatasetManifest]:
    """Forecast the ``h`` hours starting at ``anchor`` from the ``s`` hours before it.

    Only the input hours must be stored and gap-free; the anchor itself may
    lie past the end of the dataset.
    """
    est, meta = load_forecaster(checkpoint)
    manifest = DatasetManifest.load(data)
    cfg = est.config_
    anchor = parse_hour(anchor)
    inputs = [anchor - timedelta(hours=k) for k in range(cfg.s, 0, -1)]
    frames = []
    for hour in inputs:
        try:
            stack = [load_frame(manifest, f, hour) for f in FEATURES]
        except ManifestError:
            raise ManifestError(f"input hour {format_hour(hour)} is not in the dataset") from None
        if not all(fr.valid for fr in stack):
            raise ManifestError(f"input hour {format_hour(hour)} is gap-marked")
        frames.append(np.stack([fr.values for fr in stack]))
    stats = meta.get("metadata", {}).get("normalization_stats") or manifest.normalization_stats
    X = normalize_array(np.stack(frames)[None], stats)
    proba = est.predict_proba(X)[0]
    hours = [anchor + timedelta(hours=k) for k in range(cfg.h)]
    return proba, hours, manifest


def write_prediction(out: str | Path, grid: GridSpec, hours: list[datetime], proba: np.ndarray,
                     metadata: dict | None = None) -> Path:
    """Store (h, R, C) probabilities as little-endian float32 beside a JSON manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    proba = np.ascontiguousarray(proba, dtype="<f4")
    if proba.shape != (len(hours),) + grid.shape:
        raise StorageError(f"prediction shape {proba.shape} does not match {len(hours)} hours on {grid.shape}")
    name = f"{PREDICTION_FEATURE}.test.f32"
    proba.tofile(out / name)
    manifest = {
        "version": 1,
        "kind": PREDICTION_KIND,
        "grid": grid.to_dict(),
        "features": [PREDICTION_FEATURE],
        "hours": [format_hour(h) for h in hours],
        "split_tags": ["test"] * len(hours),
        "gaps": {PREDICTION_FEATURE: []},
        "files": {PREDICTION_FEATURE: {"test": {"file": name, "shape": list(proba.shape)}}},
        "metadata": metadata or {},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def read_prediction(path: str | Path) -> tuple[np.ndarray, list[datetime], GridSpec]:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    d = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if d.get("kind") != PREDICTION_KIND:
        raise ManifestError(f"{root} does not hold a prediction")
    entry = d["files"][PREDICTION_FEATURE]["test"]
    arr = np.fromfile(root / entry["file"], dtype="<f4")
    shape = tuple(entry["shape"])
    if arr.size != np.prod(shape):
        raise StorageError(f"{entry['file']} holds {arr.size} values, expected {np.prod(shape)}")
    return arr.reshape(shape), [parse_hour(h) for h in d["hours"]], GridSpec.from_dict(d["grid"])


def truth_for(data, hours: list[datetime]) -> np.ndarray:
    """Observed occurrence at ``hours``; NaN where the dataset has a gap or lacks the hour."""
    manifest = DatasetManifest.load(data)
    out = np.full((len(hours),) + manifest.grid.shape, np.nan, dtype=np.float32)
    for k, h in enumerate(hours):
        try:
            frame = load_frame(manifest, "occurrence", h)
        except ManifestError:
            continue
        if frame.valid:
            out[k] = frame.values
    return out


def plot_forecast(proba: np.ndarray, truth: np.ndarray | None, hours: list[datetime], out: str | Path) -> Path:
    """Ground truth (top) over probability heat map (bottom), one column per lead hour.

    The canvas is ``PANEL_PX * h`` by ``2 * PANEL_PX`` pixels.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h = proba.shape[0]
    fig, axes = plt.subplots(2, h, figsize=(PANEL_PX * h / DPI, 2 * PANEL_PX / DPI), dpi=DPI, squeeze=False)
    for k in range(h):
        top, bottom = axes[0, k], axes[1, k]
        t = truth[k] if truth is not None else np.full(proba.shape[1:], np.nan)
        top.imshow(np.nan_to_num(t, nan=0.0), cmap="gray", vmin=0, vmax=1, origin="lower", interpolation="nearest")
        im = bottom.imshow(proba[k], cmap="inferno", vmin=0, vmax=1, origin="lower", interpolation="nearest")
        top.set_title(f"+{k + 1}h {hours[k]:%m-%d %H}Z" if k < len(hours) else f"+{k + 1}h", fontsize=7)
        for ax in (top, bottom):
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0, 0].set_ylabel("observed", fontsize=7)
    axes[1, 0].set_ylabel("probability", fontsize=7)
    fig.subplots_adjust(left=0.03, right=0.93, top=0.9, bottom=0.03, wspace=0.05, hspace=0.12)
    cax = fig.add_axes([0.945, 0.05, 0.012, 0.38])
    fig.colorbar(im, cax=cax)
    cax.tick_params(labelsize=6)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=DPI)
    plt.close(fig)
    return out
