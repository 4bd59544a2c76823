"""Spatial grid, feature frames, the on-disk dataset container and sample windows.

A dataset lives in a directory holding ``manifest.json`` plus one raw file per
(feature, split).  Each raw file is little-endian float32 in row-major
``[hour][row][col]`` order and covers every hour of its split, gap hours
included (their slot is NaN-filled and listed in the manifest's gap table).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import ManifestError, StorageError

LIGHTNING_FEATURES = ("occurrence", "flash_count", "flash_energy")
AUX_FEATURES = ("reflectivity", "cloud_top_height", "cloud_top_pressure", "cloud_optical_depth")
FEATURES = LIGHTNING_FEATURES + AUX_FEATURES
SPLITS = ("train", "val", "test")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
STD_FLOOR = 1e-6
ONE_HOUR = timedelta(hours=1)
_TIME_FORMAT = "%Y-%m-%dT%H:00Z"


def parse_hour(text: str | datetime) -> datetime:
    """Parse an ISO-like UTC timestamp and truncate it to the hour."""
    if isinstance(text, datetime):
        dt = text
    else:
        s = text.strip().replace("Z", "+00:00")
        if len(s) == 13:  # "YYYY-MM-DDTHH"
            s += ":00"
        dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc)
    return dt.replace(minute=0, second=0, microsecond=0)


def format_hour(dt: datetime) -> str:
    return parse_hour(dt).strftime(_TIME_FORMAT)


@dataclass(frozen=True)
class GridSpec:
    """Equirectangular raster; row 0 is the southern edge, col 0 the western edge."""

    rows: int
    cols: int
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_km: float = 4.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ManifestError(f"grid must have at least one row and column, got {self.rows}x{self.cols}")
        if not self.lat_min < self.lat_max:
            raise ManifestError("lat_min must be below lat_max")
        if not self.lon_min < self.lon_max:
            raise ManifestError("lon_min must be below lon_max")
        if not self.cell_km > 0:
            raise ManifestError("cell_km must be positive")

    @classmethod
    def dallas(cls) -> "GridSpec":
        """The 159 x 159, 4 km grid centred on Dallas used for the GOES/NEXRAD corpus."""
        return cls(rows=159, cols=159, lat_min=30.2, lat_max=35.93, lon_min=-100.3, lon_max=-93.52, cell_km=4.0)

    @classmethod
    def square(cls, n: int, cell_km: float = 4.0) -> "GridSpec":
        """An n x n toy grid anchored at the south-west corner of the Dallas box."""
        base = cls.dallas()
        dlat = (base.lat_max - base.lat_min) / base.rows
        dlon = (base.lon_max - base.lon_min) / base.cols
        return cls(n, n, base.lat_min, base.lat_min + n * dlat, base.lon_min, base.lon_min + n * dlon, cell_km)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def dlat(self) -> float:
        return (self.lat_max - self.lat_min) / self.rows

    @property
    def dlon(self) -> float:
        return (self.lon_max - self.lon_min) / self.cols

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (lat, lon) arrays of shape (rows, cols)."""
        lat = self.lat_min + (np.arange(self.rows) + 0.5) * self.dlat
        lon = self.lon_min + (np.arange(self.cols) + 0.5) * self.dlon
        return np.meshgrid(lat, lon, indexing="ij")

    def to_dict(self) -> dict:
        return {
            "rows": self.rows, "cols": self.cols,
            "lat_min": self.lat_min, "lat_max": self.lat_max,
            "lon_min": self.lon_min, "lon_max": self.lon_max,
            "cell_km": self.cell_km,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        try:
            return cls(int(d["rows"]), int(d["cols"]), float(d["lat_min"]), float(d["lat_max"]),
                       float(d["lon_min"]), float(d["lon_max"]), float(d.get("cell_km", 4.0)))
        except KeyError as exc:
            raise ManifestError(f"grid is missing field {exc}") from None


@dataclass(frozen=True)
class FeatureFrame:
    feature_id: str
    timestamp: datetime
    values: np.ndarray
    valid: bool = True

    def __post_init__(self):
        if self.feature_id not in FEATURES:
            raise ValueError(f"unknown feature {self.feature_id!r}")
        if self.values.ndim != 2:
            raise ValueError("frame values must be a 2-D array")
        if not self.valid:
            return
        v = self.values
        if self.feature_id == "occurrence" and not np.isin(v, (0.0, 1.0)).all():
            raise ValueError("occurrence frame must be binary")
        if self.feature_id == "flash_count" and ((v < 0).any() or (v != np.round(v)).any()):
            raise ValueError("flash_count must hold non-negative integers")
        if self.feature_id == "flash_energy" and (v < 0).any():
            raise ValueError("flash_energy must be non-negative")

    @classmethod
    def gap(cls, feature_id: str, timestamp: datetime, grid: GridSpec) -> "FeatureFrame":
        return cls(feature_id, timestamp, np.full(grid.shape, np.nan, dtype=np.float32), valid=False)


@dataclass(frozen=True)
class SampleWindow:
    """Inputs over ``s`` past hours and the binary targets for the next ``h`` hours.

    ``light_in`` is (s, 3, R, C), ``aux_in`` is (s, 4, R, C), ``target`` is (h, R, C).
    """

    light_in: np.ndarray
    aux_in: np.ndarray
    target: np.ndarray
    anchor_time: datetime

    @property
    def s(self) -> int:
        return self.light_in.shape[0]

    @property
    def h(self) -> int:
        return self.target.shape[0]

    @property
    def last_occurrence(self) -> np.ndarray:
        return self.light_in[-1, 0]

    def stacked_inputs(self) -> np.ndarray:
        """Inputs as one (s, 7, R, C) array in FEATURES order."""
        return np.concatenate([self.light_in, self.aux_in], axis=1)


@dataclass
class DatasetManifest:
    root: Path
    grid: GridSpec
    hours: list[datetime]
    split_tags: list[str]
    features: tuple[str, ...] = FEATURES
    gaps: dict[str, set[int]] = field(default_factory=dict)
    files: dict[str, dict[str, dict]] = field(default_factory=dict)
    normalization_stats: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if len(self.hours) != len(self.split_tags):
            raise ManifestError("hours and split_tags differ in length")
        if any(t not in SPLITS for t in self.split_tags):
            raise ManifestError(f"split tags must be one of {SPLITS}")
        if any(b <= a for a, b in zip(self.hours, self.hours[1:])):
            raise ManifestError("manifest hours must be strictly increasing")
        unknown = set(self.features) - set(FEATURES)
        if unknown:
            raise ManifestError(f"unknown features {sorted(unknown)}")
        for f in self.features:
            self.gaps.setdefault(f, set())

    # -- index helpers -------------------------------------------------
    def hour_index(self, hour: datetime | str) -> int:
        hour = parse_hour(hour)
        idx = _bisect(self.hours, hour)
        if idx is None:
            raise ManifestError(f"hour {format_hour(hour)} is not listed in the manifest")
        return idx

    def split_positions(self) -> dict[str, np.ndarray]:
        """Map each split to the global hour indices it owns, in order."""
        tags = np.asarray(self.split_tags)
        return {s: np.flatnonzero(tags == s) for s in SPLITS}

    def is_gap(self, feature_id: str, index: int) -> bool:
        return index in self.gaps[feature_id]

    def raw_path(self, feature_id: str, split: str) -> Path:
        try:
            return self.root / self.files[feature_id][split]["file"]
        except KeyError:
            raise StorageError(f"no stored file for {feature_id}/{split}") from None

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "kind": "dataset",
            "grid": self.grid.to_dict(),
            "features": list(self.features),
            "hours": [format_hour(h) for h in self.hours],
            "split_tags": list(self.split_tags),
            "gaps": {f: sorted(int(i) for i in self.gaps.get(f, ())) for f in self.features},
            "files": self.files,
            "normalization_stats": self.normalization_stats,
            "metadata": self.metadata,
        }

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ManifestError(f"no manifest at {path}") from None
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None
        for key in ("grid", "features", "hours", "split_tags", "files"):
            if key not in d:
                raise ManifestError(f"manifest is missing {key!r}")
        return cls(
            root=path.parent,
            grid=GridSpec.from_dict(d["grid"]),
            hours=[parse_hour(h) for h in d["hours"]],
            split_tags=list(d["split_tags"]),
            features=tuple(d["features"]),
            gaps={f: set(v) for f, v in d.get("gaps", {}).items()},
            files=d["files"],
            normalization_stats=d.get("normalization_stats", {}),
            metadata=d.get("metadata", {}),
        )


def _bisect(hours: Sequence[datetime], hour: datetime) -> int | None:
    lo, hi = 0, len(hours)
    while lo < hi:
        mid = (lo + hi) // 2
        if hours[mid] < hour:
            lo = mid + 1
        else:
            hi = mid
    if lo < len(hours) and hours[lo] == hour:
        return lo
    return None


# ---------------------------------------------------------------------------
# writing / reading
# ---------------------------------------------------------------------------

def write_dataset(
    root: str | Path,
    grid: GridSpec,
    hours: Sequence[datetime],
    split_tags: Sequence[str],
    frames: Mapping[str, np.ndarray],
    gaps: Mapping[str, Iterable[int]] | None = None,
    metadata: dict | None = None,
) -> DatasetManifest:
    """Write a dataset container and return its manifest.

    ``frames[feature]`` is an (n_hours, rows, cols) array.  Hours listed in
    ``gaps[feature]`` are stored as NaN placeholders.  Normalization
    statistics are computed from training-split hours only.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    hours = [parse_hour(h) for h in hours]
    gaps = {f: set(int(i) for i in (gaps or {}).get(f, ())) for f in FEATURES}
    manifest = DatasetManifest(root, grid, hours, list(split_tags), FEATURES, gaps, {}, {}, dict(metadata or {}))
    positions = manifest.split_positions()
    for f in FEATURES:
        arr = np.asarray(frames[f], dtype="<f4")
        if arr.shape != (len(hours),) + grid.shape:
            raise StorageError(f"{f}: expected shape {(len(hours),) + grid.shape}, got {arr.shape}")
        arr = arr.copy()
        if gaps[f]:
            arr[sorted(gaps[f])] = np.nan
        manifest.files[f] = {}
        for split, idx in positions.items():
            if len(idx) == 0:
                continue
            name = f"{f}.{split}.f32"
            np.ascontiguousarray(arr[idx], dtype="<f4").tofile(root / name)
            manifest.files[f][split] = {"file": name, "shape": [int(len(idx)), grid.rows, grid.cols]}
    manifest.normalization_stats = compute_normalization_stats(manifest)
    manifest.save()
    return manifest


def _read_split(manifest: DatasetManifest, feature_id: str, split: str) -> np.ndarray:
    entry = manifest.files.get(feature_id, {}).get(split)
    if entry is None:
        raise StorageError(f"no stored file for {feature_id}/{split}")
    path = manifest.root / entry["file"]
    shape = tuple(int(x) for x in entry["shape"])
    if shape[1:] != manifest.grid.shape:
        raise StorageError(f"{path.name}: recorded frame shape {shape[1:]} does not match grid {manifest.grid.shape}")
    n_expected = len(manifest.split_positions()[split])
    if shape[0] != n_expected:
        raise StorageError(f"{path.name}: records {shape[0]} hours, manifest lists {n_expected}")
    if not path.exists():
        raise StorageError(f"missing raw file {path}")
    size = path.stat().st_size
    if size != 4 * math.prod(shape):
        raise StorageError(f"{path.name}: holds {size // 4} values, expected {math.prod(shape)}")
    return np.memmap(path, dtype="<f4", mode="r", shape=shape)


def load_frame(manifest: DatasetManifest, feature_id: str, hour: datetime | str) -> FeatureFrame:
    """Decode one stored frame; gap-marked hours come back with ``valid=False``."""
    if feature_id not in manifest.features:
        raise ManifestError(f"feature {feature_id!r} is not part of this dataset")
    idx = manifest.hour_index(hour)
    ts = manifest.hours[idx]
    if manifest.is_gap(feature_id, idx):
        return FeatureFrame.gap(feature_id, ts, manifest.grid)
    split = manifest.split_tags[idx]
    pos = int(np.searchsorted(manifest.split_positions()[split], idx))
    data = _read_split(manifest, feature_id, split)
    return FeatureFrame(feature_id, ts, np.array(data[pos]), valid=True)


def load_split_array(manifest: DatasetManifest, split: str) -> np.ndarray:
    """All stored frames of a split as an (n_hours, 7, R, C) float32 array."""
    out = [np.asarray(_read_split(manifest, f, split)) for f in FEATURES]
    return np.stack(out, axis=1)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

_TRANSFORMS = {
    "occurrence": "identity",
    "flash_count": "log1p",
    "flash_energy": "log1p",
    "reflectivity": "standard",
    "cloud_top_height": "standard",
    "cloud_top_pressure": "standard",
    "cloud_optical_depth": "standard",
}


def compute_normalization_stats(manifest: DatasetManifest) -> dict[str, dict]:
    """Per-feature scaling statistics from valid training-split frames only."""
    train_idx = manifest.split_positions()["train"]
    if len(train_idx) == 0:
        # nothing to fit on; windows can still be built with normalize=False
        return {}
    stats = {}
    for f in FEATURES:
        kind = _TRANSFORMS[f]
        if kind == "identity":
            stats[f] = {"transform": kind, "mean": 0.0, "std": 1.0}
            continue
        data = np.asarray(_read_split(manifest, f, "train"), dtype=np.float64)
        keep = [i for i, g in enumerate(train_idx) if g not in manifest.gaps[f]]
        data = data[keep]
        if kind == "log1p":
            data = np.log1p(data)
        mean = float(data.mean()) if data.size else 0.0
        std = float(data.std()) if data.size else 1.0
        stats[f] = {"transform": kind, "mean": mean, "std": std}
    return stats


def _channel_params(stats: Mapping[str, Mapping], names: Sequence[str]):
    for f in names:
        if f not in stats:
            raise ManifestError(f"normalization stats missing for {f!r}")
        st = stats[f]
        yield st["transform"], float(st["mean"]), max(float(st["std"]), STD_FLOOR)


def normalize_array(x: np.ndarray, stats: Mapping[str, Mapping], names: Sequence[str] = FEATURES) -> np.ndarray:
    """Scale channel axis -3 of ``x`` (``..., C, R, C``) feature by feature."""
    out = np.array(x, dtype=np.float32, copy=True)
    for c, (kind, mean, std) in enumerate(_channel_params(stats, names)):
        if kind == "identity":
            continue
        v = out[..., c, :, :].astype(np.float64)
        if kind == "log1p":
            v = np.log1p(v)
        out[..., c, :, :] = (v - mean) / std
    return out


def denormalize_array(x: np.ndarray, stats: Mapping[str, Mapping], names: Sequence[str] = FEATURES) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    for c, (kind, mean, std) in enumerate(_channel_params(stats, names)):
        if kind == "identity":
            continue
        v = out[..., c, :, :] * std + mean
        if kind == "log1p":
            v = np.expm1(v)
        out[..., c, :, :] = v
    return out


def normalize_window(window: SampleWindow, stats: Mapping[str, Mapping]) -> SampleWindow:
    """Occurrence passes through; counts and energy get log1p; everything else is standardized."""
    return SampleWindow(
        normalize_array(window.light_in, stats, LIGHTNING_FEATURES),
        normalize_array(window.aux_in, stats, AUX_FEATURES),
        window.target,
        window.anchor_time,
    )


def denormalize_window(window: SampleWindow, stats: Mapping[str, Mapping]) -> SampleWindow:
    return SampleWindow(
        denormalize_array(window.light_in, stats, LIGHTNING_FEATURES),
        denormalize_array(window.aux_in, stats, AUX_FEATURES),
        window.target,
        window.anchor_time,
    )


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

def window_anchors(manifest: DatasetManifest, s: int, h: int, stride: int = 1, split: str | None = None) -> list[int]:
    """Global hour indices usable as window anchors.

    An anchor ``a`` is kept when hours ``a-s .. a+h-1`` are consecutive, share
    the anchor's split tag, and none is gap-marked for any feature.
    """
    if s < 1 or h < 1 or stride < 1:
        raise ManifestError("s, h and stride must all be >= 1")
    n = len(manifest.hours)
    hours = manifest.hours
    tags = manifest.split_tags
    any_gap = set().union(*(manifest.gaps[f] for f in manifest.features))
    anchors = []
    for a in range(s, n - h + 1, stride):
        lo, hi = a - s, a + h
        if split is not None and tags[a] != split:
            continue
        if hours[hi - 1] - hours[lo] != (hi - 1 - lo) * ONE_HOUR:
            continue
        if any(tags[i] != tags[a] for i in range(lo, hi)):
            continue
        if any(i in any_gap for i in range(lo, hi)):
            continue
        anchors.append(a)
    return anchors


def build_windows(
    manifest: DatasetManifest,
    s: int = 6,
    h: int = 6,
    stride: int = 1,
    *,
    split: str | None = None,
    normalize: bool = True,
) -> list[SampleWindow]:
    """Every complete window of the manifest, anchors stepped by ``stride``."""
    anchors = window_anchors(manifest, s, h, stride, split)
    if not anchors:
        return []
    positions = manifest.split_positions()
    cache: dict[str, np.ndarray] = {}
    windows = []
    for a in anchors:
        tag = manifest.split_tags[a]
        if tag not in cache:
            cache[tag] = load_split_array(manifest, tag)
        data = cache[tag]
        p = int(np.searchsorted(positions[tag], a))
        inputs = data[p - s:p]
        target = (data[p:p + h, 0] > 0).astype(np.float32)
        w = SampleWindow(inputs[:, :3].copy(), inputs[:, 3:].copy(), target, manifest.hours[a])
        if normalize:
            w = normalize_window(w, manifest.normalization_stats)
        windows.append(w)
    return windows


def stack_windows(windows: Sequence[SampleWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into estimator arrays X (n, s, 7, R, C) and y (n, h, R, C)."""
    if not windows:
        raise ValueError("no windows to stack")
    X = np.stack([w.stacked_inputs() for w in windows]).astype(np.float32)
    y = np.stack([w.target for w in windows]).astype(np.float32)
    return X, y
