"""Raw GOES / NEXRAD products to gridded feature frames.

Remote objects come from the public NOAA buckets listed in ``SOURCES``.  The
download cache keeps an index of what it already holds so that repeated
requests for the same hour never touch the network.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from scipy.interpolate import griddata

from .exceptions import CoverageError, FetchError
from .grid import FEATURES, FeatureFrame, GridSpec, format_hour, parse_hour, write_dataset

log = logging.getLogger(__name__)

CACHE_ENV = "DEEPLIGHT_CACHE"
REFLECTIVITY_RANGE = (-35.0, 65.0)
J2000 = datetime(2000, 1, 1, 12, tzinfo=timezone.utc)
# GLM reports energy in joules at the 1e-15 scale; frames store femtojoules.
GLM_ENERGY_SCALE = 1e15

# feature -> (source, product, variable)
PRODUCTS = {
    "cloud_top_height": ("goes", "ABI-L2-ACHAC", "HT"),
    "cloud_top_pressure": ("goes", "ABI-L2-CTPC", "PRES"),
    "cloud_optical_depth": ("goes", "ABI-L2-CODC", "COD"),
    "flash_count": ("goes", "GLM-L2-LCFA", "flash_count"),
    "flash_energy": ("goes", "GLM-L2-LCFA", "flash_energy"),
    "occurrence": ("goes", "GLM-L2-LCFA", "flash_count"),
    "reflectivity": ("nexrad", "TZL", "reflectivity"),
}

SOURCES = {
    "goes": {"bucket_url": "https://noaa-goes16.s3.amazonaws.com"},
    "nexrad": {"bucket_url": "https://unidata-nexrad-level3.s3.amazonaws.com"},
}


@dataclass(frozen=True)
class PointObservation:
    lat: float
    lon: float
    value: float
    time: datetime | None = None

    @property
    def missing(self) -> bool:
        return not math.isfinite(self.value)


@dataclass(frozen=True)
class FlashEvent:
    lat: float
    lon: float
    energy: float
    time: datetime

    def __post_init__(self):
        if not self.energy >= 0:
            raise ValueError("flash energy must be non-negative")


# ---------------------------------------------------------------------------
# gridding
# ---------------------------------------------------------------------------

def interpolate_arrays(lat, lon, values, grid: GridSpec) -> np.ndarray:
    """Linear interpolation over a Delaunay triangulation, nearest value outside the hull."""
    lat = np.asarray(lat, dtype=np.float64).ravel()
    lon = np.asarray(lon, dtype=np.float64).ravel()
    values = np.asarray(values, dtype=np.float64).ravel()
    ok = np.isfinite(lat) & np.isfinite(lon) & np.isfinite(values)
    lat, lon, values = lat[ok], lon[ok], values[ok]
    if lat.size == 0:
        raise CoverageError("no usable observations to interpolate")
    order = np.lexsort((lon, lat))
    pts = np.column_stack([lat[order], lon[order]])
    vals = values[order]
    # average duplicated locations so the triangulation is well defined
    pts, inverse = np.unique(pts, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    vals = np.bincount(inverse, weights=vals) / np.bincount(inverse)
    clat, clon = grid.cell_centers()
    targets = np.column_stack([clat.ravel(), clon.ravel()])
    nearest = griddata(pts, vals, targets, method="nearest")
    if len(pts) < 3:
        return nearest.reshape(grid.shape)
    try:
        linear = griddata(pts, vals, targets, method="linear")
    except Exception:  # qhull rejects degenerate (collinear) inputs
        return nearest.reshape(grid.shape)
    out = np.where(np.isnan(linear), nearest, linear)
    return out.reshape(grid.shape)


def interpolate_to_grid(points: Sequence[PointObservation], grid: GridSpec,
                        feature_id: str = "reflectivity", timestamp: datetime | None = None) -> FeatureFrame:
    usable = [p for p in points if not p.missing and math.isfinite(p.lat) and math.isfinite(p.lon)]
    if not usable:
        raise CoverageError(f"no usable {feature_id} observations")
    arr = np.array([(p.lat, p.lon, p.value) for p in usable])
    values = interpolate_arrays(arr[:, 0], arr[:, 1], arr[:, 2], grid)
    if timestamp is None:
        timestamp = next((p.time for p in usable if p.time is not None), None) or J2000
    return FeatureFrame(feature_id, parse_hour(timestamp), values.astype(np.float32))


def cap_reflectivity(frame: FeatureFrame) -> FeatureFrame:
    """Negative dBZ carries no convective signal; clamp it to zero."""
    if frame.feature_id != "reflectivity":
        raise ValueError(f"cap_reflectivity expects a reflectivity frame, got {frame.feature_id}")
    return FeatureFrame(frame.feature_id, frame.timestamp, np.maximum(frame.values, 0).astype(frame.values.dtype),
                        frame.valid)


class RasterResult(NamedTuple):
    occurrence: FeatureFrame
    flash_count: FeatureFrame
    flash_energy: FeatureFrame
    report: dict


def cell_index(coord: np.ndarray, origin: float, step: float, n: int) -> np.ndarray:
    """Half-open binning: cell k covers [origin + k*step, origin + (k+1)*step); -1 when outside."""
    coord = np.asarray(coord, dtype=np.float64)
    k = np.floor((coord - origin) / step).astype(np.int64)
    # guard against round-off right at cell edges
    k = np.where(origin + (k + 1) * step <= coord, k + 1, k)
    k = np.where(origin + k * step > coord, k - 1, k)
    return np.where((k >= 0) & (k < n), k, -1)


def rasterize_flashes(events: Iterable[FlashEvent], grid: GridSpec, hour: datetime | str,
                      energy_scale: float = 1.0) -> RasterResult:
    """Bin flashes of ``[hour, hour + 1h)`` into per-cell counts and summed energy."""
    hour = parse_hour(hour)
    end = hour + timedelta(hours=1)
    events = list(events)
    in_hour = [e for e in events if hour <= parse_instant(e.time) < end]
    count = np.zeros(grid.shape, dtype=np.float64)
    energy = np.zeros(grid.shape, dtype=np.float64)
    dropped = 0
    if in_hour:
        lat = np.array([e.lat for e in in_hour])
        lon = np.array([e.lon for e in in_hour])
        en = np.array([e.energy for e in in_hour]) * energy_scale
        r = cell_index(lat, grid.lat_min, grid.dlat, grid.rows)
        c = cell_index(lon, grid.lon_min, grid.dlon, grid.cols)
        inside = (r >= 0) & (c >= 0)
        dropped = int((~inside).sum())
        np.add.at(count, (r[inside], c[inside]), 1)
        np.add.at(energy, (r[inside], c[inside]), en[inside])
    report = {
        "hour": format_hour(hour),
        "events": len(events),
        "outside_hour": len(events) - len(in_hour),
        "outside_grid": dropped,
        "binned": len(in_hour) - dropped,
    }
    occ = (count > 0).astype(np.float32)
    return RasterResult(
        FeatureFrame("occurrence", hour, occ),
        FeatureFrame("flash_count", hour, count.astype(np.float32)),
        FeatureFrame("flash_energy", hour, energy.astype(np.float32)),
        report,
    )


def parse_instant(t) -> datetime:
    if isinstance(t, datetime):
        return t if t.tzinfo else t.replace(tzinfo=timezone.utc)
    return datetime.fromisoformat(str(t).replace("Z", "+00:00"))


# ---------------------------------------------------------------------------
# remote fetching
# ---------------------------------------------------------------------------

@dataclass
class FetchResult:
    source: str
    product: str
    hour: datetime
    paths: list[Path] = field(default_factory=list)
    downloaded: int = 0

    @property
    def gap(self) -> bool:
        return not self.paths


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "deeplight"))


def hour_prefix(source: str, product: str, hour: datetime, station: str = "TDAL") -> str:
    if source == "goes":
        return f"{product}/{hour:%Y}/{hour.timetuple().tm_yday:03d}/{hour:%H}/"
    if source == "nexrad":
        site = station[1:] if len(station) == 4 else station
        return f"{site}_{product}_{hour:%Y_%m_%d_%H}"
    raise ValueError(f"unknown source {source!r}")


class ProductFetcher:
    """Lists and downloads hourly product files from a public S3 bucket over HTTP.

    ``session`` only needs a requests-like ``get(url, params=..., timeout=...)``.
    """

    def __init__(self, cache_dir: str | Path | None = None, session=None, retries: int = 3,
                 backoff: float = 0.5, timeout: float = 60.0, sleep: Callable[[float], None] = time.sleep,
                 files_per_hour: dict[str, int] | None = None):
        self.cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
        if session is None:
            import requests
            session = requests.Session()
        self.session = session
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep
        # GLM granules are 20 s long, so every file of the hour is needed;
        # for ABI and radar the first scan of the hour stands for the hour.
        self.files_per_hour = {"GLM-L2-LCFA": 0, **(files_per_hour or {})}
        self.network_calls = 0
        self._index_path = self.cache_dir / "index.json"
        self._index = json.loads(self._index_path.read_text()) if self._index_path.exists() else {}

    def _get(self, url: str, **params):
        last = None
        for attempt in range(self.retries):
            self.network_calls += 1
            try:
                resp = self.session.get(url, params=params or None, timeout=self.timeout)
                if resp.status_code == 404:
                    return None
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise OSError(f"HTTP {resp.status_code}")
                if resp.status_code >= 400:
                    raise FetchError(f"{url}: HTTP {resp.status_code}")
                return resp
            except FetchError:
                raise
            except Exception as exc:  # network errors of any client library
                last = exc
                if attempt + 1 < self.retries:
                    self.sleep(self.backoff * 2**attempt)
        raise FetchError(f"{url}: giving up after {self.retries} attempts ({last})")

    def list_objects(self, source: str, prefix: str) -> list[tuple[str, int]]:
        base = SOURCES[source]["bucket_url"]
        keys, token = [], None
        while True:
            params = {"list-type": "2", "prefix": prefix}
            if token:
                params["continuation-token"] = token
            resp = self._get(base + "/", **params)
            if resp is None:
                return []
            root = ET.fromstring(resp.content)
            ns = {"s3": root.tag.split("}")[0].strip("{")} if root.tag.startswith("{") else {}
            q = (lambda t: f"s3:{t}") if ns else (lambda t: t)
            for item in root.findall(q("Contents"), ns):
                keys.append((item.findtext(q("Key"), namespaces=ns), int(item.findtext(q("Size"), "0", ns))))
            if root.findtext(q("IsTruncated"), "false", ns) != "true":
                return sorted(keys)
            token = root.findtext(q("NextContinuationToken"), None, ns)

    def _cached(self, entry_key: str) -> list[Path] | None:
        entry = self._index.get(entry_key)
        if entry is None:
            return None
        paths = [self.cache_dir / f["path"] for f in entry]
        if all(p.exists() and p.stat().st_size == f["size"] for p, f in zip(paths, entry)):
            return paths
        return None

    def fetch_hour(self, source: str, product: str, hour: datetime, station: str = "TDAL") -> FetchResult:
        hour = parse_hour(hour)
        entry_key = f"{source}/{product}/{station if source == 'nexrad' else ''}/{format_hour(hour)}"
        result = FetchResult(source, product, hour)
        cached = self._cached(entry_key)
        if cached is not None:
            result.paths = cached
            return result
        listing = self.list_objects(source, hour_prefix(source, product, hour, station))
        limit = self.files_per_hour.get(product, 1)
        if limit:
            listing = listing[:limit]
        entry = []
        for key, size in listing:
            rel = Path(source) / key.replace("/", os.sep)
            dest = self.cache_dir / rel
            if not (dest.exists() and dest.stat().st_size == size):
                resp = self._get(f"{SOURCES[source]['bucket_url']}/{key}")
                if resp is None:
                    continue
                dest.parent.mkdir(parents=True, exist_ok=True)
                tmp = dest.with_suffix(dest.suffix + ".part")
                tmp.write_bytes(resp.content)
                tmp.replace(dest)
                result.downloaded += 1
            entry.append({"path": str(rel), "size": dest.stat().st_size})
            result.paths.append(dest)
        if entry:
            self._index[entry_key] = entry
            self._save_index()
        else:
            log.info("no %s %s objects for %s; hour is a gap", source, product, format_hour(hour))
        return result

    def _save_index(self):
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._index_path.write_text(json.dumps(self._index, indent=1))


def hours_between(start, end) -> list[datetime]:
    """Hourly stamps in ``[start, end)``."""
    t, stop = parse_hour(start), parse_hour(end)
    out = []
    while t < stop:
        out.append(t)
        t += timedelta(hours=1)
    return out


def fetch_products(source: str, start, end, station: str = "TDAL", fetcher: ProductFetcher | None = None,
                   cache_dir: str | Path | None = None) -> list[FetchResult]:
    """Download every product of ``source`` for each hour in ``[start, end)``."""
    fetcher = fetcher or ProductFetcher(cache_dir)
    products = sorted({(src, prod) for src, prod, _ in PRODUCTS.values() if src == source})
    if not products:
        raise ValueError(f"unknown source {source!r}")
    results = []
    for hour in hours_between(start, end):
        for src, prod in products:
            results.append(fetcher.fetch_hour(src, prod, hour, station))
    return results


# ---------------------------------------------------------------------------
# product readers
# ---------------------------------------------------------------------------

def _scaled(ds) -> np.ndarray:
    raw = ds[()]
    data = np.asarray(raw, dtype=np.float64)
    attrs = ds.attrs
    fill = attrs.get("_FillValue")
    mask = np.zeros(data.shape, dtype=bool)
    if fill is not None:
        mask |= np.asarray(raw) == np.asarray(fill).ravel()[0]
    scale = float(np.asarray(attrs.get("scale_factor", 1.0)).ravel()[0])
    offset = float(np.asarray(attrs.get("add_offset", 0.0)).ravel()[0])
    data = data * scale + offset
    data[mask] = np.nan
    return data


def geos_to_latlon(x: np.ndarray, y: np.ndarray, proj: dict) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-grid scan angles (radians) to geodetic lat/lon in degrees; off-disk -> NaN."""
    r_eq = float(proj["semi_major_axis"])
    r_pol = float(proj["semi_minor_axis"])
    H = float(proj["perspective_point_height"]) + r_eq
    lon0 = math.radians(float(proj["longitude_of_projection_origin"]))
    x, y = np.meshgrid(x, y)
    ratio = r_eq**2 / r_pol**2
    a = np.sin(x) ** 2 + np.cos(x) ** 2 * (np.cos(y) ** 2 + ratio * np.sin(y) ** 2)
    b = -2 * H * np.cos(x) * np.cos(y)
    c = H**2 - r_eq**2
    disc = b**2 - 4 * a * c
    with np.errstate(invalid="ignore"):
        rs = (-b - np.sqrt(disc)) / (2 * a)
        sx = rs * np.cos(x) * np.cos(y)
        sy = -rs * np.sin(x)
        sz = rs * np.cos(x) * np.sin(y)
        lat = np.degrees(np.arctan(ratio * sz / np.sqrt((H - sx) ** 2 + sy**2)))
        lon = np.degrees(lon0 - np.arctan(sy / (H - sx)))
    lat[disc < 0] = np.nan
    lon[disc < 0] = np.nan
    return lat, lon


def _in_box(lat, lon, grid: GridSpec, margin: float) -> np.ndarray:
    return ((lat >= grid.lat_min - margin) & (lat <= grid.lat_max + margin)
            & (lon >= grid.lon_min - margin) & (lon <= grid.lon_max + margin))


def read_abi_points(path: str | Path, variable: str, grid: GridSpec | None = None,
                    margin: float = 0.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read an ABI L2 field as flat (lat, lon, value) arrays, cropped around ``grid``."""
    import h5py

    with h5py.File(path, "r") as f:
        values = _scaled(f[variable])
        x, y = _scaled(f["x"]), _scaled(f["y"])
        proj = dict(f["goes_imager_projection"].attrs)
    lat, lon = geos_to_latlon(x, y, proj)
    keep = np.isfinite(lat) & np.isfinite(values)
    if grid is not None:
        keep &= _in_box(lat, lon, grid, margin)
    return lat[keep], lon[keep], values[keep]


def read_glm_flashes(path: str | Path) -> list[FlashEvent]:
    import h5py

    with h5py.File(path, "r") as f:
        lat = _scaled(f["flash_lat"])
        lon = _scaled(f["flash_lon"])
        energy = _scaled(f["flash_energy"])
        offset = _scaled(f["flash_time_offset_of_first_event"])
        product_time = float(np.asarray(f["product_time"][()]).ravel()[0])
    base = J2000 + timedelta(seconds=product_time)
    events = []
    for la, lo, en, dt in zip(lat, lon, energy, offset):
        if not (np.isfinite(la) and np.isfinite(lo)):
            continue
        en = 0.0 if not np.isfinite(en) else max(float(en), 0.0)
        events.append(FlashEvent(float(la), float(lo), en, base + timedelta(seconds=float(dt))))
    return events


def read_nexrad_level3(path: str | Path, grid: GridSpec | None = None,
                       margin: float = 0.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode a Level 3 reflectivity product into (lat, lon, dBZ) gate centres.

    Needs MetPy (``pip install deeplight[radar]``).
    """
    try:
        from metpy.io import Level3File
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ImportError("reading NEXRAD Level 3 files requires MetPy: pip install 'deeplight[radar]'") from exc
    f = Level3File(str(path))
    datadict = f.sym_block[0][0]
    dbz = f.map_data(datadict["data"])
    az = np.array(datadict["start_az"] + [datadict["end_az"][-1]])
    az_c = np.radians((az[:-1] + az[1:]) / 2 % 360)
    edges_km = np.linspace(0, f.max_range, dbz.shape[-1] + 1)
    gate_km = (edges_km[:-1] + edges_km[1:]) / 2
    rlat, rlon = math.radians(f.lat), math.radians(f.lon)
    earth_km = 6371.0
    d = np.outer(np.ones_like(az_c), gate_km) / earth_km
    th = np.outer(az_c, np.ones_like(gate_km))
    lat = np.arcsin(np.sin(rlat) * np.cos(d) + np.cos(rlat) * np.sin(d) * np.cos(th))
    lon = rlon + np.arctan2(np.sin(th) * np.sin(d) * np.cos(rlat), np.cos(d) - np.sin(rlat) * np.sin(lat))
    lat, lon, dbz = np.degrees(lat).ravel(), np.degrees(lon).ravel(), np.asarray(dbz, dtype=np.float64).ravel()
    keep = np.isfinite(dbz)
    if grid is not None:
        keep &= _in_box(lat, lon, grid, margin)
    return lat[keep], lon[keep], dbz[keep]


# ---------------------------------------------------------------------------
# end-to-end hourly ingest
# ---------------------------------------------------------------------------

def paper_split(hour: datetime) -> str:
    """2021-2022 train; April-May 2023 validation; later test."""
    if hour.year < 2023:
        return "train"
    return "val" if hour.month in (4, 5) else "test"


def build_hour_frames(fetched: dict[str, FetchResult], grid: GridSpec, hour: datetime) -> dict[str, FeatureFrame]:
    """Decode the files fetched for one hour into frames; unusable features become gaps."""
    frames: dict[str, FeatureFrame] = {}
    glm = fetched.get("GLM-L2-LCFA")
    if glm is not None and not glm.gap:
        events = [e for p in glm.paths for e in read_glm_flashes(p)]
        r = rasterize_flashes(events, grid, hour, energy_scale=GLM_ENERGY_SCALE)
        frames.update(occurrence=r.occurrence, flash_count=r.flash_count, flash_energy=r.flash_energy)
    for feature in ("cloud_top_height", "cloud_top_pressure", "cloud_optical_depth", "reflectivity"):
        _, product, variable = PRODUCTS[feature]
        res = fetched.get(product)
        if res is None or res.gap:
            continue
        try:
            if feature == "reflectivity":
                lat, lon, val = read_nexrad_level3(res.paths[0], grid)
            else:
                lat, lon, val = read_abi_points(res.paths[0], variable, grid)
            values = interpolate_arrays(lat, lon, val, grid)
        except CoverageError:
            continue
        frame = FeatureFrame(feature, hour, values.astype(np.float32))
        frames[feature] = cap_reflectivity(frame) if feature == "reflectivity" else frame
    for f in FEATURES:
        frames.setdefault(f, FeatureFrame.gap(f, hour, grid))
    return frames


def ingest(start, end, out_dir: str | Path, grid: GridSpec | None = None, sources: Sequence[str] = ("goes", "nexrad"),
           station: str = "TDAL", fetcher: ProductFetcher | None = None,
           split_rule: Callable[[datetime], str] = paper_split):
    """Fetch, decode and grid every hour in ``[start, end)`` and write a dataset container."""
    grid = grid or GridSpec.dallas()
    fetcher = fetcher or ProductFetcher()
    hours = hours_between(start, end)
    if not hours:
        raise ValueError("empty time range")
    stacks = {f: np.zeros((len(hours),) + grid.shape, dtype=np.float32) for f in FEATURES}
    gaps = {f: set() for f in FEATURES}
    for i, hour in enumerate(hours):
        fetched = {}
        for source in sources:
            for src, prod in sorted({(s, p) for s, p, _ in PRODUCTS.values() if s == source}):
                res = fetcher.fetch_hour(src, prod, hour, station)
                fetched[prod] = res
        for f, frame in build_hour_frames(fetched, grid, hour).items():
            if frame.valid:
                stacks[f][i] = frame.values
            else:
                gaps[f].add(i)
    meta = {"source": "ingest", "sources": list(sources), "station": station}
    return write_dataset(out_dir, grid, hours, [split_rule(h) for h in hours], stacks, gaps, meta)
