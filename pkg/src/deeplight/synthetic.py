"""Drifting Gaussian storm generator for desk-scale training and tests.

Each storm is a Gaussian intensity blob that drifts at a constant velocity
and waxes and wanes over its lifetime.  Cloud and radar fields follow the
intensity at the same hour; lightning follows the intensity ``cloud_lead``
hours earlier, so cloud growth precedes flashes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .grid import FEATURES, DatasetManifest, GridSpec, parse_hour, write_dataset

DEFAULT_START = "2021-04-01T00:00Z"

# Field scalings applied to unit intensity.
REFLECTIVITY_DBZ = 55.0
REFLECTIVITY_NOISE_DBZ = 3.0
CLOUD_TOP_HEIGHT_M = 12000.0
CLOUD_TOP_PRESSURE_DROP_HPA = 700.0
CLOUD_OPTICAL_DEPTH = 60.0


@dataclass(frozen=True)
class StormParams:
    n_storms: int = 2
    blob_sigma: tuple[float, float] = (1.5, 4.0)
    drift: tuple[float, float] = (0.5, 0.7)
    drift_jitter: float = 0.3
    lifetime: int = 14
    cloud_lead: int = 1
    gain: float = 1.2
    base_rate: float = 0.0
    flash_rate: float = 4.0
    energy_sigma: float = 0.5
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.blob_sigma
        if not 0 < lo <= hi:
            raise ValueError("blob_sigma range must be positive and ordered")
        if self.lifetime < 1:
            raise ValueError("lifetime must be >= 1")
        if not 0 <= self.base_rate <= 1:
            raise ValueError("base_rate must be a probability")
        if self.n_storms < 0 or self.cloud_lead < 0:
            raise ValueError("n_storms and cloud_lead must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Storm:
    y0: float
    x0: float
    vy: float
    vx: float
    sigma: float
    amplitude: float
    birth: int
    lifetime: int

    def intensity(self, t: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        age = t - self.birth
        if age < 0 or age >= self.lifetime:
            return np.zeros_like(yy)
        envelope = np.sin(np.pi * (age + 0.5) / self.lifetime)
        cy, cx = self.y0 + self.vy * age, self.x0 + self.vx * age
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return self.amplitude * envelope * np.exp(-0.5 * r2 / self.sigma**2)


def _spawn(rng: np.random.Generator, grid: GridSpec, params: StormParams, birth: int) -> _Storm:
    life = params.lifetime
    vy = params.drift[0] + rng.normal(0, params.drift_jitter)
    vx = params.drift[1] + rng.normal(0, params.drift_jitter)
    # start upstream so the storm crosses the domain during its life
    y0 = rng.uniform(0, grid.rows) - vy * life / 2
    x0 = rng.uniform(0, grid.cols) - vx * life / 2
    return _Storm(y0, x0, vy, vx, rng.uniform(*params.blob_sigma), rng.uniform(0.7, 1.0), birth, life)


def intensity_field(grid: GridSpec, hours: int, params: StormParams, rng: np.random.Generator) -> np.ndarray:
    """Storm intensity for hours ``-cloud_lead .. hours-1`` (first axis offset by cloud_lead)."""
    lead = params.cloud_lead
    yy, xx = np.meshgrid(np.arange(grid.rows, dtype=np.float64), np.arange(grid.cols, dtype=np.float64),
                         indexing="ij")
    total = hours + lead
    out = np.zeros((total, grid.rows, grid.cols))
    storms = [_spawn(rng, grid, params, -int(rng.integers(0, params.lifetime))) for _ in range(params.n_storms)]
    for t in range(total):
        for k, st in enumerate(storms):
            if t - st.birth >= st.lifetime:
                storms[k] = st = _spawn(rng, grid, params, t + int(rng.integers(0, 4)))
            out[t] += st.intensity(t, yy, xx)
    return np.minimum(out, 1.5)


def generate_frames(grid: GridSpec, hours: int, params: StormParams) -> dict[str, np.ndarray]:
    """All seven feature stacks, each (hours, rows, cols)."""
    rng = np.random.default_rng(params.seed)
    lead = params.cloud_lead
    inten = intensity_field(grid, hours, params, rng)
    now, lagged = inten[lead:], inten[:hours]
    p = np.minimum(1.0, params.gain * lagged)
    p = np.where(lagged > 0.05, np.maximum(p, params.base_rate), p)
    occurrence = (rng.random(p.shape) < p).astype(np.float32)
    counts = occurrence * (1 + rng.poisson(params.flash_rate * lagged))
    energy = counts * rng.lognormal(0.0, params.energy_sigma, size=counts.shape)
    refl = REFLECTIVITY_DBZ * now + rng.normal(0.0, REFLECTIVITY_NOISE_DBZ, size=now.shape) * (now > 0.01)
    refl = np.clip(refl, 0.0, 65.0)
    return {
        "occurrence": occurrence,
        "flash_count": counts.astype(np.float32),
        "flash_energy": energy.astype(np.float32),
        "reflectivity": refl.astype(np.float32),
        "cloud_top_height": (CLOUD_TOP_HEIGHT_M * now).astype(np.float32),
        "cloud_top_pressure": (CLOUD_TOP_PRESSURE_DROP_HPA * now).astype(np.float32),
        "cloud_optical_depth": (CLOUD_OPTICAL_DEPTH * now).astype(np.float32),
    }


def split_tags(hours: int, fractions=(0.7, 0.15, 0.15)) -> list[str]:
    n_train = int(round(hours * fractions[0]))
    n_val = int(round(hours * fractions[1]))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (hours - n_train - n_val)


def generate_dataset(
    out_dir: str | Path,
    grid: GridSpec | None = None,
    hours: int = 400,
    params: StormParams | None = None,
    start: str | datetime = DEFAULT_START,
) -> DatasetManifest:
    """Write a synthetic dataset container to ``out_dir``; fully determined by the seed."""
    grid = grid or GridSpec.square(32)
    params = params or StormParams()
    if hours < 2:
        raise ValueError("need at least two hours")
    frames = generate_frames(grid, hours, params)
    t0 = parse_hour(start)
    stamps = [t0 + timedelta(hours=i) for i in range(hours)]
    meta = {"source": "synthetic", "storm_params": params.to_dict()}
    return write_dataset(out_dir, grid, stamps, split_tags(hours, params.split_fractions),
                         {f: frames[f] for f in FEATURES}, metadata=meta)
