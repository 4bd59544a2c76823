"""Contingency-table verification: POD, FAR, ETS and F1 scores, strict and 8-neighbour."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.5
DEFAULT_HORIZONS = (1, 3, 6)
METRIC_NAMES = ("POD", "FAR", "ETS", "MicroF1", "MacroF1")
MODES = ("strict", "neighborhood")
NEIGHBORHOOD = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int
    N_total: int

    def __post_init__(self):
        if min(self.TP, self.FP, self.FN, self.TN) < 0:
            raise ValueError(f"negative count in {self}")
        if self.TP + self.FP + self.FN + self.TN != self.N_total:
            raise ValueError(f"counts do not sum to N_total in {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.TP + other.TP, self.FP + other.FP, self.FN + other.FN,
                               self.TN + other.TN, self.N_total + other.N_total)

    @classmethod
    def zero(cls) -> "ConfusionCounts":
        return cls(0, 0, 0, 0, 0)

    def swapped(self) -> "ConfusionCounts":
        """Counts with the positive and negative classes exchanged."""
        return ConfusionCounts(self.TN, self.FN, self.FP, self.TP, self.N_total)


def pool(counts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts.zero()
    for c in counts:
        total = total + c
    return total


def binarize(pred, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(pred) >= threshold


def _check(pred_bin, truth):
    p = np.asarray(pred_bin).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    return p, t


def strict_counts(pred_bin, truth) -> ConfusionCounts:
    p, t = _check(pred_bin, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn, p.size)


def dilate(mask: np.ndarray, structure: np.ndarray = NEIGHBORHOOD) -> np.ndarray:
    """Binary dilation over the last two axes; cells beyond the border count as empty."""
    mask = np.asarray(mask, dtype=bool)
    full = np.zeros((1,) * (mask.ndim - 2) + structure.shape, dtype=bool)
    full[(0,) * (mask.ndim - 2)] = structure
    return ndimage.binary_dilation(mask, structure=full, border_value=0)


def neighborhood_counts(pred_bin, truth, structure: np.ndarray = NEIGHBORHOOD) -> ConfusionCounts:
    """Counts where a hit may sit in any of the eight cells around the event.

    Frames are the last two axes; leading axes (lead time, window) are
    counted independently and summed.
    """
    p, t = _check(pred_bin, truth)
    t_d = dilate(t, structure)
    p_d = dilate(p, structure)
    tp = int(np.count_nonzero(p & t_d))
    fp = int(np.count_nonzero(p & ~t_d))
    fn = int(np.count_nonzero(t & ~p_d))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn, p.size)


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den != 0 else 0.0


def pod(c: ConfusionCounts) -> float:
    return _ratio(c.TP, c.TP + c.FN)


def far(c: ConfusionCounts) -> float:
    return _ratio(c.FP, c.TP + c.FP)


def ets(c: ConfusionCounts) -> float:
    if c.N_total == 0:
        return 0.0
    chance = (c.TP + c.FP) * (c.TP + c.FN) / c.N_total
    return _ratio(c.TP - chance, c.N_total - c.TN - chance)


def f1(c: ConfusionCounts) -> float:
    return _ratio(2 * c.TP, 2 * c.TP + c.FP + c.FN)


def micro_f1(c: ConfusionCounts) -> float:
    return f1(c)


def macro_f1(c: ConfusionCounts) -> float:
    """Mean of the lightning-class and no-lightning-class F1."""
    return 0.5 * (f1(c) + f1(c.swapped()))


def all_scores(c: ConfusionCounts) -> dict[str, float]:
    return {"POD": pod(c), "FAR": far(c), "ETS": ets(c), "MicroF1": micro_f1(c), "MacroF1": macro_f1(c)}


def count(pred_bin, truth, mode: str = "strict") -> ConfusionCounts:
    if mode == "strict":
        return strict_counts(pred_bin, truth)
    if mode == "neighborhood":
        return neighborhood_counts(pred_bin, truth)
    raise ValueError(f"unknown mode {mode!r}")


def cumulative_scores(
    pred,
    truth,
    horizons: Sequence[int] = DEFAULT_HORIZONS,
    modes: Sequence[str] = MODES,
    threshold: float = DEFAULT_THRESHOLD,
    pooling: str = "counts",
) -> dict:
    """Scores over the first k lead frames for each horizon k.

    ``pred`` and ``truth`` are (h, R, C) or (n_windows, h, R, C).  With
    ``pooling="counts"`` confusion counts of lead frames ``0..k-1`` are summed
    over frames and windows; ``pooling="max"`` instead collapses those frames
    to one "any lightning within k hours" field before counting.

    Returns ``{mode: {k: {"counts": {...}, "scores": {...}}}}``.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth differ in shape")
    h = pred.shape[1]
    bad = [k for k in horizons if not 1 <= k <= h]
    if bad:
        raise ValueError(f"horizons {bad} exceed the forecast length {h}")
    pb = binarize(pred, threshold)
    tb = truth > 0
    table: dict = {}
    for mode in modes:
        table[mode] = {}
        for k in horizons:
            p, t = pb[:, :k], tb[:, :k]
            if pooling == "max":
                p, t = p.any(axis=1), t.any(axis=1)
            elif pooling != "counts":
                raise ValueError(f"unknown pooling {pooling!r}")
            c = count(p, t, mode)
            table[mode][int(k)] = {"counts": c.__dict__.copy(), "scores": all_scores(c)}
    return table


def format_table(table: dict, title: str = "") -> str:
    """Tab-separated rendering: one row per horizon, strict then neighbourhood columns."""
    modes = [m for m in MODES if m in table]
    header = ["horizon"] + [f"{m}_{name}" for m in modes for name in METRIC_NAMES]
    lines = [f"# {title}"] if title else []
    lines.append("\t".join(header))
    horizons = sorted({k for m in modes for k in table[m]})
    for k in horizons:
        row = [f"{k}h"] + [f"{table[m][k]['scores'][name]:.4f}" for m in modes for name in METRIC_NAMES]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def persistence_forecast(window, h: int | None = None) -> np.ndarray:
    """Repeat the last observed occurrence field for all ``h`` lead frames.

    ``window`` is a SampleWindow (``h`` defaults to its target length) or a
    bare (..., R, C) occurrence field.
    """
    if hasattr(window, "last_occurrence"):
        h = window.h if h is None else h
        window = window.last_occurrence
    if h is None:
        raise ValueError("h is required when passing a bare occurrence field")
    last = (np.asarray(window) > 0).astype(np.float32)
    return np.repeat(last[..., None, :, :], h, axis=-3)
