"""Weighted BCE, the blur-weighted "hazy" BCE, and the 3-D Gaussian blur behind it."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigError

# Offsets at which the Gaussian has fallen below this fraction of its peak are
# dropped; the 4-sigma floor is kept as a minimum extent.
EDGE_RATIO = 1e-4
MIN_TRUNCATE = 4.0


@dataclass(frozen=True)
class LossConfig:
    spatial_value: float = 19.21
    temporal_value: float = 0.96
    value_is_variance: bool = True
    pos_weight: float = 20.0
    eps: float = 1e-7
    hazy: bool = True

    def __post_init__(self):
        if not (self.spatial_value > 0 and self.temporal_value > 0):
            raise ConfigError("blur spreads must be positive")
        if not self.pos_weight > 0:
            raise ConfigError("pos_weight must be positive")
        if not 0 < self.eps < 0.5:
            raise ConfigError("eps must lie in (0, 0.5)")

    @property
    def sigmas(self) -> tuple[float, float, float]:
        """Standard deviations along (time, row, col)."""
        conv = math.sqrt if self.value_is_variance else float
        st, ss = conv(self.temporal_value), conv(self.spatial_value)
        return (st, ss, ss)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BlurKernel3D:
    sigmas: tuple[float, float, float]
    sizes: tuple[int, int, int]
    weights: np.ndarray  # unit sum, shape == sizes

    @property
    def radii(self) -> tuple[int, int, int]:
        return tuple(s // 2 for s in self.sizes)

    def axis_weights(self) -> list[np.ndarray]:
        """The separable 1-D factors; their outer product equals ``weights``."""
        return [_gauss_1d(sig, r) for sig, r in zip(self.sigmas, self.radii)]


def gaussian_density(offsets: np.ndarray, sigmas) -> np.ndarray:
    """Unnormalized-grid evaluation of the trivariate normal density.

    ``offsets`` has trailing dimension 3 holding (dt, dy, dx) distances from the
    kernel centre.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    norm = (2 * np.pi) ** 1.5 * np.prod(s)
    return np.exp(-0.5 * np.sum((offsets / s) ** 2, axis=-1)) / norm


def kernel_radius(sigma: float) -> int:
    reach = max(MIN_TRUNCATE, math.sqrt(2.0 * math.log(1.0 / EDGE_RATIO)))
    return int(math.ceil(reach * sigma))


def _gauss_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_kernel_3d(config: LossConfig | None = None, sigmas=None) -> BlurKernel3D:
    """Sample the density at integer offsets and renormalize to unit sum."""
    if sigmas is None:
        sigmas = (config or LossConfig()).sigmas
    sigmas = tuple(float(s) for s in sigmas)
    if any(s <= 0 for s in sigmas):
        raise ConfigError("sigmas must be positive")
    radii = [kernel_radius(s) for s in sigmas]
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in radii], indexing="ij")
    w = gaussian_density(np.stack(grids, axis=-1), sigmas)
    w /= w.sum()
    return BlurKernel3D(sigmas, tuple(2 * r + 1 for r in radii), w)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def blur_ground_truth(L, kernel: BlurKernel3D, normalize: bool = True):
    """Blur (h, R, C) or (B, h, R, C) binary truth and max-normalize each time slice.

    Zero padding of ``size // 2`` on every axis; all-zero slices stay zero.
    ``normalize=False`` returns the raw convolution.  Returns the same
    container type as the input.
    """
    is_numpy = not isinstance(L, torch.Tensor)
    x = _as_tensor(L)
    out_dtype = x.dtype if x.is_floating_point() else torch.float32
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ConfigError(f"expected (h, R, C) or (B, h, R, C), got {tuple(x.shape)}")
    v = x.detach().to(torch.float64).unsqueeze(1)  # (B, 1, h, R, C)
    for axis, w in enumerate(kernel.axis_weights()):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = len(w)
        pad = [0, 0, 0]
        pad[axis] = len(w) // 2
        v = F.conv3d(v, torch.as_tensor(w).view(shape), padding=tuple(pad))
    v = v.squeeze(1)
    if not normalize:
        v = v.to(out_dtype)
        v = v.squeeze(0) if squeeze else v
        return v.numpy() if is_numpy else v
    peak = v.amax(dim=(-2, -1), keepdim=True)
    v = torch.where(peak > 0, v / torch.where(peak > 0, peak, torch.ones_like(peak)), torch.zeros_like(v))
    v = v.clamp_(0.0, 1.0).to(out_dtype)
    if squeeze:
        v = v.squeeze(0)
    return v.numpy() if is_numpy else v


def _clamp(pred: torch.Tensor, eps: float) -> torch.Tensor:
    return pred.clamp(eps, 1.0 - eps)


def cellwise_bce(pred: torch.Tensor, truth: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    p = _clamp(pred, eps)
    return -(truth * torch.log(p) + (1 - truth) * torch.log1p(-p))


def wbce_loss(pred, truth, pos_weight: float = 20.0, eps: float = 1e-7) -> torch.Tensor:
    """Mean over cells of ``-(w*y*log p + (1-y)*log(1-p))``."""
    pred, truth = _as_tensor(pred), _as_tensor(truth).to(_as_tensor(pred).dtype)
    if pred.shape != truth.shape:
        raise ConfigError(f"pred {tuple(pred.shape)} and truth {tuple(truth.shape)} differ")
    p = _clamp(pred, eps)
    return -(pos_weight * truth * torch.log(p) + (1 - truth) * torch.log1p(-p)).mean()


def importance_factor(pred: torch.Tensor, blurred: torch.Tensor) -> torch.Tensor:
    return (1 - blurred) * pred + blurred * (1 - pred)


def hazy_loss(pred, truth, blurred, eps: float = 1e-7) -> torch.Tensor:
    """``sum(P * B) / n_cells``; averaged over the batch when inputs are batched."""
    pred = _as_tensor(pred)
    truth = _as_tensor(truth).to(pred.dtype)
    blurred = _as_tensor(blurred).to(pred.dtype)
    if not pred.shape == truth.shape == blurred.shape:
        raise ConfigError("pred, truth and blurred truth must share a shape")
    p = _clamp(pred, eps)
    return (importance_factor(p, blurred) * cellwise_bce(p, truth, eps)).mean()


class DeepLightLoss(torch.nn.Module):
    """WBCE plus hazy loss.  The blurred truth is data, never differentiated."""

    def __init__(self, config: LossConfig | None = None):
        super().__init__()
        self.config = config or LossConfig()
        self.kernel = gaussian_kernel_3d(self.config)

    def blur(self, truth):
        return blur_ground_truth(truth, self.kernel)

    def forward(self, pred: torch.Tensor, truth: torch.Tensor, blurred: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.config
        truth = truth.to(pred.dtype)
        loss = wbce_loss(pred, truth, cfg.pos_weight, cfg.eps)
        if not cfg.hazy:
            return loss
        if blurred is None:
            blurred = self.blur(truth)
        return loss + hazy_loss(pred, truth, blurred.detach().to(pred.dtype), cfg.eps)


def total_loss(pred, truth, config: LossConfig | None = None, blurred=None) -> torch.Tensor:
    return DeepLightLoss(config)(_as_tensor(pred), _as_tensor(truth), blurred)
