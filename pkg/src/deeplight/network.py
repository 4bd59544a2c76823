"""Dual-encoder / single-decoder forecaster built from multi-branch convolutions.

Tensor layout is (batch, [time,] channel, row, col) throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError

BRANCH_KERNELS = (3, 5, 7, 11)
LIGHT_CHANNELS = 3
AUX_CHANNELS = 4
RADAR_SLICE = slice(0, 1)  # within the aux group
CLOUD_SLICE = slice(1, 4)


@dataclass(frozen=True)
class ModelConfig:
    rows: int = 32
    cols: int = 32
    s: int = 6
    h: int = 6
    branch_channels: int = 8
    hidden_channels: int = 32
    stem_channels: int = 32
    cstem_stages: int = 2
    kernel_sizes: tuple[int, ...] = BRANCH_KERNELS
    use_lightning: bool = True
    use_radar: bool = True
    use_cloud: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if min(self.rows, self.cols, self.s, self.h) < 1:
            raise ConfigError("rows, cols, s and h must be >= 1")
        if self.cstem_stages < 1:
            raise ConfigError("cstem_stages must be >= 1")
        if min(self.branch_channels, self.hidden_channels, self.stem_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"branch kernels must be odd and positive, got {self.kernel_sizes}")

    @property
    def latent_shape(self) -> tuple[int, int]:
        r, c = self.rows, self.cols
        for _ in range(self.cstem_stages):
            r, c = -(-r // 2), -(-c // 2)
        return r, c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class CellState(NamedTuple):
    H: torch.Tensor
    C: torch.Tensor


class MultiBranchConv(nn.Module):
    """Parallel KxK convolutions concatenated and mixed by a 1x1 convolution.

    ``mode="cstem"``: conv -> batch-norm -> ReLU per branch, fuse with bias.
    ``mode="lstm"``: conv -> ReLU per branch, fuse without bias (the gates
    carry their own biases) and nothing after the fuse.
    """

    def __init__(self, in_channels: int, branch_channels: int, out_channels: int,
                 kernel_sizes: Sequence[int] = BRANCH_KERNELS, mode: str = "cstem"):
        super().__init__()
        if mode not in ("cstem", "lstm"):
            raise ConfigError(f"unknown multi-branch mode {mode!r}")
        self.mode = mode
        self.in_channels = in_channels
        self.kernel_sizes = tuple(kernel_sizes)
        use_bn = mode == "cstem"
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, branch_channels, k, padding=k // 2, bias=not use_bn) for k in self.kernel_sizes
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(branch_channels) for _ in self.kernel_sizes) if use_bn else None
        self.fuse = nn.Conv2d(branch_channels * len(self.kernel_sizes), out_channels, 1, bias=use_bn)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigError(f"expected (B, {self.in_channels}, R, C) input, got {tuple(x.shape)}")
        outs = []
        for i, conv in enumerate(self.branches):
            y = conv(x)
            if self.norms is not None:
                y = self.norms[i](y)
            outs.append(F.relu(y))
        return self.fuse(torch.cat(outs, dim=1))


def pool_halve(x: torch.Tensor) -> torch.Tensor:
    """2x2/2 max-pool after zero-padding odd trailing edges."""
    pad_c, pad_r = x.shape[-1] % 2, x.shape[-2] % 2
    if pad_c or pad_r:
        x = F.pad(x, (0, pad_c, 0, pad_r))
    return F.max_pool2d(x, 2, 2)


class CStem(nn.Module):
    """``stages`` x (multi-branch block -> pad-and-pool); halves the grid per stage."""

    def __init__(self, in_channels: int, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList()
        c = in_channels
        for _ in range(config.cstem_stages):
            self.blocks.append(MultiBranchConv(c, config.branch_channels, config.stem_channels,
                                               config.kernel_sizes, mode="cstem"))
            c = config.stem_channels
        self.out_channels = c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = pool_halve(block(x))
        return x


class MBConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden_channels: int, latent_shape: tuple[int, int],
                 branch_channels: int, kernel_sizes: Sequence[int] = BRANCH_KERNELS):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.latent_shape = tuple(latent_shape)
        self.input_block = MultiBranchConv(in_channels, branch_channels, 4 * hidden_channels, kernel_sizes, "lstm")
        self.hidden_block = MultiBranchConv(hidden_channels, branch_channels, 4 * hidden_channels, kernel_sizes, "lstm")
        shape = (hidden_channels,) + self.latent_shape
        self.W_cf = nn.Parameter(torch.zeros(shape))
        self.W_ci = nn.Parameter(torch.zeros(shape))
        self.W_co = nn.Parameter(torch.zeros(shape))
        self.b_f = nn.Parameter(torch.zeros(hidden_channels))
        self.b_i = nn.Parameter(torch.zeros(hidden_channels))
        self.b_c = nn.Parameter(torch.zeros(hidden_channels))
        self.b_o = nn.Parameter(torch.zeros(hidden_channels))

    def init_state(self, batch: int, like: torch.Tensor) -> CellState:
        z = like.new_zeros((batch, self.hidden_channels) + self.latent_shape)
        return CellState(z, z.clone())

    def forward(self, x: torch.Tensor, state: CellState, return_gates: bool = False):
        H, C = state
        if H.shape[1:] != (self.hidden_channels,) + self.latent_shape:
            raise ConfigError(f"state shape {tuple(H.shape[1:])} does not match the cell")
        xs = torch.chunk(self.input_block(x), 4, dim=1)
        hs = torch.chunk(self.hidden_block(H), 4, dim=1)

        def bias(b):
            return b.view(1, -1, 1, 1)

        f = torch.sigmoid(xs[0] + hs[0] + self.W_cf * C + bias(self.b_f))
        i = torch.sigmoid(xs[1] + hs[1] + self.W_ci * C + bias(self.b_i))
        C_new = f * C + i * torch.tanh(xs[2] + hs[2] + bias(self.b_c))
        o = torch.sigmoid(xs[3] + hs[3] + self.W_co * C_new + bias(self.b_o))
        H_new = o * torch.tanh(C_new)
        new = CellState(H_new, C_new)
        if return_gates:
            return new, {"f": f, "i": i, "o": o}
        return new


class Encoder(nn.Module):
    def __init__(self, in_channels: int, config: ModelConfig):
        super().__init__()
        self.stem = CStem(in_channels, config)
        self.cell = MBConvLSTMCell(self.stem.out_channels, config.hidden_channels, config.latent_shape,
                                   config.branch_channels, config.kernel_sizes)

    def forward(self, seq: torch.Tensor) -> CellState:
        """``seq`` is (B, s, C, R, C); returns the state after the last step."""
        B, s = seq.shape[:2]
        # the stem is per-frame, so all steps go through it in one batch
        feats = self.stem(seq.reshape((B * s,) + seq.shape[2:]))
        feats = feats.reshape((B, s) + feats.shape[1:])
        state = self.cell.init_state(B, feats)
        for t in range(s):
            state = self.cell(feats[:, t], state)
        return state


class Fusion(nn.Module):
    """ReLU(1x1 conv) over concatenated encoder states, separately for C and H."""

    def __init__(self, hidden_channels: int):
        super().__init__()
        self.conv_c = nn.Conv2d(2 * hidden_channels, hidden_channels, 1)
        self.conv_h = nn.Conv2d(2 * hidden_channels, hidden_channels, 1)

    def forward(self, light: CellState, aux: CellState) -> CellState:
        C = F.relu(self.conv_c(torch.cat([light.C, aux.C], dim=1)))
        H = F.relu(self.conv_h(torch.cat([light.H, aux.H], dim=1)))
        return CellState(H, C)


class UpScaler(nn.Module):
    """Stride-2 transposed convs (kernel 4, channels halved), then a 1x1 conv to logits."""

    def __init__(self, hidden_channels: int, stages: int, out_shape: tuple[int, int]):
        super().__init__()
        self.out_shape = tuple(out_shape)
        layers = []
        c = hidden_channels
        for _ in range(stages):
            nxt = max(c // 2, 1)
            layers.append(nn.ConvTranspose2d(c, nxt, 4, stride=2, padding=1))
            c = nxt
        self.ups = nn.ModuleList(layers)
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        x = H
        for up in self.ups:
            x = F.relu(up(x))
        x = self.head(x)
        R, C = self.out_shape
        if x.shape[-2] < R or x.shape[-1] < C:
            raise ConfigError(f"upscaled map {tuple(x.shape[-2:])} smaller than target {self.out_shape}")
        return x[..., :R, :C].squeeze(1)


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.stem = CStem(1, config)
        self.cell = MBConvLSTMCell(self.stem.out_channels, config.hidden_channels, config.latent_shape,
                                   config.branch_channels, config.kernel_sizes)
        self.upscaler = UpScaler(config.hidden_channels, config.cstem_stages, (config.rows, config.cols))

    def forward(self, state: CellState, first_frame: torch.Tensor, h: int) -> torch.Tensor:
        """Feed each predicted probability frame back in as the next input."""
        frame = first_frame.unsqueeze(1)
        outs = []
        for _ in range(h):
            state = self.cell(self.stem(frame), state)
            prob = torch.sigmoid(self.upscaler(state.H))
            outs.append(prob)
            frame = prob.unsqueeze(1)
        return torch.stack(outs, dim=1)


class DeepLight(nn.Module):
    """Lightning encoder + auxiliary encoder -> fused state -> autoregressive decoder."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.light_encoder = Encoder(LIGHT_CHANNELS, self.config)
        self.aux_encoder = Encoder(AUX_CHANNELS, self.config)
        self.fusion = Fusion(self.config.hidden_channels)
        self.decoder = Decoder(self.config)

    def apply_masks(self, light: torch.Tensor, aux: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.config
        if not cfg.use_lightning:
            light = torch.zeros_like(light)
        if not (cfg.use_radar and cfg.use_cloud):
            keep = torch.ones(AUX_CHANNELS, dtype=aux.dtype, device=aux.device)
            if not cfg.use_radar:
                keep[RADAR_SLICE] = 0
            if not cfg.use_cloud:
                keep[CLOUD_SLICE] = 0
            aux = aux * keep.view(1, 1, -1, 1, 1)
        return light, aux

    def forward(self, x: torch.Tensor, h: int | None = None) -> torch.Tensor:
        """``x`` is (B, s, 7, R, C); returns (B, h, R, C) probabilities."""
        cfg = self.config
        if x.dim() != 5 or x.shape[2] != LIGHT_CHANNELS + AUX_CHANNELS or x.shape[-2:] != (cfg.rows, cfg.cols):
            raise ConfigError(f"expected (B, s, 7, {cfg.rows}, {cfg.cols}) input, got {tuple(x.shape)}")
        light, aux = self.apply_masks(x[:, :, :LIGHT_CHANNELS], x[:, :, LIGHT_CHANNELS:])
        fused = self.fusion(self.light_encoder(light), self.aux_encoder(aux))
        return self.decoder(fused, light[:, -1, 0], cfg.h if h is None else h)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.bin holds little-endian float32 tensors back to back in
# the order listed by <stem>.json, which also carries the model config.
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "deeplight-params"


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return path.with_suffix(".bin"), path.with_suffix(".json")


def save_checkpoint(path: str | Path, model: DeepLight, metadata: dict | None = None) -> Path:
    bin_path, json_path = checkpoint_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, tensor in model.state_dict().items():
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.size * 4
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dtype": "<f4",
        "blob": bin_path.name,
        "config": model.config.to_dict(),
        "tensors": entries,
        "metadata": metadata or {},
    }
    json_path.write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return json_path


def read_checkpoint_meta(path: str | Path) -> dict:
    _, json_path = checkpoint_paths(path)
    try:
        meta = json.loads(json_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no checkpoint sidecar at {json_path}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{json_path} is not a {CHECKPOINT_FORMAT} sidecar")
    return meta


def load_checkpoint(path: str | Path) -> tuple[DeepLight, dict]:
    """Rebuild the model from a checkpoint; returns (model, sidecar)."""
    bin_path, _ = checkpoint_paths(path)
    meta = read_checkpoint_meta(path)
    model = DeepLight(ModelConfig.from_dict(meta["config"]))
    blob = np.fromfile(bin_path, dtype="<f4")
    reference = model.state_dict()
    state = {}
    for e in meta["tensors"]:
        start = e["offset"] // 4
        arr = blob[start:start + e["count"]].reshape(e["shape"])
        if e["name"] not in reference:
            raise ConfigError(f"checkpoint tensor {e['name']!r} does not belong to the model")
        state[e["name"]] = torch.from_numpy(arr.copy()).to(reference[e["name"]].dtype)
    model.load_state_dict(state)
    return model, meta


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def upscaled_size(latent: int, stages: int) -> int:
    return latent * 2 ** stages


def latent_size(n: int, stages: int) -> int:
    for _ in range(stages):
        n = math.ceil(n / 2)
    return n
