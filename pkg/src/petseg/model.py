"""Two-channel segmentation U-Net with an SE-residual grouped-conv encoder.

The encoder is a 4-stage stack of residual bottleneck blocks: pointwise
expand, 3x3 grouped convolution (stride 2 on each stage's first block),
squeeze-and-excitation gate, pointwise project, with a projected shortcut
when the shape changes. The stem halves resolution once, so stage k runs
at 1/2^(k+1) of the input. The decoder upsamples five times with skip
connections from the stem and the four stages, ending in a single-logit
1x1 head at full resolution.

Normalization is group norm (batch-size independent, stable for the tiny
batches used at desk scale).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

CHECKPOINT_VERSION = 1
IN_CHANNELS = 2  # (CT, SUV)
DOWNSAMPLE_FACTOR = 32


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    stem_width: int = 32
    stage_depths: tuple[int, int, int, int] = (1, 2, 4, 2)
    stage_widths: tuple[int, int, int, int] = (48, 96, 192, 384)
    group_width: int = 24
    se_ratio: float = 0.25

    def __post_init__(self):
        for width in self.stage_widths:
            if width % self.group_width != 0:
                raise ModelConfigError(
                    f"stage width {width} not divisible by group width {self.group_width}"
                )
        if any(d < 1 for d in self.stage_depths):
            raise ModelConfigError(f"stage depths must be >= 1: {self.stage_depths}")
        if not 0 < self.se_ratio <= 1:
            raise ModelConfigError(f"se_ratio must be in (0, 1], got {self.se_ratio}")

    @classmethod
    def toy(cls) -> "EncoderConfig":
        """Small encoder for CPU-scale experiments and tests."""
        return cls(stem_width=16, stage_depths=(1, 1, 1, 1),
                   stage_widths=(16, 32, 64, 128), group_width=8)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


def _conv_norm_act(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                   groups: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2,
                  groups=groups, bias=False),
        _norm(out_ch),
        nn.ReLU(inplace=True),
    )


class SqueezeExcite(nn.Module):
    """Channel gate: global average pool -> bottleneck -> sigmoid scale."""

    def __init__(self, channels: int, se_ratio: float):
        super().__init__()
        mid = max(1, int(round(channels * se_ratio)))
        self.squeeze = nn.AdaptiveAvgPool2d(1)
        self.reduce = nn.Conv2d(channels, mid, 1)
        self.act = nn.ReLU(inplace=True)
        self.expand = nn.Conv2d(mid, channels, 1)

    def gate(self, x: Tensor) -> Tensor:
        g = self.squeeze(x)
        g = self.act(self.reduce(g))
        return torch.sigmoid(self.expand(g))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class ResidualBlock(nn.Module):
    """Expand -> grouped 3x3 -> SE -> project, with shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, group_width: int,
                 se_ratio: float):
        super().__init__()
        groups = out_ch // group_width
        self.expand = _conv_norm_act(in_ch, out_ch, kernel=1)
        self.spatial = _conv_norm_act(out_ch, out_ch, kernel=3, stride=stride,
                                      groups=groups)
        self.se = SqueezeExcite(out_ch, se_ratio)
        self.project = nn.Sequential(
            nn.Conv2d(out_ch, out_ch, 1, bias=False),
            _norm(out_ch),
        )
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                _norm(out_ch),
            )
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: Tensor) -> Tensor:
        out = self.expand(x)
        out = self.spatial(out)
        out = self.se(out)
        out = self.project(out)
        return self.act(out + self.shortcut(x))


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.stem = _conv_norm_act(IN_CHANNELS, config.stem_width, stride=2)
        stages = []
        in_ch = config.stem_width
        for depth, width in zip(config.stage_depths, config.stage_widths):
            blocks = []
            for i in range(depth):
                stride = 2 if i == 0 else 1
                blocks.append(ResidualBlock(in_ch, width, stride,
                                            config.group_width, config.se_ratio))
                in_ch = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x: Tensor) -> list[Tensor]:
        """Feature pyramid [stem, stage1..stage4], coarsest last."""
        features = [self.stem(x)]
        for stage in self.stages:
            features.append(stage(features[-1]))
        return features


class DecoderLevel(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = _conv_norm_act(in_ch + skip_ch, out_ch)
        self.conv2 = _conv_norm_act(out_ch, out_ch)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv2(self.conv1(x))


class SegModel(nn.Module):
    """2-channel in, 1-logit out, shape preserving for H, W divisible by 32."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        widths = config.stage_widths
        skip_chs = [widths[2], widths[1], widths[0], config.stem_width, 0]
        out_chs = [widths[2], widths[1], widths[0], config.stem_width,
                   max(8, config.stem_width // 2)]
        levels = []
        in_ch = widths[3]
        for skip_ch, out_ch in zip(skip_chs, out_chs):
            levels.append(DecoderLevel(in_ch, skip_ch, out_ch))
            in_ch = out_ch
        self.decoder = nn.ModuleList(levels)
        self.head = nn.Conv2d(in_ch, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != IN_CHANNELS:
            raise ValueError(f"expected B x {IN_CHANNELS} x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(f"H and W must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}")
        features = self.encoder(x)
        skips = [features[3], features[2], features[1], features[0], None]
        out = features[4]
        for level, skip in zip(self.decoder, skips):
            out = level(out, skip)
        return self.head(out)


def build_model(config: EncoderConfig | None = None, seed: int = 0) -> SegModel:
    """Construct a SegModel with seed-reproducible initialization."""
    config = config or EncoderConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SegModel(config)


def checkpoint_payload(model: SegModel, loss_weights=None,
                       extra: dict | None = None) -> dict:
    """Self-contained snapshot: versioned header, config, named parameter arrays."""
    snap = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    return {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": asdict(model.config),
        "model_state": snap,
        "loss_weights_state": None if loss_weights is None else {
            k: v.detach().cpu().clone() for k, v in loss_weights.state_dict().items()
        },
        "extra": extra or {},
    }


def save_checkpoint(path: Path | str, model: SegModel, loss_weights=None,
                    extra: dict | None = None) -> None:
    torch.save(checkpoint_payload(model, loss_weights, extra), str(path))


def load_checkpoint(source: Path | str | dict) -> tuple[SegModel, dict]:
    """Rebuild a model from a checkpoint file or an in-memory payload."""
    if isinstance(source, dict):
        payload = source
    else:
        payload = torch.load(str(source), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ModelConfigError(f"unsupported checkpoint version {version}")
    cfg_dict = dict(payload["encoder_config"])
    cfg_dict["stage_depths"] = tuple(cfg_dict["stage_depths"])
    cfg_dict["stage_widths"] = tuple(cfg_dict["stage_widths"])
    model = SegModel(EncoderConfig(**cfg_dict))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload
