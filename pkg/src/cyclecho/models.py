"""Segmentation and video-regression network definitions.

Backbones are pluggable: a 4-stage convolutional encoder (embedding size 64)
keeps desk-scale runs in CPU territory, while the deep residual variants match
the capacity class used for full-scale training. The frame encoder exposes
both a pooled per-frame embedding (consumed by the cyclical-consistency loss)
and the pre-pool feature map (consumed by the mask decoder), so the two
training signals share exactly the encoder parameters.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


def _norm(channels: int) -> nn.Module:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


def _conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        _norm(out_ch),
        nn.ReLU(inplace=True),
    )


class FrameEncoder(nn.Module):
    """Small strided conv encoder: frame [B, 3, H, W] -> (embedding, feature map)."""

    def __init__(self, widths=(24, 48, 64, 64), in_channels: int = 3):
        super().__init__()
        layers = []
        prev = in_channels
        for w in widths:
            layers.append(_conv_block(prev, w, stride=2))
            prev = w
        self.stages = nn.Sequential(*layers)
        self.embed_dim = widths[-1]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fmap = self.stages(x)
        return fmap.mean(dim=(2, 3)), fmap


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch)
            )

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        res = x if self.skip is None else self.skip(x)
        return F.relu(out + res)


class DeepFrameEncoder(nn.Module):
    """Residual encoder of full-scale capacity (stride 16, embedding 512)."""

    def __init__(self, widths=(64, 128, 256, 512), blocks: int = 2, in_channels: int = 3):
        super().__init__()
        self.stem = _conv_block(in_channels, widths[0], stride=2)
        stages = []
        prev = widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            stage = [ResidualBlock(prev, w, stride=stride)]
            stage += [ResidualBlock(w, w) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*stage))
            prev = w
        self.stages = nn.Sequential(*stages)
        self.embed_dim = widths[-1]

    def forward(self, x):
        fmap = self.stages(self.stem(x))
        return fmap.mean(dim=(2, 3)), fmap


class PyramidDecoder(nn.Module):
    """Spatial-pyramid mask decoder: parallel atrous branches plus an image-level
    pooling branch, fused and upsampled to a per-pixel foreground logit."""

    def __init__(self, in_ch: int, mid: int = 48, rates=(1, 2, 3)):
        super().__init__()
        self.branches = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(in_ch, mid, 3, padding=r, dilation=r, bias=False),
                    _norm(mid),
                    nn.ReLU(inplace=True),
                )
                for r in rates
            ]
        )
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_ch, mid, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(mid * (len(rates) + 1), mid, 1, bias=False),
            _norm(mid),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(mid, 1, 1)

    def forward(self, fmap: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
        feats = [b(fmap) for b in self.branches]
        pooled = self.image_pool(fmap)
        feats.append(pooled.expand(-1, -1, fmap.shape[2], fmap.shape[3]))
        fused = self.fuse(torch.cat(feats, dim=1))
        logits = self.head(fused)
        logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
        return logits.squeeze(1)


class SegmentationModel(nn.Module):
    """Shared frame encoder plus mask decoder.

    embed() exposes the pooled per-frame features for the cyclical loss; the
    decoder never appears on that path, so cyclical gradients touch only
    encoder parameters.
    """

    def __init__(self, encoder: nn.Module, decoder: PyramidDecoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    @property
    def embed_dim(self) -> int:
        return self.encoder.embed_dim

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        emb, _ = self.encoder(frames)
        return emb

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        _, fmap = self.encoder(frames)
        return self.decoder(fmap, frames.shape[-2:])


def build_segmentation_model(arch: str = "small") -> SegmentationModel:
    if arch == "small":
        encoder = FrameEncoder()
        decoder = PyramidDecoder(encoder.embed_dim, mid=48, rates=(1, 2, 3))
    elif arch == "deep":
        encoder = DeepFrameEncoder()
        decoder = PyramidDecoder(encoder.embed_dim, mid=256, rates=(1, 2, 4))
    else:
        raise ValueError(f"unknown segmentation arch '{arch}'")
    return SegmentationModel(encoder, decoder)


def _conv3d_block(in_ch: int, out_ch: int, stride, factorized: bool) -> nn.Sequential:
    def norm3d(ch):
        return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)

    st, sh, sw = stride
    if factorized:
        # spatial then temporal convolution, the (2+1)D factorization
        return nn.Sequential(
            nn.Conv3d(in_ch, out_ch, (1, 3, 3), stride=(1, sh, sw), padding=(0, 1, 1), bias=False),
            norm3d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_ch, out_ch, (3, 1, 1), stride=(st, 1, 1), padding=(1, 0, 0), bias=False),
            norm3d(out_ch),
            nn.ReLU(inplace=True),
        )
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        norm3d(out_ch),
        nn.ReLU(inplace=True),
    )


class VideoRegressor(nn.Module):
    """Spatio-temporal conv network mapping a clip [B, C, L, H, W] to a scalar."""

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64, 64), factorized: bool = False):
        super().__init__()
        self.in_channels = in_channels
        strides = [(1, 2, 2)] + [(2, 2, 2)] * (len(widths) - 1)
        layers = []
        prev = in_channels
        for w, s in zip(widths, strides):
            layers.append(_conv3d_block(prev, w, s, factorized))
            prev = w
        self.stages = nn.Sequential(*layers)
        # pool space first, then summarize the per-time trajectory with its
        # mean and extremes: the fraction lives in the cycle's extreme frames,
        # which a single global mean washes out
        self.head = nn.Linear(3 * prev, 1)
        # start predictions near the middle of the physiological range instead
        # of 0; regression converges in far fewer steps
        nn.init.constant_(self.head.bias, 55.0)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.dim() != 5:
            raise ValueError(f"expected clips [B, C, L, H, W], got shape {tuple(clips.shape)}")
        if clips.shape[1] != self.in_channels:
            raise ValueError(
                f"model takes {self.in_channels}-channel clips, got {clips.shape[1]} channels"
            )
        feats = self.stages(clips)
        traj = feats.mean(dim=(3, 4))  # [B, C, T']
        pooled = torch.cat([traj.mean(dim=2), traj.amax(dim=2), traj.amin(dim=2)], dim=1)
        return self.head(pooled).squeeze(-1)


def build_video_regressor(arch: str = "small", in_channels: int = 3) -> VideoRegressor:
    if arch == "small":
        return VideoRegressor(in_channels=in_channels, widths=(16, 32, 64, 64))
    if arch == "deep":
        return VideoRegressor(in_channels=in_channels, widths=(32, 64, 128, 256), factorized=True)
    raise ValueError(f"unknown regressor arch '{arch}'")


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: Path | str, model: nn.Module, meta: dict) -> None:
    """Weights plus a self-describing meta block (kind, arch, config, rng state)."""
    payload = dict(meta)
    payload["state"] = model.state_dict()
    payload.setdefault("torch_rng", torch.get_rng_state())
    torch.save(payload, Path(path))


def load_checkpoint(path: Path | str) -> tuple[nn.Module, dict]:
    """Rebuild the model a checkpoint describes and load its weights."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    kind = payload.get("kind")
    if kind == "segmentation":
        model = build_segmentation_model(payload.get("arch", "small"))
    elif kind == "regressor":
        model = build_video_regressor(payload.get("arch", "small"), payload.get("in_channels", 3))
    else:
        raise ValueError(f"checkpoint {path} has unknown kind '{kind}'")
    model.load_state_dict(payload["state"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state"}
    return model, meta
