"""Style-based frame generator conditioned on the packed feature vector.

All conditioning enters through per-site adaptive instance norm styles
computed from the packed vector; the synthesis trunk itself starts from
a learned constant, uses no noise injection, and is therefore a
deterministic function of the styles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audiofeat import AUVector
from .encoders import CONTENT_DIM, IDENTITY_DIM, POSE_DIM

BLINK_DIM = 71

ID_SLICE = slice(0, IDENTITY_DIM)
POSE_SLICE = slice(IDENTITY_DIM, IDENTITY_DIM + POSE_DIM)
CONTENT_SLICE = slice(POSE_SLICE.stop, POSE_SLICE.stop + CONTENT_DIM)
BLINK_SLICE = slice(CONTENT_SLICE.stop, CONTENT_SLICE.stop + BLINK_DIM)
FCAT_DIM = BLINK_SLICE.stop  # 339

ADAIN_EPS = 1e-5

GENERATOR_CHANNELS = (128, 96, 64, 48, 32)  # const input then four up-blocks
OUTPUT_SIZE = 64


@dataclass
class ConcatFeature:
    """Packed conditioning vector: identity, pose, content, blink."""

    tensor: torch.Tensor

    def __post_init__(self):
        if self.tensor.shape[-1] != FCAT_DIM:
            raise ValueError(f"expected last dim {FCAT_DIM}")
        if not torch.isfinite(self.tensor).all():
            raise ValueError("packed features must be finite")

    @property
    def identity(self):
        return self.tensor[..., ID_SLICE]

    @property
    def pose(self):
        return self.tensor[..., POSE_SLICE]

    @property
    def content(self):
        return self.tensor[..., CONTENT_SLICE]

    @property
    def blink(self):
        return self.tensor[..., BLINK_SLICE]


def _coerce(part, dim):
    if isinstance(part, AUVector):
        part = torch.as_tensor(part.values)
    elif not isinstance(part, torch.Tensor):
        part = torch.as_tensor(np.asarray(part))
    if part.shape[-1] != dim:
        raise ValueError(f"expected trailing dim {dim}, got {tuple(part.shape)}")
    return part


def assemble_fcat(identity, pose, content, blink,
                  no_pose=False, no_au=False) -> ConcatFeature:
    """Pack the four conditioning parts, optionally zeroing ablated ones."""
    identity = _coerce(identity, IDENTITY_DIM)
    pose = _coerce(pose, POSE_DIM).to(identity.dtype)
    content = _coerce(content, CONTENT_DIM).to(identity.dtype)
    blink = _coerce(blink, BLINK_DIM).to(identity.dtype)
    if no_pose:
        pose = torch.zeros_like(pose)
    if no_au:
        blink = torch.zeros_like(blink)
    return ConcatFeature(torch.cat([identity, pose, content, blink], dim=-1))


def adain(feature_map, scale, bias, eps=ADAIN_EPS):
    """Adaptive instance normalization.

    Normalizes each channel over its spatial extent then applies the
    given per-channel scale and bias.  Accepts (C, H, W) with (C,)
    styles or batched (B, C, H, W) with (B, C) styles.
    """
    squeeze = feature_map.ndim == 3
    if squeeze:
        feature_map = feature_map.unsqueeze(0)
        scale = scale.unsqueeze(0)
        bias = bias.unsqueeze(0)
    if feature_map.ndim != 4:
        raise ValueError("expected a (B, C, H, W) feature map")
    mean = feature_map.mean(dim=(2, 3), keepdim=True)
    var = feature_map.var(dim=(2, 3), unbiased=False, keepdim=True)
    normed = (feature_map - mean) / torch.sqrt(var + eps)
    out = scale[:, :, None, None] * normed + bias[:, :, None, None]
    return out.squeeze(0) if squeeze else out


def style_site_channels():
    """Channel width at each adaptive normalization site, in order."""
    sites = []
    for cout in GENERATOR_CHANNELS[1:]:
        sites += [cout, cout]
    return tuple(sites)


class StyleMapper(nn.Module):
    """Three-layer MLP from the packed vector to all per-site styles.

    Raw outputs parameterize scales as (1 + raw), so a zero-weight
    mapper yields identity styles everywhere.
    """

    def __init__(self, hidden=256):
        super().__init__()
        self.sites = style_site_channels()
        total = 2 * sum(self.sites)
        self.net = nn.Sequential(
            nn.Linear(FCAT_DIM, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, total),
        )

    def forward(self, fcat):
        if isinstance(fcat, ConcatFeature):
            fcat = fcat.tensor
        fcat = fcat.to(self.net[0].weight.dtype)
        if fcat.ndim == 1:
            fcat = fcat.unsqueeze(0)
        raw = self.net(fcat)
        styles = []
        offset = 0
        for c in self.sites:
            scale = 1.0 + raw[:, offset:offset + c]
            bias = raw[:, offset + c:offset + 2 * c]
            styles.append((scale, bias))
            offset += 2 * c
        return styles

    def zero_init(self):
        """Zero all mapper parameters; styles collapse to scale 1, bias 0."""
        for p in self.parameters():
            nn.init.zeros_(p)
        return self


class _UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x, style1, style2):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(adain(self.conv1(x), *style1), 0.2)
        x = F.leaky_relu(adain(self.conv2(x), *style2), 0.2)
        return x


class SynthesisNet(nn.Module):
    """Learned-constant trunk: four upsampling blocks from 4x4 to 64x64."""

    def __init__(self):
        super().__init__()
        chans = GENERATOR_CHANNELS
        self.constant = nn.Parameter(torch.randn(1, chans[0], 4, 4))
        self.blocks = nn.ModuleList([
            _UpBlock(chans[i], chans[i + 1]) for i in range(len(chans) - 1)])
        self.to_rgb = nn.Conv2d(chans[-1], 3, 1)

    def forward(self, styles):
        batch = styles[0][0].shape[0]
        x = self.constant.expand(batch, -1, -1, -1)
        for i, block in enumerate(self.blocks):
            x = block(x, styles[2 * i], styles[2 * i + 1])
        return torch.sigmoid(self.to_rgb(x))


class FrameGenerator(nn.Module):
    """Packed features in, RGB frame in [0, 1] out."""

    def __init__(self):
        super().__init__()
        self.mapper = StyleMapper()
        self.synthesis = SynthesisNet()

    def forward(self, fcat):
        return self.synthesis(self.mapper(fcat))
