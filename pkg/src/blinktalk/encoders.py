"""Video-side feature encoders.

Four factors are encoded separately so the generator can be driven by
mixed sources: identity from one reference frame, head pose from a
reference video, speech content from audio at inference time (the
visual twin below exists for cross-modal training), and eye state from
the eye region.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

IDENTITY_DIM = 128
POSE_DIM = 12
CONTENT_DIM = 128
BLINK_CLASSES = 6
# rank of the linear bottleneck ahead of each content head; the state
# shared by audio and mouth crops is low-dimensional, and the funnel
# keeps the embedding from spending capacity on per-clip detail
CONTENT_RANK = 4

# mouth crops stacked per content feature; a single frame keeps the
# code aligned with the one-frame audio window it is contrasted against
CONTENT_WINDOW = 1


def _gn(channels):
    return nn.GroupNorm(8, channels)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = _gn(cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class IdentityEncoder(nn.Module):
    """One frame to a unit-norm identity code."""

    def __init__(self, dim=IDENTITY_DIM):
        super().__init__()
        self.layers = nn.Sequential(
            ConvBlock(3, 16, 2),    # 32
            ConvBlock(16, 32, 2),   # 16
            ConvBlock(32, 64, 2),   # 8
            ConvBlock(64, 96, 2),   # 4
        )
        self.fc = nn.Linear(96, dim)

    def forward(self, frames):
        x = frames.to(self.fc.weight.dtype)
        h = self.layers(x).mean(dim=(2, 3))
        return F.normalize(self.fc(h), dim=1)


class Hourglass(nn.Module):
    """Single encoder-decoder stage with additive skip connections."""

    def __init__(self, channels, depth):
        super().__init__()
        self.depth = depth
        self.down = nn.ModuleList([ConvBlock(channels, channels)
                                   for _ in range(depth)])
        self.skip = nn.ModuleList([ConvBlock(channels, channels)
                                   for _ in range(depth)])
        self.bottom = ConvBlock(channels, channels)
        self.up = nn.ModuleList([ConvBlock(channels, channels)
                                 for _ in range(depth)])

    def forward(self, x):
        skips = []
        for i in range(self.depth):
            skips.append(self.skip[i](x))
            x = self.down[i](F.avg_pool2d(x, 2))
        x = self.bottom(x)
        for i in reversed(range(self.depth)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.up[i](x) + skips[i]
        return x


class PoseEncoder(nn.Module):
    """Two stacked hourglasses distilled to a low-dimensional pose code.

    The code is deliberately narrow so appearance cannot ride along;
    training additionally applies color jitter to enforce that.  The
    auxiliary head regresses normalized (angle, shift_x, shift_y) and
    exists only to supervise the code; downstream consumers read the
    code itself.
    """

    def __init__(self, dim=POSE_DIM, channels=32, depth=3, stacks=2):
        super().__init__()
        self.stem = nn.Sequential(ConvBlock(3, 16, 2), ConvBlock(16, channels))
        self.stages = nn.ModuleList([Hourglass(channels, depth)
                                     for _ in range(stacks)])
        self.fc = nn.Linear(channels, dim)
        self.head = nn.Linear(dim, 3)

    def forward(self, frames):
        x = frames.to(self.fc.weight.dtype)
        h = self.stem(x)
        for stage in self.stages:
            h = h + stage(h)
        return self.fc(h.mean(dim=(2, 3)))


class VisualContentEncoder(nn.Module):
    """Mouth crop(s) to a unit-norm speech-content code.

    Input stacks CONTENT_WINDOW consecutive RGB crops along channels.
    Keeping the window as narrow as the per-frame audio window matters:
    wider crops would carry lip dynamics the audio side cannot see, and
    the contrastive loss would rather encode those than stay aligned.
    """

    def __init__(self, dim=CONTENT_DIM):
        super().__init__()
        self.layers = nn.Sequential(
            ConvBlock(3 * CONTENT_WINDOW, 32, 2),  # 16
            ConvBlock(32, 48, 2),                  # 8
            ConvBlock(48, 64, 2),                  # 4
            ConvBlock(64, 64),
        )
        self.squeeze = nn.Linear(64 + 32, CONTENT_RANK)
        self.fc = nn.Linear(CONTENT_RANK, dim)

    def forward(self, crop_windows):
        x = crop_windows.to(self.fc.weight.dtype)
        if x.ndim != 4 or x.shape[1] != 3 * CONTENT_WINDOW:
            raise ValueError("expected stacked mouth-crop windows")
        if x.shape[2] < 8 or x.shape[3] < 8 or not torch.isfinite(x).all():
            raise ValueError("degenerate mouth crops")
        h = self.layers(x).mean(dim=(2, 3))
        # standardized vertical intensity profile; the group-normalized
        # conv path cannot keep absolute row means, yet the dark mouth
        # interior's extent is exactly what the code must resolve
        profile = F.interpolate(x.mean(dim=1, keepdim=True).mean(dim=3)
                                .unsqueeze(3), size=(32, 1),
                                mode="bilinear", align_corners=False)
        profile = profile.reshape(x.shape[0], 32)
        profile = (profile - profile.mean(dim=1, keepdim=True)) \
            / (profile.std(dim=1, keepdim=True) + 1e-6)
        return F.normalize(
            self.fc(self.squeeze(torch.cat([h, profile], dim=1))), dim=1)


class VideoBlinkClassifier(nn.Module):
    """Eyes-masked frame to 6 blink-intensity class logits."""

    def __init__(self, classes=BLINK_CLASSES):
        super().__init__()
        self.layers = nn.Sequential(
            ConvBlock(3, 16, 2),    # 32
            ConvBlock(16, 32, 2),   # 16
            ConvBlock(32, 48, 2),   # 8
            ConvBlock(48, 64, 2),   # 4
        )
        self.fc = nn.Linear(64, classes)

    def forward(self, masked_frames):
        x = masked_frames.to(self.fc.weight.dtype)
        h = self.layers(x).mean(dim=(2, 3))
        return self.fc(h)


def au45_from_logits(logits):
    """Expected blink intensity under the class distribution."""
    values = torch.arange(logits.shape[-1], dtype=logits.dtype,
                          device=logits.device)
    return (torch.softmax(logits, dim=-1) * values).sum(dim=-1)


def frames_to_tensor(frames):
    """(T, H, W, 3) numpy video to a (T, 3, H, W) float tensor."""
    t = torch.as_tensor(frames, dtype=torch.float32)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()
