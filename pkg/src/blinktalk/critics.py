"""Adversarial critics and the full training loss family.

Two patch critics score the output at native and half resolution, a
frozen seeded conv pyramid stands in for a pretrained perceptual
backbone, and three small towers embed lip crops, eye crops, and mel
windows for the audio-visual sync probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audiofeat import load_matrix

CRITIC_SCALES = 2
PROB_CLAMP = 1e-7

PERCEPTUAL_LEVELS = 3
PERCEPTUAL_CHANNELS = (16, 32, 64)
PERCEPTUAL_SEED = 0x5EED

SYNC_EPS = 1e-8
SYNC_FRAMES = 5
SYNC_MEL_ROWS = 20
LIPS_EMBED_DIM = 64
EYES_EMBED_DIM = 64
AUDIO_EMBED_DIM = 128

LOSS_PART_NAMES = ("gan", "l1", "perceptual", "sync")


def _gn(channels):
    return nn.GroupNorm(8, channels)


class PatchCritic(nn.Module):
    """Convolutional critic emitting a map of patch scores."""

    def __init__(self, in_channels=3):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 32, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            _gn(64),
            nn.LeakyReLU(0.2),
            nn.Conv2d(64, 96, 4, stride=2, padding=1),
            _gn(96),
            nn.LeakyReLU(0.2),
            nn.Conv2d(96, 1, 3, padding=1),
        )

    def forward(self, images):
        return self.net(images.to(self.net[0].weight.dtype))


class MultiScaleCritic(nn.Module):
    """Patch critics at native and half resolution."""

    def __init__(self, in_channels=3):
        super().__init__()
        self.critics = nn.ModuleList(
            PatchCritic(in_channels) for _ in range(CRITIC_SCALES))

    def forward(self, images):
        maps = []
        x = images
        for critic in self.critics:
            maps.append(critic(x))
            x = F.avg_pool2d(x, 2)
        return maps


def _clamped_probs(scores):
    return torch.clamp(torch.sigmoid(scores), PROB_CLAMP, 1.0 - PROB_CLAMP)


def gan_loss(real_scores, fake_scores, side):
    """Non-saturating GAN loss summed over critic scales.

    The discriminator side scores real images toward 1 and fakes toward
    0; the generator side pushes fakes toward 1.  `real_scores` is
    ignored (may be None) on the generator side.
    """
    if side not in ("generator", "discriminator"):
        raise ValueError(f"unknown side {side!r}")
    total = None
    if side == "discriminator":
        if len(real_scores) != len(fake_scores):
            raise ValueError("scale count mismatch")
        for real, fake in zip(real_scores, fake_scores):
            if real.shape != fake.shape:
                raise ValueError("score map shape mismatch")
            term = (-torch.log(_clamped_probs(real)).mean()
                    - torch.log(1.0 - _clamped_probs(fake)).mean())
            total = term if total is None else total + term
    else:
        for fake in fake_scores:
            term = -torch.log(_clamped_probs(fake)).mean()
            total = term if total is None else total + term
    return total


def l1_loss(real, fake):
    if real.shape != fake.shape:
        raise ValueError("shape mismatch")
    return (real - fake).abs().mean()


class PerceptualPyramid(nn.Module):
    """Frozen random conv pyramid used as the perceptual feature space.

    Weights are seeded independently of the global RNG so the feature
    space is identical across runs; a pretrained backbone can be
    swapped in from matrix files without changing the interface.
    """

    def __init__(self, in_channels=3):
        super().__init__()
        gen = torch.Generator().manual_seed(PERCEPTUAL_SEED)
        convs = []
        cin = in_channels
        for cout in PERCEPTUAL_CHANNELS:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, images):
        x = images.to(self.convs[0].weight.dtype)
        out = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            out.append(x)
        return out

    def load_backbone(self, paths):
        """Replace level weights from matrix files (out x in*3*3 rows)."""
        if len(paths) != len(self.convs):
            raise ValueError(f"expected {len(self.convs)} weight files")
        for conv, path in zip(self.convs, paths):
            mat = load_matrix(path)
            expected = (conv.out_channels,
                        conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1])
            if mat.shape != expected:
                raise ValueError(f"{path}: expected shape {expected}, "
                                 f"got {mat.shape}")
            with torch.no_grad():
                conv.weight.copy_(torch.as_tensor(mat).reshape(conv.weight.shape))
                conv.bias.zero_()


def perceptual_loss(real, fake, pyramid: PerceptualPyramid):
    if real.shape != fake.shape:
        raise ValueError("shape mismatch")
    total = None
    for fr, ff in zip(pyramid.features(real), pyramid.features(fake)):
        term = (fr - ff).abs().mean()
        total = term if total is None else total + term
    return total


@dataclass
class SyncEmbeddings:
    """Lip, eye, and audio embeddings for one synchronization window."""

    lips: torch.Tensor
    eyes: torch.Tensor
    audio: torch.Tensor

    def __post_init__(self):
        if self.lips.shape[-1] + self.eyes.shape[-1] != self.audio.shape[-1]:
            raise ValueError("audio dim must equal lips+eyes dims")

    @property
    def visual(self):
        return torch.cat([self.lips, self.eyes], dim=-1)


class _CropTower(nn.Module):
    """Five stacked 32x32 crops to one embedding."""

    def __init__(self, out_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3 * SYNC_FRAMES, 32, 3, stride=2, padding=1),
            _gn(32),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            _gn(64),
            nn.LeakyReLU(0.2),
            nn.Conv2d(64, 96, 3, stride=2, padding=1),
            _gn(96),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(96 * 4 * 4, out_dim)

    def forward(self, crops):
        crops = crops.to(self.fc.weight.dtype)
        if crops.shape[1:] != (3 * SYNC_FRAMES, 32, 32):
            raise ValueError(f"expected (B, {3 * SYNC_FRAMES}, 32, 32) crops, "
                             f"got {tuple(crops.shape)}")
        h = self.net(crops)
        return F.relu(self.fc(h.flatten(1)))


class _MelTower(nn.Module):
    """One 20x80 mel window to one embedding.

    Per-row mean levels skip the normalized conv path so the loudness
    envelope reaches the embedding unflattened.
    """

    def __init__(self, out_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 32, 3, stride=(1, 2), padding=1),
            _gn(32),
            nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            _gn(64),
            nn.LeakyReLU(0.2),
            nn.Conv2d(64, 96, 3, stride=2, padding=1),
            _gn(96),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(96 * 5 * 10 + SYNC_MEL_ROWS, out_dim)

    def forward(self, mel_window):
        mel_window = mel_window.to(self.fc.weight.dtype)
        if mel_window.shape[1:] != (1, SYNC_MEL_ROWS, 80):
            raise ValueError(f"expected (B, 1, {SYNC_MEL_ROWS}, 80) windows, "
                             f"got {tuple(mel_window.shape)}")
        levels = mel_window.mean(dim=3).flatten(1)
        h = self.net(mel_window)
        return F.relu(self.fc(torch.cat([h.flatten(1), levels], dim=1)))


class SyncTowers(nn.Module):
    """Embedding towers for the audio-visual sync probability.

    Final activations are non-negative so a well-trained pair can reach
    cosine 1 and mismatches fall toward 0 rather than -1.
    """

    def __init__(self):
        super().__init__()
        self.lips_tower = _CropTower(LIPS_EMBED_DIM)
        self.eyes_tower = _CropTower(EYES_EMBED_DIM)
        self.audio_tower = _MelTower(AUDIO_EMBED_DIM)

    def forward(self, lips_crops, eyes_crops, mel_window) -> SyncEmbeddings:
        return SyncEmbeddings(lips=self.lips_tower(lips_crops),
                              eyes=self.eyes_tower(eyes_crops),
                              audio=self.audio_tower(mel_window))


def sync_prob(embeddings: SyncEmbeddings, eps=SYNC_EPS):
    """Cosine match between the joint visual embedding and the audio one."""
    visual = embeddings.visual
    audio = embeddings.audio
    dot = (visual * audio).sum(dim=-1)
    denom = torch.clamp(visual.norm(dim=-1) * audio.norm(dim=-1), min=eps)
    return torch.clamp(dot / denom, min=eps, max=1.0)


def sync_loss(prob):
    prob = torch.as_tensor(prob)
    return -torch.log(prob).mean()


@dataclass
class LossWeights:
    """Weights for the reconstruction, perceptual, and sync terms."""

    l1_weight: float = 10.0
    perceptual_weight: float = 10.0
    sync_weight: float = 1.0

    def __post_init__(self):
        for name in ("l1_weight", "perceptual_weight", "sync_weight"):
            value = float(getattr(self, name))
            if not (value >= 0.0 and value == value and abs(value) != float("inf")):
                raise ValueError(f"{name} must be finite and non-negative")
            setattr(self, name, value)


def total_loss(parts, weights: LossWeights):
    """Weighted sum of the generator loss terms.

    `parts` maps the names gan/l1/perceptual/sync to scalars; any
    non-finite part is reported by name.
    """
    if set(parts) != set(LOSS_PART_NAMES):
        raise ValueError(f"expected parts {LOSS_PART_NAMES}")
    for name in LOSS_PART_NAMES:
        value = parts[name]
        if isinstance(value, torch.Tensor):
            finite = bool(torch.isfinite(value.detach()).all())
        else:
            finite = bool(torch.isfinite(torch.tensor(float(value))))
        if not finite:
            raise ValueError(f"loss term {name!r} is not finite")
    return (parts["gan"]
            + weights.l1_weight * parts["l1"]
            + weights.perceptual_weight * parts["perceptual"]
            + weights.sync_weight * parts["sync"])
