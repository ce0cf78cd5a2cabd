"""Audio features: log-mel extraction and the audio-side encoders.

Mel frames are aligned to 25 fps video by construction: a 10 ms hop
gives four mel rows per video frame, so frame t owns rows [4t, 4t+4).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import encoders
from .contrastive import AU45_INDEX  # noqa: F401  (shared channel constant)

MEL_SAMPLE_RATE = 16000
MEL_BINS = 80
MEL_HOP = 160       # 10 ms
MEL_WIN = 400       # 25 ms
MEL_NFFT = 512
MEL_FLOOR = 1e-5
MEL_PER_FRAME = 4   # mel rows per video frame at 25 fps

AU_DIM = 71
AU45_MAX = 5.0

MATRIX_MAGIC = b"F32M"


@dataclass
class MelSpectrogram:
    """Log power mel features, one row per 10 ms hop."""

    values: np.ndarray  # (T, MEL_BINS)
    sample_rate: int = MEL_SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != MEL_BINS:
            raise ValueError(f"expected (T, {MEL_BINS}) mel array")

    def __len__(self):
        return len(self.values)

    def frames_covered(self):
        return len(self.values) // MEL_PER_FRAME


@dataclass
class AUVector:
    """71 action-intensity values; the blink channel sits at AU45_INDEX."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (AU_DIM,):
            raise ValueError(f"expected ({AU_DIM},) values")

    @property
    def au45(self):
        return float(np.clip(self.values[AU45_INDEX], 0.0, AU45_MAX))

    @classmethod
    def from_au45(cls, value):
        values = np.zeros(AU_DIM)
        values[AU45_INDEX] = value
        return cls(values)


def _hann(n):
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def _mel_hz(mel):
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def _hz_mel(hz):
    return 2595.0 * np.log10(1.0 + hz / 700.0)


def mel_filterbank(n_mels=MEL_BINS, n_fft=MEL_NFFT, sr=MEL_SAMPLE_RATE,
                   fmin=0.0, fmax=None):
    """Triangular mel filters over rfft bins, (n_mels, n_fft//2+1)."""
    if fmax is None:
        fmax = sr / 2.0
    mel_pts = np.linspace(_hz_mel(fmin), _hz_mel(fmax), n_mels + 2)
    hz_pts = _mel_hz(mel_pts)
    bin_hz = np.arange(n_fft // 2 + 1) * (sr / n_fft)
    fb = np.zeros((n_mels, len(bin_hz)))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_hz - lo) / max(ctr - lo, 1e-9)
        down = (hi - bin_hz) / max(hi - ctr, 1e-9)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FILTERBANK = None


def _filterbank():
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    return _FILTERBANK


def mel(waveform, sr=MEL_SAMPLE_RATE) -> MelSpectrogram:
    """Log power mel spectrogram of a mono waveform.

    The signal is zero-padded by half a window on both ends, so one
    second yields 4 * 25 + 1 rows.  Silence maps to log(MEL_FLOOR)
    exactly.
    """
    if sr != MEL_SAMPLE_RATE:
        raise ValueError(f"expected {MEL_SAMPLE_RATE} Hz audio, got {sr}")
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or len(waveform) < MEL_HOP:
        raise ValueError("waveform must be mono and at least one hop long")
    pad = MEL_NFFT // 2
    padded = np.concatenate([np.zeros(pad), waveform, np.zeros(pad)])
    n_frames = 1 + len(waveform) // MEL_HOP
    window = _hann(MEL_WIN)
    spec = np.empty((n_frames, MEL_NFFT // 2 + 1))
    for t in range(n_frames):
        start = t * MEL_HOP
        chunk = padded[start:start + MEL_WIN]
        if len(chunk) < MEL_WIN:
            chunk = np.pad(chunk, (0, MEL_WIN - len(chunk)))
        spec[t] = np.abs(np.fft.rfft(chunk * window, n=MEL_NFFT)) ** 2
    melspec = spec @ _filterbank().T
    return MelSpectrogram(np.log(np.maximum(melspec, MEL_FLOOR)))


def mel_frame_window(melspec: MelSpectrogram, frame: int):
    """The (MEL_PER_FRAME, MEL_BINS) slice owned by one video frame."""
    start = frame * MEL_PER_FRAME
    stop = start + MEL_PER_FRAME
    if frame < 0 or stop > len(melspec.values):
        raise IndexError(f"frame {frame} outside mel coverage")
    return melspec.values[start:stop]


def save_matrix(path, matrix):
    """Write a 2-D float32 matrix: magic, uint32 rows/cols, row-major data."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("only 2-D matrices are supported")
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack("<II", *matrix.shape))
        f.write(matrix.tobytes())


def load_matrix(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MATRIX_MAGIC:
            raise ValueError(f"{path} is not a matrix file")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
        if data.size != rows * cols:
            raise ValueError(f"{path} is truncated")
    return data.reshape(rows, cols).astype(np.float64)


def mel_from_matrix(path) -> MelSpectrogram:
    """Ingest externally computed features in place of mel extraction."""
    return MelSpectrogram(load_matrix(path))


def _gn(channels):
    return nn.GroupNorm(8, channels)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _gn(cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = F.leaky_relu(self.norm1(self.conv1(x)), 0.2)
        h = self.norm2(self.conv2(h))
        return F.leaky_relu(h + self.skip(x), 0.2)


class AudioContentEncoder(nn.Module):
    """Residual encoder mapping one frame's mel window to a unit vector.

    The normalized conv path reads spectral shape; per-row mean levels
    bypass it because group normalization is per-sample and would
    otherwise flatten the absolute energy that loud-vs-quiet speech
    lives in.
    """

    def __init__(self, feature_dim=128):
        super().__init__()
        self.stem = nn.Conv2d(1, 32, 3, padding=1)
        self.block1 = ResidualBlock(32, 32)
        self.block2 = ResidualBlock(32, 48)
        self.block3 = ResidualBlock(48, 64)
        self.block4 = ResidualBlock(64, 96)
        self.squeeze = nn.Linear(96 + MEL_PER_FRAME, encoders.CONTENT_RANK)
        self.fc = nn.Linear(encoders.CONTENT_RANK, feature_dim)

    def forward(self, windows):
        """(B, MEL_PER_FRAME, MEL_BINS) windows to (B, D) unit features."""
        x = windows.unsqueeze(1).to(self.stem.weight.dtype)
        levels = x.mean(dim=3).squeeze(1)
        x = F.leaky_relu(self.stem(x), 0.2)
        x = F.avg_pool2d(self.block1(x), (1, 2))
        x = F.avg_pool2d(self.block2(x), (2, 2))
        x = F.avg_pool2d(self.block3(x), (2, 2))
        x = self.block4(x)
        x = x.mean(dim=(2, 3))
        h = self.squeeze(torch.cat([x, levels], dim=1))
        return F.normalize(self.fc(h), dim=1)


def _blink_stack():
    """The shared 6-convolution feature stack used by both blink paths."""
    chans = [16, 32, 32, 64, 64, 64]
    layers = []
    cin = 1
    for i, cout in enumerate(chans):
        stride = 2 if i % 2 == 1 else 1
        layers += [nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                   _gn(cout), nn.LeakyReLU(0.2)]
        cin = cout
    return nn.Sequential(*layers)


class BlinkAudioNet(nn.Module):
    """Predicts a 71-value action vector per video frame from audio.

    A temporal path encodes the whole mel into a 64-d clip code that is
    dealt out across frame positions through an interpolated bank of
    projections; a weight-shared local path encodes each frame's own
    mel window.  A final fully connected layer joins the two parts.
    """

    TEMPORAL_ANCHORS = 4

    def __init__(self):
        super().__init__()
        self.local_stack = _blink_stack()
        self.local_fc = nn.Linear(64, 64)
        self.temporal_stack = _blink_stack()
        self.temporal_fc = nn.Linear(64, 64)
        self.position_bank = nn.Parameter(
            torch.randn(self.TEMPORAL_ANCHORS, 64, 64) * (1.0 / 8.0))
        self.head = nn.Linear(128, AU_DIM)
        self.zero_temporal = False

    @property
    def _dtype(self):
        return self.head.weight.dtype

    def clip_code(self, mel_values):
        x = mel_values.to(self._dtype).unsqueeze(0).unsqueeze(0)
        h = self.temporal_stack(x).mean(dim=(2, 3))
        return self.temporal_fc(h)[0]

    def _position_weights(self, k, device):
        # piecewise-linear hats over relative position in the clip
        r = torch.arange(k, device=device, dtype=self._dtype)
        r = r / max(k - 1, 1)
        nodes = torch.linspace(0, 1, self.TEMPORAL_ANCHORS, device=device,
                               dtype=self._dtype)
        span = nodes[1] - nodes[0]
        return torch.clamp(1.0 - torch.abs(r[:, None] - nodes[None, :]) / span,
                           min=0.0)

    def temporal_parts(self, mel_values, k):
        code = self.clip_code(mel_values)
        if self.zero_temporal:
            code = torch.zeros_like(code)
        projected = torch.einsum("jod,d->jo", self.position_bank, code)
        alpha = self._position_weights(k, projected.device)
        return alpha @ projected

    def local_features(self, windows):
        x = windows.to(self._dtype).unsqueeze(1)
        h = self.local_stack(x).mean(dim=(2, 3))
        return self.local_fc(h)

    def forward(self, mel_values, k):
        """(T_a, MEL_BINS) mel for a clip of k video frames to (k, 71)."""
        if not isinstance(mel_values, torch.Tensor):
            mel_values = torch.as_tensor(mel_values)
        if MEL_PER_FRAME * k > len(mel_values):
            raise ValueError("mel does not cover the requested frame count")
        windows = torch.stack([
            mel_values[t * MEL_PER_FRAME:(t + 1) * MEL_PER_FRAME]
            for t in range(k)])
        parts = self.temporal_parts(mel_values, k)
        local = self.local_features(windows)
        return self.head(torch.cat([parts, local], dim=1))

    def forward_frame(self, mel_values, k, frame):
        """Single-frame output, equal to row `frame` of the batched call."""
        if not isinstance(mel_values, torch.Tensor):
            mel_values = torch.as_tensor(mel_values)
        window = mel_values[frame * MEL_PER_FRAME:(frame + 1) * MEL_PER_FRAME]
        part = self.temporal_parts(mel_values, k)[frame:frame + 1]
        local = self.local_features(window.unsqueeze(0))
        return self.head(torch.cat([part, local], dim=1))[0]
