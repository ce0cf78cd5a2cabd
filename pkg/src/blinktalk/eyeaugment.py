"""Explicit eye-blink augmentation.

The generator alone renders blinks only weakly, so eye state is imposed
explicitly: a mapper turns the predicted blink intensity into a target
eye size, a control net turns that target into displacements of the
twelve eye landmarks, and a local thin-plate warp applies those
displacements to the rendered frame without touching anything outside
the eye region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audiofeat import AU45_MAX, AU_DIM, AUVector
from .contrastive import AU45_INDEX
from .preprocess import (EYE_CORNERS, LEFT_BROW, LEFT_EYE, MASK_DILATION_PX,
                         NOSE_BRIDGE, RIGHT_BROW, RIGHT_EYE, LandmarkSet,
                         _dilate, _fill_hull, eye_size)

EYE_POINT_ORDER = RIGHT_EYE + LEFT_EYE  # 12 landmark indices
_CORNER_ROWS = tuple(EYE_POINT_ORDER.index(i) for i in EYE_CORNERS)
_LID_ROWS = tuple(i for i in range(12) if i not in _CORNER_ROWS)

# warp support: eye hulls grown by twice the standard mask dilation
WARP_DILATION_PX = 2 * MASK_DILATION_PX
ANCHOR_COUNT = 16

# Landmarks pinned in place so lid motion stretches skin instead of
# dragging the brows or nose bridge into the eye region.
PINNED_LANDMARKS = RIGHT_BROW + LEFT_BROW + NOSE_BRIDGE


@dataclass
class EyeControlSignal:
    """Target mean eye aspect ratio for one frame."""

    target_size: float

    def __post_init__(self):
        if not np.isfinite(self.target_size) or self.target_size < 0:
            raise ValueError("target size must be finite and non-negative")


@dataclass
class LandmarkDelta:
    """Displacements for the twelve eye points, corners pinned to zero."""

    vectors: np.ndarray  # (12, 2), ordered as EYE_POINT_ORDER

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape != (12, 2):
            raise ValueError("expected (12, 2) displacement array")
        if np.abs(self.vectors[list(_CORNER_ROWS)]).max() > 1e-9:
            raise ValueError("corner points must not move")


def closure_ratio(au45):
    """Linear closure model: intensity 0 is open, AU45_MAX is closed."""
    return 1.0 - np.clip(au45, 0.0, AU45_MAX) / AU45_MAX


class EyeSizeMapper(nn.Module):
    """Blink action vector to a fraction of the fully open eye size."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv1d(1, 8, 5, padding=2)
        self.conv2 = nn.Conv1d(8, 16, 5, stride=2, padding=2)
        flat = 16 * ((AU_DIM + 1) // 2)
        self.fc1 = nn.Linear(flat, 32)
        self.fc2 = nn.Linear(32, 1)

    def forward(self, au_values):
        """(B, AU_DIM) action vectors to (B,) open-fraction in [0, 1].

        The squashing overshoots [0, 1] slightly before clamping so the
        fully-open and fully-closed targets sit at finite logits.
        """
        x = au_values.to(self.fc1.weight.dtype).unsqueeze(1)
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.leaky_relu(self.fc1(h.flatten(1)), 0.2)
        frac = 1.08 * torch.sigmoid(self.fc2(h))[:, 0] - 0.04
        return torch.clamp(frac, 0.0, 1.0)

    def target_size(self, au: AUVector, open_size) -> EyeControlSignal:
        with torch.no_grad():
            vec = torch.as_tensor(au.values, dtype=torch.float32)
            frac = float(self.forward(vec.unsqueeze(0))[0])
        return EyeControlSignal(target_size=frac * float(open_size))


def fit_eye_size_mapper(mapper: EyeSizeMapper, steps=400, seed=0, lr=1e-3):
    """Train the mapper to the linear closure model.

    Inputs mix exact blink intensities with noise on the remaining
    action channels, so the mapper learns to read only the blink slice.
    """
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(mapper.parameters(), lr=lr, betas=(0.5, 0.999))
    losses = []
    for _ in range(steps):
        batch = rng.normal(0.0, 0.2, size=(64, AU_DIM))
        au45 = rng.uniform(0.0, AU45_MAX, size=64)
        au45[:8] = 0.0
        au45[8:16] = AU45_MAX
        batch[:, AU45_INDEX] = au45
        target = torch.as_tensor(closure_ratio(au45), dtype=torch.float32)
        pred = mapper(torch.as_tensor(batch, dtype=torch.float32))
        loss = ((pred - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def _eye_geometry(points, eye_indices):
    """Corner axis descriptor for one eye: origin, unit axis, width."""
    p = points[eye_indices]
    c0, c1 = p[0], p[3]
    axis = c1 - c0
    width = float(np.linalg.norm(axis))
    if width <= 1e-9:
        raise ValueError("degenerate eye width")
    return c0, axis / width, width


def _axis_offsets(points, eye_indices):
    """Perpendicular offset vector from the corner axis for each point."""
    origin, axis, _ = _eye_geometry(points, eye_indices)
    rel = points[eye_indices] - origin
    along = rel @ axis
    return rel - along[:, None] * axis


def eye_half_height(landmarks: LandmarkSet, eye_indices):
    """Largest lid distance from the corner axis."""
    off = _axis_offsets(landmarks.points, eye_indices)
    return float(np.linalg.norm(off, axis=1).max())


def analytic_eye_deltas(landmarks: LandmarkSet, ratio) -> LandmarkDelta:
    """Exact displacements that rescale lid offsets by `ratio`.

    Moving every lid point toward its projection on the corner axis by
    the same factor scales the eye aspect ratio by that factor.
    """
    vectors = np.zeros((12, 2))
    for row0, eye in ((0, RIGHT_EYE), (6, LEFT_EYE)):
        off = _axis_offsets(landmarks.points, eye)
        vectors[row0:row0 + 6] = (ratio - 1.0) * off
    vectors[list(_CORNER_ROWS)] = 0.0
    return LandmarkDelta(vectors)


class LandmarkDeltaNet(nn.Module):
    """Eye-size ratio plus base eye points to lid displacements.

    Outputs are tanh-bounded by each eye's half-height, and corner
    points are structurally fixed at zero.
    """

    def __init__(self, hidden=64):
        super().__init__()
        self.fc1 = nn.Linear(1 + 24, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 16)  # 8 lid points x 2

    def _features(self, landmarks: LandmarkSet, ratio):
        feats = [float(ratio)]
        for eye in (RIGHT_EYE, LEFT_EYE):
            origin, axis, width = _eye_geometry(landmarks.points, eye)
            center = origin + 0.5 * width * axis
            rel = (landmarks.points[eye] - center) / width
            feats.extend(rel.reshape(-1).tolist())
        return torch.tensor(feats, dtype=self.fc1.weight.dtype)

    def forward(self, landmarks: LandmarkSet, ratio) -> LandmarkDelta:
        x = self._features(landmarks, ratio).unsqueeze(0)
        h = F.leaky_relu(self.fc1(x), 0.2)
        h = F.leaky_relu(self.fc2(h), 0.2)
        raw = torch.tanh(self.fc3(h))[0].reshape(8, 2)
        vectors = np.zeros((12, 2))
        raw = raw.detach().cpu().numpy()
        k = 0
        for row0, eye in ((0, RIGHT_EYE), (6, LEFT_EYE)):
            bound = eye_half_height(landmarks, eye)
            for j in range(6):
                if row0 + j in _CORNER_ROWS:
                    continue
                vectors[row0 + j] = bound * raw[k]
                k += 1
        return LandmarkDelta(vectors)

    def training_output(self, landmarks: LandmarkSet, ratio):
        """Differentiable raw output paired with its analytic target."""
        x = self._features(landmarks, ratio).unsqueeze(0)
        h = F.leaky_relu(self.fc1(x), 0.2)
        h = F.leaky_relu(self.fc2(h), 0.2)
        raw = torch.tanh(self.fc3(h))[0].reshape(8, 2)
        target = analytic_eye_deltas(landmarks, ratio).vectors
        scaled_target = np.zeros((8, 2))
        k = 0
        for row0, eye in ((0, RIGHT_EYE), (6, LEFT_EYE)):
            bound = eye_half_height(landmarks, eye)
            for j in range(6):
                if row0 + j in _CORNER_ROWS:
                    continue
                scaled_target[k] = target[row0 + j] / bound
                k += 1
        return raw, torch.as_tensor(scaled_target, dtype=raw.dtype)


def fit_delta_net(net: LandmarkDeltaNet, steps=600, seed=0, lr=1e-3):
    """Train the control net against the analytic lid displacements."""
    from . import synthdata

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.5, 0.999))
    losses = []
    for step in range(steps):
        params = synthdata.sample_identity(int(rng.integers(0, 10000)))
        state = synthdata.SceneState(
            pose_angle=float(rng.uniform(-0.35, 0.35)),
            pose_shift=(float(rng.uniform(-2.5, 2.5)),
                        float(rng.uniform(-2.5, 2.5))),
            mouth_open=float(rng.uniform(0, 1)),
            eye_open=1.0)
        canon = synthdata.canonical_landmarks(params, 1.0, state.mouth_open)
        pts = synthdata._pose_transform(canon, state.pose_angle,
                                        state.pose_shift, (32.0, 32.0))
        base = LandmarkSet(pts)
        ratio = float(rng.uniform(0.0, 1.0))
        raw, target = net.training_output(base, ratio)
        loss = ((raw - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def apply_delta(landmarks: LandmarkSet, delta: LandmarkDelta) -> LandmarkSet:
    """Landmarks with the eye displacements applied."""
    pts = landmarks.points.copy()
    pts[EYE_POINT_ORDER] += delta.vectors
    return LandmarkSet(pts, landmarks.convention)


def reopened_eyes(landmarks: LandmarkSet, open_size) -> LandmarkSet:
    """Base landmarks with both eyes rescaled to the fully open size.

    The warp control net is trained against open-eye bases, so frames
    whose reference eyes are mid-blink are first normalized.
    """
    current = eye_size(landmarks).mean_size
    if current <= 1e-6:
        raise ValueError("reference eyes are fully closed")
    ratio = float(open_size) / current
    return apply_delta(landmarks, analytic_eye_deltas(landmarks, ratio))


def _validate_delta(landmarks: LandmarkSet, delta: LandmarkDelta):
    for row0, eye in ((0, RIGHT_EYE), (6, LEFT_EYE)):
        bound = eye_half_height(landmarks, eye) + 1e-6
        norms = np.linalg.norm(delta.vectors[row0:row0 + 6], axis=1)
        if norms.max() > bound:
            raise ValueError("displacement exceeds the eye half-height")


def _tps_kernel(r2):
    return 0.5 * r2 * np.log(np.maximum(r2, 1e-12))


def _fit_tps_field(points, values):
    """Thin-plate coefficients interpolating `values` at `points`."""
    n = len(points)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    k = _tps_kernel(d2)
    p = np.concatenate([np.ones((n, 1)), points], axis=1)
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.zeros((n + 3, values.shape[1]))
    rhs[:n] = values
    return np.linalg.solve(lhs, rhs)


def _eval_tps_field(coeffs, points, queries):
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    k = _tps_kernel(d2)
    p = np.concatenate([np.ones((len(queries), 1)), queries], axis=1)
    return k @ coeffs[:-3] + p @ coeffs[-3:]


def _anchor_ring(landmarks: LandmarkSet, margin=3.0):
    pts = landmarks.points[EYE_POINT_ORDER]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = 0.5 * (hi - lo) + WARP_DILATION_PX + margin
    theta = np.arange(ANCHOR_COUNT) * (2.0 * np.pi / ANCHOR_COUNT)
    ring = np.stack([center[0] + radius[0] * np.cos(theta),
                     center[1] + radius[1] * np.sin(theta)], axis=1)
    return ring


def _bilinear(frame, xs, ys):
    h, w = frame.shape[:2]
    if frame.ndim == 2:
        frame = frame[:, :, None]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0)[:, None]
    wy = (ys - y0)[:, None]
    top = frame[y0, x0] * (1 - wx) + frame[y0, x1] * wx
    bot = frame[y1, x0] * (1 - wx) + frame[y1, x1] * wx
    return top * (1 - wy) + bot * wy


# Fixed-point sweeps used to invert the forward displacement field.
WARP_INVERT_ITERS = 12


def apply_eye_warp(frame, base: LandmarkSet, delta: LandmarkDelta):
    """Warp the eye region so landmarks move by the given displacements.

    A thin-plate displacement field is fitted forward, from the twelve
    eye points (moving by their deltas) plus the frozen ring and pinned
    landmarks (zero motion), then inverted per pixel by fixed-point
    iteration.  Fitting in the destination frame instead would be
    singular at full closure, where opposing lid points land on the
    same spot.  Only pixels inside the dilated eye hulls are resampled;
    everything else is copied through untouched.
    """
    _validate_delta(base, delta)
    out = np.array(frame, copy=True)
    if np.abs(delta.vectors).max() < 1e-12:
        return out
    h, w = frame.shape[:2]
    support = _dilate(_fill_hull(base.points[RIGHT_EYE], (h, w))
                      | _fill_hull(base.points[LEFT_EYE], (h, w)),
                      WARP_DILATION_PX)
    ys, xs = np.nonzero(support)
    if len(xs) == 0:
        return out
    anchors = np.concatenate([_anchor_ring(base),
                              base.points[PINNED_LANDMARKS]])
    controls = np.concatenate([base.points[EYE_POINT_ORDER], anchors])
    motion = np.concatenate([delta.vectors, np.zeros_like(anchors)])
    coeffs = _fit_tps_field(controls, motion)
    queries = np.stack([xs, ys], axis=1).astype(np.float64)
    sources = queries.copy()
    for _ in range(WARP_INVERT_ITERS):
        sources = queries - _eval_tps_field(coeffs, controls, sources)
    sampled = _bilinear(frame, sources[:, 0], sources[:, 1])
    if frame.ndim == 3:
        out[ys, xs] = sampled
    else:
        out[ys, xs] = sampled[:, 0]
    return out
