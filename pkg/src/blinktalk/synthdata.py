"""Procedural synthetic-avatar clips with exact landmark ground truth.

Every clip is generated from seeds alone: a cartoon face whose eyes,
mouth and head pose follow known trajectories, plus a harmonic audio
track whose envelope is the mouth trajectory.  All label channels
(landmarks, blink intensity, pose) are analytic, which makes the data
usable as its own measurement oracle.
"""

from __future__ import annotations

import colorsys
import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.io import wavfile

from .preprocess import LandmarkSet

REF_SIZE = 64
DEFAULT_FPS = 25
DEFAULT_SR = 16000

POSE_ANGLE_MAX = 0.35
POSE_SHIFT_MAX = 2.5  # pixels at the 64 px reference scale

# Face half-width at the reference scale, before the per-identity scale.
BASE_HALF_WIDTH = 0.33 * REF_SIZE

# Eye aspect ratio (vertical gap over width) of a fully open eye.
EYE_OPEN_ASPECT = 0.5

# Blink intensity label range; 0 is open, 5 is fully closed.
AU45_MAX = 5.0

CARRIER_HZ = (160.0, 320.0, 480.0)
CARRIER_AMPS = (1.0, 0.5, 0.25)
CARRIER_PEAK_TARGET = 0.98

LABELS_HEADER = ["frame", "AU45_r", "pose_angle", "mouth_open", "eye_open"]


def _carrier_peak():
    t = np.arange(8192) / 8192.0 / CARRIER_HZ[0]
    c = np.zeros_like(t)
    for amp, hz in zip(CARRIER_AMPS, CARRIER_HZ):
        c += amp * np.sin(2.0 * np.pi * hz * t)
    return float(np.abs(c).max())


_CARRIER_SCALE = CARRIER_PEAK_TARGET / _carrier_peak()

# RMS of the unmodulated, peak-normalized carrier over whole periods.
CARRIER_RMS = _CARRIER_SCALE * float(np.sqrt(sum(a * a for a in CARRIER_AMPS) / 2.0))


@dataclass(frozen=True)
class AvatarParams:
    """Per-identity face geometry and color, fixed across a clip."""

    face_hue: float
    eye_spacing: float  # px between eye centers at the reference scale
    eye_width: float    # px, one eye, at the reference scale
    face_scale: float
    skin_rgb: tuple
    identity_seed: int


@dataclass
class SceneState:
    """Per-frame animation state."""

    pose_angle: float
    pose_shift: tuple
    mouth_open: float
    eye_open: float

    def __post_init__(self):
        if not -POSE_ANGLE_MAX - 1e-9 <= self.pose_angle <= POSE_ANGLE_MAX + 1e-9:
            raise ValueError(f"pose_angle {self.pose_angle} out of range")
        if not 0.0 <= self.mouth_open <= 1.0:
            raise ValueError(f"mouth_open {self.mouth_open} out of range")
        if not 0.0 <= self.eye_open <= 1.0:
            raise ValueError(f"eye_open {self.eye_open} out of range")


@dataclass
class SynthClip:
    """Rendered frames plus every ground-truth channel that produced them."""

    frames: np.ndarray      # (T, H, W, 3) float32 in [0, 1]
    waveform: np.ndarray    # mono float64
    landmarks: list
    states: list
    au45: np.ndarray        # (T,) in [0, AU45_MAX]
    fps: int = DEFAULT_FPS
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        t = len(self.frames)
        if not (len(self.landmarks) == len(self.states) == len(self.au45) == t):
            raise ValueError("per-frame channels disagree in length")
        hop = self.sample_rate // self.fps
        expected = t * self.sample_rate / self.fps
        if abs(len(self.waveform) - expected) > hop:
            raise ValueError("waveform duration disagrees with frame count")
        if np.any(self.au45 < 0.0) or np.any(self.au45 > AU45_MAX):
            raise ValueError("au45 out of range")

    @property
    def duration_s(self):
        return len(self.frames) / self.fps


def sample_identity(seed: int) -> AvatarParams:
    """Deterministic avatar parameters for one identity seed."""
    rng = np.random.default_rng(int(seed))
    face_scale = float(rng.uniform(0.8, 1.2))
    half = BASE_HALF_WIDTH * face_scale
    eye_spacing = float(rng.uniform(0.72, 0.82) * half)
    eye_width = float(rng.uniform(0.28, 0.34) * half)
    face_hue = float(rng.uniform(0.0, 1.0))
    skin_hue = float(rng.uniform(0.02, 0.11))
    skin_sat = float(rng.uniform(0.25, 0.45))
    skin_val = float(rng.uniform(0.72, 0.92))
    skin = colorsys.hsv_to_rgb(skin_hue, skin_sat, skin_val)
    return AvatarParams(
        face_hue=face_hue,
        eye_spacing=eye_spacing,
        eye_width=eye_width,
        face_scale=face_scale,
        skin_rgb=tuple(float(c) for c in skin),
        identity_seed=int(seed),
    )


def _layout_constants(params: AvatarParams):
    s = BASE_HALF_WIDTH * params.face_scale
    ex = 0.5 * params.eye_spacing
    we = 0.5 * params.eye_width
    return s, ex, we


def canonical_landmarks(params: AvatarParams, eye_open=1.0, mouth_open=0.0):
    """68 points in face-centered reference coordinates (x right, y down).

    Eye openness moves the four lid points of each eye straight toward
    or away from the corner-to-corner axis; mouth openness scales the
    lip ellipses vertically.
    """
    s, ex, we = _layout_constants(params)
    pts = np.zeros((68, 2), dtype=np.float64)

    # jaw 0-16, ear level down to the chin and back up
    t = np.arange(17) / 16.0
    pts[0:17, 0] = -s * np.cos(np.pi * t)
    pts[0:17, 1] = 0.9 * s * np.sin(np.pi * t)

    # brows 17-26, slight arcs above each eye
    bt = np.linspace(-1.0, 1.0, 5)
    brow_y = -0.38 * s - 0.05 * s * (1.0 - bt ** 2)
    pts[17:22, 0] = -ex + 1.3 * we * bt
    pts[17:22, 1] = brow_y
    pts[22:27, 0] = ex + 1.3 * we * bt
    pts[22:27, 1] = brow_y

    # nose 27-35
    pts[27:31, 0] = 0.0
    pts[27:31, 1] = np.linspace(-0.18 * s, 0.10 * s, 4)
    pts[31:36, 0] = np.linspace(-0.10 * s, 0.10 * s, 5)
    pts[31:36, 1] = 0.16 * s

    # eyes 36-47: corner, two upper lid, corner, two lower lid
    v = EYE_OPEN_ASPECT * we * float(eye_open)
    a = 0.5 * we
    eye_y = -0.22 * s
    for base, cx in ((36, -ex), (42, ex)):
        pts[base + 0] = (cx - we, eye_y)
        pts[base + 1] = (cx - a, eye_y - v)
        pts[base + 2] = (cx + a, eye_y - v)
        pts[base + 3] = (cx + we, eye_y)
        pts[base + 4] = (cx + a, eye_y + v)
        pts[base + 5] = (cx - a, eye_y + v)

    # mouth 48-67, outer 12 then inner 8, corners first
    mo = float(mouth_open)
    my = 0.50 * s
    mw, mh = 0.30 * s, 0.05 * s + 0.14 * s * mo
    phi = np.pi + np.arange(12) * (2.0 * np.pi / 12.0)
    pts[48:60, 0] = mw * np.cos(phi)
    pts[48:60, 1] = my + mh * np.sin(phi)
    iw, ih = 0.21 * s, 0.10 * s * mo
    phi = np.pi + np.arange(8) * (2.0 * np.pi / 8.0)
    pts[60:68, 0] = iw * np.cos(phi)
    pts[60:68, 1] = my + ih * np.sin(phi)

    return pts


def _pose_transform(pts, angle, shift, center):
    c, sn = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -sn], [sn, c]])
    return pts @ rot.T + np.asarray(center) + np.asarray(shift)


def _soft_ellipse(gx, gy, cx, cy, ax, ay):
    """Antialiased coverage of an axis-aligned ellipse on the given grid."""
    ax = max(ax, 1e-6)
    ay = max(ay, 1e-6)
    q = np.sqrt(((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2)
    return np.clip((1.0 - q) * min(ax, ay) + 0.5, 0.0, 1.0)


def _soft_capsule(gx, gy, x0, y0, x1, y1, radius):
    """Antialiased coverage of a thick segment."""
    dx, dy = x1 - x0, y1 - y0
    denom = max(dx * dx + dy * dy, 1e-12)
    t = np.clip(((gx - x0) * dx + (gy - y0) * dy) / denom, 0.0, 1.0)
    dist = np.hypot(gx - (x0 + t * dx), gy - (y0 + t * dy))
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def _blend(img, coverage, color):
    img += coverage[..., None] * (np.asarray(color) - img)


def _background(params: AvatarParams, size):
    h, w = size
    top = colorsys.hsv_to_rgb(params.face_hue, 0.40, 0.62)
    bottom = colorsys.hsv_to_rgb((params.face_hue + 0.13) % 1.0, 0.45, 0.30)
    ramp = (np.arange(h, dtype=np.float64) / max(h - 1, 1))[:, None, None]
    img = np.asarray(top) * (1.0 - ramp) + np.asarray(bottom) * ramp
    img = np.broadcast_to(img, (h, w, 3)).copy()
    # one fixed panel so the backdrop has structure
    panel = colorsys.hsv_to_rgb((params.face_hue + 0.5) % 1.0, 0.30, 0.45)
    x0 = int(0.70 * w)
    y1 = int(0.45 * h)
    img[:y1, x0:] = panel
    return img


def render_frame(params: AvatarParams, state: SceneState, size=(64, 64)):
    """Draw one frame and return it with its transformed landmarks.

    The whole face layout is rotated by pose_angle about the frame
    center and translated by pose_shift; landmarks get the identical
    transform, so they are exact by construction.
    """
    h, w = size
    if h < 32 or w < 32:
        raise ValueError("frame size must be at least 32x32")
    scale = min(h, w) / REF_SIZE
    center = (w / 2.0, h / 2.0)
    shift = (state.pose_shift[0] * scale, state.pose_shift[1] * scale)

    canon = canonical_landmarks(params, state.eye_open, state.mouth_open) * scale
    pts = _pose_transform(canon, state.pose_angle, shift, center)
    landmarks = LandmarkSet(pts)

    img = _background(params, size)

    # paint in canonical coordinates via the inverse pose transform
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    ux = gx - center[0] - shift[0]
    uy = gy - center[1] - shift[1]
    c, sn = np.cos(-state.pose_angle), np.sin(-state.pose_angle)
    cx = (c * ux - sn * uy) / scale
    cy = (sn * ux + c * uy) / scale

    s, ex, we = _layout_constants(params)
    skin = np.asarray(params.skin_rgb)

    _blend(img, _soft_ellipse(cx, cy, 0.0, 0.0, s, 1.02 * s), skin)

    brow_color = (0.24, 0.15, 0.10)
    brow_r = 0.045 * s
    for side in (-1.0, 1.0):
        bx = side * ex
        _blend(img, _soft_capsule(cx, cy, bx - 1.2 * we, -0.385 * s,
                                  bx, -0.43 * s, brow_r), brow_color)
        _blend(img, _soft_capsule(cx, cy, bx, -0.43 * s,
                                  bx + 1.2 * we, -0.385 * s, brow_r), brow_color)

    # eyes: sclera ellipse squashed by openness, pupil disc clipped to it
    v = EYE_OPEN_ASPECT * we * state.eye_open
    eye_y = -0.22 * s
    sclera = (0.95, 0.95, 0.97)
    pupil = (0.08, 0.08, 0.10)
    for side in (-1.0, 1.0):
        exc = side * ex
        lid = _soft_ellipse(cx, cy, exc, eye_y, we, max(v, 1e-6))
        _blend(img, lid, sclera)
        ball = _soft_ellipse(cx, cy, exc, eye_y, 0.52 * we, 0.52 * we)
        _blend(img, np.minimum(ball, lid), pupil)

    nose = tuple(0.72 * ch for ch in params.skin_rgb)
    _blend(img, _soft_capsule(cx, cy, 0.0, -0.18 * s, 0.0, 0.15 * s, 0.020 * s), nose)
    _blend(img, _soft_capsule(cx, cy, -0.06 * s, 0.17 * s, 0.06 * s, 0.17 * s,
                              0.015 * s), nose)

    lips = (0.66, 0.26, 0.28)
    cavity = (0.14, 0.05, 0.08)
    my = 0.50 * s
    _blend(img, _soft_ellipse(cx, cy, 0.0, my, 0.30 * s,
                              0.05 * s + 0.14 * s * state.mouth_open), lips)
    if state.mouth_open > 1e-6:
        _blend(img, _soft_ellipse(cx, cy, 0.0, my, 0.21 * s,
                                  0.10 * s * state.mouth_open), cavity)

    return np.clip(img, 0.0, 1.0).astype(np.float32), landmarks


def _smooth(x, width=5):
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    pad = width // 2
    padded = np.concatenate([np.full(pad, x[0]), x, np.full(pad, x[-1])])
    return np.convolve(padded, kernel, mode="valid")


def _blink_profile(length):
    k = np.arange(length, dtype=np.float64)
    base = np.clip(np.sin(np.pi * k / (length - 1)), 0.0, 1.0)
    return base ** 1.5


def synth_trajectories(duration_s, fps=DEFAULT_FPS, seed=0):
    """Per-frame scene states for one clip.

    Speech comes in bursts separated by short pauses.  Blinks are tied
    to the audio: most start at a pause onset, a few fire at random
    during speech, and a blink is forced whenever none happened for two
    seconds.  This keeps blink timing largely recoverable from the
    audio envelope while leaving it stochastic.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(int(seed))
    t_frames = int(round(duration_s * fps))
    times = np.arange(t_frames) / fps

    # speech gate: alternating speech/pause segments with smooth ramps
    gate = np.zeros(t_frames)
    pause_onsets = []
    pause_lengths = []
    pos = 0
    speaking = True
    while pos < t_frames:
        if speaking:
            seg = int(round(rng.uniform(0.6, 1.2) * fps))
        else:
            seg = int(round(rng.uniform(0.32, 0.56) * fps))
            pause_onsets.append(pos)
            pause_lengths.append(seg)
        gate[pos:pos + seg] = 1.0 if speaking else 0.0
        pos += seg
        speaking = not speaking
    gate = _smooth(gate, 3)

    # syllable-rate oscillation inside speech segments
    wave = np.zeros(t_frames)
    freqs = rng.uniform(1.5, 4.2, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    amps = rng.uniform(0.5, 1.0, size=3)
    amps /= amps.sum()
    for f, p, a in zip(freqs, phases, amps):
        wave += a * np.sin(2.0 * np.pi * f * times + p)
    syllable = 0.2 + 0.75 * np.clip(0.5 + 0.55 * wave, 0.0, 1.0)
    mouth = np.clip(gate * syllable, 0.0, 1.0)

    # blink schedule
    dip = np.zeros(t_frames)
    last_blink_end = -int(1.0 * fps)

    def put_blink(start, length):
        nonlocal last_blink_end
        length = int(np.clip(length, 6, 14))
        end = min(start + length, t_frames)
        if end - start < 4 or start < last_blink_end:
            return
        seg = _blink_profile(end - start)
        dip[start:end] = np.maximum(dip[start:end], seg)
        last_blink_end = end

    onset_triggers = [(on, ln) for on, ln in zip(pause_onsets, pause_lengths)
                      if rng.uniform() < 0.9]
    hazard = rng.uniform(size=t_frames) < 0.004
    trig_idx = 0
    frame = 0
    while frame < t_frames:
        while trig_idx < len(onset_triggers) and onset_triggers[trig_idx][0] <= frame:
            on, ln = onset_triggers[trig_idx]
            put_blink(on, ln)
            trig_idx += 1
        if hazard[frame] and gate[frame] > 0.5:
            put_blink(frame, 7)
        if frame - last_blink_end >= int(2.0 * fps):
            put_blink(frame, 7)
        frame += 1

    wander = 1.0 - 0.06 * (0.5 + 0.5 * np.sin(2.0 * np.pi * 0.23 * times
                                              + rng.uniform(0.0, 2.0 * np.pi)))
    eye_open = np.clip(wander * (1.0 - dip), 0.0, 1.0)

    # head pose: smoothed clipped random walks
    angle = np.clip(np.cumsum(rng.normal(0.0, 0.015, t_frames))
                    + rng.uniform(-0.28, 0.28), -POSE_ANGLE_MAX, POSE_ANGLE_MAX)
    angle = _smooth(angle, 5)
    shift = np.stack([
        np.clip(np.cumsum(rng.normal(0.0, 0.25, t_frames)) + rng.uniform(-2, 2),
                -POSE_SHIFT_MAX, POSE_SHIFT_MAX)
        for _ in range(2)], axis=1)
    shift = np.stack([_smooth(shift[:, 0], 5), _smooth(shift[:, 1], 5)], axis=1)

    return [SceneState(pose_angle=float(angle[i]),
                       pose_shift=(float(shift[i, 0]), float(shift[i, 1])),
                       mouth_open=float(mouth[i]),
                       eye_open=float(eye_open[i]))
            for i in range(t_frames)]


def count_blinks(eye_open, threshold=0.2):
    """Number of maximal runs where openness falls below `threshold`."""
    below = np.asarray(eye_open) < threshold
    return int(np.sum(below[1:] & ~below[:-1]) + (1 if below[0] else 0))


def synth_audio(mouth_track, fps=DEFAULT_FPS, sr=DEFAULT_SR):
    """Harmonic carrier amplitude-modulated by the mouth trajectory.

    The carrier holds a 160 Hz fundamental plus two overtones and is
    scaled so the output peak stays below 0.99.  The mouth track is
    upsampled piecewise-linearly to the audio rate.
    """
    if sr % fps != 0:
        raise ValueError("sample rate must be divisible by fps")
    mouth_track = np.asarray(mouth_track, dtype=np.float64)
    n = len(mouth_track) * (sr // fps)
    ts = np.arange(n) / sr
    frame_times = (np.arange(len(mouth_track)) + 0.5) / fps
    env = np.interp(ts, frame_times, mouth_track)
    carrier = np.zeros(n)
    for amp, hz in zip(CARRIER_AMPS, CARRIER_HZ):
        carrier += amp * np.sin(2.0 * np.pi * hz * ts)
    return _CARRIER_SCALE * carrier * env


def make_clip(identity_seed, duration_s=1.0, fps=DEFAULT_FPS, sr=DEFAULT_SR,
              size=(64, 64), traj_seed=None) -> SynthClip:
    """Render a full clip for one identity.

    `traj_seed` defaults to a value derived from the identity seed; pass
    different values to animate the same avatar along new trajectories.
    """
    params = sample_identity(identity_seed)
    if traj_seed is None:
        traj_seed = int(identity_seed) * 9973 + 11
    states = synth_trajectories(duration_s, fps=fps, seed=traj_seed)
    frames = []
    landmarks = []
    for state in states:
        img, lms = render_frame(params, state, size=size)
        frames.append(img)
        landmarks.append(lms)
    mouth = np.array([s.mouth_open for s in states])
    waveform = synth_audio(mouth, fps=fps, sr=sr)
    eye = np.array([s.eye_open for s in states])
    au45 = AU45_MAX * (1.0 - eye)
    return SynthClip(frames=np.stack(frames), waveform=waveform,
                     landmarks=landmarks, states=states, au45=au45,
                     fps=fps, sample_rate=sr)


def save_clip(clip: SynthClip, out_dir):
    """Export frames, audio and label channels to a directory.

    Layout: frame_%05d.png, audio.wav (16-bit PCM), labels.csv with
    header frame,AU45_r,pose_angle,mouth_open,eye_open, plus
    landmarks.csv with one row of x/y pairs per frame.
    """
    from .preprocess import save_landmarks_csv

    os.makedirs(out_dir, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        arr = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(out_dir, f"frame_{t:05d}.png"))
    pcm = np.clip(np.round(clip.waveform * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(os.path.join(out_dir, "audio.wav"), clip.sample_rate, pcm)
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LABELS_HEADER)
        for t, state in enumerate(clip.states):
            writer.writerow([t, repr(float(clip.au45[t])),
                             repr(float(state.pose_angle)),
                             repr(float(state.mouth_open)),
                             repr(float(state.eye_open))])
    save_landmarks_csv(os.path.join(out_dir, "landmarks.csv"), clip.landmarks)
    with open(os.path.join(out_dir, "meta.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fps", "sample_rate"])
        writer.writerow([clip.fps, clip.sample_rate])


def load_clip(clip_dir) -> SynthClip:
    """Read a clip exported by save_clip.

    Frames come back 8-bit quantized and audio 16-bit quantized; labels
    and landmarks round-trip exactly.
    """
    from .preprocess import load_landmarks_csv

    with open(os.path.join(clip_dir, "meta.csv"), newline="") as f:
        reader = csv.reader(f)
        next(reader)
        fps, sr = (int(v) for v in next(reader))
    states = []
    au45 = []
    with open(os.path.join(clip_dir, "labels.csv"), newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != LABELS_HEADER:
            raise ValueError(f"unexpected labels header {header}")
        for row in reader:
            au45.append(float(row[1]))
            states.append(SceneState(pose_angle=float(row[2]),
                                     pose_shift=(0.0, 0.0),
                                     mouth_open=float(row[3]),
                                     eye_open=float(row[4])))
    frames = []
    for t in range(len(states)):
        img = Image.open(os.path.join(clip_dir, f"frame_{t:05d}.png"))
        frames.append(np.asarray(img, dtype=np.float32) / 255.0)
    rate, pcm = wavfile.read(os.path.join(clip_dir, "audio.wav"))
    if rate != sr:
        raise ValueError("audio rate disagrees with clip metadata")
    waveform = pcm.astype(np.float64) / 32767.0
    landmarks = load_landmarks_csv(os.path.join(clip_dir, "landmarks.csv"))
    return SynthClip(frames=np.stack(frames), waveform=waveform,
                     landmarks=landmarks, states=states,
                     au45=np.asarray(au45), fps=fps, sample_rate=sr)
