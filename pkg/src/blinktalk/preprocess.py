"""Landmark geometry, region masks and frame preparation utilities.

Landmarks follow the 68-point convention used by common face alignment
tools: jaw 0-16, brows 17-26, nose 27-35, right eye 36-41, left eye
42-47, outer mouth 48-59, inner mouth 60-67.  Images are float arrays in
[0, 1] with shape (H, W, 3).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

LANDMARK_COUNT = 68
LANDMARK_CONVENTION = "ibug68"

JAW = list(range(0, 17))
RIGHT_BROW = list(range(17, 22))
LEFT_BROW = list(range(22, 27))
NOSE_BRIDGE = list(range(27, 31))
NOSE_BASE = list(range(31, 36))
RIGHT_EYE = list(range(36, 42))
LEFT_EYE = list(range(42, 48))
OUTER_MOUTH = list(range(48, 60))
INNER_MOUTH = list(range(60, 68))
MOUTH_ALL = OUTER_MOUTH + INNER_MOUTH
EYE_CORNERS = (36, 39, 42, 45)
FACE_OUTLINE = JAW + RIGHT_BROW + LEFT_BROW

# Region masks are grown by this many pixels (Chebyshev metric).
MASK_DILATION_PX = 2

# Rec. 601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class InvalidLandmarksError(ValueError):
    """Raised for malformed or degenerate landmark geometry."""


@dataclass
class LandmarkSet:
    """68 image-space points, x right and y down, in pixels."""

    points: np.ndarray
    convention: str = LANDMARK_CONVENTION

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (LANDMARK_COUNT, 2):
            raise InvalidLandmarksError(
                f"expected ({LANDMARK_COUNT}, 2) points, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidLandmarksError("landmarks contain non-finite values")
        self.points = pts

    def translated(self, dx, dy):
        return LandmarkSet(self.points + np.array([dx, dy]), self.convention)


@dataclass
class RegionMask:
    """Boolean pixel mask for one named face region."""

    mask: np.ndarray
    region: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def coverage(self):
        return float(self.mask.mean())


@dataclass
class EyeState:
    """Aspect-ratio openness of each eye and their mean."""

    left_size: float
    right_size: float
    mean_size: float = field(default=None)

    def __post_init__(self):
        if self.mean_size is None:
            self.mean_size = 0.5 * (self.left_size + self.right_size)


def _ear(points):
    # points ordered corner, upper x2, corner, lower x2
    p = np.asarray(points, dtype=np.float64)
    horizontal = np.linalg.norm(p[0] - p[3])
    if horizontal <= 1e-12:
        raise InvalidLandmarksError("zero eye width")
    vert_one = np.linalg.norm(p[1] - p[5])
    vert_two = np.linalg.norm(p[2] - p[4])
    return (vert_one + vert_two) / (2.0 * horizontal)


def eye_size(landmarks: LandmarkSet) -> EyeState:
    """Eye aspect ratio per eye: mean vertical gap over horizontal width."""
    pts = landmarks.points
    right = _ear(pts[RIGHT_EYE])
    left = _ear(pts[LEFT_EYE])
    return EyeState(left_size=float(left), right_size=float(right))


def _fill_hull(points, size):
    """Boolean mask of the convex hull of `points` on a (H, W) pixel grid.

    Collinear input (a fully closed eye flattens its landmarks onto one
    line) is thickened by half a pixel so the hull stays 2-D.
    """
    h, w = size
    pts = np.asarray(points, dtype=np.float64)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        corners = np.array([[0.5, 0.5], [0.5, -0.5], [-0.5, 0.5],
                            [-0.5, -0.5]])
        pts = (pts[:, None, :] + corners[None, :, :]).reshape(-1, 2)
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:
            raise InvalidLandmarksError(
                f"degenerate region hull: {exc}") from exc
    verts = pts[hull.vertices]  # counter-clockwise order
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        # cross(b - a, p - a) >= 0 keeps the interior for CCW vertex order
        cross = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
        inside &= cross >= -1e-9
    return inside


def _dilate(mask, px=MASK_DILATION_PX):
    if px <= 0:
        return mask
    structure = np.ones((3, 3), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure, iterations=px)


def region_masks(landmarks: LandmarkSet, size) -> dict:
    """Mouth, eyes and face masks for a frame of shape `size` = (H, W).

    Mouth and eyes are filled convex hulls of their landmark groups,
    dilated by MASK_DILATION_PX.  The face mask is the hull of jaw plus
    brow points.
    """
    pts = landmarks.points
    mouth = _dilate(_fill_hull(pts[MOUTH_ALL], size))
    eyes = _dilate(_fill_hull(pts[RIGHT_EYE], size)
                   | _fill_hull(pts[LEFT_EYE], size))
    face = _fill_hull(pts[FACE_OUTLINE], size)
    return {
        "mouth": RegionMask(mouth, "mouth"),
        "eyes": RegionMask(eyes, "eyes"),
        "face": RegionMask(face, "face"),
    }


def luma(frame):
    """Rec. 601 luminance of an RGB frame."""
    frame = np.asarray(frame, dtype=np.float64)
    r, g, b = LUMA_WEIGHTS
    return r * frame[..., 0] + g * frame[..., 1] + b * frame[..., 2]


def sample_color_transfer(seed):
    """Channel permutation and per-channel scales for one augmentation."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(3)
    scales = rng.uniform(0.7, 1.3, size=3)
    return perm, scales


def apply_color_transfer(frame, perm, scales):
    frame = np.asarray(frame, dtype=np.float64)
    out = frame[..., perm] * np.asarray(scales, dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def color_transfer(frame, seed):
    """Seeded appearance jitter: permute channels, rescale, clip to [0, 1]."""
    perm, scales = sample_color_transfer(seed)
    return apply_color_transfer(frame, perm, scales)


@dataclass
class BackgroundPlate:
    """Original frame plus the face mask it was split with."""

    image: np.ndarray
    face_mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.face_mask = np.asarray(self.face_mask, dtype=bool)
        if self.image.shape[:2] != self.face_mask.shape:
            raise ValueError("plate image and mask shapes disagree")


def split_background(frame, face: RegionMask) -> BackgroundPlate:
    """Keep everything outside the face region for later compositing."""
    return BackgroundPlate(np.array(frame, copy=True), face.mask)


def composite_background(generated, plate: BackgroundPlate):
    """Generated pixels inside the face mask, plate pixels outside."""
    generated = np.asarray(generated)
    if generated.shape != plate.image.shape:
        raise ValueError("generated frame shape does not match plate")
    mask = plate.face_mask[..., None]
    return np.where(mask, generated, plate.image)


def region_bbox(landmarks: LandmarkSet, indices, size, margin=2):
    """Integer (x0, y0, x1, y1) box around the given points, clamped."""
    h, w = size
    pts = landmarks.points[list(indices)]
    x0 = int(np.floor(pts[:, 0].min())) - margin
    y0 = int(np.floor(pts[:, 1].min())) - margin
    x1 = int(np.ceil(pts[:, 0].max())) + margin + 1
    y1 = int(np.ceil(pts[:, 1].max())) + margin + 1
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise InvalidLandmarksError("region box collapsed")
    return x0, y0, x1, y1


def _bilinear_at(image, ys, xs):
    """Sample image rows `ys` x columns `xs` (float grids, clamped)."""
    in_h, in_w = image.shape[:2]
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if image.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(image, out_hw):
    """Plain bilinear resample, accepts (H, W) or (H, W, C) arrays."""
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape[:2]
    out_h, out_w = out_hw
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    return _bilinear_at(image, ys, xs)


def crop_resize(frame, bbox, out_hw):
    x0, y0, x1, y1 = bbox
    return resize_bilinear(frame[y0:y1, x0:x1], out_hw)


def region_box(landmarks: LandmarkSet, indices, size, margin=2.0):
    """Float (x0, y0, x1, y1) box around the given points, clamped.

    Unlike `region_bbox` nothing is rounded, so the box tracks the
    landmarks smoothly; rounding would make crop content jump by whole
    pixels as the underlying motion crosses integer boundaries.
    """
    h, w = size
    pts = landmarks.points[list(indices)]
    x0 = max(float(pts[:, 0].min()) - margin, 0.0)
    y0 = max(float(pts[:, 1].min()) - margin, 0.0)
    x1 = min(float(pts[:, 0].max()) + margin + 1.0, float(w))
    y1 = min(float(pts[:, 1].max()) + margin + 1.0, float(h))
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise InvalidLandmarksError("region box collapsed")
    return x0, y0, x1, y1


def crop_resize_box(frame, box, out_hw):
    """Bilinear crop of a float box, sampled without rounding the box."""
    frame = np.asarray(frame, dtype=np.float64)
    x0, y0, x1, y1 = box
    out_h, out_w = out_hw
    ys = y0 + (np.arange(out_h) + 0.5) * ((y1 - y0) / out_h) - 0.5
    xs = x0 + (np.arange(out_w) + 0.5) * ((x1 - x0) / out_w) - 0.5
    return _bilinear_at(frame, ys, xs)


def mouth_crop(frame, landmarks: LandmarkSet, out_hw=(32, 32)):
    """Mouth region crop resized to `out_hw`."""
    box = region_box(landmarks, MOUTH_ALL, frame.shape[:2])
    return crop_resize_box(frame, box, out_hw)


def eyes_crop(frame, landmarks: LandmarkSet, out_hw=(32, 32)):
    """Crop spanning both eyes resized to `out_hw`."""
    box = region_box(landmarks, RIGHT_EYE + LEFT_EYE, frame.shape[:2])
    return crop_resize_box(frame, box, out_hw)


def save_landmarks_csv(path, landmark_sets):
    """Write per-frame landmarks, one row per frame.

    Header is frame,x0,y0,...,x67,y67.
    """
    header = ["frame"]
    for i in range(LANDMARK_COUNT):
        header += [f"x{i}", f"y{i}"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for t, lms in enumerate(landmark_sets):
            row = [t] + [repr(float(v)) for v in lms.points.reshape(-1)]
            writer.writerow(row)


def load_landmarks_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[0] != "frame" or len(header) != 1 + 2 * LANDMARK_COUNT:
            raise InvalidLandmarksError(f"bad landmark CSV header in {path}")
        out = []
        for row in reader:
            vals = np.array([float(v) for v in row[1:]], dtype=np.float64)
            out.append(LandmarkSet(vals.reshape(LANDMARK_COUNT, 2)))
    return out
