"""Cross-modal contrastive objectives.

The content objective is an InfoNCE ranking loss on cosine similarity
with no temperature: each anchor must place its aligned partner above
S-1 sampled negatives, and the total is the symmetric sum over the
audio-to-video and video-to-audio directions.  The blink objective
pulls the audio and video blink-intensity series together for matched
clips and pushes their means apart for mismatched ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# index of the blink intensity channel inside a 71-value action vector
AU45_INDEX = 5

BLINK_MARGIN = 1.0


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cosine_similarity(a, b):
    """Cosine similarity of two vectors; zero-norm inputs are an error."""
    a, b = _as_tensor(a), _as_tensor(b)
    na, nb = torch.linalg.norm(a), torch.linalg.norm(b)
    if float(na) == 0.0 or float(nb) == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return (a * b).sum() / (na * nb)


@dataclass
class ContrastiveBatch:
    """One anchor scored against S candidates, one of which is positive."""

    anchor: torch.Tensor
    candidates: torch.Tensor
    positive_index: int

    def __post_init__(self):
        self.anchor = _as_tensor(self.anchor)
        self.candidates = _as_tensor(self.candidates)
        if self.candidates.ndim != 2 or len(self.candidates) < 2:
            raise ValueError("need at least two candidates")
        if not 0 <= self.positive_index < len(self.candidates):
            raise ValueError("positive index out of range")


def info_nce(batch: ContrastiveBatch):
    """Negative log probability of the positive under cosine scores."""
    anchor = batch.anchor / torch.linalg.norm(batch.anchor)
    cands = batch.candidates / torch.linalg.norm(
        batch.candidates, dim=1, keepdim=True)
    sims = cands @ anchor
    return -torch.log_softmax(sims, dim=0)[batch.positive_index]


@dataclass
class FramePairing:
    """Index bookkeeping for a symmetric cross-modal batch.

    Row i pairs audio feature anchors[i] with video feature
    positives[i]; negatives[i] lists indices into the opposite modality
    used as distractors for both directions.
    """

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=int)
        self.positives = np.asarray(self.positives, dtype=int)
        self.negatives = np.asarray(self.negatives, dtype=int)
        if self.negatives.ndim != 2 or len(self.anchors) != len(self.negatives):
            raise ValueError("pairing arrays disagree")


def paired_pairing(n, num_negatives=7):
    """Pairing for aligned feature lists: everyone else is a negative."""
    anchors = np.arange(n)
    negatives = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        negatives.append(others[:num_negatives])
    return FramePairing(anchors, anchors.copy(), np.asarray(negatives))


def content_loss(audio_feats, visual_feats, pairing: FramePairing):
    """Symmetric InfoNCE over both retrieval directions."""
    audio_feats = _as_tensor(audio_feats)
    visual_feats = _as_tensor(visual_feats)
    if audio_feats.shape != visual_feats.shape:
        raise ValueError("modalities must hold matching feature arrays")
    total = audio_feats.new_zeros(())
    n = len(pairing.anchors)
    for i in range(n):
        a = pairing.anchors[i]
        p = pairing.positives[i]
        negs = list(pairing.negatives[i])
        fwd = ContrastiveBatch(audio_feats[a],
                               torch.stack([visual_feats[p]]
                                           + [visual_feats[j] for j in negs]), 0)
        bwd = ContrastiveBatch(visual_feats[p],
                               torch.stack([audio_feats[a]]
                                           + [audio_feats[j] for j in negs]), 0)
        total = total + info_nce(fwd) + info_nce(bwd)
    return total / n


def blink_l2_contrastive(audio_au, video_au, matched=True, margin=BLINK_MARGIN):
    """Blink alignment term between audio and video intensity series.

    Matched clips contribute the mean squared difference of the blink
    channel; mismatched clips contribute a hinge that keeps the series
    means at least `margin` apart.
    """
    audio_au = _as_tensor(audio_au)
    video_au = _as_tensor(video_au)
    if audio_au.ndim == 2:
        audio_au = audio_au[:, AU45_INDEX]
    if video_au.ndim == 2:
        video_au = video_au[:, AU45_INDEX]
    if audio_au.shape != video_au.shape:
        raise ValueError("series lengths disagree")
    if matched:
        return ((audio_au - video_au) ** 2).mean()
    gap = torch.abs(audio_au.mean() - video_au.mean())
    return torch.clamp(margin - gap, min=0.0)
