"""Training, inference, evaluation and persistence for the whole system.

Two training stages share one model bundle.  The first stage fits the
feature encoders with contrastive and supervised objectives; the second
freezes them and trains the frame generator against the multi-scale
critic, with the eye-control modules fitted to their analytic targets
at the start of the stage.  Inference drives the generator frame by
frame from an identity image, an audio track and a pose-reference clip,
then applies the eye warp and pastes the preserved background back in.

Everything a run touches is reproducible from (config, seed): datasets
are regenerated deterministically, model init is seeded, and
checkpoints carry optimizer and RNG state so a resumed run continues
bit-for-bit where it stopped.
"""

import csv
import configparser
import dataclasses
import hashlib
import itertools
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import audiofeat
from . import contrastive
from . import critics
from . import encoders
from . import eyeaugment
from . import generator as framegen
from . import metrics
from . import preprocess
from . import synthdata

CHECKPOINT_MAGIC = b"BLNKTLK\x00"
CHECKPOINT_VERSION = 1

STAGE_CONTRASTIVE = "contrastive"
STAGE_GAN = "gan"
STAGES = (STAGE_CONTRASTIVE, STAGE_GAN)

TRAIN_FRACTION = 0.8
MIN_AUDIO_SECONDS = 0.2
FPS = synthdata.DEFAULT_FPS
SAMPLE_RATE = synthdata.DEFAULT_SR

CONTENT_HALF = encoders.CONTENT_WINDOW // 2
SYNC_HALF = critics.SYNC_FRAMES // 2
# frame separation that guarantees visibly different mouth/pose states
HARD_NEGATIVE_GAP = 5
# audio/mouth pairs drawn from each clip per step
CONTENT_FRAMES_PER_CLIP = 3
SYNC_SHIFT = 10

# ties the two jitters of a frame together so appearance cannot leak
# into the pose code
POSE_INVARIANCE_WEIGHT = 1.0

# weight of the mismatched-clip hinge next to the matched blink term;
# kept small because unrelated clips can legitimately share blink rates
MISMATCH_BLINK_WEIGHT = 0.05
OTHER_AU_WEIGHT = 1e-3

# different identities may keep this much cosine similarity for free
IDENTITY_SIM_CAP = 0.7

EYE_MAPPER_FIT_STEPS = 800
EYE_DELTA_FIT_STEPS = 600

STAGE1_COLUMNS = ("step", "total", "content", "pose", "identity",
                  "au_sup", "au_video", "blink_l2", "sync")
STAGE1_COLUMNS_NO_AU = ("step", "total", "content", "pose", "identity",
                        "sync")
STAGE2_COLUMNS = ("step", "total", "d_loss", "g_gan", "l1", "perceptual",
                  "sync")

_EYE_OPEN_FLOOR = 1e-3  # below this the lids carry no usable direction


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Everything a training run needs, loadable from a flat INI file."""

    stage: str = STAGE_CONTRASTIVE
    steps: int = 50
    batch_size: int = 4
    learning_rate: float = 2e-4
    seed: int = 0
    l1_weight: float = 10.0
    perceptual_weight: float = 10.0
    sync_weight: float = 1.0
    no_pose: bool = False
    no_au: bool = False
    no_eye_aug: bool = False
    clips: int = 20
    duration_s: float = 1.0
    identities: int = 5
    checkpoint_path: str = ""
    log_path: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        for name in ("steps", "batch_size", "clips", "identities"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
            setattr(self, name, int(getattr(self, name)))
        self.seed = int(self.seed)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        for name in ("l1_weight", "perceptual_weight", "sync_weight"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")

    # fields that define what a run computes; output paths are excluded
    # so relocating logs never invalidates a checkpoint
    HASHED_FIELDS = ("stage", "steps", "batch_size", "learning_rate", "seed",
                     "l1_weight", "perceptual_weight", "sync_weight",
                     "no_pose", "no_au", "no_eye_aug",
                     "clips", "duration_s", "identities")

    def config_hash(self):
        lines = [f"{name}={getattr(self, name)!r}"
                 for name in self.HASHED_FIELDS]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def resume_hash(self):
        """Hash ignoring the step budget, so a run can be extended."""
        lines = [f"{name}={getattr(self, name)!r}"
                 for name in self.HASHED_FIELDS if name != "steps"]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def loss_weights(self):
        return critics.LossWeights(l1_weight=self.l1_weight,
                                   perceptual_weight=self.perceptual_weight,
                                   sync_weight=self.sync_weight)

    def ablation(self):
        return {"no_pose": self.no_pose, "no_au": self.no_au,
                "no_eye_aug": self.no_eye_aug}


_CONFIG_SECTIONS = {
    "train": ("stage", "steps", "batch_size", "learning_rate", "seed"),
    "loss": ("l1_weight", "perceptual_weight", "sync_weight"),
    "ablation": ("no_pose", "no_au", "no_eye_aug"),
    "dataset": ("clips", "duration_s", "identities"),
    "output": ("checkpoint_path", "log_path"),
}


def load_config(path) -> TrainConfig:
    """Parse a flat-section key-value config file."""
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    kwargs = {}
    for section in parser.sections():
        if section not in _CONFIG_SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        allowed = _CONFIG_SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            default = getattr(TrainConfig, key)
            if isinstance(default, bool):
                kwargs[key] = parser.getboolean(section, key)
            elif isinstance(default, int):
                kwargs[key] = parser.getint(section, key)
            elif isinstance(default, float):
                kwargs[key] = parser.getfloat(section, key)
            else:
                kwargs[key] = raw
    return TrainConfig(**kwargs)


def save_config(config: TrainConfig, path):
    parser = configparser.ConfigParser()
    for section, keys in _CONFIG_SECTIONS.items():
        parser[section] = {key: str(getattr(config, key)) for key in keys}
    with open(path, "w") as f:
        parser.write(f)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class ClipRecord:
    """One clip plus the identity bookkeeping needed for splits."""

    identity_seed: int
    clip: synthdata.SynthClip
    params: synthdata.AvatarParams = None  # None for clips loaded from disk


class SynthDataset:
    """A list of clip records with an identity-wise train/held-out split."""

    def __init__(self, records, heldout_all=False):
        if not records:
            raise ValueError("dataset is empty")
        self.records = list(records)
        self._mels = {}
        if heldout_all:
            self.train_indices = []
            self.heldout_indices = list(range(len(self.records)))
        else:
            self.train_indices, self.heldout_indices = self._split()

    def _split(self):
        ids = sorted({r.identity_seed for r in self.records})
        if len(ids) == 1:
            # single identity: fall back to splitting clips
            cut = max(1, int(round(TRAIN_FRACTION * len(self.records))))
            cut = min(cut, len(self.records) - 1) if len(self.records) > 1 \
                else len(self.records)
            train = list(range(cut))
            held = list(range(cut, len(self.records))) or train
            return train, held
        n_train = int(round(TRAIN_FRACTION * len(ids)))
        n_train = min(max(n_train, 1), len(ids) - 1)
        train_ids = set(ids[:n_train])
        train = [i for i, r in enumerate(self.records)
                 if r.identity_seed in train_ids]
        held = [i for i, r in enumerate(self.records)
                if r.identity_seed not in train_ids]
        return train, held

    def __len__(self):
        return len(self.records)

    @property
    def train_records(self):
        return [self.records[i] for i in self.train_indices]

    @property
    def heldout_records(self):
        return [self.records[i] for i in self.heldout_indices]

    def mel_of(self, record: ClipRecord) -> audiofeat.MelSpectrogram:
        key = id(record)
        if key not in self._mels:
            self._mels[key] = audiofeat.mel(record.clip.waveform,
                                            record.clip.sample_rate)
        return self._mels[key]

    @classmethod
    def generate(cls, clips, identities, duration_s, seed, size=(64, 64)):
        """Render a deterministic dataset; clips rotate over identities."""
        rng = np.random.default_rng([int(seed), 99])
        id_seeds = [int(seed) * 1009 + 7 * k for k in range(identities)]
        records = []
        for j in range(clips):
            identity_seed = id_seeds[j % identities]
            traj_seed = int(rng.integers(2 ** 31))
            clip = synthdata.make_clip(identity_seed, duration_s=duration_s,
                                       size=size, traj_seed=traj_seed)
            records.append(ClipRecord(identity_seed, clip,
                                      synthdata.sample_identity(identity_seed)))
        return cls(records)

    @classmethod
    def from_config(cls, config: TrainConfig):
        return cls.generate(config.clips, config.identities,
                            config.duration_s, config.seed)

    @classmethod
    def from_dir(cls, root):
        """Load clips saved by `save`; such datasets are evaluation-only."""
        import os
        entries = sorted(d for d in os.listdir(root)
                         if os.path.isdir(os.path.join(root, d)))
        if not entries:
            raise ValueError(f"no clip directories under {root}")
        identity_by_dir = {}
        index_path = os.path.join(root, "index.csv")
        if os.path.exists(index_path):
            with open(index_path, newline="") as f:
                for row in csv.DictReader(f):
                    identity_by_dir[row["clip"]] = int(row["identity_seed"])
        records = []
        for k, name in enumerate(entries):
            clip = synthdata.load_clip(os.path.join(root, name))
            records.append(ClipRecord(identity_by_dir.get(name, k), clip))
        return cls(records, heldout_all=True)

    def save(self, root):
        import os
        os.makedirs(root, exist_ok=True)
        rows = []
        for j, record in enumerate(self.records):
            name = f"clip_{j:04d}"
            synthdata.save_clip(record.clip, os.path.join(root, name))
            rows.append((name, record.identity_seed))
        with open(os.path.join(root, "index.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["clip", "identity_seed"])
            writer.writerows(rows)


# ---------------------------------------------------------------------------
# feature plumbing shared by training, inference and the test harness


def frame_tensor(frame):
    """One (H, W, 3) float frame to a (1, 3, H, W) tensor."""
    return encoders.frames_to_tensor(np.asarray(frame)[None])


def content_window(clip: synthdata.SynthClip, t, jitter_seed=None):
    """Stacked mouth crops around frame t, shaped (3*W, 32, 32).

    A jitter seed color-transfers all crops in the window identically,
    the training-time trick that stops clip appearance from leaking
    into the content code.
    """
    crops = [preprocess.mouth_crop(clip.frames[i], clip.landmarks[i])
             for i in range(t - CONTENT_HALF, t + CONTENT_HALF + 1)]
    if jitter_seed is not None:
        perm, scales = preprocess.sample_color_transfer(jitter_seed)
        crops = [preprocess.apply_color_transfer(c, perm, scales)
                 for c in crops]
    return _stack_crops(crops)


def _stack_crops(crops):
    stacked = np.concatenate([c.transpose(2, 0, 1) for c in crops], axis=0)
    return torch.as_tensor(stacked, dtype=torch.float32)


def content_frame_range(frame_count):
    """Frames whose crop window fits inside the clip (inclusive bounds)."""
    return CONTENT_HALF, frame_count - CONTENT_HALF - 1


def masked_eyes_frame(clip: synthdata.SynthClip, t):
    """Frame t with everything outside the dilated eye region zeroed."""
    frame = clip.frames[t]
    mask = preprocess.region_masks(clip.landmarks[t],
                                   frame.shape[:2])["eyes"].mask
    return torch.as_tensor((frame * mask[..., None]).transpose(2, 0, 1),
                           dtype=torch.float32)


def sync_center_range(frame_count, mel_rows):
    """Inclusive window-center bounds for a 5-frame sync window."""
    lo = SYNC_HALF
    hi = min(frame_count - SYNC_HALF - 1,
             (mel_rows - critics.SYNC_MEL_ROWS) // audiofeat.MEL_PER_FRAME
             + SYNC_HALF)
    return lo, hi


def sync_inputs(frames, landmark_sets, melspec, center, mel_center=None):
    """Tower inputs for one window: lips, eyes crops and the mel slice.

    `mel_center` lets callers pair the visual window with audio from a
    different position, which is how misaligned negatives are built.
    """
    if mel_center is None:
        mel_center = center
    span = range(center - SYNC_HALF, center + SYNC_HALF + 1)
    lips = _stack_crops([preprocess.mouth_crop(frames[i], landmark_sets[i])
                         for i in span])
    eyes = _stack_crops([preprocess.eyes_crop(frames[i], landmark_sets[i])
                         for i in span])
    start = (mel_center - SYNC_HALF) * audiofeat.MEL_PER_FRAME
    rows = melspec.values[start:start + critics.SYNC_MEL_ROWS]
    mel_window = torch.as_tensor(rows, dtype=torch.float32)
    return (lips.unsqueeze(0), eyes.unsqueeze(0),
            mel_window.unsqueeze(0).unsqueeze(0))


def audio_window_batch(melspec, frames):
    windows = [audiofeat.mel_frame_window(melspec, t) for t in frames]
    return torch.as_tensor(np.stack(windows), dtype=torch.float32)


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class PipelineModels:
    """Every trainable (or frozen) module the pipeline touches."""

    identity_enc: encoders.IdentityEncoder
    pose_enc: encoders.PoseEncoder
    content_enc: encoders.VisualContentEncoder
    audio_enc: audiofeat.AudioContentEncoder
    blink_audio: audiofeat.BlinkAudioNet
    blink_video: encoders.VideoBlinkClassifier
    sync: critics.SyncTowers
    generator: framegen.FrameGenerator
    critic: critics.MultiScaleCritic
    perceptual: critics.PerceptualPyramid
    eye_mapper: eyeaugment.EyeSizeMapper
    eye_delta: eyeaugment.LandmarkDeltaNet

    STAGE1_NAMES = ("identity_enc", "pose_enc", "content_enc", "audio_enc",
                    "blink_audio", "blink_video", "sync")

    def named_modules_dict(self):
        return {f.name: getattr(self, f.name)
                for f in dataclasses.fields(self)}

    def state(self):
        return {name: module.state_dict()
                for name, module in self.named_modules_dict().items()}

    def load_state(self, state):
        for name, module in self.named_modules_dict().items():
            module.load_state_dict(state[name])

    def stage1_parameters(self):
        params = []
        for name in self.STAGE1_NAMES:
            params += list(getattr(self, name).parameters())
        return params

    def freeze_stage1(self):
        for name in self.STAGE1_NAMES:
            module = getattr(self, name)
            module.requires_grad_(False)
            module.eval()

    def eval_all(self):
        for module in self.named_modules_dict().values():
            module.eval()


def build_models(seed) -> PipelineModels:
    """Construct all modules under one seed, in a fixed order."""
    torch.manual_seed(int(seed))
    return PipelineModels(
        identity_enc=encoders.IdentityEncoder(),
        pose_enc=encoders.PoseEncoder(),
        content_enc=encoders.VisualContentEncoder(),
        audio_enc=audiofeat.AudioContentEncoder(),
        blink_audio=audiofeat.BlinkAudioNet(),
        blink_video=encoders.VideoBlinkClassifier(),
        sync=critics.SyncTowers(),
        generator=framegen.FrameGenerator(),
        critic=critics.MultiScaleCritic(),
        perceptual=critics.PerceptualPyramid(),
        eye_mapper=eyeaugment.EyeSizeMapper(),
        eye_delta=eyeaugment.LandmarkDeltaNet(),
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Versioned container for parameters, optimizers and RNG state."""

    config: TrainConfig
    stage: str
    step: int
    models: PipelineModels
    optim: dict = field(default_factory=dict)
    torch_rng: torch.Tensor = None
    numpy_rng: dict = None

    def save(self, path):
        payload = {
            "config": dataclasses.asdict(self.config),
            "stage": self.stage,
            "step": self.step,
            "models": self.models.state(),
            "optim": self.optim,
            "torch_rng": self.torch_rng,
            "numpy_rng": self.numpy_rng,
        }
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(bytes.fromhex(self.config.config_hash()))
            torch.save(payload, f)

    @classmethod
    def load(cls, path, expected_config: TrainConfig = None):
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not a checkpoint file")
            (version,) = struct.unpack("<I", f.read(4))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            stored_hash = f.read(32).hex()
            payload = torch.load(f, map_location="cpu", weights_only=False)
        config = TrainConfig(**payload["config"])
        if config.config_hash() != stored_hash:
            raise ValueError(f"{path} is corrupt: config hash mismatch")
        if expected_config is not None and \
                expected_config.config_hash() != stored_hash:
            raise ValueError("checkpoint does not match the given config")
        models = build_models(config.seed)
        models.load_state(payload["models"])
        return cls(config=config, stage=payload["stage"],
                   step=payload["step"], models=models,
                   optim=payload["optim"], torch_rng=payload["torch_rng"],
                   numpy_rng=payload["numpy_rng"])


def _capture_rng(rng):
    return {"torch": torch.get_rng_state(),
            "numpy": rng.bit_generator.state}


def _restore_rng(checkpoint: Checkpoint):
    torch.set_rng_state(checkpoint.torch_rng)
    rng = np.random.default_rng()
    rng.bit_generator.state = checkpoint.numpy_rng
    return rng


# ---------------------------------------------------------------------------
# loss logging


class _LossLog:
    """CSV loss log; full-precision floats so curves compare bit-exactly."""

    def __init__(self, path, columns):
        self.columns = columns
        self.rows = []
        self._file = open(path, "w", newline="") if path else None
        self._writer = csv.writer(self._file) if self._file else None
        if self._writer:
            self._writer.writerow(columns)

    def write(self, values):
        row = [values[0]] + [repr(v.item() if torch.is_tensor(v)
                                  else float(v)) for v in values[1:]]
        self.rows.append(row)
        if self._writer:
            self._writer.writerow(row)
            self._file.flush()

    def close(self):
        if self._file:
            self._file.close()


def read_loss_log(path):
    """Loss CSV back as {column: list of floats}."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        columns = {name: [] for name in header}
        for row in reader:
            for name, value in zip(header, row):
                columns[name].append(float(value))
    return columns


# ---------------------------------------------------------------------------
# stage 1: contrastive and supervised feature training


def _pick_content_frames(rng, frame_count):
    """Mutually well-separated frames from one clip.

    Same-clip picks double as each other's negatives, so they must sit
    HARD_NEGATIVE_GAP apart; the gap relaxes only when the clip is too
    short to honor it.
    """
    lo, hi = content_frame_range(frame_count)
    count = min(CONTENT_FRAMES_PER_CLIP, hi - lo + 1)
    gap = min(HARD_NEGATIVE_GAP, max(1, (hi - lo) // max(1, count)))
    picks = [int(rng.integers(lo, hi + 1))]
    misses = 0
    while len(picks) < count:
        t = int(rng.integers(lo, hi + 1))
        if all(abs(t - p) >= gap for p in picks):
            picks.append(t)
            misses = 0
        else:
            misses += 1
            if misses > 50 and gap > 1:
                gap -= 1
                misses = 0
    return tuple(picks)


def _content_pairing(slices, total):
    """Negatives for each audio/mouth pair: same-clip frames first (the
    hard ones), then a rotating sample of other clips' frames."""
    negatives = []
    for start, end in slices:
        for idx in range(start, end):
            mates = [j for j in range(start, end) if j != idx]
            rest = [j for j in range(total) if not start <= j < end]
            offset = idx % len(rest) if rest else 0
            rot = rest[offset:] + rest[:offset]
            negatives.append((mates + rot)[:min(7, total - 1)])
    anchors = np.arange(total)
    return contrastive.FramePairing(anchors, anchors.copy(),
                                    np.asarray(negatives))


def _content_identity_losses(models, records, mels, picks, rng):
    """InfoNCE over audio/mouth pairs plus the identity objectives.

    Mouth crops and identity frames are independently color-jittered so
    neither code can lean on clip appearance: the audio side has no
    appearance at all, and the identity code must survive recoloring.
    """
    windows, melwins, frames, slices = [], [], [], []
    for record, melspec in zip(records, mels):
        start = len(windows)
        for t in picks[id(record)]:
            windows.append(content_window(
                record.clip, t, jitter_seed=int(rng.integers(2 ** 31))))
            melwins.append(audiofeat.mel_frame_window(melspec, t))
            frames.append(preprocess.color_transfer(
                record.clip.frames[t], int(rng.integers(2 ** 31))))
        slices.append((start, len(windows)))
    visual = models.content_enc(torch.stack(windows))
    audio = models.audio_enc(
        torch.as_tensor(np.stack(melwins), dtype=torch.float32))
    pairing = _content_pairing(slices, len(windows))
    loss_content = contrastive.content_loss(audio, visual, pairing)

    codes = models.identity_enc(encoders.frames_to_tensor(np.stack(frames)))
    same_terms = []
    for start, end in slices:
        if end - start >= 2:
            same_terms.append(1.0 - (codes[start] * codes[start + 1]).sum())
    same = torch.stack(same_terms).mean() if same_terms \
        else codes.new_zeros(())
    cross_terms = []
    for i, j in itertools.combinations(range(len(records)), 2):
        if records[i].identity_seed == records[j].identity_seed:
            continue
        sim = (codes[slices[i][0]] * codes[slices[j][0]]).sum()
        cross_terms.append(torch.clamp(sim - IDENTITY_SIM_CAP, min=0.0))
    cross = torch.stack(cross_terms).mean() if cross_terms \
        else codes.new_zeros(())
    return loss_content, same + cross


def _pose_loss(models, records, rng):
    """Regress normalized pose labels from color-jittered frames.

    A second jitter of every frame must map to the same code, which
    keeps appearance out of the pose slice.  The synthetic labels stand
    in for the external pose network a real corpus would need.
    """
    jittered, again, targets = [], [], []
    for record in records:
        clip = record.clip
        t = int(rng.integers(0, len(clip.frames)))
        frame = clip.frames[t]
        state = clip.states[t]
        jittered.append(preprocess.color_transfer(
            frame, int(rng.integers(2 ** 31))))
        again.append(preprocess.color_transfer(
            frame, int(rng.integers(2 ** 31))))
        targets.append((state.pose_angle / synthdata.POSE_ANGLE_MAX,
                        state.pose_shift[0] / synthdata.POSE_SHIFT_MAX,
                        state.pose_shift[1] / synthdata.POSE_SHIFT_MAX))
    codes = models.pose_enc(
        encoders.frames_to_tensor(np.stack(jittered + again)))
    n = len(records)
    pred = models.pose_enc.head(codes[:n])
    target = torch.as_tensor(targets, dtype=pred.dtype)
    mse = ((pred - target) ** 2).mean()
    invariance = ((codes[:n] - codes[n:]) ** 2).mean()
    return mse + POSE_INVARIANCE_WEIGHT * invariance


def _blink_losses(models, record, other, melspec):
    """Supervised AU45 heads plus the cross-modal blink agreement."""
    clip = record.clip
    k = len(clip.frames)
    au_seq = models.blink_audio(torch.as_tensor(melspec.values), k)
    gt = torch.as_tensor(clip.au45, dtype=au_seq.dtype)
    au45_col = au_seq[:, contrastive.AU45_INDEX]
    others = torch.cat([au_seq[:, :contrastive.AU45_INDEX],
                        au_seq[:, contrastive.AU45_INDEX + 1:]], dim=1)
    au_sup = ((au45_col - gt) ** 2).mean() + \
        OTHER_AU_WEIGHT * (others ** 2).mean()

    masked = torch.stack([masked_eyes_frame(clip, t) for t in range(k)])
    logits = models.blink_video(masked)
    classes = torch.round(gt).long().clamp(0, encoders.BLINK_CLASSES - 1)
    au_video = F.cross_entropy(logits, classes)
    video_series = encoders.au45_from_logits(logits)

    blink_l2 = contrastive.blink_l2_contrastive(au_seq, video_series,
                                                matched=True)
    other_k = len(other.clip.frames)
    if other is not record and other_k == k:
        other_masked = torch.stack([masked_eyes_frame(other.clip, t)
                                    for t in range(other_k)])
        other_series = encoders.au45_from_logits(
            models.blink_video(other_masked))
        blink_l2 = blink_l2 + MISMATCH_BLINK_WEIGHT * \
            contrastive.blink_l2_contrastive(au_seq, other_series,
                                             matched=False)
    return au_sup, au_video, blink_l2


def _sync_loss(models, records, mels, rng):
    """Binary cross-entropy on aligned windows versus shifted audio."""
    lips_p, eyes_p, mel_p = [], [], []
    lips_n, eyes_n, mel_n = [], [], []
    for record, melspec in zip(records, mels):
        clip = record.clip
        lo, hi = sync_center_range(len(clip.frames), len(melspec.values))
        t = int(rng.integers(lo, hi + 1))
        shift = SYNC_SHIFT if t + SYNC_SHIFT <= hi else -SYNC_SHIFT
        if not lo <= t + shift <= hi:
            shift = -shift
        t_neg = int(np.clip(t + shift, lo, hi))
        pos = sync_inputs(clip.frames, clip.landmarks, melspec, t)
        neg = sync_inputs(clip.frames, clip.landmarks, melspec, t,
                          mel_center=t_neg)
        lips_p.append(pos[0]); eyes_p.append(pos[1]); mel_p.append(pos[2])
        lips_n.append(neg[0]); eyes_n.append(neg[1]); mel_n.append(neg[2])
    emb_p = models.sync(torch.cat(lips_p), torch.cat(eyes_p),
                        torch.cat(mel_p))
    emb_n = models.sync(torch.cat(lips_n), torch.cat(eyes_n),
                        torch.cat(mel_n))
    p_pos = critics.sync_prob(emb_p)
    p_neg = critics.sync_prob(emb_n)
    return (-torch.log(p_pos)
            - torch.log(torch.clamp(1.0 - p_neg, min=critics.PROB_CLAMP))
            ).mean()


def train_contrastive(config: TrainConfig, dataset: SynthDataset = None,
                      log_path=None, resume: Checkpoint = None) -> Checkpoint:
    """Stage 1: fit all feature encoders; returns the final checkpoint."""
    if dataset is None:
        dataset = SynthDataset.from_config(config)
    records = dataset.train_records
    if resume is not None:
        if resume.stage != STAGE_CONTRASTIVE:
            raise ValueError("resume checkpoint is from a different stage")
        if resume.config.resume_hash() != config.resume_hash():
            raise ValueError("checkpoint does not match the given config")
        if resume.step >= config.steps:
            raise ValueError("checkpoint already covers the requested steps")
        models = resume.models
        opt = torch.optim.Adam(models.stage1_parameters(),
                               lr=config.learning_rate, betas=(0.5, 0.999))
        opt.load_state_dict(resume.optim["stage1"])
        rng = _restore_rng(resume)
        start = resume.step
    else:
        models = build_models(config.seed)
        opt = torch.optim.Adam(models.stage1_parameters(),
                               lr=config.learning_rate, betas=(0.5, 0.999))
        rng = np.random.default_rng([config.seed, 1])
        start = 0

    columns = STAGE1_COLUMNS_NO_AU if config.no_au else STAGE1_COLUMNS
    log = _LossLog(log_path, columns)
    try:
        for step in range(start, config.steps):
            batch_idx = rng.integers(0, len(records),
                                     size=min(config.batch_size,
                                              len(records)))
            batch = [records[int(i)] for i in batch_idx]
            mels = [dataset.mel_of(r) for r in batch]
            picks = {id(r): _pick_content_frames(rng, len(r.clip.frames))
                     for r in batch}

            loss_content, loss_identity = _content_identity_losses(
                models, batch, mels, picks, rng)
            loss_pose = _pose_loss(models, batch, rng)
            loss_sync = _sync_loss(models, batch[:2], mels[:2], rng)
            total = loss_content + loss_pose + loss_identity + loss_sync
            if not config.no_au:
                b_rec = batch[int(rng.integers(0, len(batch)))]
                b_other = records[int(rng.integers(0, len(records)))]
                au_sup, au_video, blink_l2 = _blink_losses(
                    models, b_rec, b_other, dataset.mel_of(b_rec))
                total = total + au_sup + au_video + blink_l2
                row = (step + 1, total, loss_content, loss_pose,
                       loss_identity, au_sup, au_video, blink_l2, loss_sync)
            else:
                row = (step + 1, total, loss_content, loss_pose,
                       loss_identity, loss_sync)
            if not torch.isfinite(total):
                raise RuntimeError(f"training diverged at step {step + 1}")
            opt.zero_grad()
            total.backward()
            opt.step()
            log.write(row)
    finally:
        log.close()

    state = _capture_rng(rng)
    return Checkpoint(config=config, stage=STAGE_CONTRASTIVE,
                      step=config.steps, models=models,
                      optim={"stage1": opt.state_dict()},
                      torch_rng=state["torch"], numpy_rng=state["numpy"])


# ---------------------------------------------------------------------------
# stage 2: adversarial generator training


def _clip_features(models, record, melspec, t0, span, identity_t):
    """Frozen-encoder conditioning for frames t0..t0+span-1."""
    clip = record.clip
    frames = clip.frames[t0:t0 + span]
    with torch.no_grad():
        id_code = models.identity_enc(
            frame_tensor(clip.frames[identity_t]))
        pose_codes = models.pose_enc(encoders.frames_to_tensor(frames))
        content = models.audio_enc(
            audio_window_batch(melspec, range(t0, t0 + span)))
        blink = models.blink_audio(torch.as_tensor(melspec.values),
                                   len(clip.frames))[t0:t0 + span]
    return id_code.expand(span, -1), pose_codes, content, blink


def _variant_sample(models, record, melspec, t0, span, identity_t, rng):
    """A re-rendered frame whose only change is the eye state.

    Pairing it with the same conditioning except for the blink slice
    teaches the generator that this slice owns the eye region.
    """
    clip = record.clip
    t_v = t0 + int(rng.integers(0, span))
    eye_open = float(rng.uniform(0.0, 1.0))
    state = dataclasses.replace(clip.states[t_v], eye_open=eye_open)
    target, _ = synthdata.render_frame(record.params, state,
                                       size=clip.frames[0].shape[:2])
    with torch.no_grad():
        id_code = models.identity_enc(frame_tensor(clip.frames[identity_t]))
        pose_code = models.pose_enc(frame_tensor(clip.frames[t_v]))
        content = models.audio_enc(audio_window_batch(melspec, [t_v]))
    blink = audiofeat.AUVector.from_au45(
        audiofeat.AU45_MAX * (1.0 - eye_open))
    blink_row = torch.as_tensor(blink.values, dtype=torch.float32)[None]
    return (id_code, pose_code, content, blink_row), target


def train_gan(config: TrainConfig, warm_start: Checkpoint = None,
              dataset: SynthDataset = None, log_path=None,
              resume: Checkpoint = None) -> Checkpoint:
    """Stage 2: alternating critic/generator updates over frozen encoders."""
    if dataset is None:
        dataset = SynthDataset.from_config(config)
    records = dataset.train_records
    if resume is not None:
        if resume.stage != STAGE_GAN:
            raise ValueError("resume checkpoint is from a different stage")
        if resume.config.resume_hash() != config.resume_hash():
            raise ValueError("checkpoint does not match the given config")
        if resume.step >= config.steps:
            raise ValueError("checkpoint already covers the requested steps")
        models = resume.models
        start = resume.step
    elif warm_start is not None:
        if warm_start.stage != STAGE_CONTRASTIVE:
            raise ValueError("warm start must be a stage-1 checkpoint")
        models = warm_start.models
        start = 0
    else:
        raise ValueError("stage 2 needs warm-started encoders")

    models.freeze_stage1()
    if resume is None:
        # the eye-control modules train against analytic targets, not
        # the critic, so their whole schedule runs up front
        eyeaugment.fit_eye_size_mapper(models.eye_mapper,
                                       steps=EYE_MAPPER_FIT_STEPS, seed=0)
        eyeaugment.fit_delta_net(models.eye_delta,
                                 steps=EYE_DELTA_FIT_STEPS, seed=0)

    g_opt = torch.optim.Adam(models.generator.parameters(),
                             lr=config.learning_rate, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(models.critic.parameters(),
                             lr=config.learning_rate, betas=(0.5, 0.999))
    if resume is not None:
        g_opt.load_state_dict(resume.optim["generator"])
        d_opt.load_state_dict(resume.optim["critic"])
        rng = _restore_rng(resume)
    else:
        rng = np.random.default_rng([config.seed, 2])

    weights = config.loss_weights()
    span = critics.SYNC_FRAMES
    log = _LossLog(log_path, STAGE2_COLUMNS)
    try:
        for step in range(start, config.steps):
            fcat_parts, real_frames = [], []
            windows = []  # (row offset, record, melspec, t0)
            for _ in range(2):
                record = records[int(rng.integers(0, len(records)))]
                melspec = dataset.mel_of(record)
                clip = record.clip
                t0 = int(rng.integers(0, len(clip.frames) - span + 1))
                identity_t = int(rng.integers(0, len(clip.frames)))
                parts = _clip_features(models, record, melspec, t0, span,
                                       identity_t)
                windows.append((len(real_frames), record, melspec, t0))
                fcat_parts.append(parts)
                real_frames.extend(clip.frames[t0:t0 + span])
                if record.params is not None:
                    v_parts, v_target = _variant_sample(
                        models, record, melspec, t0, span, identity_t, rng)
                    fcat_parts.append(v_parts)
                    real_frames.append(v_target)

            identity = torch.cat([p[0] for p in fcat_parts])
            pose = torch.cat([p[1] for p in fcat_parts])
            content = torch.cat([p[2] for p in fcat_parts])
            blink = torch.cat([p[3] for p in fcat_parts])
            fcat = framegen.assemble_fcat(identity, pose, content, blink,
                                          no_pose=config.no_pose,
                                          no_au=config.no_au)
            fake = models.generator(fcat)
            real = encoders.frames_to_tensor(np.stack(real_frames))

            d_loss = critics.gan_loss(models.critic(real),
                                      models.critic(fake.detach()),
                                      "discriminator")
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            g_gan = critics.gan_loss(None, models.critic(fake), "generator")
            l1 = critics.l1_loss(real, fake)
            perceptual = critics.perceptual_loss(real, fake,
                                                 models.perceptual)
            sync_terms = []
            for offset, record, melspec, t0 in windows:
                clip = record.clip
                gen_frames = [fake[offset + i].permute(1, 2, 0)
                              for i in range(span)]
                lms = clip.landmarks[t0:t0 + span]
                lips = _stack_crops_t(
                    [_crop_t(gen_frames[i], lms[i], preprocess.MOUTH_ALL)
                     for i in range(span)])
                eyes = _stack_crops_t(
                    [_crop_t(gen_frames[i], lms[i], _EYES_ALL)
                     for i in range(span)])
                start_row = t0 * audiofeat.MEL_PER_FRAME
                mel_rows = torch.as_tensor(
                    melspec.values[start_row:start_row
                                   + critics.SYNC_MEL_ROWS],
                    dtype=torch.float32)[None, None]
                emb = models.sync(lips[None], eyes[None], mel_rows)
                sync_terms.append(critics.sync_loss(critics.sync_prob(emb)))
            sync = torch.stack(sync_terms).mean()

            parts = {"gan": g_gan, "l1": l1, "perceptual": perceptual,
                     "sync": sync}
            total = critics.total_loss(parts, weights)
            if not (torch.isfinite(total) and torch.isfinite(d_loss)):
                raise RuntimeError(f"training diverged at step {step + 1}")
            g_opt.zero_grad()
            total.backward()
            g_opt.step()
            log.write((step + 1, total, d_loss, g_gan, l1, perceptual, sync))
    finally:
        log.close()

    state = _capture_rng(rng)
    return Checkpoint(config=config, stage=STAGE_GAN, step=config.steps,
                      models=models,
                      optim={"generator": g_opt.state_dict(),
                             "critic": d_opt.state_dict()},
                      torch_rng=state["torch"], numpy_rng=state["numpy"])


_EYES_ALL = preprocess.RIGHT_EYE + preprocess.LEFT_EYE


def _crop_t(frame_hw3, landmarks, indices, out_hw=(32, 32)):
    """Differentiable crop of a generated frame tensor.

    Samples the same float box as `preprocess.crop_resize_box` so real
    and generated crops share one geometry.
    """
    h, w = frame_hw3.shape[:2]
    x0, y0, x1, y1 = preprocess.region_box(landmarks, indices, (h, w))
    out_h, out_w = out_hw
    dtype = frame_hw3.dtype
    ys = y0 + (torch.arange(out_h, dtype=dtype) + 0.5) \
        * ((y1 - y0) / out_h) - 0.5
    xs = x0 + (torch.arange(out_w, dtype=dtype) + 0.5) \
        * ((x1 - x0) / out_w) - 0.5
    gy = (2.0 * ys + 1.0) / h - 1.0
    gx = (2.0 * xs + 1.0) / w - 1.0
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij"), dim=-1)
    grid = grid[..., [1, 0]][None]
    patch = frame_hw3.permute(2, 0, 1)[None]
    out = F.grid_sample(patch, grid, mode="bilinear",
                        align_corners=False, padding_mode="border")
    return out[0]


def _stack_crops_t(crops):
    return torch.cat(crops, dim=0)


# ---------------------------------------------------------------------------
# inference


@dataclass
class GeneratedVideo:
    """Frames plus the landmark/blink metadata the pipeline asserts."""

    frames: np.ndarray       # (T, H, W, 3) float32 in [0, 1]
    landmarks: list
    au45: np.ndarray
    fps: int = FPS

    def save(self, out_dir):
        import os
        from PIL import Image
        os.makedirs(out_dir, exist_ok=True)
        for t, frame in enumerate(self.frames):
            img = Image.fromarray(
                np.round(np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8))
            img.save(os.path.join(out_dir, f"frame_{t:05d}.png"))
        preprocess.save_landmarks_csv(
            os.path.join(out_dir, "landmarks.csv"), self.landmarks)
        with open(os.path.join(out_dir, "au45.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "au45"])
            for t, value in enumerate(self.au45):
                writer.writerow([t, repr(float(value))])


def _open_base(landmark_sets, t, open_size):
    """Pose-frame landmarks with the eyes normalized to fully open.

    A frame caught at the bottom of a blink has its lids on the eye
    axis, which carries no direction to rescale; the lid geometry is
    borrowed from the nearest open frame, anchored at the eye corners.
    """
    lms = landmark_sets[t]
    if preprocess.eye_size(lms).mean_size >= _EYE_OPEN_FLOOR:
        return eyeaugment.reopened_eyes(lms, open_size)
    for dist in range(1, len(landmark_sets)):
        for n in (t - dist, t + dist):
            if not 0 <= n < len(landmark_sets):
                continue
            donor = landmark_sets[n]
            if preprocess.eye_size(donor).mean_size < _EYE_OPEN_FLOOR:
                continue
            pts = lms.points.copy()
            for eye in (preprocess.RIGHT_EYE, preprocess.LEFT_EYE):
                c_here = 0.5 * (pts[eye[0]] + pts[eye[3]])
                c_donor = 0.5 * (donor.points[eye[0]]
                                 + donor.points[eye[3]])
                pts[eye] = donor.points[eye] + (c_here - c_donor)
            hybrid = preprocess.LandmarkSet(pts, lms.convention)
            return eyeaugment.reopened_eyes(hybrid, open_size)
    raise ValueError("pose video eyes never open")


def generate_video(identity_frame, waveform, pose_clip: synthdata.SynthClip,
                   checkpoint: Checkpoint, sample_rate=SAMPLE_RATE,
                   ablation: dict = None) -> GeneratedVideo:
    """Drive the generator with audio content/blink and reference poses.

    The frame count is floor(audio seconds x fps); a shorter pose clip
    truncates the output to its length.  Deterministic: equal inputs
    and checkpoint give bit-identical videos.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio")
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or len(waveform) == 0:
        raise ValueError("waveform must be non-empty and mono")
    if len(waveform) < MIN_AUDIO_SECONDS * sample_rate:
        raise ValueError(f"audio shorter than {MIN_AUDIO_SECONDS} s")
    identity_frame = np.asarray(identity_frame, dtype=np.float32)
    if identity_frame.ndim != 3 or identity_frame.shape[2] != 3:
        raise ValueError("identity frame must be (H, W, 3)")
    if len(pose_clip.frames) == 0:
        raise ValueError("pose video is empty")
    if pose_clip.frames[0].shape != identity_frame.shape:
        raise ValueError("identity frame and pose video sizes disagree")

    flags = dict(checkpoint.config.ablation())
    if ablation:
        unknown = set(ablation) - set(flags)
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")
        flags.update(ablation)

    frame_count = int(len(waveform) * FPS // sample_rate)
    frame_count = min(frame_count, len(pose_clip.frames))
    melspec = audiofeat.mel(waveform, sample_rate)

    models = checkpoint.models
    models.eval_all()
    with torch.no_grad():
        id_code = models.identity_enc(frame_tensor(identity_frame))
        pose_codes = models.pose_enc(
            encoders.frames_to_tensor(pose_clip.frames[:frame_count]))
        content = models.audio_enc(
            audio_window_batch(melspec, range(frame_count)))
        blink_seq = models.blink_audio(torch.as_tensor(melspec.values),
                                       frame_count)
        fcat = framegen.assemble_fcat(id_code.expand(frame_count, -1),
                                      pose_codes, content, blink_seq,
                                      no_pose=flags["no_pose"],
                                      no_au=flags["no_au"])
        generated = models.generator(fcat)
    frames = np.clip(generated.permute(0, 2, 3, 1).numpy(), 0.0, 1.0)
    frames = frames.astype(np.float32)

    pose_lms = pose_clip.landmarks[:frame_count]
    size = identity_frame.shape[:2]
    union = np.zeros(size, dtype=bool)
    for lms in pose_lms:
        union |= preprocess.region_masks(lms, size)["face"].mask
    union = preprocess._dilate(union, px=3)
    plate = preprocess.split_background(
        identity_frame, preprocess.RegionMask(union, "face"))

    blink_np = blink_seq.numpy()
    au45 = np.clip(blink_np[:, audiofeat.AU45_INDEX], 0.0,
                   audiofeat.AU45_MAX)
    open_size = max(preprocess.eye_size(l).mean_size for l in pose_lms)
    out_frames, out_lms = [], []
    for t in range(frame_count):
        frame = preprocess.composite_background(frames[t], plate)
        base = _open_base(pose_lms, t, open_size)
        if flags["no_eye_aug"]:
            out_lms.append(base)
        else:
            au_vec = audiofeat.AUVector(blink_np[t])
            signal = models.eye_mapper.target_size(au_vec, open_size)
            ratio = float(np.clip(signal.target_size / open_size, 0.0, 1.0))
            delta = models.eye_delta(base, ratio)
            frame = eyeaugment.apply_eye_warp(frame, base, delta)
            out_lms.append(eyeaugment.apply_delta(base, delta))
        out_frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
    return GeneratedVideo(frames=np.stack(out_frames), landmarks=out_lms,
                          au45=au45, fps=pose_clip.fps)


# ---------------------------------------------------------------------------
# evaluation


def clip_metrics(pred_frames, pred_landmarks, clip: synthdata.SynthClip):
    """Frame-wise scores of a prediction against one clip's ground truth."""
    count = min(len(pred_frames), len(clip.frames))
    if count == 0:
        raise ValueError("nothing to score")
    ssim_values, mouth, eye = [], [], []
    for t in range(count):
        ssim_values.append(metrics.ssim(pred_frames[t], clip.frames[t]))
        mouth.append(metrics.lmd(pred_landmarks[t], clip.landmarks[t],
                                 "mouth"))
        eye.append(metrics.lmd(pred_landmarks[t], clip.landmarks[t], "eye"))
    pred_sizes = [preprocess.eye_size(l).mean_size
                  for l in pred_landmarks[:count]]
    gt_open = [s.eye_open for s in clip.states[:count]]
    return {
        "ssim": float(np.mean(ssim_values)),
        "lmd_mouth": float(np.mean(mouth)),
        "lmd_eye": float(np.mean(eye)),
        "pred_eye_sizes": np.asarray(pred_sizes),
        "gt_eye_open": np.asarray(gt_open),
    }


def _pose_probe(models, records):
    """Least-squares map from pose codes of real frames to pose angles."""
    frames, angles = [], []
    for record in records:
        frames.extend(record.clip.frames)
        angles.extend(s.pose_angle for s in record.clip.states)
    with torch.no_grad():
        codes = models.pose_enc(
            encoders.frames_to_tensor(np.stack(frames))).numpy()
    x = np.concatenate([codes, np.ones((len(codes), 1))], axis=1)
    w, *_ = np.linalg.lstsq(x, np.asarray(angles), rcond=None)
    return w


def probe_r2(weights, codes, angles):
    x = np.concatenate([codes, np.ones((len(codes), 1))], axis=1)
    pred = x @ weights
    angles = np.asarray(angles)
    ss_res = float(np.sum((angles - pred) ** 2))
    ss_tot = float(np.sum((angles - angles.mean()) ** 2))
    if ss_tot < 1e-12:
        return 0.0
    return 1.0 - ss_res / ss_tot


def evaluate(dataset: SynthDataset, checkpoint: Checkpoint,
             ablation: dict = None) -> metrics.MetricReport:
    """Self-reenactment scores over the held-out split.

    Each clip drives itself: frame 0 is the identity reference and the
    clip doubles as the pose video, so ground-truth frames exist for
    every generated one.  A clip whose predicted blink series is
    constant contributes correlation 0 (no blink signal, no credit).
    """
    records = dataset.heldout_records
    if not records:
        raise ValueError("dataset has no held-out clips")
    models = checkpoint.models
    probe = _pose_probe(models, records)
    ssim_values, mouth, eye, corr = [], [], [], []
    gen_codes, gen_angles = [], []
    for record in records:
        clip = record.clip
        video = generate_video(clip.frames[0], clip.waveform, clip,
                               checkpoint, ablation=ablation)
        scores = clip_metrics(video.frames, video.landmarks, clip)
        ssim_values.append(scores["ssim"])
        mouth.append(scores["lmd_mouth"])
        eye.append(scores["lmd_eye"])
        try:
            corr.append(metrics.blink_corr(scores["pred_eye_sizes"],
                                           scores["gt_eye_open"]))
        except ValueError:
            corr.append(0.0)
        with torch.no_grad():
            codes = models.pose_enc(
                encoders.frames_to_tensor(video.frames)).numpy()
        gen_codes.append(codes)
        gen_angles.extend(s.pose_angle
                          for s in clip.states[:len(video.frames)])
    pose_r2 = probe_r2(probe, np.concatenate(gen_codes), gen_angles)
    return metrics.MetricReport(ssim=float(np.mean(ssim_values)),
                                lmd_mouth=float(np.mean(mouth)),
                                lmd_eye=float(np.mean(eye)),
                                blink_corr=float(np.mean(corr)),
                                pose_r2=float(pose_r2))


# ---------------------------------------------------------------------------
# held-out diagnostics used by the acceptance harness


def content_retrieval_accuracy(models, dataset: SynthDataset, trials=100,
                               candidates=8, seed=0):
    """Top-1 audio-to-frame retrieval rate among held-out candidates."""
    records = dataset.heldout_records
    rng = np.random.default_rng(seed)
    pool = []
    for record in records:
        melspec = dataset.mel_of(record)
        lo, hi = content_frame_range(len(record.clip.frames))
        pool.extend((record, melspec, t) for t in range(lo, hi + 1))
    if len(pool) < candidates:
        raise ValueError("not enough held-out frames")
    hits = 0
    with torch.no_grad():
        for _ in range(trials):
            record, melspec, t = pool[int(rng.integers(0, len(pool)))]
            legal = [p for p in pool
                     if p[0] is not record
                     or abs(p[2] - t) >= HARD_NEGATIVE_GAP]
            chosen = rng.choice(len(legal), size=candidates - 1,
                                replace=False)
            entries = [(record, melspec, t)]
            entries += [legal[int(i)] for i in chosen]
            audio = models.audio_enc(audio_window_batch(melspec, [t]))[0]
            visual = models.content_enc(torch.stack(
                [content_window(r.clip, tt) for r, _, tt in entries]))
            sims = visual @ audio
            hits += int(torch.argmax(sims).item() == 0)
    return hits / trials


def blink_error(models, dataset: SynthDataset):
    """Held-out mean absolute AU45 error of both blink heads."""
    audio_err, video_err, count = 0.0, 0.0, 0
    with torch.no_grad():
        for record in dataset.heldout_records:
            clip = record.clip
            melspec = dataset.mel_of(record)
            k = len(clip.frames)
            au_seq = models.blink_audio(torch.as_tensor(melspec.values), k)
            audio_pred = np.clip(
                au_seq[:, audiofeat.AU45_INDEX].numpy(), 0.0,
                audiofeat.AU45_MAX)
            masked = torch.stack([masked_eyes_frame(clip, t)
                                  for t in range(k)])
            video_pred = encoders.au45_from_logits(
                models.blink_video(masked)).numpy()
            audio_err += float(np.abs(audio_pred - clip.au45).sum())
            video_err += float(np.abs(video_pred - clip.au45).sum())
            count += k
    return audio_err / count, video_err / count


def sync_alignment_rate(models, dataset: SynthDataset, shift=SYNC_SHIFT):
    """Fraction of held-out windows where aligned audio wins."""
    wins, total = 0, 0
    with torch.no_grad():
        for record in dataset.heldout_records:
            clip = record.clip
            melspec = dataset.mel_of(record)
            lo, hi = sync_center_range(len(clip.frames), len(melspec.values))
            for t in range(lo, hi + 1):
                t_shift = t + shift if t + shift <= hi else t - shift
                if not lo <= t_shift <= hi:
                    continue
                pos = sync_inputs(clip.frames, clip.landmarks, melspec, t)
                neg = sync_inputs(clip.frames, clip.landmarks, melspec, t,
                                  mel_center=t_shift)
                p_pos = critics.sync_prob(models.sync(*pos))
                p_neg = critics.sync_prob(models.sync(*neg))
                wins += int(float(p_pos) > float(p_neg))
                total += 1
    if total == 0:
        raise ValueError("no usable sync windows")
    return wins / total


def pose_feature_r2(models, dataset: SynthDataset):
    """Linear-probe fit of pose codes on train clips, scored held-out."""
    probe = _pose_probe(models, dataset.train_records
                        or dataset.heldout_records)
    frames, angles = [], []
    for record in dataset.heldout_records:
        frames.extend(record.clip.frames)
        angles.extend(s.pose_angle for s in record.clip.states)
    with torch.no_grad():
        codes = models.pose_enc(
            encoders.frames_to_tensor(np.stack(frames))).numpy()
    return probe_r2(probe, codes, angles)
