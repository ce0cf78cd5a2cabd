"""Command-line interface.

Subcommands cover the full workflow: synth-data renders a clip corpus,
train runs either stage from a config file, generate drives the model
with a portrait plus audio plus pose video, and evaluate scores a
checkpoint on a dataset's held-out split.
"""

import argparse
import dataclasses
import sys

import numpy as np

from . import pipeline, synthdata

CLIPS_PER_IDENTITY = 4


def _cmd_synth_data(args):
    identities = max(1, round(args.clips / CLIPS_PER_IDENTITY))
    dataset = pipeline.SynthDataset.generate(
        clips=args.clips, identities=identities, seed=args.seed)
    dataset.save(args.out)
    print(f"wrote {args.clips} clips ({identities} identities) to {args.out}")


def _cmd_train(args):
    config = pipeline.load_config(args.config)
    if args.stage:
        config = dataclasses.replace(config, stage=args.stage)
    resume = warm = None
    if args.resume:
        ckpt = pipeline.Checkpoint.load(args.resume)
        if (config.stage == pipeline.STAGE_GAN
                and ckpt.stage == pipeline.STAGE_CONTRASTIVE):
            warm = ckpt
        else:
            resume = ckpt
    log_path = config.log_path or f"{config.stage}_losses.csv"
    if config.stage == pipeline.STAGE_CONTRASTIVE:
        result = pipeline.train_contrastive(config, log_path=log_path,
                                            resume=resume)
    else:
        result = pipeline.train_gan(config, warm_start=warm,
                                    log_path=log_path, resume=resume)
    out = config.checkpoint_path or f"{config.stage}.ckpt"
    result.save(out)
    print(f"saved {result.stage} checkpoint at step {result.step} to {out}")
    print(f"losses logged to {log_path}")


def _load_wav(path):
    from scipy.io import wavfile

    rate, wav = wavfile.read(path)
    if wav.dtype == np.int16:
        wav = wav / 32767.0
    elif wav.dtype == np.int32:
        wav = wav / 2147483647.0
    else:
        wav = wav.astype(np.float64)
    if wav.ndim == 2:
        wav = wav.mean(axis=1)
    return rate, wav


def _cmd_generate(args):
    from PIL import Image

    identity = np.asarray(Image.open(args.identity).convert("RGB"),
                          dtype=np.float32) / 255.0
    rate, wav = _load_wav(args.audio)
    pose = synthdata.load_clip(args.pose_video)
    checkpoint = pipeline.Checkpoint.load(args.ckpt)
    video = pipeline.generate_video(identity, wav, pose, checkpoint,
                                    sample_rate=rate)
    video.save(args.out)
    print(f"wrote {len(video.frames)} frames to {args.out}")


def _cmd_evaluate(args):
    dataset = pipeline.SynthDataset.from_dir(args.data)
    checkpoint = pipeline.Checkpoint.load(args.ckpt)
    report = pipeline.evaluate(dataset, checkpoint)
    report.save_csv(args.report)
    print(report.summary())


def build_parser():
    parser = argparse.ArgumentParser(
        prog="blinktalk",
        description="audio-driven talking faces on a procedural avatar")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic clip dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--stage", choices=pipeline.STAGES,
                   help="override the config's stage")
    p.add_argument("--resume", metavar="CKPT",
                   help="stage-1 checkpoint warm-starts stage 2; "
                        "a same-stage checkpoint continues training")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="synthesize a talking-face video")
    p.add_argument("--identity", required=True, help="portrait PNG")
    p.add_argument("--audio", required=True, help="16 kHz WAV")
    p.add_argument("--pose-video", required=True, help="clip directory")
    p.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out clips")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="output CSV")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
