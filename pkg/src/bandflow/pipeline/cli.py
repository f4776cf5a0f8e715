"""``bandflow`` command line: train, infer, eval, grid.

Log verbosity comes from the ``BANDFLOW_LOG_LEVEL`` environment variable
(default ``INFO``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .. import spectral
from ..errors import ConfigurationError, DimensionError, IncompatibleCheckpointError, IntegrityError, LengthError
from ..flow import SamplerConfig, equal_straightness_grid, generate
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ClipStore, DatasetManifest, read_tokens
from .metrics import evaluate, write_report
from .training import TrainingConfig, Trainer, measure_straightness

logger = logging.getLogger("bandflow")

_USAGE_ERRORS = (ConfigurationError, DimensionError, LengthError, FileNotFoundError)
_DATA_ERRORS = (IntegrityError, IncompatibleCheckpointError)

DEFAULT_TOKEN_CFG_SCALE = 2.0


def _sampler(args, model) -> SamplerConfig:
    scale = args.cfg_scale
    if scale is None:
        scale = DEFAULT_TOKEN_CFG_SCALE if model.cond_kind == "tokens" else 1.0
    return SamplerConfig(args.steps, args.grid, scale)


def load_conditioning(path: Path, model):
    """Conditioning tensor from a WAV (copy-synthesis), ``.npy`` log-Mel or ``.tok`` token file."""
    suffix = path.suffix.lower()
    if suffix == ".wav":
        if model.cond_kind != "mel":
            raise ConfigurationError("WAV copy-synthesis needs a Mel-conditioned checkpoint")
        wave, _ = spectral.read_wav(path, expected_rate=model.spectral.sample_rate)
        return spectral.log_mel(torch.as_tensor(wave, dtype=model.dtype)[None], model.spectral)
    if suffix == ".npy":
        if model.cond_kind != "mel":
            raise ConfigurationError("a Mel input needs a Mel-conditioned checkpoint")
        mel = np.load(path)
        if mel.ndim == 2:
            mel = mel[None]
        if mel.ndim != 3 or mel.shape[1] != model.spectral.n_mels:
            raise DimensionError(f"Mel input must be [{model.spectral.n_mels}, F], got {mel.shape}")
        return torch.as_tensor(mel, dtype=model.dtype)
    if suffix == ".tok":
        if model.cond_kind != "tokens":
            raise ConfigurationError("a token input needs a token-conditioned checkpoint")
        return torch.as_tensor(read_tokens(path))[None]
    raise ConfigurationError(f"unsupported input type {suffix!r}; expected .wav, .npy or .tok")


def cmd_train(args) -> int:
    cfg = TrainingConfig.from_file(args.config)
    bundle = load_checkpoint(args.resume) if args.resume else None
    trainer = Trainer(cfg, resume=bundle)
    trainer.run(until=args.until)
    logger.info("stopped at step %d; checkpoints in %s", trainer.step, cfg.output_dir)
    return 0


def cmd_infer(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model.eval()
    cond = load_conditioning(Path(args.input), model)
    sampler = _sampler(args, model)
    i_bw = None
    if model.cond_kind == "tokens":
        i_bw = model.backbone.cfg.n_bandwidths - 1 if args.bandwidth is None else args.bandwidth
    wave = generate(model, cond, sampler, seed=args.seed, i_bw=i_bw)[0].numpy()
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    spectral.write_wav(out, wave, model.spectral.sample_rate, subtype="float32")
    sidecar = {
        "seed": args.seed,
        "grid_mode": sampler.grid_mode,
        "n_steps": sampler.n_steps,
        "cfg_scale": sampler.cfg_scale,
        "bandwidth_index": i_bw,
        "frames": int(cond.shape[-1]),
        "samples": int(wave.shape[-1]),
        "sample_rate": model.spectral.sample_rate,
        "checkpoint": str(args.checkpoint),
        "checkpoint_step": bundle.step,
        "input": str(args.input),
    }
    out.with_name(out.name + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    logger.info("wrote %s (%.3f s)", out, wave.shape[-1] / model.spectral.sample_rate)
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    sampler = SamplerConfig(args.steps, args.grid, 1.0 if args.cfg_scale is None else args.cfg_scale)
    manifest = DatasetManifest.load(args.manifest)
    rows, aggregate = evaluate(bundle.model.eval(), manifest, sampler, args.seed, args.split)
    text, jsonl = write_report(rows, aggregate, args.report)
    print(text.read_text(), end="")
    logger.info("reports: %s, %s", text, jsonl)
    return 0


def cmd_grid(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model.eval()
    manifest = DatasetManifest.load(args.batch)
    store = ClipStore(manifest, model.spectral, None, need_tokens=model.cond_kind == "tokens")
    profile = measure_straightness(model, store, args.batch_size, args.crop_frames, args.probes, args.seed)
    model.straightness = profile
    model.time_grid = equal_straightness_grid(profile, args.steps)
    save_checkpoint(bundle, args.output or args.checkpoint)
    print(" ".join(f"{t:.6f}" for t in model.time_grid.points))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bandflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until", type=int, help="stop after this many total steps (default: total_steps)")
    p.set_defaults(func=cmd_train)

    def sampler_args(q):
        q.add_argument("--steps", type=int, default=10)
        q.add_argument("--grid", choices=("uniform", "equal_straightness"), default="uniform")
        q.add_argument("--cfg-scale", type=float, default=None,
                       help=f"guidance scale (token models default to {DEFAULT_TOKEN_CFG_SCALE})")
        q.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("infer", help="synthesise a WAV from a WAV, .npy log-Mel or .tok token file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bandwidth", type=int, default=None, help="token models: bandwidth index")
    sampler_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="copy-synthesis metrics over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="text report path; JSON lines go to REPORT.jsonl")
    p.add_argument("--split", default=None, help="only score entries with this split tag")
    sampler_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="recompute the equal-straightness time grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", required=True, help="manifest of clips to draw the probe batch from")
    p.add_argument("--output", help="write the updated checkpoint here instead of in place")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=96)
    p.add_argument("--crop-frames", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("BANDFLOW_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
