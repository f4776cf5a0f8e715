"""Training configuration and loop.

Config files are flat ``key = value`` text; ``#`` starts a comment. Values
are read as JSON where possible (numbers, booleans, lists, quoted strings)
and otherwise taken as bare strings. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import BackboneConfig
from ..errors import ConfigurationError, NumericalError
from ..flow import equal_straightness_grid, estimate_straightness
from ..losses import (
    LossWeights,
    energy_balanced_rf_loss,
    overlap_loss,
    stft_reconstruction_loss,
    total_loss,
)
from ..model import ModelSpec, Vocoder
from ..spectral import SpectralConfig
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .data import ClipStore, DatasetManifest, TrainingBatch, assemble_batch, prepare_training_batch, sample_crops

logger = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    # data
    manifest: str = ""
    output_dir: str = "runs/default"
    crop_frames: int = 128
    batch_size: int = 64
    # model
    domain: str = "time"
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 100
    window: str = "hann"
    n_subbands: int = 8
    overlap: int = 8
    pqmf_bands: int = 8
    pqmf_taps: int = 124
    ema_decay: float = 0.999
    n_blocks: int = 8
    dim: int = 512
    intermediate_dim: int = 1536
    kernel: int = 7
    fourier_bands: int = 8
    cond_kind: str = "mel"
    n_codebooks: int = 8
    codebook_size: int = 1024
    bandwidth_codebooks: list = field(default_factory=lambda: [2, 4, 8])
    cond_dropout_prob: float = 0.1
    # loss
    w_flow: float = 1.0
    w_overlap: float = 0.01
    w_stft: float = 0.01
    energy_balanced: bool = True
    overlap_pairing: str = "consistency"
    # optimisation
    lr_start: float = 2e-4
    lr_min: float = 2e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    total_steps: int = 1_000_000
    seed: int = 0
    # bookkeeping
    log_every: int = 50
    val_every: int = 1000
    val_batch_size: int = 8
    checkpoint_every: int = 1000
    straightness_batch: int = 96
    straightness_probes: int = 100
    grid_steps: int = 10

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.crop_frames < 2:
            raise ConfigurationError("total_steps, batch_size must be >= 1 and crop_frames >= 2")
        if not 0 < self.lr_min <= self.lr_start:
            raise ConfigurationError("need 0 < lr_min <= lr_start")

    @classmethod
    def from_text(cls, text: str) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {n}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigurationError(f"config line {n}: unknown key {key!r}")
            try:
                values[key] = json.loads(raw)
            except json.JSONDecodeError:
                values[key] = raw
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainingConfig":
        path = Path(path)
        cfg = cls.from_text(path.read_text())
        # Relative data/output paths are relative to the config file.
        for name in ("manifest", "output_dir"):
            value = getattr(cfg, name)
            if value and not Path(value).is_absolute():
                setattr(cfg, name, str(path.parent / value))
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in dataclasses.asdict(self).items())

    def spectral(self) -> SpectralConfig:
        return SpectralConfig(self.sample_rate, self.n_fft, self.win_length, self.hop_length, self.n_mels, self.window)

    def model_spec(self) -> ModelSpec:
        bb = BackboneConfig(n_blocks=self.n_blocks, dim=self.dim, intermediate_dim=self.intermediate_dim,
                            kernel=self.kernel, fourier_bands=self.fourier_bands, cond_kind=self.cond_kind,
                            n_codebooks=self.n_codebooks, codebook_size=self.codebook_size,
                            bandwidth_codebooks=tuple(self.bandwidth_codebooks),
                            cond_dropout_prob=self.cond_dropout_prob)
        return ModelSpec(self.domain, self.spectral(), self.n_subbands, self.overlap, self.pqmf_bands,
                         self.pqmf_taps, self.ema_decay, bb)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_flow, self.w_overlap, self.w_stft, self.energy_balanced,
                           overlap_pairing=self.overlap_pairing)


def cosine_lr(step: int, total_steps: int, lr_start: float = 2e-4, lr_min: float = 2e-6) -> float:
    """Cosine decay hitting ``lr_start`` at step 0 and ``lr_min`` at the final step ``total_steps - 1``."""
    if total_steps <= 1:
        return lr_start
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    if frac == 1.0:
        return lr_min
    return lr_min + 0.5 * (lr_start - lr_min) * (1.0 + math.cos(math.pi * frac))


def compute_losses(model: Vocoder, batch: TrainingBatch, weights: LossWeights) -> dict[str, torch.Tensor]:
    pred = model.predict(batch.xt_sb, batch.t, batch.cond, i_bw=batch.i_bw, drop_cond=batch.drop_cond)
    sigma = batch.sigma if weights.energy_balanced else torch.ones_like(batch.sigma)
    l_flow = energy_balanced_rf_loss(pred, batch.target_sb, sigma)
    if weights.w_overlap > 0 and model.layout.d_ol > 0:
        l_ol = overlap_loss(pred, model.layout, batch.target_sb, weights.overlap_pairing)
    else:
        l_ol = pred.new_zeros(())
    if weights.w_stft > 0:
        l_stft = stft_reconstruction_loss(model, batch.x0_sb, pred, batch.x1_sb, weights.eps_logmag)
    else:
        l_stft = pred.new_zeros(())
    return {"flow": l_flow, "overlap": l_ol, "stft": l_stft, "total": total_loss(l_flow, l_ol, l_stft, weights)}


def _chunked_velocity(model: Vocoder, cond, i_bw, chunk: int):
    def v(x_sb, t):
        outs = []
        for s in range(0, x_sb.shape[0], chunk):
            c = cond[s:s + chunk]
            bw = None if i_bw is None else i_bw[s:s + chunk]
            outs.append(model.predict(x_sb[s:s + chunk], t, c, i_bw=bw))
        return torch.cat(outs)

    return v


@torch.no_grad()
def measure_straightness(model: Vocoder, store: ClipStore, batch_size: int = 96, crop_frames: int = 128,
                         probes: int = 100, seed: int = 0, chunk: int = 8):
    """Straightness profile of ``model`` on a fixed batch of crops drawn with ``seed``.

    Deviations are measured in the subband representation the backbone sees.
    """
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    wave, _, tokens = sample_crops(store, model.spectral, crop_frames, batch_size, rng)
    x0 = model.noise(batch_size, crop_frames, generator=gen)
    t = torch.zeros(batch_size, dtype=model.dtype)
    b = assemble_batch(model, wave, None, tokens, t, x0, rng, update_stats=False)
    i_bw = None
    if model.cond_kind == "tokens":
        i_bw = torch.full((batch_size,), model.backbone.cfg.n_bandwidths - 1, dtype=torch.long)
    v = _chunked_velocity(model, b.cond, i_bw, chunk)
    return estimate_straightness(v, b.x0_sb, b.x1_sb, probes)


def _optimizer_records(opt: torch.optim.Optimizer) -> tuple[list, dict]:
    state = opt.state_dict()
    arrays = {}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            arrays[f"opt/{idx}/{key}"] = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
    return state["param_groups"], arrays


def _restore_optimizer(opt: torch.optim.Optimizer, groups: list, arrays: dict) -> None:
    state: dict = {}
    for name, arr in arrays.items():
        if not name.startswith("opt/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})


class Trainer:
    """Owns the model, optimiser and RNG streams of one training run."""

    def __init__(self, cfg: TrainingConfig, manifest: DatasetManifest | None = None,
                 resume: CheckpointBundle | None = None):
        self.cfg = cfg
        self.out_dir = Path(cfg.output_dir)
        if manifest is None:
            if not cfg.manifest:
                raise ConfigurationError("no manifest given")
            manifest = DatasetManifest.load(cfg.manifest)
        self.weights = cfg.loss_weights()
        need_tokens = cfg.cond_kind == "tokens"
        if resume is None:
            torch.manual_seed(cfg.seed)
            self.model = Vocoder.from_spec(cfg.model_spec())
        else:
            self.model = resume.model
        spec_cfg = self.model.spectral
        self.store = ClipStore(manifest, spec_cfg, "train", need_tokens)
        self.val_store = self.store
        if manifest.select("val"):
            self.val_store = ClipStore(manifest, spec_cfg, "val", need_tokens)
        self.opt = torch.optim.AdamW(self.model.backbone.parameters(), lr=cfg.lr_start,
                                     betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        if resume is not None:
            self.step = resume.step
            extra = resume.extra
            _restore_optimizer(self.opt, extra["optimizer_groups"], resume.train_arrays)
            self.rng.bit_generator.state = extra["numpy_rng"]
            self.gen.set_state(torch.from_numpy(resume.train_arrays["torch_rng"].copy()))
        self._val = None

    # one optimisation step

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        lr = cosine_lr(self.step, cfg.total_steps, cfg.lr_start, cfg.lr_min)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.model.train()
        batch = prepare_training_batch(self.store, self.model, cfg.batch_size, cfg.crop_frames, self.rng,
                                       self.gen, update_stats=True, sigma_floor=self.weights.sigma_floor,
                                       cond_dropout=cfg.cond_dropout_prob)
        losses = compute_losses(self.model, batch, self.weights)
        values = {k: float(v.detach()) for k, v in losses.items()}
        if not all(math.isfinite(x) for x in values.values()):
            raise NumericalError(f"non-finite loss at step {self.step}: {values}; last checkpoint left untouched")
        self.opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        self.opt.step()
        self.step += 1
        values["lr"] = lr
        return values

    @torch.no_grad()
    def validation_loss(self) -> float:
        cfg = self.cfg
        if self._val is None:
            rng = np.random.default_rng(cfg.seed + 1)
            gen = torch.Generator().manual_seed(cfg.seed + 1)
            wave, mask, tokens = sample_crops(self.val_store, self.model.spectral, cfg.crop_frames,
                                              cfg.val_batch_size, rng)
            t = torch.from_numpy(rng.random(cfg.val_batch_size)).to(self.model.dtype)
            x0 = self.model.noise(cfg.val_batch_size, cfg.crop_frames, generator=gen)
            self._val = (wave, mask, tokens, t, x0, rng.bit_generator.state)
        wave, mask, tokens, t, x0, rng_state = self._val
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        self.model.eval()
        batch = assemble_batch(self.model, wave, mask, tokens, t, x0, rng, update_stats=False,
                               sigma_floor=self.weights.sigma_floor)
        return float(compute_losses(self.model, batch, self.weights)["total"])

    def finalize_grid(self) -> None:
        cfg = self.cfg
        self.model.eval()
        profile = measure_straightness(self.model, self.val_store, cfg.straightness_batch, cfg.crop_frames,
                                       cfg.straightness_probes, cfg.seed + 2)
        self.model.straightness = profile
        self.model.time_grid = equal_straightness_grid(profile, cfg.grid_steps)

    def bundle(self) -> CheckpointBundle:
        groups, arrays = _optimizer_records(self.opt)
        arrays["torch_rng"] = self.gen.get_state().numpy()
        extra = {"config": self.cfg.to_text(), "optimizer_groups": groups, "numpy_rng": self.rng.bit_generator.state}
        return CheckpointBundle(self.model, self.step, {"seed": self.cfg.seed}, extra, arrays)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.bundle(), path)

    def run(self, until: int | None = None) -> CheckpointBundle:
        cfg = self.cfg
        until = cfg.total_steps if until is None else min(until, cfg.total_steps)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / "train_log.jsonl"
        t_start = time.time()
        with open(log_path, "a") as log:
            while self.step < until:
                values = self.train_step()
                record = None
                if self.step % cfg.log_every == 0 or self.step == until:
                    record = {"step": self.step, **values, "elapsed_s": round(time.time() - t_start, 1)}
                if cfg.val_every and self.step % cfg.val_every == 0:
                    record = record or {"step": self.step, **values}
                    record["val_total"] = self.validation_loss()
                if record is not None:
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                    logger.info("step %d total %.4f flow %.4f lr %.2e", self.step, values["total"],
                                values["flow"], values["lr"])
                if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(self.out_dir / "last.ckpt")
        if self.step >= cfg.total_steps:
            self.finalize_grid()
            self.save(self.out_dir / "final.ckpt")
        return self.bundle()


def train(cfg: TrainingConfig, manifest: DatasetManifest | None = None,
          resume: str | Path | None = None) -> CheckpointBundle:
    bundle = load_checkpoint(resume) if resume is not None else None
    return Trainer(cfg, manifest, bundle).run()
