"""Dataset manifests, token files and training-batch assembly."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import spectral
from ..errors import ConfigurationError, DimensionError, IntegrityError
from ..flow import interpolate
from ..losses import energy_sigma

logger = logging.getLogger(__name__)

TOKEN_MAGIC = b"BFTK"


def write_tokens(path: str | Path, tokens) -> None:
    """Token grid ``[n_q, F]``: magic ``BFTK``, uint32 n_q, uint32 F, then row-major little-endian int32."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError("tokens must be a 2-D [n_q, F] array")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) > np.iinfo(np.int32).max:
        raise ValueError("token values must fit in non-negative int32")
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC + struct.pack("<II", *tokens.shape))
        fh.write(tokens.astype("<i4").tobytes(order="C"))


def read_tokens(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != TOKEN_MAGIC:
        raise IntegrityError(f"{path}: not a token file")
    n_q, n_frames = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * n_q * n_frames:
        raise IntegrityError(f"{path}: expected {4 * n_q * n_frames} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<i4").reshape(n_q, n_frames).astype(np.int64)


@dataclass
class ManifestEntry:
    audio: str
    tokens: str | None = None
    duration: float | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """JSON file ``{"sample_rate": ..., "entries": [{"audio", "tokens", "duration", "split"}]}``.

    Relative paths resolve against the manifest's directory.
    """

    sample_rate: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in data["entries"]]
        return cls(int(data["sample_rate"]), entries, path.parent)

    def save(self, path: str | Path) -> None:
        payload = {"sample_rate": self.sample_rate, "entries": [asdict(e) for e in self.entries]}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def select(self, split: str | None) -> list[ManifestEntry]:
        if split is None:
            return list(self.entries)
        return [e for e in self.entries if e.split == split]


@dataclass
class Clip:
    audio: np.ndarray
    tokens: np.ndarray | None
    name: str


class ClipStore:
    """Audio (and token grids) of one manifest split, held in memory.

    Unreadable files are skipped with a warning; sample-rate and token/frame
    mismatches are configuration errors.
    """

    def __init__(self, manifest: DatasetManifest, cfg: spectral.SpectralConfig, split: str | None = "train",
                 need_tokens: bool = False):
        if manifest.sample_rate != cfg.sample_rate:
            raise ConfigurationError(f"manifest is {manifest.sample_rate} Hz, model is {cfg.sample_rate} Hz")
        self.clips: list[Clip] = []
        for entry in manifest.select(split):
            path = manifest.resolve(entry.audio)
            try:
                audio, _ = spectral.read_wav(path, expected_rate=cfg.sample_rate)
                tokens = read_tokens(manifest.resolve(entry.tokens)) if entry.tokens else None
            except ConfigurationError:
                raise
            except Exception as exc:  # corrupt or unreadable file
                logger.warning("skipping %s: %s", path, exc)
                continue
            if need_tokens:
                if tokens is None:
                    raise ConfigurationError(f"{path}: token-conditioned training needs a token file")
                expected = cfg.n_frames(len(audio))
                if tokens.shape[1] != expected:
                    raise ConfigurationError(f"{path}: {tokens.shape[1]} token frames, audio has {expected}")
            self.clips.append(Clip(audio, tokens, str(path)))
        if not self.clips:
            raise ConfigurationError(f"no usable clips in split {split!r}")

    def __len__(self):
        return len(self.clips)


@dataclass
class TrainingBatch:
    wave: torch.Tensor  # [B, T] raw crops
    mask: torch.Tensor  # [B, T] 1 where audio is real, 0 where zero-padded
    cond: torch.Tensor  # [B, n_mels, F] or [B, n_q, F]
    i_bw: torch.Tensor | None
    drop_cond: torch.Tensor | None
    t: torch.Tensor  # [B]
    x0_sb: torch.Tensor  # [B, n_sb, d_s, F]
    x1_sb: torch.Tensor
    xt_sb: torch.Tensor
    target_sb: torch.Tensor
    sigma: torch.Tensor  # [B, n_sb, 1, F]

    @property
    def backbone_rows(self) -> int:
        return self.xt_sb.shape[0] * self.xt_sb.shape[1]


def crop_samples(cfg: spectral.SpectralConfig, crop_frames: int) -> int:
    return (crop_frames - 1) * cfg.hop_length


def sample_crops(store: ClipStore, cfg: spectral.SpectralConfig, crop_frames: int, batch_size: int,
                 rng: np.random.Generator):
    """Random hop-aligned crops; short clips are zero-padded and masked."""
    T = crop_samples(cfg, crop_frames)
    hop = cfg.hop_length
    waves = np.zeros((batch_size, T), dtype=np.float32)
    mask = np.zeros((batch_size, T), dtype=np.float32)
    tokens = []
    for b in range(batch_size):
        clip = store.clips[int(rng.integers(len(store.clips)))]
        n = len(clip.audio)
        k = int(rng.integers((n - T) // hop + 1)) if n >= T else 0
        seg = clip.audio[k * hop:k * hop + T]
        waves[b, :len(seg)] = seg
        mask[b, :len(seg)] = 1.0
        if clip.tokens is not None:
            tok = np.zeros((clip.tokens.shape[0], crop_frames), dtype=np.int64)
            part = clip.tokens[:, k:k + crop_frames]
            tok[:, :part.shape[1]] = part
            tokens.append(tok)
    tok = np.stack(tokens) if len(tokens) == batch_size else None
    return torch.from_numpy(waves), torch.from_numpy(mask), tok


def assemble_batch(model, wave, mask, tokens, t, x0, rng: np.random.Generator, update_stats: bool,
                   sigma_floor: float = 1e-4, cond_dropout: float = 0.0) -> TrainingBatch:
    """Turn raw crops plus noise and times into the subband training tensors."""
    B = wave.shape[0]
    x1 = model.data_state(wave.to(model.dtype), update=update_stats)
    x1_sb = model.state_to_subbands(x1)
    x0_sb = model.state_to_subbands(x0)
    xt_sb, target_sb = interpolate(x0_sb, x1_sb, t)
    i_bw = drop = None
    if model.cond_kind == "mel":
        cond = spectral.log_mel(wave.to(model.dtype), model.spectral)
    else:
        if tokens is None:
            raise ConfigurationError("token-conditioned model needs token crops")
        cond = torch.from_numpy(tokens)
        n_bw = model.backbone.cfg.n_bandwidths
        i_bw = torch.from_numpy(rng.integers(n_bw, size=B))
        drop = torch.from_numpy(rng.random(B) < cond_dropout)
    return TrainingBatch(wave, mask, cond, i_bw, drop, t, x0_sb, x1_sb, xt_sb, target_sb,
                         energy_sigma(target_sb, sigma_floor))


def prepare_training_batch(store: ClipStore, model, batch_size: int, crop_frames: int,
                           rng: np.random.Generator, gen: torch.Generator, update_stats: bool = True,
                           sigma_floor: float = 1e-4, cond_dropout: float = 0.0) -> TrainingBatch:
    """Sample crops, draw ``x0`` and ``t ~ U[0, 1]``, and build subband tensors.

    The backbone sees ``batch_size * n_sb`` rows.
    """
    wave, mask, tokens = sample_crops(store, model.spectral, crop_frames, batch_size, rng)
    t = torch.from_numpy(rng.random(batch_size)).to(model.dtype)
    x0 = model.noise(batch_size, crop_frames, generator=gen)
    return assemble_batch(model, wave, mask, tokens, t, x0, rng, update_stats, sigma_floor, cond_dropout)


def make_synthetic_corpus(out_dir: str | Path, n_clips: int = 10, seconds: float = 3.0,
                          sample_rate: int = 22050, seed: int = 0, val_clips: int = 0) -> Path:
    """Write speech-like test clips and a manifest; returns the manifest path.

    Each clip alternates voiced segments (harmonic source with a gliding
    pitch, shaped by three formant resonances), noise bursts and short
    silences, so that frame energy varies strongly across time.
    """
    import scipy.signal

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    T = int(round(seconds * sample_rate))
    for c in range(n_clips + val_clips):
        y = np.zeros(T)
        pos = int(0.05 * sample_rate)
        while pos < T:
            kind = rng.choice(["voiced", "voiced", "noise", "silence"])
            n = int(rng.uniform(0.12, 0.45) * sample_rate)
            n = min(n, T - pos)
            tt = np.arange(n) / sample_rate
            env = np.sqrt(np.clip(np.sin(np.pi * np.arange(n) / max(n - 1, 1)), 0.0, None))
            if kind == "voiced":
                f0 = rng.uniform(90, 240) * (1 + rng.uniform(-0.25, 0.25) * tt / max(tt[-1], 1e-3))
                phase = 2 * np.pi * np.cumsum(f0) / sample_rate + rng.uniform(0, 2 * np.pi)
                src = np.zeros(n)
                n_harm = int(sample_rate / 2 / f0.max())
                for h in range(1, n_harm + 1):
                    src += np.sin(h * phase) / h
                for fc, bw in ((rng.uniform(300, 900), 90), (rng.uniform(900, 2400), 120), (rng.uniform(2400, 3800), 180)):
                    r = np.exp(-np.pi * bw / sample_rate)
                    a = [1, -2 * r * np.cos(2 * np.pi * fc / sample_rate), r * r]
                    src = src + 0.5 * scipy.signal.lfilter([1 - r], a, src)
                seg = src
            elif kind == "noise":
                lo = rng.uniform(0.18, 0.45)  # band edges as fractions of Nyquist
                b, a = scipy.signal.butter(4, [lo, min(0.95, lo + 0.36)], "band")
                seg = scipy.signal.lfilter(b, a, rng.standard_normal(n))
            else:
                seg = np.zeros(n)
            peak = np.abs(seg).max()
            if peak > 0:
                seg = seg / peak * rng.uniform(0.2, 0.8)
            y[pos:pos + n] += seg * env
            pos += n + int(rng.uniform(0.0, 0.08) * sample_rate)
        y += 1e-4 * rng.standard_normal(T)
        y = np.clip(y, -0.99, 0.99)
        name = f"clip{c:02d}.wav"
        spectral.write_wav(out_dir / name, y, sample_rate, subtype="pcm16")
        split = "train" if c < n_clips else "val"
        entries.append(ManifestEntry(name, None, T / sample_rate, split))
    manifest = DatasetManifest(sample_rate, entries, out_dir)
    path = out_dir / "manifest.json"
    manifest.save(path)
    return path
