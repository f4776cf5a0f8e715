"""Objective copy-synthesis metrics and report writing."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .. import spectral
from ..errors import ConfigurationError
from ..flow import SamplerConfig, generate
from .data import DatasetManifest, read_tokens

logger = logging.getLogger(__name__)

SNR_CAP_DB = 100.0


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _trim(ref, est):
    n = min(len(ref), len(est))
    return _as_tensor(ref[:n]), _as_tensor(est[:n])


def log_mel_mae(ref, est, cfg: spectral.SpectralConfig) -> float:
    ref, est = _trim(ref, est)
    return float((spectral.log_mel(ref, cfg) - spectral.log_mel(est, cfg)).abs().mean())


def log_spectral_distance(ref, est, cfg: spectral.SpectralConfig, eps: float = 1e-10) -> float:
    """Frame-averaged RMS difference of the log10 power spectra, in dB."""
    ref, est = _trim(ref, est)
    p_ref = spectral.stft(ref, cfg).abs() ** 2 + eps
    p_est = spectral.stft(est, cfg).abs() ** 2 + eps
    diff = 10.0 * torch.log10(p_ref / p_est)
    return float(diff.pow(2).mean(dim=0).sqrt().mean())


def snr_db(ref, est, cap: float = SNR_CAP_DB) -> float:
    """Signal-to-noise ratio of ``est`` against ``ref``; identical signals report ``cap``."""
    ref, est = _trim(ref, est)
    noise = float((ref - est).pow(2).sum())
    signal = float(ref.pow(2).sum())
    if noise == 0.0:
        return cap
    if signal == 0.0:
        return -cap
    return min(cap, 10.0 * math.log10(signal / noise))


def compare(ref, est, cfg: spectral.SpectralConfig) -> dict[str, float]:
    return {"log_mel_mae": log_mel_mae(ref, est, cfg), "lsd_db": log_spectral_distance(ref, est, cfg),
            "snr_db": snr_db(ref, est)}


def copy_synthesis(model, wave: np.ndarray, sampler: SamplerConfig = SamplerConfig(), seed: int = 0,
                   i_bw=None, tokens=None) -> np.ndarray:
    """Re-synthesise ``wave`` from its own log-Mel (or from ``tokens`` for a token model)."""
    if model.cond_kind == "mel":
        cond = spectral.log_mel(torch.as_tensor(wave, dtype=model.dtype)[None], model.spectral)
    else:
        if tokens is None:
            raise ConfigurationError("token-conditioned copy-synthesis needs the clip's tokens")
        cond = torch.as_tensor(tokens)[None]
    out = generate(model, cond, sampler, seed=seed, i_bw=i_bw)
    return out[0].detach().cpu().numpy().astype(np.float64)


def evaluate(model, manifest: DatasetManifest, sampler: SamplerConfig = SamplerConfig(), seed: int = 0,
             split: str | None = None, i_bw=None) -> tuple[list[dict], dict]:
    """One row per manifest entry plus the mean over rows that could be scored."""
    entries = manifest.select(split)
    if not entries:
        raise ConfigurationError("evaluation manifest has no entries")
    rows = []
    for entry in entries:
        path = manifest.resolve(entry.audio)
        row: dict = {"clip": entry.audio}
        try:
            wave, _ = spectral.read_wav(path, expected_rate=model.spectral.sample_rate)
            tokens = read_tokens(manifest.resolve(entry.tokens)) if entry.tokens else None
        except ConfigurationError:
            raise
        except Exception as exc:
            logger.warning("cannot score %s: %s", path, exc)
            row["error"] = str(exc)
            rows.append(row)
            continue
        est = copy_synthesis(model, wave, sampler, seed, i_bw, tokens)
        row.update(compare(wave, est, model.spectral))
        rows.append(row)
    scored = [r for r in rows if "error" not in r]
    aggregate = {"n_entries": len(rows), "n_scored": len(scored)}
    for key in ("log_mel_mae", "lsd_db", "snr_db"):
        aggregate[key] = float(np.mean([r[key] for r in scored])) if scored else float("nan")
    return rows, aggregate


def write_report(rows: list[dict], aggregate: dict, path: str | Path) -> tuple[Path, Path]:
    """Plain-text table at ``path`` and one JSON object per line at ``path + '.jsonl'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{'clip':<40} {'logmel_mae':>10} {'lsd_db':>8} {'snr_db':>8}"]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['clip']:<40} error: {r['error']}")
        else:
            lines.append(f"{r['clip']:<40} {r['log_mel_mae']:>10.4f} {r['lsd_db']:>8.3f} {r['snr_db']:>8.2f}")
    lines.append(f"{'mean':<40} {aggregate['log_mel_mae']:>10.4f} {aggregate['lsd_db']:>8.3f} "
                 f"{aggregate['snr_db']:>8.2f}")
    path.write_text("\n".join(lines) + "\n")
    jsonl = path.with_name(path.name + ".jsonl")
    with open(jsonl, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
        fh.write(json.dumps({"aggregate": aggregate}) + "\n")
    return path, jsonl
