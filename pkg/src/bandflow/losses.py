"""Training objectives: energy-balanced flow matching, overlap consistency, STFT loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .errors import DimensionError, NumericalError
from .spectral import SpectralConfig, stft
from .subband import SubbandLayout, margin_mask, overlap_pairs


@dataclass(frozen=True)
class LossWeights:
    w_flow: float = 1.0
    w_overlap: float = 0.01
    w_stft: float = 0.01
    energy_balanced: bool = True
    sigma_floor: float = 1e-4
    eps_logmag: float = 1e-6
    overlap_pairing: str = "consistency"

    def __post_init__(self):
        if min(self.w_flow, self.w_overlap, self.w_stft) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.overlap_pairing not in ("consistency", "truth"):
            raise ValueError("overlap_pairing must be 'consistency' or 'truth'")


def energy_sigma(target: torch.Tensor, floor: float = 1e-4) -> torch.Tensor:
    """Per-subband, per-frame std of ``target`` along the feature axis, ``[..., n_sb, 1, F]``.

    Detached: the weights are constants of the loss.
    """
    sigma = target.detach().std(dim=-2, keepdim=True, unbiased=False)
    return sigma.clamp_min(floor)


def energy_balanced_rf_loss(pred: torch.Tensor, target: torch.Tensor, sigma: torch.Tensor | None = None,
                            floor: float = 1e-4) -> torch.Tensor:
    """Mean of ``((target - pred) / sigma)**2``; plain MSE when ``sigma == 1``."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if sigma is None:
        sigma = energy_sigma(target, floor)
    return (((target - pred) / sigma) ** 2).mean()


def overlap_loss(pred: torch.Tensor, layout: SubbandLayout, truth: torch.Tensor | None = None,
                 pairing: str = "consistency") -> torch.Tensor:
    """Disagreement in the overlapped spectral dimensions.

    ``consistency`` compares neighbouring subbands' predictions over each
    shared region (including the wrap-around pair); ``truth`` compares every
    overlap margin against ``truth`` instead.
    """
    if layout.d_ol == 0:
        warnings.warn("overlap loss requested with d_ol = 0; returning 0", stacklevel=2)
        return pred.new_zeros(())
    if pairing == "consistency":
        pairs = overlap_pairs(pred, layout)
        sq = torch.cat([((a - b) ** 2).flatten(-2) for a, b in pairs], dim=-1)
        return sq.mean()
    if pairing == "truth":
        if truth is None:
            raise ValueError("truth pairing needs the ground-truth stack")
        mask = margin_mask(layout, pred.dtype).to(pred.device)[..., None]
        sq = (pred - truth) ** 2 * mask
        return sq.sum() / (mask.sum() * pred[..., 0, 0, :].numel())
    raise ValueError(f"unknown pairing {pairing!r}")


def spectral_convergence(mag_true: torch.Tensor, mag_est: torch.Tensor) -> torch.Tensor:
    """``||  |X| - |X~|  ||_F / || |X| ||_F`` per example over (freq, time), averaged."""
    num = torch.linalg.norm((mag_true - mag_est).flatten(-2), dim=-1)
    den = torch.linalg.norm(mag_true.flatten(-2), dim=-1)
    return (num / den).mean()


def log_magnitude_loss(mag_true: torch.Tensor, mag_est: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return (torch.log(mag_true + eps) - torch.log(mag_est + eps)).abs().mean()


def stft_magnitude_loss(wave_true: torch.Tensor, wave_est: torch.Tensor, cfg: SpectralConfig,
                        eps: float = 1e-6) -> torch.Tensor:
    mag_true = stft(wave_true, cfg).abs()
    mag_est = stft(wave_est, cfg).abs()
    return spectral_convergence(mag_true, mag_est) + log_magnitude_loss(mag_true, mag_est, eps)


def stft_reconstruction_loss(model, x0_sb: torch.Tensor, pred_v: torch.Tensor, x1_sb: torch.Tensor,
                             eps: float = 1e-6) -> torch.Tensor:
    """STFT loss on the one-step data estimate ``x0 + v``.

    Both the estimate and the ground truth travel the model's own path back
    to audio (merge, ISTFT, de-equalise or de-normalise) before magnitudes
    are compared.
    """
    x1_est = x0_sb + pred_v
    wave_est = model.subbands_to_waveform(x1_est)
    with torch.no_grad():
        wave_true = model.subbands_to_waveform(x1_sb)
    if not torch.isfinite(wave_est).all():
        raise NumericalError("non-finite waveform in the data estimate")
    return stft_magnitude_loss(wave_true, wave_est, model.spectral, eps)


def total_loss(l_flow, l_overlap=0.0, l_stft=0.0, weights: LossWeights = LossWeights()):
    return weights.w_flow * l_flow + weights.w_overlap * l_overlap + weights.w_stft * l_stft
