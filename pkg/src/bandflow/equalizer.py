"""Waveform equalisation through a PQMF bank, and spectrogram normalisation.

The time-domain model trains on waveforms whose PQMF subbands have been
mean-variance normalised with running statistics; the frequency-domain model
instead normalises each interleaved real/imaginary spectral dimension.
Both maps are affine given frozen statistics, so they invert exactly (up to
the bank's reconstruction error for the PQMF path).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, StateError
from .subband import deinterleave, interleave

logger = logging.getLogger(__name__)

EMA_DECAY = 0.999
VAR_FLOOR = 1e-6

DEFAULT_BETAS = tuple(np.round(np.arange(4.0, 14.01, 0.5), 2))


def _prototype(taps: int, cutoff: float, beta: float) -> np.ndarray:
    # Kaiser-windowed ideal lowpass, cutoff in radians/sample.
    n = np.arange(taps + 1) - taps / 2
    safe = np.where(n == 0, 1.0, n)
    h = np.where(n == 0, cutoff / np.pi, np.sin(cutoff * n) / (np.pi * safe))
    return h * np.kaiser(taps + 1, beta)


def _aliasing_objective(proto: np.ndarray, n_bands: int) -> float:
    # Near-perfect reconstruction needs p * p~ to vanish at non-zero
    # multiples of 2M around its centre.
    c = np.convolve(proto, proto[::-1])
    mid = len(c) // 2
    idx = np.arange(mid % (2 * n_bands), len(c), 2 * n_bands)
    idx = idx[idx != mid]
    return float(np.abs(c[idx]).max())


@dataclass(frozen=True, eq=False)
class PQMFBank:
    """Cosine-modulated pseudo-QMF analysis/synthesis filters."""

    n_bands: int
    taps: int
    cutoff_ratio: float
    beta: float
    analysis_filters: np.ndarray
    synthesis_filters: np.ndarray

    @property
    def edge_pad(self) -> int:
        # Reflection extension used by ``reconstruct``; a multiple of n_bands.
        return self.n_bands * math.ceil(self.taps / self.n_bands)

    def _check_length(self, T: int):
        if T % self.n_bands:
            raise DimensionError(f"signal length {T} is not divisible by {self.n_bands} bands")

    def analysis(self, x: torch.Tensor) -> torch.Tensor:
        """``[..., T]`` to critically decimated ``[..., n_bands, T / n_bands]``."""
        T = x.shape[-1]
        self._check_length(T)
        lead = x.shape[:-1]
        w = torch.as_tensor(self.analysis_filters, dtype=x.dtype, device=x.device)[:, None]
        half = self.taps // 2
        y = F.conv1d(F.pad(x.reshape(-1, 1, T), (half, half)), w, stride=self.n_bands)
        return y.reshape(*lead, self.n_bands, T // self.n_bands)

    def synthesis(self, s: torch.Tensor) -> torch.Tensor:
        """``[..., n_bands, L]`` back to ``[..., L * n_bands]``."""
        if s.shape[-2] != self.n_bands:
            raise DimensionError(f"expected {self.n_bands} bands, got {s.shape[-2]}")
        lead = s.shape[:-2]
        L = s.shape[-1]
        M = self.n_bands
        # Zero-stuffed upsampling followed by correlation with the synthesis
        # filters, written as one transposed convolution.
        w = torch.as_tensor(self.synthesis_filters[:, ::-1].copy(), dtype=s.dtype, device=s.device)[:, None]
        y = F.conv_transpose1d(s.reshape(-1, M, L) * M, w, stride=M)
        half = self.taps // 2
        y = y[..., half:half + L * M]
        return y.reshape(*lead, L * M)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """``synthesis(analysis(x))`` with reflection-extended edges."""
        return self.apply_bandwise(x, lambda s: s)

    def apply_bandwise(self, x: torch.Tensor, fn) -> torch.Tensor:
        """Analyse, map the subband signals with ``fn`` and resynthesise.

        The waveform is reflection-extended by ``edge_pad`` samples on both
        sides before analysis and trimmed afterwards, which keeps filter
        transients out of the returned signal.
        """
        T = x.shape[-1]
        self._check_length(T)
        P = self.edge_pad
        lead = x.shape[:-1]
        xp = F.pad(x.reshape(-1, 1, T), (P, P), mode="reflect").reshape(*lead, T + 2 * P)
        y = self.synthesis(fn(self.analysis(xp)))
        return y[..., P:P + T]

    def frequency_response(self, n_points: int = 4096) -> np.ndarray:
        """``|H_k(w)|`` on ``n_points`` frequencies in ``[0, pi]``, by direct DFT summation."""
        w = np.linspace(0.0, np.pi, n_points)
        n = np.arange(self.taps + 1)
        basis = np.exp(-1j * np.outer(w, n))
        return np.abs(self.analysis_filters @ basis.T)


def design_pqmf(n_bands: int = 8, taps: int = 124, betas=DEFAULT_BETAS) -> PQMFBank:
    """Design a PQMF bank by Kaiser-window prototype optimisation.

    For each Kaiser ``beta`` on the grid the prototype cutoff is chosen to
    minimise the aliasing objective; the best ``(beta, cutoff)`` pair wins.
    ``n_bands == 1`` yields the trivial identity bank.
    """
    if n_bands < 1:
        raise ConfigurationError("n_bands must be >= 1")
    if taps % 2:
        raise ConfigurationError("taps must be even")
    if n_bands == 1:
        h = np.zeros((1, taps + 1))
        h[0, taps // 2] = 1.0
        return PQMFBank(1, taps, 1.0, 0.0, h, h.copy())

    fc = np.pi / (2 * n_bands)
    best = None
    for beta in betas:
        res = scipy.optimize.minimize_scalar(
            lambda wc: _aliasing_objective(_prototype(taps, wc, beta), n_bands),
            bounds=(0.5 * fc, 1.5 * fc),
            method="bounded",
            options={"xatol": 1e-12},
        )
        if best is None or res.fun < best[0]:
            best = (float(res.fun), float(beta), float(res.x))
    if best is None or not np.isfinite(best[0]) or best[0] > 1e-2:
        raise ConfigurationError(
            f"PQMF design failed for n_bands={n_bands}, taps={taps}: best aliasing objective {best}"
        )
    obj, beta, wc = best
    logger.debug("PQMF design: beta=%.2f cutoff=%.6f*pi objective=%.3e", beta, wc / np.pi, obj)

    proto = _prototype(taps, wc, beta)
    n = np.arange(taps + 1) - taps / 2
    k = np.arange(n_bands)[:, None]
    phase = (-1.0) ** k * np.pi / 4
    arg = (2 * k + 1) * (np.pi / (2 * n_bands)) * n
    h_a = 2 * proto * np.cos(arg + phase)
    h_s = 2 * proto * np.cos(arg - phase)
    return PQMFBank(n_bands, taps, wc / np.pi, beta, h_a, h_s)


@dataclass
class RunningStats:
    """Exponential moving average of per-channel mean and variance.

    The first update initialises the averages directly from the batch.
    """

    size: int
    ema_decay: float = EMA_DECAY
    var_floor: float = VAR_FLOOR
    mean: np.ndarray = field(default=None)
    var: np.ndarray = field(default=None)
    update_count: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in (0, 1)")
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64).reshape(self.size)
            self.var = np.maximum(np.asarray(self.var, dtype=np.float64).reshape(self.size), self.var_floor)

    @classmethod
    def identity(cls, size: int, **kw) -> "RunningStats":
        return cls(size, mean=np.zeros(size), var=np.ones(size), **kw)

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def update(self, batch_mean, batch_var) -> None:
        batch_mean = np.asarray(batch_mean, dtype=np.float64).reshape(self.size)
        batch_var = np.asarray(batch_var, dtype=np.float64).reshape(self.size)
        if not self.initialized:
            self.mean, self.var = batch_mean.copy(), batch_var.copy()
        else:
            lam = self.ema_decay
            self.mean = lam * self.mean + (1.0 - lam) * batch_mean
            self.var = lam * self.var + (1.0 - lam) * batch_var
        self.var = np.maximum(self.var, self.var_floor)
        self.update_count += 1

    def tensors(self, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.initialized:
            raise StateError("statistics are uninitialised; run at least one update first")
        dtype = like.real.dtype if like.is_complex() else like.dtype
        mean = torch.as_tensor(self.mean, dtype=dtype, device=like.device)
        std = torch.as_tensor(np.sqrt(self.var), dtype=dtype, device=like.device)
        return mean, std

    def copy(self) -> "RunningStats":
        return RunningStats(
            self.size,
            self.ema_decay,
            self.var_floor,
            None if self.mean is None else self.mean.copy(),
            None if self.var is None else self.var.copy(),
            self.update_count,
        )


# Per-PQMF-band statistics and per-interleaved-dimension statistics share
# the same update rule.
EqualizerStats = RunningStats
SpectrogramNormStats = RunningStats


def _channel_moments(x: torch.Tensor, channel_dim: int) -> tuple[np.ndarray, np.ndarray]:
    x = x.detach().double().movedim(channel_dim, 0).reshape(x.shape[channel_dim], -1)
    return x.mean(dim=1).numpy(), x.var(dim=1, unbiased=False).numpy()


def equalize(x: torch.Tensor, bank: PQMFBank, stats: EqualizerStats, update: bool = False) -> torch.Tensor:
    """Normalise each PQMF subband of ``x`` and recombine to a full-rate waveform."""
    if stats.size != bank.n_bands:
        raise DimensionError(f"stats cover {stats.size} bands, bank has {bank.n_bands}")
    if update:
        stats.update(*_channel_moments(bank.analysis(x), -2))
    mean, std = stats.tensors(x)

    def norm(s):
        return (s - mean[:, None]) / std[:, None]

    return bank.apply_bandwise(x, norm)


def deequalize(x: torch.Tensor, bank: PQMFBank, stats: EqualizerStats) -> torch.Tensor:
    """Inverse of :func:`equalize` under the same frozen statistics."""
    if stats.size != bank.n_bands:
        raise DimensionError(f"stats cover {stats.size} bands, bank has {bank.n_bands}")
    mean, std = stats.tensors(x)
    return bank.apply_bandwise(x, lambda s: s * std[:, None] + mean[:, None])


def normalize_spectrogram(
    spec: torch.Tensor,
    stats: SpectrogramNormStats,
    direction: str = "forward",
    update: bool = False,
) -> torch.Tensor:
    """Per-dimension mean-variance normalisation of a complex spectrogram ``[..., d, F]``.

    Statistics index the interleaved ``(re0, im0, re1, im1, ...)`` features.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if direction == "inverse" and update:
        raise ValueError("statistics cannot be updated on the inverse direction")
    if stats.size != 2 * spec.shape[-2]:
        raise DimensionError(f"stats cover {stats.size} dims, spectrogram needs {2 * spec.shape[-2]}")
    feats = interleave(spec, dim=-2)
    if update:
        stats.update(*_channel_moments(feats, -2))
    mean, std = stats.tensors(feats)
    mean, std = mean[:, None], std[:, None]
    if direction == "forward":
        out = (feats - mean) / std
    else:
        out = feats * std + mean
    return deinterleave(out, dim=-2)
