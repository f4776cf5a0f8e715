"""Orthonormal STFT analysis/synthesis, log-Mel features and WAV I/O.

All transforms accept tensors with arbitrary leading batch dimensions and
follow the dtype of their input, so the same code path serves float32
training and float64 verification.
"""

from __future__ import annotations

import functools
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

from .errors import ConfigurationError, DimensionError, LengthError

logger = logging.getLogger(__name__)

MEL_FLOOR = 1e-5

_WINDOWS = ("hann", "rect")


@dataclass(frozen=True)
class SpectralConfig:
    """Parameters shared by the STFT, ISTFT and log-Mel extractor.

    ``orthonormal`` scales both the forward and the inverse DFT by
    ``1/sqrt(n_fft)``.
    """

    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 100
    window: str = "hann"
    center_pad: bool = True
    orthonormal: bool = True

    def __post_init__(self):
        if self.window not in _WINDOWS:
            raise ConfigurationError(f"unknown window {self.window!r}; expected one of {_WINDOWS}")
        if self.n_fft % 2:
            raise ConfigurationError("n_fft must be even")
        if not 0 < self.win_length <= self.n_fft:
            raise ConfigurationError("win_length must satisfy 0 < win_length <= n_fft")
        if not 0 < self.hop_length <= self.win_length:
            raise ConfigurationError("hop_length must satisfy 0 < hop_length <= win_length")
        if self.n_mels < 0:
            raise ConfigurationError("n_mels must be non-negative")
        # Synthesis divides by the overlap-added squared window; require it
        # to be constant so every sample is reconstructed with equal weight.
        w = _window_array(self.window, self.win_length)
        if not scipy.signal.check_COLA(w**2, self.win_length, self.win_length - self.hop_length, tol=1e-8):
            raise ConfigurationError(
                f"{self.window} window of length {self.win_length} with hop {self.hop_length} "
                "violates the constant-overlap-add condition"
            )

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if self.center_pad:
            return n_samples // self.hop_length + 1
        return (n_samples - self.n_fft) // self.hop_length + 1

    def n_samples(self, n_frames: int) -> int:
        """Waveform length produced by :func:`istft` for ``n_frames`` frames."""
        return (n_frames - 1) * self.hop_length


def _window_array(kind: str, length: int) -> np.ndarray:
    if kind == "hann":
        return scipy.signal.get_window("hann", length, fftbins=True)
    return np.ones(length)


# Table of extraction settings per sample rate.
PRESETS = {
    "22k": SpectralConfig(22050, 1024, 1024, 256, 100),
    "24k": SpectralConfig(24000, 1024, 1024, 256, 100),
    "44k": SpectralConfig(44100, 2048, 2048, 512, 100),
    "24k-tokens": SpectralConfig(24000, 1280, 1280, 320, 0),
}


def window_tensor(cfg: SpectralConfig, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.as_tensor(_window_array(cfg.window, cfg.win_length), dtype=dtype, device=device)


def stft(x: torch.Tensor, cfg: SpectralConfig) -> torch.Tensor:
    """Complex spectrogram of shape ``[..., n_fft // 2 + 1, F]``."""
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.float()
    T = x.shape[-1]
    if not cfg.center_pad and T < cfg.n_fft:
        raise LengthError(f"waveform of {T} samples is shorter than one {cfg.n_fft}-sample window")
    if cfg.center_pad and T <= cfg.n_fft // 2:
        raise LengthError(f"waveform of {T} samples is too short for reflection padding of {cfg.n_fft // 2}")
    lead = x.shape[:-1]
    spec = torch.stft(
        x.reshape(-1, T),
        n_fft=cfg.n_fft,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window=window_tensor(cfg, x.dtype, x.device),
        center=cfg.center_pad,
        pad_mode="reflect",
        normalized=cfg.orthonormal,
        onesided=True,
        return_complex=True,
    )
    return spec.reshape(*lead, *spec.shape[-2:])


def istft(spec: torch.Tensor, cfg: SpectralConfig) -> torch.Tensor:
    """Inverse of :func:`stft`; output length is ``(F - 1) * hop_length``."""
    if not spec.is_complex():
        raise DimensionError("istft expects a complex spectrogram")
    if spec.shape[-2] != cfg.n_freqs:
        raise DimensionError(f"spectrogram has {spec.shape[-2]} bins, config expects {cfg.n_freqs}")
    lead = spec.shape[:-2]
    n_frames = spec.shape[-1]
    real = spec.real.dtype
    if cfg.center_pad:
        length = cfg.n_samples(n_frames)
    else:
        length = (n_frames - 1) * cfg.hop_length + cfg.n_fft
    y = torch.istft(
        spec.reshape(-1, *spec.shape[-2:]),
        n_fft=cfg.n_fft,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window=window_tensor(cfg, real, spec.device),
        center=cfg.center_pad,
        normalized=cfg.orthonormal,
        onesided=True,
        length=length,
    )
    return y.reshape(*lead, y.shape[-1])


def _hz_to_mel(f):
    # Slaney: linear below 1 kHz, logarithmic above.
    f = np.asanyarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mel)


def _mel_to_hz(m):
    m = np.asanyarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@functools.lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Slaney-normalised triangular filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (hz_pts[2:] - hz_pts[:-2])
    weights *= enorm[:, None]
    return weights


def log_mel(x: torch.Tensor, cfg: SpectralConfig) -> torch.Tensor:
    """Natural-log Mel spectrogram ``[..., n_mels, F]`` floored at ``MEL_FLOOR``.

    Magnitudes are taken on the unnormalised DFT scale regardless of
    ``cfg.orthonormal``, so the floor means the same thing for every config.
    """
    if cfg.n_mels <= 0:
        raise ConfigurationError("log_mel requires n_mels > 0")
    spec = stft(x, cfg)
    mag = spec.abs()
    if cfg.orthonormal:
        mag = mag * math.sqrt(cfg.n_fft)
    fb = torch.tensor(mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels), dtype=mag.dtype, device=mag.device)
    mel = torch.matmul(fb, mag)
    return torch.log(torch.clamp(mel, min=MEL_FLOOR))


def read_wav(path: str | Path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Load a mono float32 waveform in [-1, 1].

    Multichannel files are averaged to mono with a warning. A rate mismatch
    with ``expected_rate`` raises instead of resampling.
    """
    rate, data = scipy.io.wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    if data.ndim == 2:
        warnings.warn(f"{path}: downmixing {data.shape[1]} channels to mono", stacklevel=2)
        data = data.mean(axis=1)
    if expected_rate is not None and rate != expected_rate:
        raise ConfigurationError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite samples")
    return data, rate


def write_wav(path: str | Path, samples, sample_rate: int, subtype: str = "float32") -> None:
    """Write mono audio as 32-bit float (default) or 16-bit PCM."""
    samples = np.asarray(samples, dtype=np.float32).reshape(-1)
    if subtype == "pcm16":
        data = np.clip((samples * 32768.0).round(), -32768, 32767).astype(np.int16)
    elif subtype == "float32":
        data = samples
    else:
        raise ValueError(f"unsupported WAV subtype {subtype!r}")
    scipy.io.wavfile.write(str(path), sample_rate, data)
