"""The vocoder: backbone plus the representation maps of one domain variant.

``time``: the flow state is an equalised waveform. Each velocity evaluation
takes its STFT, splits subbands, runs the backbone and returns to the
waveform domain through merge and ISTFT.

``frequency``: the state is a normalised complex spectrogram; subbands are
sliced from it directly and a single ISTFT happens after sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import spectral
from .backbone import BackboneConfig, VelocityField
from .equalizer import (
    EMA_DECAY,
    PQMFBank,
    RunningStats,
    deequalize,
    design_pqmf,
    equalize,
    normalize_spectrogram,
)
from .errors import ConfigurationError, DimensionError
from .spectral import SpectralConfig
from .subband import SubbandLayout, merge_subbands, split_subbands

DOMAINS = ("time", "frequency")


@dataclass
class ModelSpec:
    domain: str = "time"
    spectral: SpectralConfig = SpectralConfig()
    n_subbands: int = 8
    overlap: int = 8
    pqmf_bands: int = 8
    pqmf_taps: int = 124
    ema_decay: float = EMA_DECAY
    backbone: BackboneConfig | None = None

    def layout(self) -> SubbandLayout:
        return SubbandLayout(self.spectral.n_freqs, self.n_subbands, self.overlap)


class Vocoder(nn.Module):
    def __init__(
        self,
        domain: str,
        spectral_cfg: SpectralConfig,
        layout: SubbandLayout,
        backbone_cfg: BackboneConfig,
        bank: PQMFBank | None = None,
        stats: RunningStats | None = None,
    ):
        super().__init__()
        if domain not in DOMAINS:
            raise ConfigurationError(f"domain must be one of {DOMAINS}")
        if layout.d != spectral_cfg.n_freqs:
            raise ConfigurationError("layout does not match the spectral config")
        if backbone_cfg.in_channels != layout.d_s or backbone_cfg.n_subbands != layout.n_sb:
            raise ConfigurationError("backbone channels/subbands do not match the layout")
        if backbone_cfg.cond_kind == "mel" and backbone_cfg.n_mels != spectral_cfg.n_mels:
            raise ConfigurationError("backbone n_mels does not match the spectral config")
        self.domain = domain
        self.spectral = spectral_cfg
        self.layout = layout
        self.backbone = VelocityField(backbone_cfg)
        if domain == "time":
            self.bank = bank
            self.stats = stats if stats is not None else RunningStats(bank.n_bands)
        else:
            self.bank = None
            self.stats = stats if stats is not None else RunningStats(2 * layout.d)
        self.straightness = None  # StraightnessProfile once measured
        self.time_grid = None  # cached equal-straightness TimeGrid

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "Vocoder":
        layout = spec.layout()
        bb = spec.backbone or BackboneConfig()
        bb = BackboneConfig(**{**bb.__dict__, "in_channels": layout.d_s, "n_subbands": layout.n_sb,
                               "n_mels": spec.spectral.n_mels if bb.cond_kind == "mel" else bb.n_mels})
        bank = design_pqmf(spec.pqmf_bands, spec.pqmf_taps) if spec.domain == "time" else None
        n_stats = spec.pqmf_bands if spec.domain == "time" else 2 * layout.d
        return cls(spec.domain, spec.spectral, layout, bb, bank, RunningStats(n_stats, spec.ema_decay))

    @property
    def cond_kind(self) -> str:
        return self.backbone.cfg.cond_kind

    @property
    def dtype(self) -> torch.dtype:
        return next(self.backbone.parameters()).dtype

    # representation maps

    def data_state(self, wave: torch.Tensor, update: bool = False) -> torch.Tensor:
        """Map audio to the flow's data representation ``x1``."""
        if self.domain == "time":
            return equalize(wave, self.bank, self.stats, update=update)
        return normalize_spectrogram(spectral.stft(wave, self.spectral), self.stats, "forward", update)

    def state_to_subbands(self, z: torch.Tensor) -> torch.Tensor:
        if self.domain == "time":
            z = spectral.stft(z, self.spectral)
        return split_subbands(z, self.layout)

    def subbands_to_state(self, v_sb: torch.Tensor) -> torch.Tensor:
        full = merge_subbands(v_sb, self.layout)
        if self.domain == "time":
            return spectral.istft(full, self.spectral)
        return full

    def state_to_waveform(self, z: torch.Tensor) -> torch.Tensor:
        if self.domain == "time":
            return deequalize(z, self.bank, self.stats)
        spec = normalize_spectrogram(z, self.stats, "inverse")
        return spectral.istft(spec, self.spectral)

    def subbands_to_waveform(self, x_sb: torch.Tensor) -> torch.Tensor:
        return self.state_to_waveform(self.subbands_to_state(x_sb))

    def noise(self, batch: int, n_frames: int, generator: torch.Generator | None = None,
              dtype: torch.dtype | None = None) -> torch.Tensor:
        """Standard Gaussian ``x0`` in the state space for ``n_frames`` frames."""
        dtype = dtype or self.dtype
        if self.domain == "time":
            shape = (batch, self.spectral.n_samples(n_frames))
            return torch.randn(shape, generator=generator, dtype=dtype)
        shape = (batch, self.layout.d, n_frames, 2)
        return torch.view_as_complex(torch.randn(shape, generator=generator, dtype=dtype))

    def state_frames(self, z: torch.Tensor) -> int:
        if self.domain == "time":
            return self.spectral.n_frames(z.shape[-1])
        return z.shape[-1]

    # backbone evaluation

    def predict(self, x_sb: torch.Tensor, t, cond, i_bw=None, drop_cond=None) -> torch.Tensor:
        """Velocity over all subbands at once: ``[B, n_sb, d_s, F]`` in and out.

        The ``n_sb`` subbands of every example are flattened into one backbone
        batch of ``B * n_sb`` rows.
        """
        if x_sb.dim() != 4 or x_sb.shape[1] != self.layout.n_sb:
            raise DimensionError(f"expected [B, {self.layout.n_sb}, d_s, F], got {tuple(x_sb.shape)}")
        B, n_sb, d_s, n_frames = x_sb.shape
        rows = x_sb.reshape(B * n_sb, d_s, n_frames)
        t = torch.as_tensor(t, dtype=x_sb.dtype).reshape(-1).expand(B)
        i_sb = torch.arange(n_sb).repeat(B)

        def per_row(a, dtype=None):
            if a is None:
                return None
            a = torch.as_tensor(a) if dtype is None else torch.as_tensor(a, dtype=dtype)
            if a.dim() == 0:
                a = a.expand(B)
            return a.repeat_interleave(n_sb, dim=0)

        out = self.backbone(
            rows,
            per_row(t),
            per_row(cond),
            i_sb,
            i_bw=per_row(i_bw, torch.long),
            drop_cond=per_row(drop_cond, torch.bool),
        )
        return out.reshape(B, n_sb, d_s, n_frames)
