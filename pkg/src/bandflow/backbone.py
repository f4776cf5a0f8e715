"""Conditional velocity-field network built from ConvNeXtV2 blocks.

Sequences are frame-rate tensors laid out ``[batch, channels, frames]``.
One network serves every subband; the subband index enters through an
adaptive layer norm in each block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 160
    n_blocks: int = 8
    dim: int = 512
    intermediate_dim: int = 1536
    kernel: int = 7
    fourier_bands: int = 8
    time_embed_dim: int | None = None
    n_subbands: int = 8
    cond_kind: str = "mel"
    n_mels: int = 100
    n_codebooks: int = 8
    codebook_size: int = 1024
    # Number of active codebooks for each bandwidth index.
    bandwidth_codebooks: tuple[int, ...] = (2, 4, 8)
    cond_dropout_prob: float = 0.1

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel must be odd")
        if self.dim <= 0 or self.intermediate_dim <= 0:
            raise ConfigurationError("dim and intermediate_dim must be positive")
        if self.cond_kind not in ("mel", "tokens"):
            raise ConfigurationError(f"cond_kind must be 'mel' or 'tokens', got {self.cond_kind!r}")
        if self.fourier_bands < 0:
            raise ConfigurationError("fourier_bands must be >= 0")
        if self.cond_kind == "tokens" and max(self.bandwidth_codebooks) > self.n_codebooks:
            raise ConfigurationError("bandwidth_codebooks exceeds n_codebooks")
        object.__setattr__(self, "bandwidth_codebooks", tuple(self.bandwidth_codebooks))

    @property
    def n_bandwidths(self) -> int:
        return len(self.bandwidth_codebooks)

    @property
    def cond_channels(self) -> int:
        return self.n_mels if self.cond_kind == "mel" else self.dim


def fourier_features(x: torch.Tensor, bands: int) -> torch.Tensor:
    """``[B, C, F]`` to ``[B, 2 * bands * C, F]``: ``sin, cos`` of ``2**k * pi * x`` for each ``k``."""
    if bands < 1:
        raise ValueError("bands must be >= 1")
    feats = []
    for k in range(bands):
        arg = (2.0**k * math.pi) * x
        feats.append(torch.sin(arg))
        feats.append(torch.cos(arg))
    return torch.cat(feats, dim=-2)


def sinusoidal_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    arg = scale * t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class AdaLayerNorm(nn.Module):
    """Layer norm whose scale and shift are looked up per subband."""

    def __init__(self, n_subbands: int, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.dim = dim
        self.scale = nn.Embedding(n_subbands, dim)
        self.shift = nn.Embedding(n_subbands, dim)
        nn.init.ones_(self.scale.weight)
        nn.init.normal_(self.shift.weight, std=0.02)

    def forward(self, x: torch.Tensor, i_sb: torch.Tensor) -> torch.Tensor:
        # x: [B, F, C]
        x = nn.functional.layer_norm(x, (self.dim,), eps=self.eps)
        return x * self.scale(i_sb)[:, None] + self.shift(i_sb)[:, None]


class GRN(nn.Module):
    """Global response normalisation over the frame axis."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.zeros(1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gx = torch.sqrt((x * x).sum(dim=1, keepdim=True) + self.eps)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtV2Block(nn.Module):
    def __init__(self, dim: int, intermediate_dim: int, kernel: int, n_subbands: int):
        super().__init__()
        self.cond = nn.Linear(dim, dim)
        self.dwconv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = AdaLayerNorm(n_subbands, dim)
        self.pwconv1 = nn.Linear(dim, intermediate_dim)
        self.act = nn.GELU()
        self.grn = GRN(intermediate_dim)
        self.pwconv2 = nn.Linear(intermediate_dim, dim)

    def forward(self, x: torch.Tensor, emb: torch.Tensor, i_sb: torch.Tensor) -> torch.Tensor:
        x = x + self.cond(emb)[:, :, None]
        residual = x
        x = self.dwconv(x).transpose(1, 2)
        x = self.norm(x, i_sb)
        x = self.pwconv2(self.grn(self.act(self.pwconv1(x))))
        return residual + x.transpose(1, 2)


class VelocityField(nn.Module):
    """Predicts the subband velocity ``v(x_t, t | C)``, shape-preserving on ``[B, d_s, F]``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        t_dim = cfg.time_embed_dim or cfg.dim
        self.time_mlp = nn.Sequential(nn.Linear(t_dim, cfg.dim), nn.GELU(), nn.Linear(cfg.dim, cfg.dim))
        if cfg.cond_kind == "tokens":
            self.codebooks = nn.Parameter(torch.randn(cfg.n_codebooks, cfg.codebook_size, cfg.dim) * 0.02)
            self.null_cond = nn.Parameter(torch.randn(cfg.dim) * 0.02)
            self.bandwidth = nn.Embedding(cfg.n_bandwidths, cfg.dim)
        n_in = cfg.in_channels * (1 + 2 * cfg.fourier_bands) + cfg.cond_channels
        self.in_proj = nn.Conv1d(n_in, cfg.dim, 1)
        self.blocks = nn.ModuleList(
            ConvNeXtV2Block(cfg.dim, cfg.intermediate_dim, cfg.kernel, cfg.n_subbands) for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.dim, eps=1e-6)
        self.out_proj = nn.Conv1d(cfg.dim, cfg.in_channels, 1)

    def embed_tokens(self, tokens: torch.Tensor, i_bw: torch.Tensor) -> torch.Tensor:
        """Sum of per-codebook embeddings over the codebooks active at ``i_bw``; ``[B, dim, F]``."""
        cfg = self.cfg
        if cfg.cond_kind != "tokens":
            raise ConfigurationError("embed_tokens requires a token-conditioned backbone")
        tokens = torch.as_tensor(tokens)
        if tokens.dim() != 3:
            raise DimensionError("tokens must be [B, n_q, F]")
        i_bw = torch.as_tensor(i_bw, device=tokens.device).reshape(-1).expand(tokens.shape[0])
        if (i_bw < 0).any() or (i_bw >= cfg.n_bandwidths).any():
            raise ValueError(f"bandwidth index out of range [0, {cfg.n_bandwidths})")
        if (tokens < 0).any() or (tokens >= cfg.codebook_size).any():
            raise ValueError(f"token values must lie in [0, {cfg.codebook_size})")
        active = torch.as_tensor(cfg.bandwidth_codebooks, device=tokens.device)[i_bw]
        n_q = tokens.shape[1]
        if (active > n_q).any():
            raise DimensionError(f"bandwidth needs {int(active.max())} codebooks, tokens have {n_q}")
        q = torch.arange(n_q, device=tokens.device)
        mask = (q[None, :] < active[:, None]).to(self.codebooks.dtype)  # [B, n_q]
        tables = self.codebooks[:n_q]  # [n_q, K, dim]
        emb = tables[q[None, :, None], tokens]  # [B, n_q, F, dim]
        emb = (emb * mask[:, :, None, None]).sum(dim=1)
        return emb.transpose(1, 2)

    def _condition(self, cond, i_bw, drop_cond, batch: int, n_frames: int, like: torch.Tensor):
        cfg = self.cfg
        if cond is None:
            raise ValueError("conditioning input is required")
        if cfg.cond_kind == "mel":
            cond = torch.as_tensor(cond, dtype=like.dtype, device=like.device)
            if cond.shape != (batch, cfg.n_mels, n_frames):
                raise DimensionError(f"mel conditioning {tuple(cond.shape)} != {(batch, cfg.n_mels, n_frames)}")
            if drop_cond is not None and bool(torch.as_tensor(drop_cond).any()):
                raise ConfigurationError("mel-conditioned backbone has no unconditional branch")
            return cond
        cond = torch.as_tensor(cond, device=like.device)
        if cond.shape[0] != batch or cond.shape[-1] != n_frames:
            raise DimensionError(f"token conditioning {tuple(cond.shape)} does not match batch/frames")
        if drop_cond is None:
            drop_cond = torch.zeros(batch, dtype=torch.bool, device=like.device)
        drop_cond = torch.as_tensor(drop_cond, dtype=torch.bool, device=like.device).reshape(-1).expand(batch)
        if i_bw is None:
            if not drop_cond.all():
                raise ValueError("token conditioning requires a bandwidth index")
            return self.null_cond[None, :, None].expand(batch, -1, n_frames).to(like.dtype)
        emb = self.embed_tokens(cond, i_bw).to(like.dtype)
        null = self.null_cond.to(like.dtype)[None, :, None]
        return torch.where(drop_cond[:, None, None], null, emb)

    def forward(
        self,
        noisy: torch.Tensor,
        t,
        cond,
        i_sb,
        i_bw=None,
        drop_cond=None,
    ) -> torch.Tensor:
        cfg = self.cfg
        if noisy.dim() != 3 or noisy.shape[1] != cfg.in_channels:
            raise DimensionError(f"noisy input must be [B, {cfg.in_channels}, F], got {tuple(noisy.shape)}")
        B, _, n_frames = noisy.shape
        t = torch.as_tensor(t, dtype=noisy.dtype, device=noisy.device).reshape(-1).expand(B)
        i_sb = torch.as_tensor(i_sb, dtype=torch.long, device=noisy.device).reshape(-1).expand(B)
        if (i_sb < 0).any() or (i_sb >= cfg.n_subbands).any():
            raise DimensionError(f"subband index out of range [0, {cfg.n_subbands})")

        c = self._condition(cond, i_bw, drop_cond, B, n_frames, noisy)
        parts = [noisy]
        if cfg.fourier_bands:
            parts.append(fourier_features(noisy, cfg.fourier_bands))
        parts.append(c)
        x = self.in_proj(torch.cat(parts, dim=1))

        emb = self.time_mlp(sinusoidal_embedding(t, cfg.time_embed_dim or cfg.dim))
        if cfg.cond_kind == "tokens" and i_bw is not None:
            i_bw = torch.as_tensor(i_bw, dtype=torch.long, device=noisy.device).reshape(-1).expand(B)
            emb = emb + self.bandwidth(i_bw)

        for block in self.blocks:
            x = block(x, emb, i_sb)
        x = self.final_norm(x.transpose(1, 2)).transpose(1, 2)
        return self.out_proj(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
