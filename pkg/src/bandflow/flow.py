"""Rectified-flow sampling: interpolation, Euler integration, time grids, guidance.

A velocity evaluator is any callable ``v(z, t) -> velocity`` with the same
shape as ``z``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError, NumericalError

logger = logging.getLogger(__name__)

Velocity = Callable[[torch.Tensor, float], torch.Tensor]


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    """Straight-line point ``x_t = (1 - t) x0 + t x1`` and its velocity ``x1 - x0``.

    A per-example ``t`` of shape ``[B]`` broadcasts over the trailing dims.
    """
    if x0.shape != x1.shape:
        raise DimensionError("x0 and x1 must share a shape")
    t = torch.as_tensor(t, dtype=x0.real.dtype if x0.is_complex() else x0.dtype, device=x0.device)
    if t.dim() == 1:
        t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    return (1 - t) * x0 + t * x1, x1 - x0


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time points from exactly 0 to exactly 1."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1)
        if p.size < 2:
            raise ConfigurationError("a time grid needs at least two points")
        if p[0] != 0.0 or p[-1] != 1.0:
            raise ConfigurationError("time grid must start at 0 and end at 1")
        if not np.all(np.diff(p) > 0):
            raise ConfigurationError("time grid must be strictly increasing")
        object.__setattr__(self, "points", p)

    @classmethod
    def uniform(cls, n_steps: int) -> "TimeGrid":
        if n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        p = np.arange(n_steps + 1, dtype=np.float64) / n_steps
        return cls(p)

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)


def euler_sample(v: Velocity, z0: torch.Tensor, grid: TimeGrid) -> torch.Tensor:
    """Explicit Euler: ``z_{k+1} = z_k + (t_{k+1} - t_k) v(z_k, t_k)``."""
    z = z0
    pts = grid.points
    for k in range(grid.n_steps):
        z = z + float(pts[k + 1] - pts[k]) * v(z, float(pts[k]))
        if not torch.isfinite(torch.view_as_real(z) if z.is_complex() else z).all():
            raise NumericalError(f"non-finite state after Euler step {k}")
    return z


@dataclass(frozen=True, eq=False)
class StraightnessProfile:
    probe_times: np.ndarray
    deviation: np.ndarray
    cumulative: np.ndarray

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])

    @classmethod
    def from_deviation(cls, probe_times, deviation) -> "StraightnessProfile":
        probe_times = np.asarray(probe_times, dtype=np.float64)
        deviation = np.asarray(deviation, dtype=np.float64)
        if probe_times.shape != deviation.shape or probe_times.size < 2:
            raise ValueError("need matching probe_times/deviation arrays with at least two probes")
        if np.any(deviation < 0) or not np.all(np.isfinite(deviation)):
            raise ValueError("deviation must be finite and non-negative")
        steps = np.diff(probe_times) * 0.5 * (deviation[1:] + deviation[:-1])
        cumulative = np.concatenate([[0.0], np.cumsum(steps)])
        return cls(probe_times, deviation, cumulative)


@torch.no_grad()
def estimate_straightness(v: Velocity, x0: torch.Tensor, x1: torch.Tensor, m_probes: int = 100
                          ) -> StraightnessProfile:
    """Batch-mean ``||(x1 - x0) - v(x_t, t)||^2`` at ``m_probes`` equally spaced times in [0, 1].

    The first axis of ``x0``/``x1`` is the batch; the squared norm runs over
    all remaining axes. The running integral uses the trapezoid rule.
    """
    if m_probes < 2:
        raise ValueError("m_probes must be >= 2")
    if x0.shape[0] == 0:
        raise ValueError("straightness needs a non-empty batch")
    probes = np.linspace(0.0, 1.0, m_probes)
    deviation = np.empty(m_probes)
    for j, t in enumerate(probes):
        xt, target = interpolate(x0, x1, float(t))
        err = target - v(xt, float(t))
        err = torch.view_as_real(err) if err.is_complex() else err
        deviation[j] = float(err.double().pow(2).flatten(1).sum(dim=1).mean())
    return StraightnessProfile.from_deviation(probes, deviation)


def equal_straightness_grid(profile: StraightnessProfile, n_steps: int = 10) -> TimeGrid:
    """Time points splitting the cumulative straightness into ``n_steps`` equal parts.

    The cumulative curve is inverted piecewise-linearly; where it is flat the
    earliest time reaching a level is used. Zero total straightness returns
    the uniform grid.
    """
    if n_steps < 1:
        raise ConfigurationError("n_steps must be >= 1")
    total = profile.total
    if not total > 0:
        logger.warning("zero total straightness; falling back to the uniform grid")
        return TimeGrid.uniform(n_steps)
    times = profile.probe_times
    cum = profile.cumulative
    levels = total * np.arange(1, n_steps) / n_steps
    interior = np.empty(n_steps - 1)
    for k, level in enumerate(levels):
        j = int(np.searchsorted(cum, level, side="left"))
        j = min(max(j, 1), len(cum) - 1)
        c0, c1 = cum[j - 1], cum[j]
        frac = 0.0 if c1 <= c0 else (level - c0) / (c1 - c0)
        interior[k] = times[j - 1] + frac * (times[j] - times[j - 1])
    points = np.concatenate([[0.0], interior, [1.0]])
    # Scale of the smallest representable gap; keeps degenerate profiles valid.
    eps = 1e-12
    for k in range(1, points.size - 1):
        points[k] = max(points[k], points[k - 1] + eps)
    if points[-2] >= 1.0:
        raise NumericalError("equal-straightness grid collapsed onto t = 1")
    return TimeGrid(points)


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: ``v_u + s (v_c - v_u)``."""
    return v_uncond + scale * (v_cond - v_uncond)


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 10
    grid_mode: str = "uniform"
    cfg_scale: float = 1.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        if self.grid_mode not in ("uniform", "equal_straightness"):
            raise ConfigurationError("grid_mode must be 'uniform' or 'equal_straightness'")
        if self.cfg_scale < 0:
            raise ConfigurationError("cfg_scale must be >= 0")


def sampling_grid(model, sampler: SamplerConfig) -> TimeGrid:
    if sampler.grid_mode == "uniform":
        return TimeGrid.uniform(sampler.n_steps)
    cached = getattr(model, "time_grid", None)
    if cached is not None and cached.n_steps == sampler.n_steps:
        return cached
    profile = getattr(model, "straightness", None)
    if profile is None:
        raise ConfigurationError("checkpoint has no straightness profile; run the grid command first")
    return equal_straightness_grid(profile, sampler.n_steps)


def subband_velocity(model, cond, i_bw=None, cfg_scale: float = 1.0):
    """Velocity evaluator over the model's subband representation.

    With guidance on a token model the conditional and unconditional
    branches share one backbone batch.
    """
    guided = cfg_scale != 1.0
    if guided and model.cond_kind != "tokens":
        raise ConfigurationError("classifier-free guidance needs a token-conditioned model")

    def v(x_sb, t):
        B = x_sb.shape[0]
        if not guided:
            return model.predict(x_sb, t, cond, i_bw=i_bw)
        both = torch.cat([x_sb, x_sb])
        cond2 = torch.cat([torch.as_tensor(cond)] * 2)
        bw2 = None if i_bw is None else torch.as_tensor(i_bw).reshape(-1).expand(B).repeat(2)
        drop = torch.cat([torch.zeros(B, dtype=torch.bool), torch.ones(B, dtype=torch.bool)])
        out = model.predict(both, t, cond2, i_bw=bw2, drop_cond=drop)
        return cfg_velocity(out[:B], out[B:], cfg_scale)

    return v


def state_velocity(model, cond, i_bw=None, cfg_scale: float = 1.0) -> Velocity:
    """Velocity evaluator over the model's flow state (waveform or spectrogram)."""
    v_sb = subband_velocity(model, cond, i_bw, cfg_scale)

    def v(z, t):
        return model.subbands_to_state(v_sb(model.state_to_subbands(z), t))

    return v


@torch.no_grad()
def generate(model, cond, sampler: SamplerConfig = SamplerConfig(), seed: int = 0, i_bw=None) -> torch.Tensor:
    """Sample waveforms ``[B, (F - 1) * hop]`` for conditioning ``cond`` of ``F`` frames.

    Time domain: every Euler step runs one STFT and one ISTFT. Frequency
    domain: steps stay in the normalised spectrogram; one ISTFT at the end.
    """
    cond = torch.as_tensor(cond)
    if cond.dim() == 2:
        cond = cond[None]
    if model.cond_kind == "mel":
        if cond.shape[1] != model.spectral.n_mels:
            raise DimensionError(f"mel input has {cond.shape[1]} bins, model expects {model.spectral.n_mels}")
        cond = cond.to(model.dtype)
    B, n_frames = cond.shape[0], cond.shape[-1]
    if n_frames < 2:
        raise DimensionError("conditioning must span at least two frames")
    grid = sampling_grid(model, sampler)
    gen = torch.Generator().manual_seed(int(seed))
    z0 = model.noise(B, n_frames, generator=gen)
    v = state_velocity(model, cond, i_bw, sampler.cfg_scale)
    z1 = euler_sample(v, z0, grid)
    return model.state_to_waveform(z1)
