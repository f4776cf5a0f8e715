"""Overlapping subband windows over a full-band complex spectrogram.

The spectrogram is circularly padded along frequency by ``(d_ol, d_ol - 1)``
and cut into ``n_sb`` equally sized windows with stride ``d_m = (d - 1) / n_sb``.
Each window keeps ``d_ol`` bins of context on both sides of its main section;
the last one owns the extra Nyquist-side bin and has one bin less of padding
on the right. Real and imaginary parts are interleaved along the feature axis,
``(re0, im0, re1, im1, ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import torch

from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class SubbandLayout:
    d: int
    n_sb: int = 8
    d_ol: int = 8

    def __post_init__(self):
        if self.n_sb < 1:
            raise ConfigurationError("n_sb must be >= 1")
        if self.d_ol < 0:
            raise ConfigurationError("d_ol must be >= 0")
        if (self.d - 1) % self.n_sb:
            raise ConfigurationError(f"d - 1 = {self.d - 1} is not divisible by n_sb = {self.n_sb}")
        if self.d_ol > self.d_m:
            raise ConfigurationError(f"overlap {self.d_ol} exceeds main-section size {self.d_m}")

    @property
    def d_m(self) -> int:
        return (self.d - 1) // self.n_sb

    @property
    def pad(self) -> tuple[int, int]:
        # Without overlap the last window simply grows by the extra bin.
        if self.d_ol == 0:
            return (0, 0)
        return (self.d_ol, self.d_ol - 1)

    @property
    def window_size(self) -> int:
        return self.d_m + 2 * self.d_ol if self.d_ol else self.d_m + 1

    @property
    def d_s(self) -> int:
        return 2 * self.window_size

    @property
    def padded_length(self) -> int:
        return self.d + sum(self.pad)

    @property
    def starts(self) -> tuple[int, ...]:
        return tuple(i * self.d_m for i in range(self.n_sb))

    def main_section(self, i: int) -> tuple[int, int]:
        """Half-open range of full-band bins owned by window ``i``."""
        lo = i * self.d_m
        hi = self.d if i == self.n_sb - 1 else lo + self.d_m
        return lo, hi

    @cached_property
    def pair_offsets(self) -> tuple[tuple[int, int, int, int, int], ...]:
        """``(i, j, offset_in_i, offset_in_j, length)`` for adjacent windows.

        Window ``j`` follows ``i`` circularly; the shared bins are the tail of
        ``i`` beyond its main section and the head of ``j``.
        """
        if self.d_ol == 0:
            return ()
        pairs = []
        for i in range(self.n_sb):
            j = (i + 1) % self.n_sb
            tail = self.d_m + 1 if i == self.n_sb - 1 else self.d_m
            pairs.append((i, j, tail, 0, self.window_size - tail))
        return tuple(pairs)


def interleave(x: torch.Tensor, dim: int = -2) -> torch.Tensor:
    """Complex ``[..., n, ...]`` to real ``[..., 2n, ...]`` with re/im interleaved along ``dim``."""
    dim = dim % x.dim()
    y = torch.stack([x.real, x.imag], dim=dim + 1)
    return y.flatten(dim, dim + 1)


def deinterleave(x: torch.Tensor, dim: int = -2) -> torch.Tensor:
    dim = dim % x.dim()
    if x.shape[dim] % 2:
        raise DimensionError("interleaved axis must have even length")
    y = x.unflatten(dim, (x.shape[dim] // 2, 2))
    re, im = y.unbind(dim + 1)
    return torch.complex(re, im)


def split_subbands(spec: torch.Tensor, layout: SubbandLayout) -> torch.Tensor:
    """``[..., d, F]`` complex to ``[..., n_sb, d_s, F]`` real."""
    if spec.shape[-2] != layout.d:
        raise DimensionError(f"spectrogram has {spec.shape[-2]} bins, layout expects {layout.d}")
    left, right = layout.pad
    parts = [spec[..., layout.d - left:, :]] if left else []
    parts.append(spec)
    if right:
        parts.append(spec[..., :right, :])
    padded = torch.cat(parts, dim=-2)
    ws = layout.window_size
    windows = torch.stack([padded[..., s:s + ws, :] for s in layout.starts], dim=-3)
    return interleave(windows, dim=-2)


def merge_subbands(stack: torch.Tensor, layout: SubbandLayout) -> torch.Tensor:
    """Drop overlap margins and concatenate main sections back to ``[..., d, F]``."""
    if stack.dim() < 3 or stack.shape[-3] != layout.n_sb or stack.shape[-2] != layout.d_s:
        raise DimensionError(
            f"stack shape {tuple(stack.shape)} does not match layout (n_sb={layout.n_sb}, d_s={layout.d_s})"
        )
    windows = deinterleave(stack, dim=-2)
    off = layout.pad[0]
    mains = []
    for i in range(layout.n_sb):
        lo, hi = layout.main_section(i)
        mains.append(windows[..., i, off:off + hi - lo, :])
    return torch.cat(mains, dim=-2)


def overlap_pairs(stack: torch.Tensor, layout: SubbandLayout) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Both windows' values over each shared region, aligned bin-for-bin.

    Regions are returned in the interleaved representation, so a region of
    ``n`` shared bins has ``2n`` feature rows. Includes the wrap-around pair
    (last window, first window). Empty when ``d_ol == 0``.
    """
    pairs = []
    for i, j, oi, oj, n in layout.pair_offsets:
        pairs.append((stack[..., i, 2 * oi:2 * (oi + n), :], stack[..., j, 2 * oj:2 * (oj + n), :]))
    return pairs


def margin_mask(layout: SubbandLayout, dtype=torch.bool) -> torch.Tensor:
    """``[n_sb, d_s]`` mask of interleaved rows lying outside each main section."""
    mask = torch.ones(layout.n_sb, layout.window_size, dtype=torch.bool)
    off = layout.pad[0]
    for i in range(layout.n_sb):
        lo, hi = layout.main_section(i)
        mask[i, off:off + hi - lo] = False
    return mask.repeat_interleave(2, dim=1).to(dtype)
