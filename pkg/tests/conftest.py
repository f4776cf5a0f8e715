import numpy as np
import pytest
import torch

from bandflow.backbone import BackboneConfig
from bandflow.model import ModelSpec, Vocoder
from bandflow.spectral import SpectralConfig

TINY_SPECTRAL = SpectralConfig(sample_rate=8000, n_fft=64, win_length=64, hop_length=16, n_mels=12)
TINY_BACKBONE = BackboneConfig(n_blocks=2, dim=16, intermediate_dim=48, fourier_bands=2)


def tiny_model(domain: str = "time", dtype=torch.float64, seed: int = 0, cond_kind: str = "mel",
               pqmf_taps: int = 16, **backbone_kw) -> Vocoder:
    """33-bin spectra split into 4 subbands with 2-bin overlaps."""
    torch.manual_seed(seed)
    bb = BackboneConfig(**{**TINY_BACKBONE.__dict__, "cond_kind": cond_kind, **backbone_kw})
    spec = ModelSpec(domain, TINY_SPECTRAL, n_subbands=4, overlap=2, pqmf_bands=4, pqmf_taps=pqmf_taps, backbone=bb)
    return Vocoder.from_spec(spec).to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
