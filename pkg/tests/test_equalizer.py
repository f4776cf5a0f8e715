import math

import numpy as np
import pytest
import torch

from bandflow.equalizer import (
    EMA_DECAY,
    VAR_FLOOR,
    RunningStats,
    deequalize,
    design_pqmf,
    equalize,
    normalize_spectrogram,
)
from bandflow.errors import DimensionError, StateError


@pytest.fixture(scope="module")
def bank():
    return design_pqmf(8, 124)


def error_db(ref: torch.Tensor, est: torch.Tensor) -> float:
    return 10 * math.log10(float(((est - ref) ** 2).sum() / (ref**2).sum()))


def brown_noise(rng, n):
    x = np.cumsum(rng.standard_normal(n))
    return x - np.linspace(x[0], x[-1], n)


class TestDesign:
    def test_default_bank_shapes(self, bank):
        assert bank.analysis_filters.shape == (8, 125)
        assert bank.synthesis_filters.shape == (8, 125)
        assert 0 < bank.cutoff_ratio < 1

    def test_reconstruction_on_ten_white_noise_signals(self, bank):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            x = torch.randn(32512, generator=g, dtype=torch.float64)
            assert error_db(x, bank.reconstruct(x)) <= -40.0

    def test_analysis_is_critically_decimated(self, bank):
        assert bank.analysis(torch.zeros(3, 4096, dtype=torch.float64)).shape == (3, 8, 512)

    def test_length_not_divisible_is_error(self, bank):
        with pytest.raises(DimensionError):
            bank.analysis(torch.zeros(1001, dtype=torch.float64))

    def test_synthesis_matches_zero_stuffing_oracle(self, bank, rng):
        s = rng.standard_normal((8, 64))
        out = bank.synthesis(torch.as_tensor(s)).numpy()
        # zero insertion, then y[n] = sum_k sum_m up_k[n + m - taps/2] * h_k[m]
        up = np.zeros((8, 64 * 8))
        up[:, ::8] = s * 8
        padded = np.pad(up, ((0, 0), (62, 62)))
        h = bank.synthesis_filters
        oracle = np.array([sum(padded[k, n:n + 125] @ h[k] for k in range(8)) for n in range(512)])
        np.testing.assert_allclose(out, oracle, atol=1e-10)

    def test_two_band_filters_mirror_about_quarter_rate(self):
        two = design_pqmf(2, 32)
        resp = two.frequency_response(2049)  # grid on [0, pi], symmetric about pi / 2
        np.testing.assert_allclose(resp[0], resp[1][::-1], atol=1e-6)

    def test_bands_cover_their_nominal_ranges(self, bank):
        resp = bank.frequency_response(8192)
        w = np.linspace(0, np.pi, 8192)
        for k in range(8):
            centre = (k + 0.5) * np.pi / 8
            assert resp[k, np.argmin(abs(w - centre))] > 0.9

    def test_one_band_bank_is_identity(self, rng):
        one = design_pqmf(1, 8)
        x = torch.as_tensor(rng.standard_normal(256))
        torch.testing.assert_close(one.reconstruct(x), x)


class TestRunningStats:
    def test_first_update_initialises(self):
        s = RunningStats(3)
        assert not s.initialized
        s.update([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
        np.testing.assert_array_equal(s.mean, [1, 2, 3])
        assert s.update_count == 1

    def test_ema_rule(self):
        s = RunningStats(2, ema_decay=0.9)
        s.update([0.0, 0.0], [1.0, 1.0])
        s.update([10.0, -10.0], [3.0, 3.0])
        np.testing.assert_allclose(s.mean, [1.0, -1.0])
        np.testing.assert_allclose(s.var, [1.2, 1.2])

    def test_variance_floor(self):
        s = RunningStats(1)
        s.update([0.0], [0.0])
        assert s.var[0] == VAR_FLOOR

    def test_defaults(self):
        assert EMA_DECAY == 0.999 and VAR_FLOOR == 1e-6

    def test_uninitialised_use_is_state_error(self, bank):
        with pytest.raises(StateError):
            equalize(torch.zeros(1024, dtype=torch.float64), bank, RunningStats(8), update=False)


class TestEqualize:
    def test_identity_stats_equal_reconstruction(self, bank, rng):
        x = torch.as_tensor(rng.standard_normal(8192))
        out = equalize(x, bank, RunningStats.identity(8))
        torch.testing.assert_close(out, bank.reconstruct(x))
        assert error_db(x, out) <= -40

    def test_one_band_is_scalar_normalisation(self, rng):
        one = design_pqmf(1, 8)
        stats = RunningStats(1, mean=[0.3], var=[4.0])
        x = torch.as_tensor(rng.standard_normal(512))
        torch.testing.assert_close(equalize(x, one, stats), (x - 0.3) / 2.0)

    def test_update_changes_stats_before_use(self, bank, rng):
        stats = RunningStats(8)
        x = torch.as_tensor(rng.standard_normal(8192) * 3)
        equalize(x, bank, stats, update=True)
        assert stats.update_count == 1
        band_var = bank.analysis(x).var(dim=-1, unbiased=False).numpy()
        np.testing.assert_allclose(stats.var, band_var, rtol=1e-10)

    def test_roundtrip_on_100_clips(self, bank):
        g = torch.Generator().manual_seed(7)
        x = torch.randn(100, 8192, generator=g, dtype=torch.float64)
        stats = RunningStats(8)
        equalize(x, bank, stats, update=True)
        stats.update(np.linspace(-0.1, 0.1, 8), np.linspace(0.5, 2.0, 8))
        y = deequalize(equalize(x, bank, stats), bank, stats)
        for i in range(100):
            assert error_db(x[i], y[i]) <= -40

    def test_roundtrip_on_coloured_noise(self, bank, rng):
        x = torch.as_tensor(brown_noise(rng, 16384))
        stats = RunningStats(8)
        equalize(x, bank, stats, update=True)
        assert error_db(x, deequalize(equalize(x, bank, stats), bank, stats)) <= -40

    def test_zero_waveform_restored(self, bank):
        stats = RunningStats(8, mean=np.full(8, 0.2), var=np.full(8, 0.25))
        z = torch.zeros(4096, dtype=torch.float64)
        eq = equalize(z, bank, stats)
        assert eq.abs().max() > 0.1
        assert deequalize(eq, bank, stats).abs().max() < 1e-2


class TestSpectrogramNorm:
    def test_inverse_of_forward_under_frozen_stats(self, rng):
        spec = torch.as_tensor(rng.standard_normal((2, 9, 5)) + 1j * rng.standard_normal((2, 9, 5)))
        stats = RunningStats(18, mean=rng.standard_normal(18), var=rng.uniform(0.5, 2, 18))
        back = normalize_spectrogram(normalize_spectrogram(spec, stats), stats, "inverse")
        torch.testing.assert_close(back, spec, atol=1e-14, rtol=0)

    def test_identity_stats(self, rng):
        spec = torch.as_tensor(rng.standard_normal((9, 5)) + 1j * rng.standard_normal((9, 5)))
        assert torch.equal(normalize_spectrogram(spec, RunningStats.identity(18)), spec)

    def test_ema_fixed_point(self, rng):
        spec = torch.as_tensor(rng.standard_normal((9, 20)) + 0.5 + 1j * (rng.standard_normal((9, 20)) - 2))
        stats = RunningStats(18, ema_decay=0.9)
        normalize_spectrogram(torch.zeros_like(spec), stats, update=True)  # start far from the target
        gaps = []
        for _ in range(200):
            out = normalize_spectrogram(spec, stats, update=True)
            gaps.append(float(abs(torch.view_as_real(out).mean(dim=1)).max()))
        assert gaps[-1] < 1e-6 < gaps[0]
        assert all(a >= b for a, b in zip(gaps[1:], gaps[2:]))

    def test_inverse_with_update_is_usage_error(self):
        with pytest.raises(ValueError):
            normalize_spectrogram(torch.zeros(3, 2, dtype=torch.complex128), RunningStats.identity(6), "inverse", True)

    def test_wrong_stats_size(self):
        with pytest.raises(DimensionError):
            normalize_spectrogram(torch.zeros(3, 2, dtype=torch.complex128), RunningStats.identity(5))
