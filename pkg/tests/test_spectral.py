import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bandflow import spectral
from bandflow.errors import ConfigurationError, LengthError
from bandflow.spectral import MEL_FLOOR, SpectralConfig, istft, log_mel, stft

CFG = SpectralConfig()  # 22.05 kHz, 1024 / 256 / 1024, 100 mels


class TestConfig:
    def test_presets_match_extraction_table(self):
        assert (spectral.PRESETS["22k"].n_fft, spectral.PRESETS["22k"].hop_length) == (1024, 256)
        assert (spectral.PRESETS["44k"].n_fft, spectral.PRESETS["44k"].hop_length) == (2048, 512)
        assert spectral.PRESETS["24k-tokens"].hop_length == 320

    @pytest.mark.parametrize("kw", [{"win_length": 2048}, {"hop_length": 2048}, {"window": "kaiser"}, {"n_fft": 1023}])
    def test_invalid_configs_rejected(self, kw):
        with pytest.raises(ConfigurationError):
            SpectralConfig(**kw)

    def test_non_cola_pair_rejected_at_construction(self):
        with pytest.raises(ConfigurationError, match="overlap-add"):
            SpectralConfig(n_fft=1024, win_length=1024, hop_length=700)

    @pytest.mark.parametrize("T,frames", [(32512, 128), (32767, 128), (32768, 129), (0, 1)])
    def test_frame_count_law(self, T, frames):
        assert CFG.n_frames(T) == frames

    def test_sample_count_law(self):
        assert CFG.n_samples(128) == 32512


class TestStft:
    def test_zero_waveform_gives_zero_spectrogram(self):
        spec = stft(torch.zeros(32512), CFG)
        assert spec.shape == (513, 128)
        assert torch.count_nonzero(spec) == 0

    def test_cosine_on_bin_oracle(self):
        n, k = 64, 5
        cfg = SpectralConfig(sample_rate=8000, n_fft=n, win_length=n, hop_length=n, n_mels=0, window="rect",
                             center_pad=False)
        x = np.cos(2 * np.pi * k * np.arange(n) / n)
        spec = stft(torch.as_tensor(x), cfg)[:, 0].numpy()
        # direct DFT summation
        oracle = np.array([np.sum(x * np.exp(-2j * np.pi * f * np.arange(n) / n)) for f in range(n // 2 + 1)])
        np.testing.assert_allclose(spec, oracle / math.sqrt(n), atol=1e-12)
        mag = np.abs(spec)
        assert mag.argmax() == k
        assert np.delete(mag, k).max() <= 1e-10 * mag[k]

    def test_orthonormal_energy(self, rng):
        cfg = SpectralConfig(sample_rate=8000, n_fft=64, win_length=64, hop_length=64, n_mels=0, window="rect",
                             center_pad=False)
        x = rng.standard_normal(64)
        spec = stft(torch.as_tensor(x), cfg)[:, 0].numpy()
        # one-sided spectrum: interior bins stand for two conjugate bins
        energy = abs(spec[0]) ** 2 + abs(spec[-1]) ** 2 + 2 * np.sum(np.abs(spec[1:-1]) ** 2)
        assert abs(math.sqrt(energy) - np.linalg.norm(x)) < 1e-6

    def test_linearity(self, rng):
        x, y = (torch.as_tensor(rng.standard_normal(4096)) for _ in range(2))
        a, b = 0.7, -2.3
        torch.testing.assert_close(stft(a * x + b * y, CFG), a * stft(x, CFG) + b * stft(y, CFG), atol=1e-12, rtol=0)

    def test_dc_and_nyquist_are_real(self, rng):
        spec = stft(torch.as_tensor(rng.standard_normal(8192)), CFG)
        assert spec[0].imag.abs().max() < 1e-12
        assert spec[-1].imag.abs().max() < 1e-12

    def test_short_input_without_padding_is_length_error(self):
        cfg = SpectralConfig(center_pad=False)
        with pytest.raises(LengthError):
            stft(torch.zeros(1000), cfg)

    def test_batch_dims(self, rng):
        x = torch.as_tensor(rng.standard_normal((2, 3, 2048)))
        assert stft(x, CFG).shape == (2, 3, 513, 9)


class TestIstft:
    def test_zero_spectrogram(self):
        out = istft(torch.zeros(513, 128, dtype=torch.complex64), CFG)
        assert out.shape == (32512,)
        assert torch.count_nonzero(out) == 0

    def test_roundtrip_single_precision(self, rng):
        x = torch.as_tensor(rng.uniform(-1, 1, (100, 32512)), dtype=torch.float32)
        start = time.perf_counter()
        err = (istft(stft(x, CFG), CFG) - x).abs().max().item()
        assert time.perf_counter() - start < 10.0
        assert err < 1e-6

    def test_roundtrip_double_precision(self, rng):
        x = torch.as_tensor(rng.standard_normal((4, 32512)))
        assert (istft(stft(x, CFG), CFG) - x).abs().max().item() < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(frames=st.integers(min_value=5, max_value=40), seed=st.integers(0, 2**31 - 1),
           hop=st.sampled_from([8, 16]))
    def test_roundtrip_property(self, frames, seed, hop):
        # lengths that are multiples of hop and long enough for reflection padding
        cfg = SpectralConfig(sample_rate=8000, n_fft=64, win_length=64, hop_length=hop, n_mels=0)
        x = torch.as_tensor(np.random.default_rng(seed).standard_normal(hop * frames))
        y = istft(stft(x, cfg), cfg)
        assert y.shape == x.shape
        assert (y - x).abs().max().item() < 1e-12


class TestLogMel:
    def test_zero_waveform_is_floor(self):
        mel = log_mel(torch.zeros(32512), CFG)
        assert mel.shape == (100, 128)
        assert torch.all(mel == math.log(MEL_FLOOR))

    def test_amplitude_doubling_shifts_by_log2(self, rng):
        x = torch.as_tensor(rng.standard_normal(8192) * 0.1)
        m1, m2 = log_mel(x, CFG), log_mel(2 * x, CFG)
        unfloored = (m1 > math.log(MEL_FLOOR) + 1e-9) & (m2 > math.log(MEL_FLOOR) + 1e-9)
        torch.testing.assert_close(m2[unfloored] - m1[unfloored], torch.full_like(m1[unfloored], math.log(2)))

    def test_entries_above_floor(self, rng):
        mel = log_mel(torch.as_tensor(rng.standard_normal(4096) * 1e-6), CFG)
        assert mel.min().item() >= math.log(MEL_FLOOR)

    def test_slaney_filterbank_oracle(self):
        # Slaney mel scale: linear below 1 kHz (200/3 Hz per mel), log above.
        assert spectral._hz_to_mel(1000.0) == pytest.approx(15.0)
        assert spectral._mel_to_hz(spectral._hz_to_mel(4321.0)) == pytest.approx(4321.0)
        fb = spectral.mel_filterbank(22050, 1024, 100)
        assert fb.shape == (100, 513)
        assert np.all(fb >= 0)
        assert np.all(fb.sum(axis=1) > 0)


class TestWavIO:
    @pytest.mark.parametrize("subtype,tol", [("float32", 1e-7), ("pcm16", 0.5 / 32768 + 1e-9)])
    def test_roundtrip(self, tmp_path, rng, subtype, tol):
        x = rng.uniform(-0.9, 0.9, 2000)
        path = tmp_path / "a.wav"
        spectral.write_wav(path, x, 22050, subtype=subtype)
        y, sr = spectral.read_wav(path, expected_rate=22050)
        assert sr == 22050
        np.testing.assert_allclose(y, x, atol=tol)

    def test_rate_mismatch_is_error(self, tmp_path):
        path = tmp_path / "a.wav"
        spectral.write_wav(path, np.zeros(100), 16000)
        with pytest.raises(ConfigurationError):
            spectral.read_wav(path, expected_rate=22050)

    def test_stereo_downmixed_with_warning(self, tmp_path):
        import scipy.io.wavfile

        path = tmp_path / "s.wav"
        scipy.io.wavfile.write(path, 22050, np.stack([np.full(10, 0.5), np.full(10, -0.1)], 1).astype(np.float32))
        with pytest.warns(UserWarning):
            y, _ = spectral.read_wav(path)
        np.testing.assert_allclose(y, 0.2, atol=1e-7)
