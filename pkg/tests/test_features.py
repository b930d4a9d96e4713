import math
import wave

import numpy as np
import pytest

from pvadkit import ConfigError, FormatError, features, wavio
from pvadkit.features import AudioBuffer, FeatureConfig
from pvadkit.util import substream, tensor_checksum

CFG = FeatureConfig()
SR = 16000


class TestFrameCount:
    def test_matches_enumeration(self):
        # windows of 400 samples every 160: count how many fit
        for n in range(0, 2000):
            expected = 0 if n < 400 else (n - 400) // 160 + 1
            assert features.frame_count(n, CFG) == expected

    def test_known_durations(self):
        assert features.frame_count(400, CFG) == 1
        assert features.frame_count(399, CFG) == 0
        assert features.frame_count(16000, CFG) == 98
        assert features.frame_count(80000, CFG) == 498  # 5.0 s

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            features.frame_count(-1, CFG)

    def test_sample_geometry(self):
        assert CFG.frame_length(SR) == 400
        assert CFG.frame_shift(SR) == 160


class TestMelScale:
    def test_anchor_points(self):
        assert features.hz_to_mel(0.0) == 0.0
        assert features.hz_to_mel(700.0) == pytest.approx(2595.0 * math.log10(2.0))

    def test_round_trip(self):
        f = np.linspace(0.0, 8000.0, 100)
        np.testing.assert_allclose(features.mel_to_hz(features.hz_to_mel(f)), f,
                                   atol=1e-9)

    def test_monotone(self):
        m = features.hz_to_mel(np.linspace(0.0, 8000.0, 500))
        assert np.all(np.diff(m) > 0)


class TestHannWindow:
    def test_matches_symmetric_window_of_n_plus_1(self):
        # periodic Hann of length n = symmetric Hann of length n+1,
        # last point dropped
        np.testing.assert_allclose(features.hann_periodic(400),
                                   np.hanning(401)[:400], atol=1e-15)

    def test_periodic_symmetry(self):
        w = features.hann_periodic(400)
        assert w[0] == 0.0
        np.testing.assert_allclose(w[1:], w[:0:-1], atol=1e-15)


class TestMelFilterbank:
    def test_shape_and_range(self):
        fb = features.mel_filterbank(CFG)
        assert fb.shape == (40, 257)
        assert fb.min() >= 0.0
        assert fb.max() <= 1.0
        assert np.all(fb.sum(axis=1) > 0)

    def test_centers_uniform_on_mel_scale(self):
        centers = features.filter_center_freqs(CFG)
        mel_steps = np.diff(features.hz_to_mel(centers))
        np.testing.assert_allclose(mel_steps, mel_steps[0], atol=1e-9)

    def test_peak_bins_strictly_increase(self):
        fb = features.mel_filterbank(CFG)
        peaks = fb.argmax(axis=1)
        assert np.all(np.diff(peaks) > 0)

    def test_too_many_filters_rejected(self):
        with pytest.raises(ConfigError):
            features.mel_filterbank(FeatureConfig(n_mels=256))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            FeatureConfig(fft_size=256).validate(SR)  # < 400-sample frame
        with pytest.raises(ConfigError):
            FeatureConfig(fft_size=500).validate(SR)  # not a power of two
        with pytest.raises(ConfigError):
            FeatureConfig(fmax_hz=9000.0).validate(SR)  # above Nyquist
        with pytest.raises(ConfigError):
            FeatureConfig(n_mels=0).validate(SR)
        with pytest.raises(ConfigError):
            FeatureConfig(log_floor=0.0).validate(SR)


class TestLogMel:
    def test_shapes_and_dtype(self):
        audio = AudioBuffer(np.zeros(16000, dtype=np.float32))
        seq = features.log_mel(audio, CFG, source_id="sil")
        assert seq.frames.shape == (98, 40)
        assert seq.frames.dtype == np.float32
        assert seq.source_id == "sil"
        assert len(seq) == 98

    def test_silence_hits_log_floor(self):
        seq = features.log_mel(AudioBuffer(np.zeros(4000)))
        np.testing.assert_allclose(seq.frames, np.float32(np.log(1e-10)))

    def test_normalization_is_affine(self):
        rng = np.random.default_rng(3)
        audio = AudioBuffer(0.1 * rng.normal(size=8000))
        raw = features.log_mel(audio, CFG)
        cfg = features.FeatureConfig(norm_shift=-10.0, norm_scale=8.0)
        normed = features.log_mel(audio, cfg)
        np.testing.assert_allclose(
            normed.frames, (raw.frames.astype(np.float64) + 10.0) / 8.0,
            atol=1e-6)

    def test_bad_norm_scale_rejected(self):
        with pytest.raises(ConfigError):
            features.FeatureConfig(norm_scale=0.0).validate(16000)

    def test_short_audio_gives_empty_sequence(self):
        seq = features.log_mel(AudioBuffer(np.zeros(399)))
        assert seq.frames.shape == (0, 40)

    def test_sine_energy_lands_in_matching_filter(self):
        t = np.arange(SR) / SR
        audio = AudioBuffer(0.5 * np.sin(2 * np.pi * 1000.0 * t))
        seq = features.log_mel(audio, CFG)
        strongest = int(seq.frames.mean(axis=0).argmax())
        center = features.filter_center_freqs(CFG)[strongest]
        assert abs(center - 1000.0) < 150.0

    def test_impulse_stays_in_covering_frames(self):
        samples = np.zeros(4000)
        samples[200] = 0.9  # inside windows starting at 0 and 160 only
        seq = features.log_mel(AudioBuffer(samples))
        floor = np.float32(np.log(1e-10))
        assert np.any(seq.frames[0] > floor)
        assert np.any(seq.frames[1] > floor)
        np.testing.assert_array_equal(seq.frames[2:], floor)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        samples = rng.uniform(-0.5, 0.5, 8000)
        a = features.log_mel(AudioBuffer(samples)).frames
        b = features.log_mel(AudioBuffer(samples)).frames
        np.testing.assert_array_equal(a, b)


class TestAudioBuffer:
    def test_rejects_2d(self):
        with pytest.raises(FormatError):
            AudioBuffer(np.zeros((2, 100)))

    def test_rejects_nan(self):
        with pytest.raises(FormatError):
            AudioBuffer(np.array([0.0, np.nan]))

    def test_duration(self):
        assert AudioBuffer(np.zeros(8000)).duration_s == pytest.approx(0.5)


class TestWavIo:
    def test_round_trip_exact_for_representable_values(self, tmp_path):
        path = tmp_path / "a" / "t.wav"
        samples = np.array([0.0, 0.25, -0.5, 12345 / 32767.0], dtype=np.float64)
        wavio.write_wav(path, samples, SR)
        back, rate = wavio.read_wav(path)
        assert rate == SR
        assert back.dtype == np.float32
        # stored as round(x * 32767) / 32768
        expected = np.rint(samples * 32767.0) / 32768.0
        np.testing.assert_allclose(back, expected, atol=1e-7)

    def test_full_scale_clips_not_wraps(self, tmp_path):
        path = tmp_path / "t.wav"
        wavio.write_wav(path, np.array([1.0, -1.0, -1.5]), SR)
        back, _ = wavio.read_wav(path)
        assert back[0] == pytest.approx(32767 / 32768.0)
        assert back[1] == pytest.approx(-32767 / 32768.0)
        assert back[2] == -1.0  # clipped to the int16 floor, no wraparound

    def test_nonfinite_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            wavio.write_wav(tmp_path / "t.wav", np.array([np.inf]), SR)

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(SR)
            wf.writeframes(b"\x00\x00" * 32)
        with pytest.raises(FormatError):
            wavio.read_wav(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"not a wav at all")
        with pytest.raises(FormatError):
            wavio.read_wav(path)


class TestSeeding:
    def test_substream_reproducible_and_tag_sensitive(self):
        a = substream(7, "mtr", 3).normal(size=5)
        b = substream(7, "mtr", 3).normal(size=5)
        c = substream(7, "mtr", 4).normal(size=5)
        d = substream(8, "mtr", 3).normal(size=5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_streams_independent_of_creation_order(self):
        first = substream(1, "x").normal()
        _ = substream(1, "y").normal()
        second = substream(1, "x").normal()
        assert first == second

    def test_tensor_checksum_tracks_content_and_names(self):
        w = np.arange(6, dtype=np.float32).reshape(2, 3)
        base = tensor_checksum([("w", w)])
        assert tensor_checksum([("w", w.copy())]) == base
        assert tensor_checksum([("v", w)]) != base
        w2 = w.copy()
        w2[0, 0] += 1
        assert tensor_checksum([("w", w2)]) != base
