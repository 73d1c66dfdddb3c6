"""Audio core: WAV I/O, STFT/iSTFT, decibel math, BS.1770 loudness."""

import math

import numpy as np
import pytest

from stemrefine import audio
from stemrefine.audio import AudioClip
from stemrefine.errors import AudioFormatError, SilentAudioError

SR = 44100


def sine_clip(freq=997.0, seconds=3.0, amp=1.0, both_channels=False, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    tone = amp * np.sin(2 * np.pi * freq * t)
    other = tone if both_channels else np.zeros_like(tone)
    return AudioClip(np.vstack([tone, other]), sr)


def noise_clip(seconds=1.0, amp=0.1, seed=0, sr=SR):
    rng = np.random.default_rng(seed)
    return AudioClip(rng.normal(0.0, amp, (2, int(seconds * sr))), sr)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

class TestWavIO:
    def test_float32_roundtrip_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        samples = rng.normal(0, 0.3, (2, SR)).astype(np.float32)
        clip = AudioClip(samples, SR)
        audio.write_wav(clip, tmp_path / "x.wav", fmt="float32")
        back = audio.read_wav(tmp_path / "x.wav")
        assert back.sample_rate == SR
        assert np.array_equal(back.samples, samples.astype(np.float64))

    def test_pcm16_roundtrip_within_one_lsb(self, tmp_path):
        rng = np.random.default_rng(2)
        clip = AudioClip(rng.uniform(-0.95, 0.95, (2, SR // 2)), SR)
        audio.write_wav(clip, tmp_path / "x.wav", fmt="pcm16")
        back = audio.read_wav(tmp_path / "x.wav")
        assert np.max(np.abs(back.samples - clip.samples)) <= 1.0 / 32767

    def test_mono_upmix_duplicates_channel(self, tmp_path):
        # hand-built mono PCM16 file
        import struct
        n = 1000
        mono = (np.sin(np.linspace(0, 20, n)) * 20000).astype("<i2")
        payload = mono.tobytes()
        header = b"WAVE" + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, SR, SR * 2, 2, 16)
        header += b"data" + struct.pack("<I", len(payload))
        with open(tmp_path / "mono.wav", "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", len(header) + len(payload)) + header + payload)
        clip = audio.read_wav(tmp_path / "mono.wav")
        assert clip.samples.shape[0] == 2
        assert np.array_equal(clip.samples[0], clip.samples[1])

    def test_strict_rate_mismatch_rejected(self, tmp_path):
        clip = AudioClip(np.zeros((2, 48000)) + 0.1, sample_rate=48000)
        audio.write_wav(clip, tmp_path / "x.wav")
        with pytest.raises(AudioFormatError, match="sample rate"):
            audio.read_wav(tmp_path / "x.wav", strict_rate=44100)

    def test_malformed_header_rejected(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"NOTRIFFxxxxWAVE" + b"\0" * 64)
        with pytest.raises(AudioFormatError):
            audio.read_wav(tmp_path / "bad.wav")

    def test_unsupported_bit_depth_rejected(self, tmp_path):
        import struct
        header = b"WAVE" + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, SR, SR * 6, 6, 24)
        header += b"data" + struct.pack("<I", 12) + b"\0" * 12
        with open(tmp_path / "x.wav", "wb") as fh:
            fh.write(b"RIFF" + struct.pack("<I", len(header) + 12) + header)
        with pytest.raises(AudioFormatError, match="unsupported codec"):
            audio.read_wav(tmp_path / "x.wav")


class TestAudioClip:
    def test_requires_two_channels(self):
        with pytest.raises(ValueError):
            AudioClip(np.zeros((1, 100)))
        with pytest.raises(ValueError):
            AudioClip(np.zeros((3, 100)))

    def test_rejects_non_finite(self):
        bad = np.zeros((2, 10))
        bad[0, 3] = np.nan
        with pytest.raises(ValueError):
            AudioClip(bad)


# ---------------------------------------------------------------------------
# STFT / iSTFT
# ---------------------------------------------------------------------------

class TestStft:
    def test_impulse_frame_magnitude_closed_form(self):
        # An impulse at the center of an analysis frame: the windowed frame is
        # w[c] * delta_c, whose DFT magnitude is the constant w[c].
        fft, hop = 256, 64
        n = 2048
        x = np.zeros((2, n))
        pad = fft // 2
        # frame t covers padded [t*hop, t*hop+fft); center sample index:
        t_frame = 8
        center_padded = t_frame * hop + fft // 2
        x[:, center_padded - pad] = 1.0
        spec = audio.stft(AudioClip(x), fft, hop)
        win = audio.hann_periodic(fft)
        expected = np.full(fft // 2 + 1, win[fft // 2])
        np.testing.assert_allclose(spec.mags[0, :, t_frame], expected, atol=1e-12)

    def test_zeros_give_zero_magnitudes(self):
        spec = audio.stft(AudioClip(np.zeros((2, 8192))), 2048, 512)
        assert np.all(spec.mags == 0.0)

    def test_roundtrip_3s_noise_default_params(self):
        clip = noise_clip(seconds=3.0, seed=3)
        rec = audio.istft(audio.stft(clip, 2048, 512))
        rel = np.linalg.norm(rec.samples - clip.samples) / np.linalg.norm(clip.samples)
        assert rel < 1e-6
        assert rec.n_samples == clip.n_samples

    def test_roundtrip_property_100_random_clips(self):
        # seeds logged via the loop index for reproducibility
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2048, 20000))
            fft = int(rng.choice([256, 512, 1024]))
            hop = fft // int(rng.choice([2, 4]))
            clip = AudioClip(rng.normal(0, 1, (2, n)))
            rec = audio.istft(audio.stft(clip, fft, hop))
            rel = np.linalg.norm(rec.samples - clip.samples) / np.linalg.norm(clip.samples)
            assert rel < 1e-6, f"seed={seed} fft={fft} hop={hop} n={n} rel={rel}"

    def test_framewise_parseval(self):
        # energy of each windowed frame matches its spectrum's energy
        fft, hop = 512, 128
        clip = noise_clip(seconds=0.5, seed=4)
        spec = audio.stft(clip, fft, hop)
        win = audio.hann_periodic(fft)
        pad = fft // 2
        x = np.pad(clip.samples, ((0, 0), (pad, pad)))
        t_check = [0, 3, 10, spec.n_frames - 1]
        for t in t_check:
            frame = x[0, t * hop:t * hop + fft]
            frame = np.pad(frame, (0, fft - frame.size)) * win
            time_energy = np.sum(frame ** 2)
            s = spec.mags[0, :, t] ** 2
            spec_energy = (s[0] + s[-1] + 2 * np.sum(s[1:-1])) / fft
            assert abs(time_energy - spec_energy) <= 1e-6 * max(time_energy, 1e-12)

    def test_too_short_clip_rejected(self):
        with pytest.raises(ValueError, match="shorter than one frame"):
            audio.stft(AudioClip(np.zeros((2, 100))), 2048, 512)

    def test_mags_shape_invariant(self):
        spec = audio.stft(noise_clip(0.5, seed=5), 1024, 256)
        assert spec.mags.shape[1] == 513
        assert spec.mags.shape == spec.phases.shape
        assert np.all(spec.mags >= 0)


# ---------------------------------------------------------------------------
# Loudness
# ---------------------------------------------------------------------------

class TestLoudness:
    def test_k_weighting_matches_published_48k_table(self):
        sos = audio.k_weighting_sos(48000)
        stage1 = [1.53512485958697, -2.69169618940638, 1.19839281085285,
                  1.0, -1.69065929318241, 0.73248077421585]
        stage2 = [1.0, -2.0, 1.0, 1.0, -1.99004745483398, 0.99007225036621]
        np.testing.assert_allclose(sos[0], stage1, atol=1e-9)
        np.testing.assert_allclose(sos[1], stage2, atol=1e-9)

    def test_997hz_single_channel_reference(self):
        # BS.1770-4 reference vector: 0 dBFS 997 Hz sine in one channel
        loud = audio.measure_loudness(sine_clip(997.0, 3.0, 1.0))
        assert abs(loud.lufs - (-3.01)) < 0.1

    def test_gain_linearity(self):
        clip = noise_clip(seconds=2.0, amp=0.2, seed=6)
        base = audio.measure_loudness(clip).lufs
        for g in (0.25, 0.5, 2.0):
            shifted = audio.measure_loudness(clip.gain(g)).lufs
            assert abs(shifted - (base + 20 * math.log10(g))) < 0.05

    def test_half_gain_drops_6db(self):
        clip = sine_clip(997.0, 2.0, 0.8, both_channels=True)
        a = audio.measure_loudness(clip).lufs
        b = audio.measure_loudness(clip.gain(0.5)).lufs
        assert abs((a - b) - 6.0206) < 0.05

    def test_silence_is_flagged_not_numeric(self):
        loud = audio.measure_loudness(AudioClip(np.zeros((2, SR))))
        assert loud.is_silent
        assert loud.lufs == float("-inf")

    def test_below_gate_counts_as_silent(self):
        quiet = noise_clip(seconds=1.0, amp=1e-6, seed=7)
        assert audio.measure_loudness(quiet).is_silent

    def test_too_short_clip_rejected(self):
        with pytest.raises(ValueError, match="gating block"):
            audio.measure_loudness(noise_clip(seconds=0.2, seed=8))


class TestNormalizeLoudness:
    def test_hits_target_within_tolerance(self):
        clip = noise_clip(seconds=2.0, amp=0.05, seed=9)
        out = audio.normalize_loudness(clip, -14.0)
        assert abs(audio.measure_loudness(out).lufs - (-14.0)) < 0.1

    def test_fixed_point_gain_near_unity(self):
        clip = audio.normalize_loudness(noise_clip(2.0, 0.1, seed=10), -14.0)
        gain = audio.loudness_normalization_gain(clip, -14.0)
        assert abs(gain - 1.0) < 0.012  # within 0.1 dB

    def test_minus_20_to_minus_14_gain(self):
        clip = audio.normalize_loudness(noise_clip(2.0, 0.1, seed=11), -20.0)
        gain = audio.loudness_normalization_gain(clip, -14.0)
        assert abs(gain - 10 ** (6 / 20)) < 0.02  # 1.99526...

    def test_pure_gain_preserves_shape(self):
        clip = noise_clip(2.0, 0.1, seed=12)
        out = audio.normalize_loudness(clip, -14.0)
        ratio = out.samples[clip.samples != 0] / clip.samples[clip.samples != 0]
        assert np.allclose(ratio, ratio[0])

    def test_idempotent(self):
        clip = noise_clip(2.0, 0.1, seed=13)
        once = audio.normalize_loudness(clip, -14.0)
        twice = audio.normalize_loudness(once, -14.0)
        assert abs(audio.measure_loudness(twice).lufs -
                   audio.measure_loudness(once).lufs) < 0.1

    def test_silent_input_rejected(self):
        with pytest.raises(SilentAudioError):
            audio.normalize_loudness(AudioClip(np.zeros((2, SR))), -14.0)


class TestDbRelPeak:
    def test_30db_below_unit_peak(self):
        x = np.zeros((2, 1000))
        x[0, 500] = 1.0
        assert abs(audio.db_rel_peak(AudioClip(x), 30.0) - 10 ** (-1.5)) < 1e-12

    def test_60db_below_half_peak(self):
        x = np.zeros((2, 1000))
        x[1, 10] = 0.5
        assert abs(audio.db_rel_peak(AudioClip(x), 60.0) - 0.0005) < 1e-15

    def test_zero_offset_returns_peak(self):
        clip = noise_clip(0.5, 0.3, seed=14)
        assert audio.db_rel_peak(clip, 0.0) == pytest.approx(clip.peak)

    def test_all_zero_rejected(self):
        with pytest.raises(SilentAudioError):
            audio.db_rel_peak(AudioClip(np.zeros((2, 100))), 30.0)
