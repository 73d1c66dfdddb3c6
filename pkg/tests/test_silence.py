"""Two-pass silence removal."""

import numpy as np
import pytest

from stemrefine import silence
from stemrefine.audio import AudioClip
from stemrefine.errors import SilentAudioError

SR = 44100


def seg(amp, seconds, freq=220.0):
    t = np.arange(int(seconds * SR)) / SR
    x = amp * np.sin(2 * np.pi * freq * t)
    return np.vstack([x, x])


class TestDetectSilence:
    def test_loud_quiet_loud_marks_middle(self):
        # 0.0001 < 10^(-30/20) = 0.0316 rel peak 1.0
        clip = AudioClip(np.concatenate([seg(1.0, 1), seg(0.0001, 1), seg(1.0, 1)], axis=1))
        m = silence.detect_silence(clip, rel_db=30.0)
        assert len(m.regions) == 1
        start, end = m.regions[0]
        # boundaries conservative: within one frame of the exact second marks
        assert abs(start - SR) <= silence.FRAME_LEN
        assert abs(end - 2 * SR) <= silence.FRAME_LEN
        assert start >= SR and end <= 2 * SR + silence.FRAME_LEN

    def test_all_above_threshold_empty_map(self):
        clip = AudioClip(seg(0.5, 1.0))
        assert silence.detect_silence(clip, 30.0).regions == []

    def test_all_zero_clip_single_full_region(self):
        clip = AudioClip(np.zeros((2, 5 * SR // 10)))
        m = silence.detect_silence(clip, 30.0)
        assert m.regions == [(0, clip.n_samples)]

    def test_silence_criterion_uses_max_abs_of_both_channels(self):
        # loud content only in the right channel must still mark the frame loud
        n = SR
        x = np.zeros((2, n))
        x[1, :] = 0.5
        x[0, :] = 0.0001
        m = silence.detect_silence(AudioClip(x), 30.0)
        assert m.regions == []


class TestRemoveAndMerge:
    def test_empty_map_identity(self):
        clip = AudioClip(seg(0.5, 0.7))
        out = silence.remove_and_merge(clip, silence.SilenceMap([], clip.n_samples))
        assert np.array_equal(out.samples, clip.samples)

    def test_full_map_errors(self):
        clip = AudioClip(seg(0.5, 0.5))
        with pytest.raises(SilentAudioError):
            silence.remove_and_merge(clip, silence.SilenceMap([(0, clip.n_samples)], clip.n_samples))

    def test_concatenation_is_sample_exact(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 0.5, (2, 9000))
        clip = AudioClip(x)
        m = silence.SilenceMap([(1000, 2000), (5000, 5500)], 9000)
        out = silence.remove_and_merge(clip, m)
        expected = np.concatenate([x[:, :1000], x[:, 2000:5000], x[:, 5500:]], axis=1)
        assert np.array_equal(out.samples, expected)
        assert out.n_samples == 9000 - 1000 - 500


class TestTwoPass:
    def test_hand_constructed_quiet_stem(self):
        # loudest content -40 dBFS; gaps at -90 dBFS. Pass 1 threshold is
        # 30 dB below peak (= -70 dBFS): removes only the -90 dBFS gaps?
        # No: -90 < -70 so pass 1 already removes them; construct gaps at
        # -65 dBFS instead: pass 1 keeps them (-65 > -70), pass 2 at 60 dB
        # below the new peak (= -100 dBFS) keeps them too. Use -90 for pass-1
        # removal and a second tier at -65 to verify it survives both passes.
        a_loud = 10 ** (-40 / 20)
        a_mid = 10 ** (-65 / 20)
        a_gap = 10 ** (-90 / 20)
        clip = AudioClip(np.concatenate(
            [seg(a_loud, 1), seg(a_gap, 1), seg(a_mid, 1), seg(a_loud, 1)], axis=1))
        out = silence.trim_silence_two_pass(clip)
        # the -90 dB gap is removed, everything else kept
        assert out.n_samples == pytest.approx(3 * SR, abs=2 * silence.FRAME_LEN)

    def test_second_pass_uses_recomputed_peak(self):
        # gaps at -75 dBFS with peak -40 dBFS: pass 1 threshold -70 dBFS
        # removes them. If gaps are at -68 dBFS they survive pass 1, and pass
        # 2 (60 dB below recomputed -40 peak = -100) keeps them: the result
        # changes only if the peak is recomputed, which this asserts via the
        # -102 dBFS tier that pass 2 must remove.
        a_loud = 10 ** (-40 / 20)
        a_keep = 10 ** (-68 / 20)
        a_cut = 10 ** (-102 / 20)
        clip = AudioClip(np.concatenate(
            [seg(a_loud, 1), seg(a_keep, 1), seg(a_cut, 1), seg(a_loud, 1)], axis=1))
        out = silence.trim_silence_two_pass(clip)
        assert out.n_samples == pytest.approx(3 * SR, abs=2 * silence.FRAME_LEN)

    def test_continuous_loud_clip_unchanged(self):
        clip = AudioClip(seg(0.7, 2.0))
        out = silence.trim_silence_two_pass(clip)
        assert np.array_equal(out.samples, clip.samples)

    def test_fully_silent_stem_raises(self):
        with pytest.raises(SilentAudioError):
            silence.trim_silence_two_pass(AudioClip(np.zeros((2, SR))))

    def test_output_has_only_boundary_residue(self):
        rng = np.random.default_rng(1)
        pieces = []
        for i in range(6):
            pieces.append(seg(0.5, 0.4, freq=300 + 40 * i))
            pieces.append(seg(0.00001, 0.3))
        clip = AudioClip(np.concatenate(pieces, axis=1))
        out = silence.trim_silence_two_pass(clip)
        residue = silence.detect_silence(out, silence.PASS2_REL_DB)
        for start, end in residue.regions:
            assert end - start < 2 * silence.FRAME_LEN

    def test_length_monotone_and_deterministic(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 0.2, (2, 3 * SR))
        x[:, SR:SR + 8000] *= 1e-5
        clip = AudioClip(x)
        out1 = silence.trim_silence_two_pass(clip)
        out2 = silence.trim_silence_two_pass(clip)
        assert out1.n_samples <= clip.n_samples
        assert np.array_equal(out1.samples, out2.samples)
