"""Core audio containers and DSP: WAV I/O, STFT/iSTFT, decibel math, loudness.

Everything downstream moves audio around as :class:`AudioClip` (stereo
float64, 44.1 kHz by default). Loudness follows ITU-R BS.1770-4: two-stage
K-weighting, 400 ms blocks at 75% overlap, -70 LUFS absolute gate and
-10 LU relative gate.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy import signal

from .errors import AudioFormatError, SilentAudioError

DEFAULT_SAMPLE_RATE = 44100
DEFAULT_FFT_SIZE = 2048
DEFAULT_HOP = 512


def db_to_amp(db: float) -> float:
    """Convert a decibel value to a linear amplitude factor."""
    return 10.0 ** (db / 20.0)


def amp_to_db(amp: float) -> float:
    """Convert a linear amplitude to decibels. amp must be > 0."""
    return 20.0 * math.log10(amp)


@dataclass
class AudioClip:
    """Stereo sample buffer: samples shaped (2, n), linear amplitude."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise ValueError(f"expected (2, n) samples, got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if self.n_samples else 0.0

    def gain(self, factor: float) -> "AudioClip":
        """Return a copy scaled by a linear gain factor."""
        return AudioClip(self.samples * factor, self.sample_rate)


@dataclass
class Spectrogram:
    """Magnitude/phase STFT of a stereo clip; phases kept for reconstruction."""

    mags: np.ndarray    # (2, F, T), non-negative
    phases: np.ndarray  # (2, F, T), radians
    fft_size: int
    hop: int
    sample_rate: int
    n_samples: int      # original clip length, so istft can trim exactly

    def __post_init__(self):
        f_expected = self.fft_size // 2 + 1
        if self.mags.shape != self.phases.shape:
            raise ValueError("mags and phases shapes disagree")
        if self.mags.shape[1] != f_expected:
            raise ValueError(f"expected {f_expected} frequency bins, got {self.mags.shape[1]}")

    @property
    def n_frames(self) -> int:
        return self.mags.shape[2]

    def complex_spec(self) -> np.ndarray:
        return self.mags * np.exp(1j * self.phases)


@dataclass(frozen=True)
class Loudness:
    """Integrated loudness in LUFS; -inf only when nothing survives gating."""

    lufs: float

    @property
    def is_silent(self) -> bool:
        return self.lufs == float("-inf")


# ---------------------------------------------------------------------------
# WAV I/O (RIFF): PCM16 and IEEE float32 only, mono up-mixed to stereo.
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def read_wav(path, strict_rate: int | None = None) -> AudioClip:
    """Read a PCM16 or float32 WAV file as a stereo AudioClip.

    Mono files are up-mixed by channel duplication; more than 2 channels is
    rejected. With strict_rate set, a differing file sample rate is an error
    (no implicit resampling anywhere in the toolkit).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise AudioFormatError(f"{path}: truncated data chunk")
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or payload is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    codec, channels, rate, _byte_rate, _block_align, bits = fmt
    if codec == _WAVE_FORMAT_EXTENSIBLE:
        raise AudioFormatError(f"{path}: WAVE_FORMAT_EXTENSIBLE unsupported")
    if codec == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32767.0
    elif codec == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported codec {codec} / {bits}-bit")
    if channels < 1 or channels > 2:
        raise AudioFormatError(f"{path}: {channels} channels unsupported (need 1 or 2)")
    if strict_rate is not None and rate != strict_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} != required {strict_rate}")

    frames = raw.reshape(-1, channels).T
    if channels == 1:
        frames = np.vstack([frames, frames])
    return AudioClip(frames, sample_rate=rate)


def write_wav(clip: AudioClip, path, fmt: str = "float32") -> None:
    """Write a clip as stereo WAV; fmt is 'float32' or 'pcm16'."""
    if fmt == "float32":
        codec, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
        payload = clip.samples.T.astype("<f4").tobytes()
    elif fmt == "pcm16":
        codec, bits = _WAVE_FORMAT_PCM, 16
        clipped = np.clip(clip.samples.T, -1.0, 1.0)
        payload = np.round(clipped * 32767.0).astype("<i2").tobytes()
    else:
        raise ValueError(f"unsupported wav format {fmt!r}")
    channels = 2
    block_align = channels * bits // 8
    header = b"WAVE" + b"fmt " + struct.pack(
        "<IHHIIHH", 16, codec, channels, clip.sample_rate,
        clip.sample_rate * block_align, block_align, bits,
    ) + b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + len(header) - 4 + len(payload)))
        fh.write(header)
        fh.write(payload)


# ---------------------------------------------------------------------------
# STFT / iSTFT: periodic Hann, overlap-add with window-square normalization.
# ---------------------------------------------------------------------------

def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(clip: AudioClip, fft_size: int = DEFAULT_FFT_SIZE, hop: int = DEFAULT_HOP,
         window: np.ndarray | None = None) -> Spectrogram:
    """Short-time Fourier transform of a stereo clip.

    Frames are taken from a signal zero-padded by fft_size//2 on both sides,
    so every original sample is covered by enough windows for the inverse to
    be exact (not merely COLA-approximate).
    """
    spec = _stft_complex(clip, fft_size, hop, window)
    return Spectrogram(
        mags=np.abs(spec), phases=np.angle(spec), fft_size=fft_size, hop=hop,
        sample_rate=clip.sample_rate, n_samples=clip.n_samples)


def stft_magnitudes(clip: AudioClip, fft_size: int = DEFAULT_FFT_SIZE,
                    hop: int = DEFAULT_HOP, dtype=np.float32) -> np.ndarray:
    """Magnitude-only STFT (2, F, T); skips the phase computation that
    training features never use. Defaults to float32 (feature precision)."""
    spec = _stft_complex(clip, fft_size, hop, dtype=dtype)
    return np.abs(spec)


def _stft_complex(clip: AudioClip, fft_size: int, hop: int,
                  window: np.ndarray | None = None, dtype=np.float64) -> np.ndarray:
    if hop > fft_size:
        raise ValueError("hop must not exceed fft_size")
    if clip.n_samples < fft_size:
        raise ValueError(f"clip of {clip.n_samples} samples is shorter than one frame")
    win = hann_periodic(fft_size) if window is None else np.asarray(window, dtype=np.float64)
    win = win.astype(dtype)
    pad = fft_size // 2
    x = np.pad(clip.samples.astype(dtype), ((0, 0), (pad, pad)))
    n_frames = 1 + math.ceil((x.shape[1] - fft_size) / hop)
    total = (n_frames - 1) * hop + fft_size
    x = np.pad(x, ((0, 0), (0, total - x.shape[1])))
    strides = (x.strides[0], hop * x.strides[1], x.strides[1])
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(2, n_frames, fft_size), strides=strides)
    return scipy.fft.rfft(frames * win, axis=2, workers=2).transpose(0, 2, 1)


def istft_complex(spec_complex: np.ndarray, fft_size: int, hop: int,
                  n_samples: int, sample_rate: int = DEFAULT_SAMPLE_RATE,
                  window: np.ndarray | None = None) -> AudioClip:
    """Inverse STFT of a (2, F, T) complex array via windowed overlap-add
    divided by the window-square sum."""
    win = hann_periodic(fft_size) if window is None else np.asarray(window, dtype=np.float64)
    frames = scipy.fft.irfft(spec_complex.transpose(0, 2, 1), n=fft_size, axis=2)
    frames *= win

    n_frames = spec_complex.shape[2]
    total = (n_frames - 1) * hop + fft_size
    out = np.zeros((2, total))
    wsq = np.zeros(total)
    win_sq = win * win
    for t in range(n_frames):
        out[:, t * hop:t * hop + fft_size] += frames[:, t, :]
        wsq[t * hop:t * hop + fft_size] += win_sq
    nz = wsq > 1e-12
    out[:, nz] /= wsq[nz]

    pad = fft_size // 2
    out = out[:, pad:pad + n_samples]
    return AudioClip(out, sample_rate=sample_rate)


def istft(spec: Spectrogram, window: np.ndarray | None = None) -> AudioClip:
    """Inverse STFT of a Spectrogram; exact inverse of stft."""
    return istft_complex(spec.complex_spec(), spec.fft_size, spec.hop,
                         spec.n_samples, spec.sample_rate, window)


# ---------------------------------------------------------------------------
# BS.1770-4 loudness.
# ---------------------------------------------------------------------------

def k_weighting_sos(sample_rate: int) -> np.ndarray:
    """Second-order sections for the two-stage BS.1770 K-weighting filter.

    The analog prototypes (high-shelf then high-pass) are bilinear-transformed
    at the given rate; at 48 kHz this reproduces the coefficient table
    published in the standard.
    """
    # Stage 1: spherical-head high shelf.
    f0, gain_db, q = 1681.9744509555319, 3.999843853973347, 0.7071752369554193
    k = math.tan(math.pi * f0 / sample_rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = [(vh + vb * k / q + k * k) / a0,
               2.0 * (k * k - vh) / a0,
               (vh - vb * k / q + k * k) / a0]
    shelf_a = [1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0]

    # Stage 2: RLB weighting high-pass.
    f0, q = 38.13547087613982, 0.5003270373253953
    k = math.tan(math.pi * f0 / sample_rate)
    a0 = 1.0 + k / q + k * k
    hp_a = [1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0]
    hp_b = [1.0, -2.0, 1.0]

    return np.array([shelf_b + shelf_a, hp_b + hp_a])


_GATE_BLOCK_S = 0.400
_GATE_HOP_S = 0.100
_ABS_GATE_LUFS = -70.0
_REL_GATE_LU = 10.0
_LOUDNESS_OFFSET = -0.691


def _block_powers(clip: AudioClip) -> np.ndarray:
    """Per-gating-block mean-square power of the K-weighted signal."""
    step = int(round(_GATE_BLOCK_S * clip.sample_rate))
    hop = int(round(_GATE_HOP_S * clip.sample_rate))
    if clip.n_samples < step:
        raise ValueError(f"clip shorter than one {_GATE_BLOCK_S*1000:.0f} ms gating block")
    filtered = signal.sosfilt(k_weighting_sos(clip.sample_rate), clip.samples, axis=1)
    sq = np.sum(filtered * filtered, axis=0)  # channel weights are 1.0 for stereo
    csum = np.concatenate([[0.0], np.cumsum(sq)])
    n_blocks = (clip.n_samples - step) // hop + 1
    starts = np.arange(n_blocks) * hop
    return (csum[starts + step] - csum[starts]) / step


def measure_loudness(clip: AudioClip) -> Loudness:
    """Integrated loudness with absolute (-70 LUFS) and relative (-10 LU) gating.

    Digital silence (or a clip whose every block falls below the absolute
    gate) yields the distinguished silent result rather than a number.
    """
    if clip.peak == 0.0:
        return Loudness(float("-inf"))
    z = _block_powers(clip)
    loud = _LOUDNESS_OFFSET + 10.0 * np.log10(np.maximum(z, 1e-30))
    passed = z[loud > _ABS_GATE_LUFS]
    if passed.size == 0:
        return Loudness(float("-inf"))
    rel_gate = _LOUDNESS_OFFSET + 10.0 * math.log10(np.mean(passed)) - _REL_GATE_LU
    kept = z[(loud > _ABS_GATE_LUFS) & (loud > rel_gate)]
    if kept.size == 0:
        return Loudness(float("-inf"))
    return Loudness(_LOUDNESS_OFFSET + 10.0 * math.log10(np.mean(kept)))


def loudness_normalization_gain(clip: AudioClip, target_lufs: float,
                                verify: bool = True) -> float:
    """Linear gain that brings the clip to the target integrated loudness.

    With verify, one correction pass re-measures after the initial gain,
    because gating can shift once levels move relative to the absolute gate.
    """
    measured = measure_loudness(clip)
    if measured.is_silent:
        raise SilentAudioError("cannot normalize silent audio")
    gain = db_to_amp(target_lufs - measured.lufs)
    if verify:
        check = measure_loudness(clip.gain(gain))
        if not check.is_silent and abs(check.lufs - target_lufs) > 0.02:
            gain *= db_to_amp(target_lufs - check.lufs)
    return gain


def normalize_loudness(clip: AudioClip, target_lufs: float = -14.0) -> AudioClip:
    """Apply a pure gain so the result measures target_lufs (+- 0.1 LU)."""
    return clip.gain(loudness_normalization_gain(clip, target_lufs))


def db_rel_peak(clip: AudioClip, offset_db: float) -> float:
    """Amplitude threshold offset_db below the clip's maximum peak amplitude."""
    peak = clip.peak
    if peak == 0.0:
        raise SilentAudioError("all-zero clip has no peak to reference")
    return peak * 10.0 ** (-offset_db / 20.0)
