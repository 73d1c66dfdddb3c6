"""Two-pass silence removal for stem tracks.

Pass 1 drops regions more than 30 dB below the track's peak, pass 2 re-runs
at 60 dB relative to the merged track's own (recomputed) peak. Frames that
overlap any loud frame are kept, so musical onsets at region boundaries
survive intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip, db_rel_peak
from .errors import SilentAudioError

FRAME_LEN = 4096
FRAME_HOP = 1024
PASS1_REL_DB = 30.0
PASS2_REL_DB = 60.0


@dataclass
class SilenceMap:
    """Sorted, non-overlapping half-open [start, end) intervals judged silent."""

    regions: list[tuple[int, int]]
    n_samples: int

    def __post_init__(self):
        prev_end = 0
        for start, end in self.regions:
            if start < prev_end or end <= start or end > self.n_samples:
                raise ValueError(f"invalid silence region ({start}, {end})")
            prev_end = end

    @property
    def total_silent(self) -> int:
        return sum(end - start for start, end in self.regions)


def detect_silence(clip: AudioClip, rel_db: float = PASS1_REL_DB,
                   frame_len: int = FRAME_LEN, hop: int = FRAME_HOP) -> SilenceMap:
    """Mark every sample not covered by any frame whose max-abs reaches threshold.

    The threshold is rel_db below the clip's peak; a frame is loud when the
    max absolute sample across both channels is >= that threshold. An all-zero
    clip is one full-length silent region.
    """
    n = clip.n_samples
    if n == 0:
        raise ValueError("empty clip")
    if clip.peak == 0.0:
        return SilenceMap([(0, n)], n)
    threshold = db_rel_peak(clip, rel_db)

    env = np.max(np.abs(clip.samples), axis=0)
    keep = np.zeros(n, dtype=bool)
    for start in range(0, n, hop):
        frame = env[start:start + frame_len]
        if frame.max() >= threshold:
            keep[start:start + frame_len] = True
        if start + frame_len >= n:
            break

    regions = []
    silent = ~keep
    edges = np.flatnonzero(np.diff(silent.astype(np.int8)))
    bounds = np.concatenate([[0], edges + 1, [n]])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if silent[lo]:
            regions.append((int(lo), int(hi)))
    return SilenceMap(regions, n)


def remove_and_merge(clip: AudioClip, silence: SilenceMap) -> AudioClip:
    """Concatenate the non-silent intervals, in order, into one track."""
    if silence.n_samples != clip.n_samples:
        raise ValueError("silence map does not match clip length")
    if silence.total_silent == clip.n_samples:
        raise SilentAudioError("silence map covers the entire clip")
    keep = np.ones(clip.n_samples, dtype=bool)
    for start, end in silence.regions:
        keep[start:end] = False
    return AudioClip(clip.samples[:, keep], clip.sample_rate)


def trim_silence_two_pass(clip: AudioClip) -> AudioClip:
    """Remove-and-merge at 30 dB rel-peak, then again at 60 dB on the result.

    The second pass recomputes the peak from the merged track, which matters
    for stems whose loudest content sits well below full scale. A fully
    silent stem raises SilentAudioError.
    """
    if clip.peak == 0.0:
        raise SilentAudioError("stem is digitally silent")
    merged = remove_and_merge(clip, detect_silence(clip, PASS1_REL_DB))
    return remove_and_merge(merged, detect_silence(merged, PASS2_REL_DB))
