"""Dataset model: stem labels, manifests, a synthetic corpus generator, and
the label-corruption simulator used to study refinement under known noise.

A corpus lives in a directory with an ``audio/<song>/<stem>.wav`` tree and a
line-delimited JSON manifest. Synthetic corpora carry ground-truth labels so
label error rates can be measured; ingested WAV directories carry only the
labels implied by their filenames.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import audio
from .audio import AudioClip
from .errors import DataError

log = logging.getLogger(__name__)

CLASSES = ("vocals", "bass", "drums", "other")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class StemLabel:
    """Multi-hot presence over (vocals, bass, drums, other)."""

    bits: tuple[bool, bool, bool, bool]

    @classmethod
    def single(cls, name: str) -> "StemLabel":
        if name not in CLASSES:
            raise ValueError(f"unknown stem class {name!r}")
        return cls(tuple(c == name for c in CLASSES))

    @classmethod
    def from_bits(cls, bits) -> "StemLabel":
        bits = tuple(bool(b) for b in bits)
        if len(bits) != 4:
            raise ValueError("a label has exactly 4 bits")
        return cls(bits)

    def __or__(self, other: "StemLabel") -> "StemLabel":
        return StemLabel(tuple(a or b for a, b in zip(self.bits, other.bits)))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c for c, b in zip(CLASSES, self.bits) if b)

    @property
    def count(self) -> int:
        return sum(self.bits)

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    @property
    def is_single(self) -> bool:
        return self.count == 1

    @property
    def is_multi(self) -> bool:
        return self.count > 1

    def to_json(self) -> list[int]:
        return [int(b) for b in self.bits]

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    def __str__(self) -> str:
        return "+".join(self.names) if self.names else "(none)"


@dataclass
class StemEntry:
    """One stem recording with its currently assigned label.

    true_label is available only for synthetic corpora (it is what corruption
    and refinement are measured against); provenance accumulates every label
    change with the evidence that caused it.
    """

    id: str
    audio_path: str
    assigned_label: StemLabel
    song_id: str
    duration_s: float
    true_label: StemLabel | None = None
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.assigned_label.is_empty:
            raise ValueError(f"entry {self.id}: assigned label must have at least one bit")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "audio_path": self.audio_path,
            "song_id": self.song_id,
            "duration_s": self.duration_s,
            "assigned_label": self.assigned_label.to_json(),
            "true_label": self.true_label.to_json() if self.true_label else None,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "StemEntry":
        return cls(
            id=rec["id"],
            audio_path=rec["audio_path"],
            assigned_label=StemLabel.from_bits(rec["assigned_label"]),
            song_id=rec["song_id"],
            duration_s=float(rec["duration_s"]),
            true_label=StemLabel.from_bits(rec["true_label"]) if rec.get("true_label") else None,
            provenance=list(rec.get("provenance", [])),
        )


@dataclass
class CorpusManifest:
    entries: list[StemEntry]
    split: str = "train"
    seed: int | None = None
    corruption: dict | None = None
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest entry ids are not unique")

    def audio_full_path(self, entry: StemEntry) -> Path:
        p = Path(entry.audio_path)
        if p.is_absolute():
            return p
        if self.root is None:
            raise DataError("manifest has no root directory to resolve relative paths")
        return self.root / p

    def load_clip(self, entry: StemEntry) -> AudioClip:
        return audio.read_wav(self.audio_full_path(entry), strict_rate=audio.DEFAULT_SAMPLE_RATE)

    def by_class(self, which: str = "assigned") -> dict[int, list[StemEntry]]:
        """Partition entries into per-class pools; multi-labeled entries join
        the pool of every set bit."""
        pools: dict[int, list[StemEntry]] = {i: [] for i in range(len(CLASSES))}
        for e in self.entries:
            label = e.assigned_label if which == "assigned" else e.true_label
            if label is None:
                raise DataError(f"entry {e.id} has no {which} label")
            for i, bit in enumerate(label.bits):
                if bit:
                    pools[i].append(e)
        return pools

    def single_labeled(self) -> "CorpusManifest":
        kept = [e for e in self.entries if e.assigned_label.is_single]
        return CorpusManifest(kept, self.split, self.seed, self.corruption, self.root)

    def multi_labeled(self) -> "CorpusManifest":
        kept = [e for e in self.entries if e.assigned_label.is_multi]
        return CorpusManifest(kept, self.split, self.seed, self.corruption, self.root)

    def save(self, path) -> None:
        path = Path(path)
        header = {
            "manifest_version": MANIFEST_VERSION,
            "split": self.split,
            "seed": self.seed,
            "corruption": self.corruption,
            "n_entries": len(self.entries),
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for e in self.entries:
                fh.write(json.dumps(e.to_json()) + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "CorpusManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty manifest")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: bad manifest header") from exc
        if header.get("manifest_version") != MANIFEST_VERSION:
            raise DataError(f"{path}: unsupported manifest version {header.get('manifest_version')}")
        entries = [StemEntry.from_json(json.loads(ln)) for ln in lines[1:]]
        manifest = cls(
            entries=entries,
            split=header.get("split", "train"),
            seed=header.get("seed"),
            corruption=header.get("corruption"),
            root=path.parent,
        )
        if check_files:
            for e in entries:
                if not manifest.audio_full_path(e).exists():
                    raise DataError(f"{path}: missing audio file for entry {e.id}")
        return manifest


def label_error_rate(manifest: CorpusManifest) -> float:
    """Fraction of entries whose assigned label disagrees with ground truth."""
    if not manifest.entries:
        raise DataError("empty manifest")
    wrong = 0
    for e in manifest.entries:
        if e.true_label is None:
            raise DataError(f"entry {e.id} has no true label; error rate is undefined")
        wrong += e.assigned_label != e.true_label
    return wrong / len(manifest.entries)


# ---------------------------------------------------------------------------
# Synthetic corpus generation. The four classes are built to be acoustically
# separable: bass lives below 150 Hz, vocals are vibrato sweeps in 200-800 Hz,
# "other" holds sustained triads in 300-2000 Hz, drums are band-passed noise
# bursts a few kHz up.
# ---------------------------------------------------------------------------

def _pan_stereo(mono: np.ndarray, pos: float) -> np.ndarray:
    """Constant-power pan; pos in [0, 1], 0.5 is center."""
    theta = pos * np.pi / 2.0
    return np.vstack([mono * np.cos(theta), mono * np.sin(theta)]) * np.sqrt(2.0)


def _synth_vocals(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    n_ctrl = max(int(n / sr / 0.5) + 2, 4)
    ctrl = rng.uniform(np.log(200.0), np.log(800.0), n_ctrl)
    base = np.exp(np.interp(t, np.linspace(0, n / sr, n_ctrl), ctrl))
    vib_rate = rng.uniform(5.0, 7.0)
    vib_depth = rng.uniform(0.02, 0.04)
    freq = base * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t))
    phase = 2 * np.pi * np.cumsum(freq) / sr
    lfo = 0.75 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return np.sin(phase) * lfo * rng.uniform(0.12, 0.25)


def _synth_bass(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    out = np.zeros(n)
    amp = rng.uniform(0.15, 0.3)
    pos = 0
    phase0 = 0.0
    while pos < n:
        seg = int(rng.uniform(0.4, 0.8) * sr)
        freq = rng.uniform(45.0, 140.0)
        idx = np.arange(min(seg, n - pos))
        tone = np.sin(phase0 + 2 * np.pi * freq * idx / sr)
        env = np.minimum(idx / (0.01 * sr), 1.0) * (1.0 - 0.3 * idx / max(len(idx), 1))
        out[pos:pos + len(idx)] = tone * env * amp
        phase0 = (phase0 + 2 * np.pi * freq * len(idx) / sr) % (2 * np.pi)
        pos += seg
    return out


def _synth_drums(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    lo = rng.uniform(1500.0, 3000.0)
    hi = rng.uniform(6000.0, 10000.0)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    noise = signal.sosfilt(sos, rng.normal(0.0, 1.0, n))
    env = np.zeros(n)
    pos = int(rng.uniform(0, 0.2) * sr)
    while pos < n:
        tau = rng.uniform(0.03, 0.08) * sr
        length = min(int(4 * tau), n - pos)
        env[pos:pos + length] = np.maximum(env[pos:pos + length],
                                           np.exp(-np.arange(length) / tau))
        pos += int(rng.uniform(0.25, 0.5) * sr)
    burst = noise * env
    peak = np.max(np.abs(burst))
    if peak > 0:
        burst /= peak
    return burst * rng.uniform(0.2, 0.4)


def _synth_other(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    out = np.zeros(n)
    amp = rng.uniform(0.10, 0.20)
    ramp = int(0.02 * sr)
    pos = 0
    while pos < n:
        seg = min(int(rng.uniform(1.0, 2.0) * sr), n - pos)
        # roots overlap the top of the vocal sweep band a little: enough
        # confusability that label noise leaves visible (recoverable) errors,
        # not so much that noisy training collapses the two classes
        root = rng.uniform(500.0, 1000.0)
        ratios = [1.0, 1.25, 1.5]
        idx = np.arange(seg)
        chord = sum(np.sin(2 * np.pi * root * r * idx / sr + rng.uniform(0, 2 * np.pi))
                    for r in ratios) / len(ratios)
        env = np.ones(seg)
        m = min(ramp, seg // 2)
        env[:m] = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
        env[seg - m:] = env[:m][::-1]
        out[pos:pos + seg] = chord * env * amp
        pos += seg
    return out


_SYNTHESIZERS = {
    "vocals": _synth_vocals,
    "bass": _synth_bass,
    "drums": _synth_drums,
    "other": _synth_other,
}


def gen_synthetic_corpus(out_dir, n_songs: int, duration_s: float = 10.0,
                         seed: int = 0, split: str = "train") -> CorpusManifest:
    """Generate n_songs x 4 single-labeled stems plus a manifest under out_dir.

    Deterministic given seed: every stem draws from its own seed stream keyed
    by (seed, song, class), so regeneration is byte-identical regardless of
    order.
    """
    if n_songs < 1:
        raise ValueError("n_songs must be >= 1")
    out_dir = Path(out_dir)
    sr = audio.DEFAULT_SAMPLE_RATE
    n = int(round(duration_s * sr))
    entries = []
    for song_idx in range(n_songs):
        song_id = f"s{song_idx:04d}"
        song_dir = out_dir / "audio" / song_id
        song_dir.mkdir(parents=True, exist_ok=True)
        for class_idx, cls_name in enumerate(CLASSES):
            rng = np.random.default_rng(np.random.SeedSequence((seed, song_idx, class_idx)))
            mono = _SYNTHESIZERS[cls_name](rng, n, sr)
            stereo = _pan_stereo(mono, rng.uniform(0.35, 0.65))
            rel = f"audio/{song_id}/{cls_name}.wav"
            clip = AudioClip(stereo.astype(np.float32), sr)
            audio.write_wav(clip, out_dir / rel, fmt="float32")
            label = StemLabel.single(cls_name)
            entries.append(StemEntry(
                id=f"{song_id}_{cls_name}",
                audio_path=rel,
                assigned_label=label,
                song_id=song_id,
                duration_s=duration_s,
                true_label=label,
            ))
    manifest = CorpusManifest(entries, split=split, seed=seed, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# Label corruption: swaps simulate human mislabeling, bleeds simulate leakage
# of another stem of the same song into the recording.
# ---------------------------------------------------------------------------

def corrupt_labels(manifest: CorpusManifest, swap_rate: float, bleed_rate: float,
                   seed: int, out_dir) -> CorpusManifest:
    """Return a corrupted copy of a synthetic manifest under out_dir.

    Swap: with probability swap_rate the assigned label becomes a different
    single-hot label (ground truth untouched). Bleed: with probability
    bleed_rate another stem of the same song is loudness-matched and mixed in
    at a level drawn from [-12, -6] dB; ground truth gains that stem's bits
    while the assigned label keeps the original single bit.
    """
    if not 0.0 <= swap_rate <= 1.0 or not 0.0 <= bleed_rate <= 1.0:
        raise ValueError("swap_rate and bleed_rate must be in [0, 1]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_song: dict[str, list[StemEntry]] = {}
    for e in manifest.entries:
        if e.true_label is None:
            raise DataError(f"entry {e.id} lacks a true label; corruption needs a synthetic corpus")
        by_song.setdefault(e.song_id, []).append(e)

    new_entries = []
    for idx, e in enumerate(manifest.entries):
        rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
        assigned = e.assigned_label
        true = e.true_label
        prov = list(e.provenance)
        rel_path = os.path.relpath(manifest.audio_full_path(e), out_dir)

        if rng.random() < swap_rate:
            others = [c for c in CLASSES if StemLabel.single(c) != assigned]
            assigned = StemLabel.single(others[int(rng.integers(len(others)))])
            prov.append({"op": "swap", "from": e.assigned_label.to_json()})

        if rng.random() < bleed_rate:
            donors = [d for d in by_song[e.song_id] if d.id != e.id]
            donor = donors[int(rng.integers(len(donors)))]
            level_db = float(rng.uniform(-12.0, -6.0))
            recipient = manifest.load_clip(e)
            donor_clip = manifest.load_clip(donor)
            target = audio.measure_loudness(recipient)
            matched = audio.normalize_loudness(donor_clip, target.lufs)
            m = min(recipient.n_samples, matched.n_samples)
            mixed = recipient.samples[:, :m] + matched.samples[:, :m] * audio.db_to_amp(level_db)
            rel_path = f"audio/{e.song_id}/{e.id.split('_', 1)[1]}_bleed.wav"
            (out_dir / rel_path).parent.mkdir(parents=True, exist_ok=True)
            audio.write_wav(AudioClip(mixed.astype(np.float32), recipient.sample_rate),
                            out_dir / rel_path, fmt="float32")
            true = true | donor.true_label
            prov.append({"op": "bleed", "donor": donor.id, "level_db": round(level_db, 3)})

        new_entries.append(StemEntry(
            id=e.id, audio_path=rel_path, assigned_label=assigned,
            song_id=e.song_id, duration_s=e.duration_s,
            true_label=true, provenance=prov,
        ))

    corrupted = CorpusManifest(
        new_entries, split=manifest.split, seed=seed,
        corruption={"swap_rate": swap_rate, "bleed_rate": bleed_rate, "seed": seed},
        root=out_dir,
    )
    corrupted.save(out_dir / "manifest.jsonl")
    return corrupted


def ingest_wav_directory(root) -> CorpusManifest:
    """Build a manifest from a song/<stem>.wav directory tree.

    Labels come from filenames; there is no ground truth. Missing stems are
    reported per song and unreadable files skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    entries = []
    song_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for song_dir in song_dirs:
        song_id = song_dir.name
        for cls_name in CLASSES:
            wav = song_dir / f"{cls_name}.wav"
            if not wav.exists():
                log.warning("ingest: song=%s missing stem %s", song_id, cls_name)
                continue
            try:
                clip = audio.read_wav(wav, strict_rate=audio.DEFAULT_SAMPLE_RATE)
            except (DataError, OSError) as exc:
                log.warning("ingest: skipping unreadable %s (%s)", wav, exc)
                continue
            entries.append(StemEntry(
                id=f"{song_id}_{cls_name}",
                audio_path=str(wav.relative_to(root)),
                assigned_label=StemLabel.single(cls_name),
                song_id=song_id,
                duration_s=clip.duration_s,
            ))
    if not entries:
        raise DataError(f"no stems found under {root}")
    return CorpusManifest(entries, split="train", root=root)
