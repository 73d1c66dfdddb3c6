"""Classification metrics, threshold sweeps, and SDR evaluation.

Classification follows two protocols: single-label (each test stem judged
against its ground-truth bits) and multi-label (randomly mixed test mixtures
judged against the OR of their true labels). SDR is an energy-ratio measure
per 1 s frame, reported as the median over frames per track and the median
over tracks per stem.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import audio, augment, classifier, nnet, separator
from .audio import AudioClip
from .corpus import CLASSES, CorpusManifest
from .errors import DataError, SilentAudioError

log = logging.getLogger(__name__)

SDR_CAP_DB = 100.0


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    """Per-class confusion counts with derived metrics, plus macro averages."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls) -> "ClassMetrics":
        z = np.zeros(len(CLASSES), dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    def add(self, predicted: np.ndarray, true: np.ndarray) -> None:
        predicted = np.asarray(predicted, dtype=bool)
        true = np.asarray(true, dtype=bool)
        self.tp += predicted & true
        self.fp += predicted & ~true
        self.tn += ~predicted & ~true
        self.fn += ~predicted & true

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.tn + self.fn

    def _safe_div(self, num, den) -> np.ndarray:
        den = np.asarray(den, dtype=np.float64)
        return np.divide(num, den, out=np.zeros(len(CLASSES)), where=den > 0)

    @property
    def accuracy(self) -> np.ndarray:
        return self._safe_div(self.tp + self.tn, self.total)

    @property
    def precision(self) -> np.ndarray:
        return self._safe_div(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> np.ndarray:
        return self._safe_div(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> np.ndarray:
        p, r = self.precision, self.recall
        return self._safe_div(2 * p * r, p + r)

    @property
    def avg_accuracy(self) -> float:
        return float(self.accuracy.mean())

    @property
    def avg_f1(self) -> float:
        return float(self.f1.mean())

    @property
    def avg_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def avg_recall(self) -> float:
        return float(self.recall.mean())

    def to_json(self) -> dict:
        return {
            "classes": list(CLASSES),
            "tp": self.tp.tolist(), "fp": self.fp.tolist(),
            "tn": self.tn.tolist(), "fn": self.fn.tolist(),
            "accuracy": [round(v, 6) for v in self.accuracy],
            "precision": [round(v, 6) for v in self.precision],
            "recall": [round(v, 6) for v in self.recall],
            "f1": [round(v, 6) for v in self.f1],
            "avg": {"accuracy": round(self.avg_accuracy, 6),
                    "f1": round(self.avg_f1, 6),
                    "precision": round(self.avg_precision, 6),
                    "recall": round(self.avg_recall, 6)},
        }


def _entry_scores(state: nnet.TrainState, manifest: CorpusManifest,
                  cfg: classifier.ClassifierConfig) -> tuple[np.ndarray, np.ndarray]:
    """Window-averaged scores and true-label bits for every manifest entry."""
    scores, truths = [], []
    for e in manifest.entries:
        if e.true_label is None:
            raise DataError(f"entry {e.id} has no ground-truth label")
        clip = manifest.load_clip(e)
        scores.append(classifier.infer_track(state, clip, cfg))
        truths.append(e.true_label.as_array())
    return np.array(scores), np.array(truths, dtype=bool)


def eval_classifier_single(state: nnet.TrainState, test_manifest: CorpusManifest,
                           cfg: classifier.ClassifierConfig,
                           threshold: float | None = None) -> ClassMetrics:
    """Single-label protocol: each stem scored as 4 binary presence decisions."""
    if not test_manifest.entries:
        raise DataError("empty test manifest")
    threshold = cfg.threshold if threshold is None else threshold
    scores, truths = _entry_scores(state, test_manifest, cfg)
    metrics = ClassMetrics.zeros()
    for s, t in zip(scores, truths):
        metrics.add(classifier.decide_labels(s, threshold).bits, t)
    return metrics


def eval_classifier_multi(state: nnet.TrainState, test_manifest: CorpusManifest,
                          cfg: classifier.ClassifierConfig, n_mixtures: int = 500,
                          threshold: float | None = None, seed: int = 0) -> ClassMetrics:
    """Multi-label protocol: synthesize mixtures over TRUE labels and score
    each against the OR of its contributors."""
    if n_mixtures < 1:
        raise ValueError("n_mixtures must be >= 1")
    threshold = cfg.threshold if threshold is None else threshold
    pools = augment.StemPools(test_manifest, which="true")
    metrics = ClassMetrics.zeros()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))
    for _ in range(n_mixtures):
        mix = augment.random_mix(pools, cfg.chance_rate, cfg.segment_s, rng)
        scores = classifier.infer_track(state, mix.audio, cfg)
        metrics.add(classifier.decide_labels(scores, threshold).bits,
                    mix.pseudo_label.bits)
    return metrics


def pr_curves(state: nnet.TrainState, test_manifest: CorpusManifest,
              cfg: classifier.ClassifierConfig,
              thresholds: list[float]) -> dict[str, list[tuple[float, float, float]]]:
    """Per-class (threshold, precision, recall) sweeps from one scoring pass.

    Recall is checked to be non-increasing in the threshold; that is a
    mathematical property of >= decisions and any violation is a bug.
    """
    scores, truths = _entry_scores(state, test_manifest, cfg)
    curves: dict[str, list[tuple[float, float, float]]] = {}
    for c, name in enumerate(CLASSES):
        series = []
        prev_recall = math.inf
        for t in thresholds:
            pred = scores[:, c] >= t
            tp = int(np.sum(pred & truths[:, c]))
            fp = int(np.sum(pred & ~truths[:, c]))
            fn = int(np.sum(~pred & truths[:, c]))
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            if recall > prev_recall + 1e-12:
                raise AssertionError("recall increased with threshold")
            prev_recall = recall
            series.append((t, precision, recall))
        curves[name] = series
    return curves


def adaptive_thresholds(scores: np.ndarray, true_labels: np.ndarray) -> np.ndarray:
    """Per-class threshold maximizing F1 over the observed score candidates.

    Ties break toward the LOWER threshold, which favors recall. A class with
    no positive examples has no defined F1 optimum and raises.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(true_labels, dtype=bool)
    if scores.ndim != 2 or scores.shape[1] != len(CLASSES):
        raise ValueError("scores must be (N, 4)")
    out = np.zeros(len(CLASSES))
    for c in range(len(CLASSES)):
        if not truths[:, c].any():
            raise DataError(f"class {CLASSES[c]} has no positive examples")
        best_f1, best_t = -1.0, None
        for t in sorted(set(scores[:, c])):
            pred = scores[:, c] >= t
            tp = int(np.sum(pred & truths[:, c]))
            fp = int(np.sum(pred & ~truths[:, c]))
            fn = int(np.sum(~pred & truths[:, c]))
            f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
            if f1 > best_f1 + 1e-12:  # strict improvement: ties keep the lower t
                best_f1, best_t = f1, t
        out[c] = best_t
    return out


# ---------------------------------------------------------------------------
# SDR
# ---------------------------------------------------------------------------

@dataclass
class TrackSdr:
    frame_sdrs: np.ndarray
    median: float


def compute_sdr(reference: AudioClip, estimate: AudioClip, frame_s: float = 1.0) -> TrackSdr:
    """Energy-ratio SDR per frame: 10*log10(|s|^2 / |s - s_hat|^2).

    Frames whose reference energy is negligible relative to the loudest frame
    are skipped; a perfect frame is capped at +100 dB. The track value is the
    median over the surviving frames.
    """
    if reference.n_samples != estimate.n_samples:
        raise ValueError("reference and estimate lengths differ")
    flen = int(round(frame_s * reference.sample_rate))
    n_frames = reference.n_samples // flen
    if n_frames == 0:
        raise ValueError("clip shorter than one SDR frame")
    ref = reference.samples[:, :n_frames * flen].reshape(2, n_frames, flen)
    est = estimate.samples[:, :n_frames * flen].reshape(2, n_frames, flen)
    ref_energy = np.sum(ref * ref, axis=(0, 2))
    err = ref - est
    err_energy = np.sum(err * err, axis=(0, 2))

    # Relative silence threshold keeps the measure scale-consistent.
    active = ref_energy > 1e-12 * ref_energy.max()
    if not active.any():
        raise SilentAudioError("reference is silent in every frame")
    sdrs = np.empty(int(active.sum()))
    for i, (se, ee) in enumerate(zip(ref_energy[active], err_energy[active])):
        if ee <= se * 10.0 ** (-SDR_CAP_DB / 10.0):
            sdrs[i] = SDR_CAP_DB
        else:
            sdrs[i] = 10.0 * math.log10(se / ee)
    return TrackSdr(frame_sdrs=sdrs, median=float(np.median(sdrs)))


@dataclass
class SdrReport:
    """Median-of-frames per track, median-of-tracks per stem, mean of stems."""

    per_track: dict[str, dict[str, float]]
    per_stem: dict[str, float] = field(default_factory=dict)
    average: float = 0.0

    def to_json(self) -> dict:
        return {"per_track": self.per_track, "per_stem": self.per_stem,
                "average": self.average}


def aggregate_sdr(per_track: dict[str, dict[str, float]]) -> SdrReport:
    """per_track: track id -> {stem name -> median-over-frames SDR}."""
    if not per_track:
        raise DataError("no tracks to aggregate")
    per_stem = {}
    for name in CLASSES:
        values = [v[name] for v in per_track.values()]
        per_stem[name] = float(np.median(values))
    average = float(np.mean([per_stem[name] for name in CLASSES]))
    return SdrReport(per_track=per_track, per_stem=per_stem, average=average)


def evaluate_separation(state: nnet.TrainState, test_manifest: CorpusManifest,
                        cfg: separator.SeparatorConfig, frame_s: float = 1.0) -> SdrReport:
    """Separate every test song's mixture and report the SDR aggregation.

    The mixture is loudness-normalized for the model (as at training time)
    and the estimates are scaled back so they are compared against the
    references at their native level.
    """
    by_song: dict[str, dict[str, AudioClip]] = {}
    for e in test_manifest.entries:
        if e.true_label is None or not e.true_label.is_single:
            raise DataError("separation eval needs a clean single-labeled test corpus")
        by_song.setdefault(e.song_id, {})[e.true_label.names[0]] = test_manifest.load_clip(e)

    per_track: dict[str, dict[str, float]] = {}
    for song_id, stems in sorted(by_song.items()):
        if set(stems) != set(CLASSES):
            log.warning("separation eval: song %s missing stems, skipped", song_id)
            continue
        n = min(c.n_samples for c in stems.values())
        mixture = AudioClip(np.sum([stems[name].samples[:, :n] for name in CLASSES], axis=0))
        gain = audio.loudness_normalization_gain(mixture, cfg.target_lufs)
        estimates = separator.separate(state, mixture.gain(gain), cfg)
        row = {}
        for name in CLASSES:
            est = estimates.by_class()[name].gain(1.0 / gain)
            ref = AudioClip(stems[name].samples[:, :n])
            row[name] = compute_sdr(ref, est, frame_s).median
        per_track[song_id] = row
    return aggregate_sdr(per_track)
