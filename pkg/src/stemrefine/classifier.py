"""Multi-label instrument recognition with self-refining.

Training draws a fresh random mixture for every minibatch item, feeds the
stereo linear-magnitude spectrogram through a small conv net with a 4-way
sigmoid head, and minimizes mean absolute error against the pseudo-labels.
Inference slides a 2.97 s window (hop = window/4) over the -14 LUFS
normalized track and averages the sigmoid outputs; labels are decided by a
0.9 threshold. Self-refining retrains on the relabeled data and re-labels
the original corpus each iteration.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import audio, augment, nnet
from .audio import AudioClip
from .corpus import CLASSES, CorpusManifest, StemEntry, StemLabel, label_error_rate
from .errors import DataError, NumericsError

log = logging.getLogger(__name__)

_DATA_STREAM = 2  # rng stream id for per-step batch synthesis


@dataclass
class ClassifierConfig:
    segment_s: float = 2.97
    fft_size: int = 2048
    hop: int = 512
    steps: int = 300
    batch: int = 8
    lr: float = 2e-3
    threshold: float = 0.9
    chance_rate: float = augment.DEFAULT_CHANCE_RATE
    target_lufs: float = -14.0
    freq_pool: int = 8
    time_pool: int = 4
    channels: tuple[int, int, int] = (12, 24, 48)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        for name in ("segment_s", "fft_size", "hop", "steps", "batch", "lr", "chance_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def window_len(self) -> int:
        return int(round(self.segment_s * audio.DEFAULT_SAMPLE_RATE))

    @property
    def window_hop(self) -> int:
        return self.window_len // 4


def build_classifier_net(cfg: ClassifierConfig, seed: int) -> nnet.Network:
    """3 conv blocks over a pooled spectrogram, then a frequency-aware head.

    The head averages over time only and flattens (channels x freq bands)
    into the dense layer: a fully position-blind global pool cannot separate
    classes that differ mainly by absolute frequency.
    """
    c1, c2, c3 = cfg.channels
    f_bands = ((1 + cfg.fft_size // 2) // cfg.freq_pool) // 8  # 3 maxpools halve thrice
    spec = [
        {"kind": "avgpool", "ph": cfg.freq_pool, "pw": cfg.time_pool},
        {"kind": "log1p"},
        {"kind": "conv2d", "in_ch": 2, "out_ch": c1, "ksize": 3},
        {"kind": "relu"},
        {"kind": "maxpool2"},
        {"kind": "conv2d", "in_ch": c1, "out_ch": c2, "ksize": 3},
        {"kind": "relu"},
        {"kind": "maxpool2"},
        {"kind": "conv2d", "in_ch": c2, "out_ch": c3, "ksize": 3},
        {"kind": "relu"},
        {"kind": "maxpool2"},
        {"kind": "tmean_flat"},
        {"kind": "dense", "n_in": c3 * f_bands, "n_out": 4},
        {"kind": "sigmoid"},
    ]
    return nnet.Network.from_spec(spec, seed)


def features(clip: AudioClip, cfg: ClassifierConfig, normalize: bool = True) -> np.ndarray:
    """Stereo linear-magnitude spectrogram of a loudness-normalized clip."""
    if normalize and clip.peak > 0.0:
        gain = audio.loudness_normalization_gain(clip, cfg.target_lufs, verify=False)
        clip = clip.gain(gain)
    return audio.stft_magnitudes(clip, cfg.fft_size, cfg.hop)


def train_classifier(manifest: CorpusManifest, cfg: ClassifierConfig, seed: int,
                     workdir: Path | None = None) -> nnet.TrainState:
    """Train on freshly synthesized random mixtures; deterministic given seed."""
    pools = augment.StemPools(manifest, which="assigned")
    net = build_classifier_net(cfg, seed)
    opt = nnet.Optimizer(net, nnet.OptimizerConfig(lr=cfg.lr, mode="adam"))
    state = nnet.TrainState(net=net, opt=opt, seed=seed,
                            extra={"kind": "classifier", "cfg": _cfg_json(cfg)})
    run_training(state, pools, cfg, workdir)
    return state


def run_training(state: nnet.TrainState, pools: augment.StemPools,
                 cfg: ClassifierConfig, workdir: Path | None = None) -> None:
    """Advance a classifier train state to cfg.steps (resumable)."""
    base_lr = cfg.lr
    while state.step_count < cfg.steps:
        step = state.step_count
        # linear decay to 25% over the run keeps the L1 loss from bouncing late
        state.opt.cfg.lr = base_lr * (1.0 - 0.75 * step / cfg.steps)
        rng = nnet.step_rng(state.seed, _DATA_STREAM, step)
        xs, ys = [], []
        for _ in range(cfg.batch):
            mix = augment.random_mix(pools, cfg.chance_rate, cfg.segment_s, rng)
            xs.append(features(mix.audio, cfg))
            ys.append(mix.pseudo_label.as_array())
        x = np.stack(xs)
        y = np.stack(ys)
        pred = state.net.forward(x)
        loss, dpred = nnet.l1_loss(pred, y)
        if not math.isfinite(loss):
            if workdir is not None:
                nnet.save_checkpoint(state, Path(workdir) / "diverged.ckpt")
            raise NumericsError(f"classifier training diverged at step {step}")
        state.net.backward(dpred)
        state.opt.step(state.net)
        state.step_count += 1
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("stage=train_classifier step=%d loss=%.4f", step, loss)


def infer_track(state: nnet.TrainState, clip: AudioClip, cfg: ClassifierConfig) -> np.ndarray:
    """Window-averaged class scores for a whole track.

    The track is normalized to the target loudness once, then cut into
    segment-sized windows with a hop of one quarter window; the last partial
    window is zero-padded. Returns the 4 per-class mean sigmoid scores.
    """
    if clip.peak == 0.0:
        log.warning("infer_track: silent clip, scores computed on raw zeros")
    elif clip.n_samples > 0:
        clip = audio.normalize_loudness(clip, cfg.target_lufs)

    win, hop = cfg.window_len, cfg.window_hop
    n = clip.n_samples
    if n <= win:
        n_windows = 1
    else:
        n_windows = math.ceil((n - win) / hop) + 1
    feats = []
    for i in range(n_windows):
        seg = clip.samples[:, i * hop:i * hop + win]
        if seg.shape[1] < win:
            seg = np.pad(seg, ((0, 0), (0, win - seg.shape[1])))
        feats.append(features(AudioClip(seg, clip.sample_rate), cfg, normalize=False))
    scores = state.net.forward(np.stack(feats))
    return scores.mean(axis=0)


def decide_labels(scores: np.ndarray, threshold: float) -> StemLabel:
    """Thresholded decision: bit i set iff scores[i] >= threshold.

    May return an empty label; callers check .is_empty for disposition.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return StemLabel.from_bits(tuple(bool(s >= threshold) for s in scores))


@dataclass
class RefineResult:
    manifest: CorpusManifest
    scores: list[dict]   # per input entry: id, scores, decision
    dropped: list[str]   # entry ids relabeled to the empty label


def refine_dataset(state: nnet.TrainState, manifest: CorpusManifest,
                   cfg: ClassifierConfig, threshold: float | None = None) -> RefineResult:
    """Replace every assigned label with the classifier's decision.

    Entries whose every score falls below the threshold are dropped (and
    reported); provenance records the old label and the scores.
    """
    threshold = cfg.threshold if threshold is None else threshold
    entries, score_rows, dropped = [], [], []
    for e in manifest.entries:
        clip = manifest.load_clip(e)
        scores = infer_track(state, clip, cfg)
        label = decide_labels(scores, threshold)
        score_rows.append({"id": e.id, "scores": [round(float(s), 6) for s in scores],
                           "decision": label.to_json()})
        if label.is_empty:
            dropped.append(e.id)
            continue
        prov = list(e.provenance)
        prov.append({"op": "refine", "from": e.assigned_label.to_json(),
                     "scores": [round(float(s), 6) for s in scores],
                     "threshold": threshold})
        entries.append(StemEntry(
            id=e.id, audio_path=e.audio_path, assigned_label=label,
            song_id=e.song_id, duration_s=e.duration_s,
            true_label=e.true_label, provenance=prov,
        ))
    if dropped:
        log.info("stage=refine dropped=%d ids=%s", len(dropped), ",".join(dropped))
    refined = CorpusManifest(entries, split=manifest.split, seed=manifest.seed,
                             corruption=manifest.corruption, root=manifest.root)
    return RefineResult(refined, score_rows, dropped)


@dataclass
class RefineIteration:
    index: int                    # 1-based; index k trains on the (k-1)-refined data
    state: nnet.TrainState
    manifest: CorpusManifest      # the ORIGINAL corpus relabeled by this model
    dropped: int
    label_error: float | None     # vs ground truth, counting drops as errors


def _iteration_error(original: CorpusManifest, result: RefineResult) -> float | None:
    if any(e.true_label is None for e in original.entries):
        return None
    wrong = len(result.dropped)
    for e in result.manifest.entries:
        wrong += e.assigned_label != e.true_label
    return wrong / len(original.entries)


def self_refine(manifest: CorpusManifest, cfg: ClassifierConfig, n_iters: int,
                seed: int, workdir: Path | None = None,
                threshold: float | None = None) -> list[RefineIteration]:
    """Iterate train-then-relabel n_iters times.

    Iteration 1 trains on the noisy manifest as-is; iteration k > 1 trains on
    the previous iteration's relabeling restricted to single-labeled entries.
    Every iteration re-labels the original manifest. Models and manifests are
    persisted under workdir when given.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    iterations: list[RefineIteration] = []
    train_manifest = manifest
    for k in range(1, n_iters + 1):
        if k > 1:
            train_manifest = iterations[-1].manifest.single_labeled()
            counts = {CLASSES[c]: len(v) for c, v in train_manifest.by_class("assigned").items()}
            empty = [name for name, n in counts.items() if n == 0]
            if empty:
                raise DataError(
                    f"self-refine iteration {k}: refined pools emptied for {empty} (counts {counts})")
        iter_seed = int(np.random.SeedSequence((seed, k)).generate_state(1)[0])
        state = train_classifier(train_manifest, cfg, iter_seed)
        result = refine_dataset(state, manifest, cfg, threshold=threshold)
        err = _iteration_error(manifest, result)
        iterations.append(RefineIteration(
            index=k, state=state, manifest=result.manifest,
            dropped=len(result.dropped), label_error=err))
        log.info("stage=self_refine iter=%d dropped=%d label_error=%s",
                 k, len(result.dropped), "n/a" if err is None else f"{err:.4f}")
        if workdir is not None:
            it_dir = Path(workdir)
            it_dir.mkdir(parents=True, exist_ok=True)
            nnet.save_checkpoint(state, it_dir / f"classifier_iter{k}.ckpt")
            save_manifest_rebased(result.manifest, it_dir / f"refined_iter{k}.jsonl")
            _dump_scores(result.scores, it_dir / f"scores_iter{k}.jsonl")
    return iterations


def save_manifest_rebased(manifest: CorpusManifest, path: Path) -> None:
    """Save a manifest whose audio paths stay valid from the new location."""
    path = Path(path)
    rebased = []
    for e in manifest.entries:
        full = manifest.audio_full_path(e)
        rebased.append(replace(e, audio_path=os.path.relpath(full, path.parent)))
    CorpusManifest(rebased, manifest.split, manifest.seed, manifest.corruption,
                   root=path.parent).save(path)


def _dump_scores(rows: list[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _cfg_json(cfg: ClassifierConfig) -> dict:
    rec = dict(cfg.__dict__)
    rec["channels"] = list(cfg.channels)
    return rec


def config_from_checkpoint(state: nnet.TrainState) -> ClassifierConfig:
    """Rebuild the training-time config stored in a checkpoint."""
    rec = dict(state.extra.get("cfg") or {})
    if not rec:
        return ClassifierConfig()
    rec["channels"] = tuple(rec["channels"])
    return ClassifierConfig(**rec)
