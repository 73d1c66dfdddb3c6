"""Desk-scale mask-based source separation trained on refined manifests.

The model predicts four per-class sigmoid masks on a pooled grid of the
mixture's log-magnitude spectrogram; masks are upsampled to full resolution
and applied to the mixture magnitudes with the mixture phases. Training
mixes one single-labeled stem per class, or (with probability p) swaps in a
multi-labeled source whose estimated stems are summed before the loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from . import audio, nnet
from .audio import AudioClip
from .corpus import CLASSES, CorpusManifest, StemEntry
from .errors import DataError, NumericsError

log = logging.getLogger(__name__)

_DATA_STREAM = 3
MODES = ("standard", "single-only", "finetune-multi")


@dataclass
class SeparatorConfig:
    p_multi: float = 0.4
    segment_s: float | None = None  # None: 3 s for time_l1, 6 s for tf_mse
    loss_domain: str = "tf_mse"     # "time_l1" or "tf_mse"
    steps: int = 500
    batch: int = 4
    lr: float = 2e-3
    target_lufs: float = -14.0
    fft_size: int = 2048
    hop: int = 512
    freq_pool: int = 16
    time_pool: int = 4
    channels: tuple[int, int] = (16, 32)
    finetune_phase1_frac: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.p_multi <= 1.0:
            raise ValueError("p_multi must be in [0, 1]")
        if self.loss_domain not in ("time_l1", "tf_mse"):
            raise ValueError(f"unknown loss domain {self.loss_domain!r}")

    @property
    def resolved_segment_s(self) -> float:
        if self.segment_s is not None:
            return self.segment_s
        return 3.0 if self.loss_domain == "time_l1" else 6.0

    @property
    def segment_len(self) -> int:
        return int(round(self.resolved_segment_s * audio.DEFAULT_SAMPLE_RATE))


@dataclass
class StemEstimates:
    """Per-class estimates, time-aligned with the input mixture."""

    vocals: AudioClip
    bass: AudioClip
    drums: AudioClip
    other: AudioClip

    def by_class(self) -> dict[str, AudioClip]:
        return {"vocals": self.vocals, "bass": self.bass,
                "drums": self.drums, "other": self.other}


def build_separator_net(cfg: SeparatorConfig, seed: int) -> nnet.Network:
    c1, c2 = cfg.channels
    spec = [
        {"kind": "avgpool", "ph": cfg.freq_pool, "pw": cfg.time_pool},
        {"kind": "log1p"},
        {"kind": "conv2d", "in_ch": 2, "out_ch": c1, "ksize": 3},
        {"kind": "relu"},
        {"kind": "conv2d", "in_ch": c1, "out_ch": c2, "ksize": 3},
        {"kind": "relu"},
        {"kind": "conv2d", "in_ch": c2, "out_ch": 8, "ksize": 1},
        {"kind": "sigmoid"},
    ]
    return nnet.Network.from_spec(spec, seed)


# ---------------------------------------------------------------------------
# Mask geometry: the net works on a (F//fp, T//tp) grid; masks are nearest-
# neighbor upsampled with edge replication for the remainder rows/columns.
# ---------------------------------------------------------------------------

def upsample_masks(grid: np.ndarray, fp: int, tp: int, f: int, t: int) -> np.ndarray:
    up = np.repeat(np.repeat(grid, fp, axis=-2), tp, axis=-1)
    pad_f = f - up.shape[-2]
    pad_t = t - up.shape[-1]
    pad = [(0, 0)] * (up.ndim - 2) + [(0, pad_f), (0, pad_t)]
    return np.pad(up, pad, mode="edge")


def upsample_masks_adjoint(dmask: np.ndarray, fp: int, tp: int, fg: int, tg: int) -> np.ndarray:
    lead = dmask.shape[:-2]
    f, t = dmask.shape[-2], dmask.shape[-1]
    d1 = dmask[..., :tg * tp].reshape(*lead, f, tg, tp).sum(axis=-1)
    if t > tg * tp:
        d1[..., :, -1] += dmask[..., tg * tp:].sum(axis=-1)
    d2 = d1[..., :fg * fp, :].reshape(*lead, fg, fp, tg).sum(axis=-2)
    if f > fg * fp:
        d2[..., -1, :] += d1[..., fg * fp:, :].sum(axis=-2)
    return d2


def predict_masks(net: nnet.Network, mags: np.ndarray, cfg: SeparatorConfig) -> np.ndarray:
    """(B, 2, F, T) magnitudes -> (B, 4, 2, F, T) masks in [0, 1]."""
    b, _, f, t = mags.shape
    grid = net.forward(mags)
    grid = grid.reshape(b, 4, 2, grid.shape[2], grid.shape[3])
    return upsample_masks(grid, cfg.freq_pool, cfg.time_pool, f, t)


def masks_backward(net: nnet.Network, dmask: np.ndarray, cfg: SeparatorConfig) -> None:
    b = dmask.shape[0]
    fg = dmask.shape[-2] // cfg.freq_pool
    tg = dmask.shape[-1] // cfg.time_pool
    dgrid = upsample_masks_adjoint(dmask, cfg.freq_pool, cfg.time_pool, fg, tg)
    net.backward(dgrid.reshape(b, 8, fg, tg))


def apply_masks(spec: audio.Spectrogram, masks: np.ndarray) -> StemEstimates:
    """masks (4, 2, F, T) applied to the mixture magnitudes, mixture phases."""
    complex_mix = spec.complex_spec()
    clips = []
    for c in range(4):
        est = audio.istft_complex(masks[c] * complex_mix, spec.fft_size, spec.hop,
                                  spec.n_samples, spec.sample_rate)
        clips.append(est)
    return StemEstimates(*clips)


def separate(state: nnet.TrainState, mixture: AudioClip, cfg: SeparatorConfig) -> StemEstimates:
    """Separate a mixture (already normalized to cfg.target_lufs) into 4 stems."""
    spec = audio.stft(mixture, cfg.fft_size, cfg.hop)
    masks = predict_masks(state.net, spec.mags[None], cfg)[0]
    est = apply_masks(spec, masks)
    for clip in est.by_class().values():
        if not np.all(np.isfinite(clip.samples)):
            raise NumericsError("separator produced non-finite estimates")
    return est


# ---------------------------------------------------------------------------
# Training examples. A plan is drawn first (cheap, testable label algebra),
# then rendered into audio.
# ---------------------------------------------------------------------------

@dataclass
class ExamplePick:
    classes: frozenset[int]        # the classes this target covers
    entry: StemEntry | None        # None: silent placeholder for an empty pool
    offset_u: float


@dataclass
class ExamplePlan:
    picks: list[ExamplePick]
    used_multi: bool

    @property
    def grouping(self) -> list[frozenset[int]]:
        return [p.classes for p in self.picks]


class SeparatorPools:
    def __init__(self, manifest: CorpusManifest):
        self.manifest = manifest
        self.single = {c: [] for c in range(len(CLASSES))}
        for e in manifest.entries:
            if e.assigned_label.is_single:
                self.single[e.assigned_label.bits.index(True)].append(e)
        self.multi = [e for e in manifest.entries if e.assigned_label.is_multi]
        for c, pool in self.single.items():
            if not pool:
                log.warning("separator: single-labeled pool %s is empty; "
                            "that stem will be silent in training mixtures", CLASSES[c])


def draw_example_plan(pools: SeparatorPools, p_multi: float,
                      rng: np.random.Generator) -> ExamplePlan:
    use_multi = bool(pools.multi) and rng.random() < p_multi
    picks: list[ExamplePick] = []
    covered: frozenset[int] = frozenset()
    if use_multi:
        entry = pools.multi[int(rng.integers(len(pools.multi)))]
        covered = frozenset(i for i, b in enumerate(entry.assigned_label.bits) if b)
        picks.append(ExamplePick(covered, entry, float(rng.random())))
    for c in range(len(CLASSES)):
        if c in covered:
            continue
        pool = pools.single[c]
        if pool:
            entry = pool[int(rng.integers(len(pool)))]
            picks.append(ExamplePick(frozenset([c]), entry, float(rng.random())))
        else:
            picks.append(ExamplePick(frozenset([c]), None, 0.0))
    return ExamplePlan(picks, use_multi)


def render_example(plan: ExamplePlan, manifest: CorpusManifest,
                   cfg: SeparatorConfig) -> tuple[AudioClip, list[np.ndarray]]:
    """Mixture plus one target waveform per plan pick (mixture = sum of targets)."""
    from .augment import _load_clip_cached, extract_segment

    seg_len = cfg.segment_len
    targets = []
    for pick in plan.picks:
        if pick.entry is None:
            targets.append(np.zeros((2, seg_len)))
            continue
        clip = _load_clip_cached(str(manifest.audio_full_path(pick.entry)))
        targets.append(extract_segment(clip, pick.offset_u, seg_len))
    mixture = AudioClip(np.sum(targets, axis=0))
    return mixture, targets


def make_training_example(pools: SeparatorPools, cfg: SeparatorConfig, rng: np.random.Generator,
                          p_multi: float | None = None):
    """Draw and render one training example: (mixture, targets, grouping)."""
    p = cfg.p_multi if p_multi is None else p_multi
    plan = draw_example_plan(pools, p, rng)
    mixture, targets = render_example(plan, pools.manifest, cfg)
    return mixture, targets, plan.grouping


# ---------------------------------------------------------------------------
# Summed-stem loss.
# ---------------------------------------------------------------------------

def _check_grouping(grouping: list[frozenset[int]]) -> None:
    flat = [c for g in grouping for c in g]
    if sorted(flat) != list(range(len(CLASSES))):
        raise ValueError(f"grouping {grouping} is not a partition of the 4 classes")


def training_loss_with_grad(estimates: np.ndarray, targets: list[np.ndarray],
                            grouping: list[frozenset[int]],
                            loss_domain: str) -> tuple[float, np.ndarray]:
    """Per grouped target, loss between the summed estimates and the target;
    the final loss is the sum over groups. Returns (loss, d/d estimates)."""
    _check_grouping(grouping)
    if len(targets) != len(grouping):
        raise ValueError("targets and grouping lengths disagree")
    total = 0.0
    grads = np.zeros_like(estimates)
    for group, target in zip(grouping, targets):
        est = sum(estimates[c] for c in group)
        diff = est - target
        if loss_domain == "time_l1":
            total += float(np.mean(np.abs(diff)))
            g = np.sign(diff) / diff.size
        elif loss_domain == "tf_mse":
            total += float(np.mean(diff * diff))
            g = 2.0 * diff / diff.size
        else:
            raise ValueError(f"unknown loss domain {loss_domain!r}")
        for c in group:
            grads[c] += g
    return total, grads


def training_loss(estimates: np.ndarray, targets: list[np.ndarray],
                  grouping: list[frozenset[int]], loss_domain: str) -> float:
    return training_loss_with_grad(estimates, targets, grouping, loss_domain)[0]


# ---------------------------------------------------------------------------
# iSTFT adjoint, for backpropagating a time-domain loss into the masks.
# ---------------------------------------------------------------------------

def istft_adjoint(gy: np.ndarray, fft_size: int, hop: int, n_frames: int,
                  n_samples: int) -> np.ndarray:
    """Adjoint of the (2, F, T) complex -> (2, n) istft_complex map.

    Returns gS such that, as a real-linear map, <istft(S), gy> equals
    Re<S, gS> summed over bins. Imaginary parts of the DC and Nyquist bins
    are zeroed because irfft never reads them.
    """
    win = audio.hann_periodic(fft_size)
    total = (n_frames - 1) * hop + fft_size
    wsq = np.zeros(total)
    win_sq = win * win
    for t in range(n_frames):
        wsq[t * hop:t * hop + fft_size] += win_sq
    pad = fft_size // 2

    g_full = np.zeros((2, total))
    g_full[:, pad:pad + n_samples] = gy
    nz = wsq > 1e-12
    g_full[:, nz] /= wsq[nz]
    g_full[:, ~nz] = 0.0

    gframes = np.empty((2, n_frames, fft_size))
    for t in range(n_frames):
        gframes[:, t, :] = g_full[:, t * hop:t * hop + fft_size] * win
    spec = scipy.fft.rfft(gframes, axis=2)
    scale = np.full(fft_size // 2 + 1, 2.0 / fft_size)
    scale[0] = scale[-1] = 1.0 / fft_size
    spec *= scale
    spec[:, :, 0] = spec[:, :, 0].real
    spec[:, :, -1] = spec[:, :, -1].real
    return spec.transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

@dataclass
class SeparatorTrainResult:
    state: nnet.TrainState
    loss_history: list[float]
    mode: str


def _cfg_json(cfg: SeparatorConfig) -> dict:
    rec = dict(cfg.__dict__)
    rec["channels"] = list(cfg.channels)
    return rec


def config_from_checkpoint(state: nnet.TrainState) -> SeparatorConfig:
    """Rebuild the training-time config stored in a checkpoint."""
    rec = dict(state.extra.get("cfg") or {})
    if not rec:
        return SeparatorConfig()
    rec["channels"] = tuple(rec["channels"])
    return SeparatorConfig(**rec)


def train_separator(manifest: CorpusManifest, cfg: SeparatorConfig, seed: int,
                    mode: str = "standard", workdir: Path | None = None) -> SeparatorTrainResult:
    """Train the mask model on a refined manifest.

    Modes: "standard" uses multi-labeled sources with probability p_multi;
    "single-only" forces p to 0 and ignores the multi pool; "finetune-multi"
    runs a single-only phase then enables multi-labeled data.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    pools = SeparatorPools(manifest)
    if mode == "standard" and cfg.p_multi > 0 and not pools.multi:
        log.warning("separator: no multi-labeled entries; degrading to p_multi=0")

    net = build_separator_net(cfg, seed)
    opt = nnet.Optimizer(net, nnet.OptimizerConfig(lr=cfg.lr, mode="adamw", weight_decay=1e-5))
    state = nnet.TrainState(net=net, opt=opt, seed=seed,
                            extra={"kind": "separator", "mode": mode, "cfg": _cfg_json(cfg)})
    phase1_steps = int(cfg.steps * cfg.finetune_phase1_frac) if mode == "finetune-multi" else 0
    history: list[float] = []

    for step in range(cfg.steps):
        if mode == "single-only":
            p = 0.0
        elif mode == "finetune-multi":
            p = 0.0 if step < phase1_steps else cfg.p_multi
        else:
            p = cfg.p_multi
        rng = nnet.step_rng(seed, _DATA_STREAM, step)
        loss = _train_step(state, pools, cfg, rng, p)
        if not math.isfinite(loss):
            if workdir is not None:
                nnet.save_checkpoint(state, Path(workdir) / "diverged.ckpt")
            raise NumericsError(f"separator training diverged at step {step}")
        history.append(loss)
        state.step_count += 1
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("stage=train_separator mode=%s step=%d loss=%.5f", mode, step, loss)
    if workdir is not None:
        nnet.save_checkpoint(state, Path(workdir) / f"separator_{mode}.ckpt")
    return SeparatorTrainResult(state, history, mode)


def _train_step(state: nnet.TrainState, pools: SeparatorPools, cfg: SeparatorConfig,
                rng: np.random.Generator, p_multi: float) -> float:
    batch_mags, batch_complex, batch_targets, batch_groups = [], [], [], []
    for _ in range(cfg.batch):
        mixture, targets, grouping = make_training_example(pools, cfg, rng, p_multi)
        if mixture.peak > 0.0:
            gain = audio.loudness_normalization_gain(mixture, cfg.target_lufs, verify=False)
            mixture = mixture.gain(gain)
            targets = [t * gain for t in targets]
        if cfg.loss_domain == "tf_mse":
            # the TF loss never reconstructs audio; float32 features suffice
            batch_mags.append(audio.stft_magnitudes(mixture, cfg.fft_size, cfg.hop))
            batch_complex.append(None)
        else:
            spec = audio.stft(mixture, cfg.fft_size, cfg.hop)
            batch_mags.append(spec.mags)
            batch_complex.append(spec.complex_spec())
        batch_targets.append(targets)
        batch_groups.append(grouping)

    mags = np.stack(batch_mags)
    total = 0.0
    if cfg.loss_domain == "tf_mse":
        # Group-wise at grid resolution: summed-stem masks are summed on the
        # grid BEFORE upsampling (the upsample is linear), so only one
        # full-resolution array per group is ever materialized.
        b, _, f, t = mags.shape
        grid = state.net.forward(mags).reshape(b, 4, 2, -1, mags.shape[3] // cfg.time_pool)
        fg, tg = grid.shape[3], grid.shape[4]
        dgrid = np.zeros_like(grid)
        for i in range(cfg.batch):
            _check_grouping(batch_groups[i])
            for g_idx, group in enumerate(batch_groups[i]):
                target_tf = audio.stft_magnitudes(
                    AudioClip(batch_targets[i][g_idx]), cfg.fft_size, cfg.hop)
                group_grid = sum(grid[i, c] for c in group)
                up = upsample_masks(group_grid, cfg.freq_pool, cfg.time_pool, f, t)
                diff = up * mags[i] - target_tf
                total += float(np.mean(diff * diff))
                gmask = (2.0 / diff.size) * diff * mags[i]
                ggrid = upsample_masks_adjoint(gmask, cfg.freq_pool, cfg.time_pool, fg, tg)
                for c in group:
                    dgrid[i, c] += ggrid
        dgrid /= cfg.batch
        state.net.backward(dgrid.reshape(b, 8, fg, tg))
    else:
        masks = predict_masks(state.net, mags, cfg)
        dmasks = np.zeros_like(masks)
        for i in range(cfg.batch):
            spec_c = batch_complex[i]
            n = batch_targets[i][0].shape[1]
            n_frames = spec_c.shape[2]
            est = np.stack([
                audio.istft_complex(masks[i, c] * spec_c, cfg.fft_size, cfg.hop, n).samples
                for c in range(4)])
            loss, dest = training_loss_with_grad(est, batch_targets[i], batch_groups[i], "time_l1")
            for c in range(4):
                gs = istft_adjoint(dest[c], cfg.fft_size, cfg.hop, n_frames, n)
                dmasks[i, c] = np.real(np.conj(spec_c) * gs)
            total += loss
        dmasks /= cfg.batch
        masks_backward(state.net, dmasks, cfg)
    state.opt.step(state.net)
    return total / cfg.batch
