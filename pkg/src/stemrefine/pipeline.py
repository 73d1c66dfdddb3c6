"""Orchestration of the full experiment and its artifacts.

The pipeline runs gen -> corrupt -> preprocess -> self-refine xN -> train
separators per condition -> evaluate -> report. Every run directory is
self-describing: a config snapshot, a provenance record with input hashes,
per-stage artifacts, and a report that can be regenerated from the artifacts
alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__, audio, classifier, corpus, evaluate, nnet, separator, silence
from .config import RunConfig, to_ini
from .corpus import CLASSES, CorpusManifest, StemEntry
from .errors import DataError, SilentAudioError

log = logging.getLogger(__name__)


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence((seed, stage)).generate_state(1)[0])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out_dir: Path, command: str, config: dict,
                     inputs: list[Path], duration_s: float,
                     stage_times: dict[str, float] | None = None) -> None:
    rec = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "versions": {
            "stemrefine": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "duration_s": round(duration_s, 3),
        "stage_times_s": {k: round(v, 3) for k, v in (stage_times or {}).items()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.json", "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)


def preprocess_corpus(manifest: CorpusManifest, out_dir) -> CorpusManifest:
    """Two-pass silence trim of every stem into a new corpus directory.

    Fully silent stems are excluded from the output manifest (reported), so
    downstream pools never contain empty audio.
    """
    out_dir = Path(out_dir)
    entries = []
    skipped = []
    for e in manifest.entries:
        clip = manifest.load_clip(e)
        try:
            trimmed = silence.trim_silence_two_pass(clip)
        except SilentAudioError:
            skipped.append(e.id)
            continue
        rel = f"audio/{e.song_id}/{Path(e.audio_path).name}"
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        as_f32 = audio.AudioClip(trimmed.samples.astype(np.float32), trimmed.sample_rate)
        audio.write_wav(as_f32, out_dir / rel, fmt="float32")
        prov = list(e.provenance)
        prov.append({"op": "trim", "kept_s": round(trimmed.duration_s, 4),
                     "orig_s": round(clip.duration_s, 4)})
        entries.append(StemEntry(
            id=e.id, audio_path=rel, assigned_label=e.assigned_label,
            song_id=e.song_id, duration_s=trimmed.duration_s,
            true_label=e.true_label, provenance=prov,
        ))
    if skipped:
        log.warning("stage=preprocess skipped_silent=%d ids=%s", len(skipped), ",".join(skipped))
    if not entries:
        raise DataError("preprocess removed every stem (all silent)")
    pre = CorpusManifest(entries, split=manifest.split, seed=manifest.seed,
                         corruption=manifest.corruption, root=out_dir)
    pre.save(out_dir / "manifest.jsonl")
    return pre


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    report: dict
    stage_times: dict[str, float]
    out_dir: Path


class _Timer:
    def __init__(self):
        self.times: dict[str, float] = {}

    def run(self, name: str, fn):
        t0 = time.perf_counter()
        out = fn()
        self.times[name] = time.perf_counter() - t0
        log.info("stage=%s wall_s=%.1f", name, self.times[name])
        return out


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(cfg))
    timer = _Timer()
    t_start = time.perf_counter()

    clean = timer.run("gen_train", lambda: corpus.gen_synthetic_corpus(
        out / "corpus" / "clean", cfg.corpus.songs, cfg.corpus.duration_s,
        seed=_stage_seed(cfg.seed, 0)))
    test_raw = timer.run("gen_test", lambda: corpus.gen_synthetic_corpus(
        out / "corpus" / "test", cfg.corpus.test_songs, cfg.corpus.duration_s,
        seed=_stage_seed(cfg.seed, 1), split="test"))

    noisy = timer.run("corrupt", lambda: corpus.corrupt_labels(
        clean, cfg.corruption.swap_rate, cfg.corruption.bleed_rate,
        seed=_stage_seed(cfg.seed, 2), out_dir=out / "corpus" / "noisy"))

    clean_pre = timer.run("preprocess_clean", lambda: preprocess_corpus(
        clean, out / "corpus" / "clean_trimmed"))
    noisy_pre = timer.run("preprocess_noisy", lambda: preprocess_corpus(
        noisy, out / "corpus" / "noisy_trimmed"))
    # classification eval uses the trimmed test stems; separation eval keeps
    # whole songs untrimmed, following the usual MSS evaluation convention
    test_pre = timer.run("preprocess_test", lambda: preprocess_corpus(
        test_raw, out / "corpus" / "test_trimmed"))

    clf_clean = timer.run("train_classifier_clean", lambda: classifier.train_classifier(
        clean_pre, cfg.classifier, seed=_stage_seed(cfg.seed, 3)))
    nnet.save_checkpoint(clf_clean, out / "classifier_clean.ckpt")

    iters = timer.run("self_refine", lambda: classifier.self_refine(
        noisy_pre, cfg.classifier, cfg.pipeline.iters,
        seed=_stage_seed(cfg.seed, 4), workdir=out / "refine"))

    condition_manifests = {"clean": clean_pre, "noisy": noisy_pre}
    for it in iters:
        condition_manifests[f"x{it.index}"] = it.manifest

    sep_results: dict[str, separator.SeparatorTrainResult] = {}
    for idx, cond in enumerate(cfg.pipeline.conditions):
        if cond not in condition_manifests:
            raise DataError(f"pipeline condition {cond!r} not available "
                            f"(have {sorted(condition_manifests)})")
        sep_results[cond] = timer.run(f"train_separator_{cond}", lambda c=cond: separator.train_separator(
            condition_manifests[c], cfg.separator, seed=_stage_seed(cfg.seed, 10 + idx),
            workdir=out / "separators"))
        nnet.save_checkpoint(sep_results[cond].state, out / "separators" / f"{cond}.ckpt")

    # --- evaluation artifacts ---
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    clf_states = {"clean": clf_clean}
    for it in iters:
        clf_states[f"x{it.index}"] = it.state

    classifier_metrics: dict[str, dict] = {}
    for name, state in clf_states.items():
        def _eval(state=state):
            single = evaluate.eval_classifier_single(state, test_pre, cfg.classifier)
            multi = evaluate.eval_classifier_multi(
                state, test_pre, cfg.classifier, n_mixtures=cfg.eval.n_mixtures,
                seed=_stage_seed(cfg.seed, 5))
            return {"single": single.to_json(), "multi": multi.to_json()}
        classifier_metrics[name] = timer.run(f"eval_classifier_{name}", _eval)
        with open(eval_dir / f"classifier_{name}.json", "w") as fh:
            json.dump(classifier_metrics[name], fh, indent=2, sort_keys=True)

    sdr_reports: dict[str, dict] = {}
    for cond, result in sep_results.items():
        rep = timer.run(f"eval_sdr_{cond}", lambda r=result: evaluate.evaluate_separation(
            r.state, test_raw, cfg.separator, frame_s=cfg.eval.sdr_frame_s))
        sdr_reports[cond] = rep.to_json()
        with open(eval_dir / f"sdr_{cond}.json", "w") as fh:
            json.dump(sdr_reports[cond], fh, indent=2, sort_keys=True)

    label_curve = {
        "injected_error": corpus.label_error_rate(noisy_pre),
        "per_iteration": [it.label_error for it in iters],
        "dropped": [it.dropped for it in iters],
    }
    with open(eval_dir / "label_errors.json", "w") as fh:
        json.dump(label_curve, fh, indent=2, sort_keys=True)

    report = build_report(out)
    write_report(out, report)
    write_provenance(out, "pipeline", cfg.to_json(),
                     [out / "corpus" / "clean" / "manifest.jsonl",
                      out / "corpus" / "noisy" / "manifest.jsonl"],
                     time.perf_counter() - t_start, timer.times)
    return PipelineResult(report=report, stage_times=timer.times, out_dir=out)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def build_report(run_dir) -> dict:
    """Assemble the comparison report from evaluation artifacts alone."""
    run_dir = Path(run_dir)
    eval_dir = run_dir / "eval"
    if not eval_dir.is_dir():
        raise DataError(f"{run_dir}: no eval artifacts to report from")
    report: dict = {"classifier": {}, "separation": {}, "label_errors": None}
    for path in sorted(eval_dir.glob("classifier_*.json")):
        with open(path) as fh:
            report["classifier"][path.stem.removeprefix("classifier_")] = json.load(fh)
    for path in sorted(eval_dir.glob("sdr_*.json")):
        with open(path) as fh:
            report["separation"][path.stem.removeprefix("sdr_")] = json.load(fh)
    errs = eval_dir / "label_errors.json"
    if errs.exists():
        with open(errs) as fh:
            report["label_errors"] = json.load(fh)
    return report


_CONDITION_ORDER = ("clean", "noisy", "x1", "x2", "x3", "x4", "x5")


def _condition_sort_key(name: str):
    return (_CONDITION_ORDER.index(name) if name in _CONDITION_ORDER else 99, name)


def render_report_text(report: dict) -> str:
    """Human-readable tables mirroring the classifier/separation result layout."""
    lines = []
    if report.get("classifier"):
        lines.append("Instrument recognition (accuracy / F1, precision / recall)")
        header = f"{'data':10s} {'protocol':8s} " + " ".join(f"{c:>23s}" for c in CLASSES) + f" {'avg':>23s}"
        lines.append(header)
        for name in sorted(report["classifier"], key=_condition_sort_key):
            for protocol in ("single", "multi"):
                m = report["classifier"][name].get(protocol)
                if not m:
                    continue
                cells = []
                for i in range(len(CLASSES)):
                    cells.append(f"{m['accuracy'][i]*100:5.1f}%/{m['f1'][i]:.3f} "
                                 f"{m['precision'][i]:.2f}/{m['recall'][i]:.2f}")
                avg = m["avg"]
                cells.append(f"{avg['accuracy']*100:5.1f}%/{avg['f1']:.3f} "
                             f"{avg['precision']:.2f}/{avg['recall']:.2f}")
                lines.append(f"{name:10s} {protocol:8s} " + " ".join(f"{c:>23s}" for c in cells))
        lines.append("")
    if report.get("separation"):
        lines.append("Source separation SDR [dB] (median of frames, median of tracks)")
        lines.append(f"{'training data':14s} " + " ".join(f"{c:>8s}" for c in CLASSES) + f" {'avg':>8s}")
        for name in sorted(report["separation"], key=_condition_sort_key):
            rep = report["separation"][name]
            row = " ".join(f"{rep['per_stem'][c]:8.2f}" for c in CLASSES)
            lines.append(f"{name:14s} {row} {rep['average']:8.2f}")
        lines.append("")
    errs = report.get("label_errors")
    if errs:
        lines.append("Label error rate vs ground truth")
        lines.append(f"  injected: {errs['injected_error']:.4f}")
        for i, e in enumerate(errs["per_iteration"], start=1):
            shown = "n/a" if e is None else f"{e:.4f}"
            lines.append(f"  after x{i} refinement: {shown} (dropped {errs['dropped'][i-1]})")
        lines.append("")
    return "\n".join(lines)


def write_report(run_dir, report: dict) -> None:
    run_dir = Path(run_dir)
    with open(run_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    (run_dir / "report.txt").write_text(render_report_text(report))
