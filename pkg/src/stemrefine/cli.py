"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command that writes artifacts also writes a provenance record
(config snapshot, seeds, library versions, input hashes) into its output
directory, and logs machine-parseable key=value progress lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import classifier, config, corpus, evaluate, nnet, pipeline, separator
from .errors import DataError, NumericsError, StemRefineError

log = logging.getLogger("stemrefine")

ENV_OUT_ROOT = "STEMREFINE_OUT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise _UsageError(message)


def _load_run_config(args) -> config.RunConfig:
    cfg = config.load_config(args.config) if args.config else config.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    elif os.environ.get(ENV_OUT_ROOT):
        cfg.out_dir = str(Path(os.environ[ENV_OUT_ROOT]) / Path(cfg.out_dir).name)
    return cfg


def _classifier_cfg(args, cfg: config.RunConfig) -> classifier.ClassifierConfig:
    c = cfg.classifier
    for name in ("steps", "batch", "lr", "threshold", "chance_rate"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(c, name, value)
    c.__post_init__()
    return c


def _separator_cfg(args, cfg: config.RunConfig) -> separator.SeparatorConfig:
    s = cfg.separator
    for name, attr in (("steps", "sep_steps"), ("p_multi", "p_multi"),
                       ("loss_domain", "loss_domain"), ("segment_s", "segment_s")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(s, name, value)
    s.__post_init__()
    return s


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, command: str, cfg: config.RunConfig, inputs: list, t0: float) -> None:
    pipeline.write_provenance(out, command, cfg.to_json(),
                              [Path(p) for p in inputs], time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_print_config(args) -> int:
    cfg = _load_run_config(args)
    sys.stdout.write(config.to_ini(cfg))
    return 0


def cmd_gen(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    manifest = corpus.gen_synthetic_corpus(
        out, n_songs=args.songs or cfg.corpus.songs,
        duration_s=args.duration or cfg.corpus.duration_s,
        seed=cfg.seed, split=args.split)
    log.info("stage=gen songs=%d entries=%d out=%s",
             args.songs or cfg.corpus.songs, len(manifest.entries), out)
    _finish(out, "gen", cfg, [out / "manifest.jsonl"], t0)
    return 0


def cmd_corrupt(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    manifest = corpus.CorpusManifest.load(args.manifest)
    swap = cfg.corruption.swap_rate if args.swap is None else args.swap
    bleed = cfg.corruption.bleed_rate if args.bleed is None else args.bleed
    corrupted = corpus.corrupt_labels(manifest, swap, bleed, seed=cfg.seed, out_dir=out)
    log.info("stage=corrupt swap=%.3f bleed=%.3f error_rate=%.4f",
             swap, bleed, corpus.label_error_rate(corrupted))
    _finish(out, "corrupt", cfg, [args.manifest], t0)
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    manifest = corpus.CorpusManifest.load(args.manifest)
    trimmed = pipeline.preprocess_corpus(manifest, out)
    log.info("stage=preprocess entries=%d out=%s", len(trimmed.entries), out)
    _finish(out, "preprocess", cfg, [args.manifest], t0)
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    clf_cfg = _classifier_cfg(args, cfg)
    manifest = corpus.CorpusManifest.load(args.manifest)
    state = classifier.train_classifier(manifest, clf_cfg, seed=cfg.seed, workdir=out)
    nnet.save_checkpoint(state, out / "classifier.ckpt")
    log.info("stage=train_classifier steps=%d out=%s", clf_cfg.steps, out / "classifier.ckpt")
    _finish(out, "train-classifier", cfg, [args.manifest], t0)
    return 0


def cmd_refine(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    clf_cfg = _classifier_cfg(args, cfg)
    manifest = corpus.CorpusManifest.load(args.manifest)
    iterations = classifier.self_refine(manifest, clf_cfg, n_iters=args.iters,
                                        seed=cfg.seed, workdir=out,
                                        threshold=args.threshold)
    curve = {
        "per_iteration": [it.label_error for it in iterations],
        "dropped": [it.dropped for it in iterations],
    }
    with open(out / "label_errors.json", "w") as fh:
        json.dump(curve, fh, indent=2, sort_keys=True)
    for it in iterations:
        shown = "n/a" if it.label_error is None else f"{it.label_error:.4f}"
        log.info("stage=refine iter=%d label_error=%s dropped=%d", it.index, shown, it.dropped)
    _finish(out, "refine", cfg, [args.manifest], t0)
    return 0


def cmd_train_separator(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    sep_cfg = _separator_cfg(args, cfg)
    manifest = corpus.CorpusManifest.load(args.manifest)
    result = separator.train_separator(manifest, sep_cfg, seed=cfg.seed,
                                       mode=args.mode, workdir=out)
    nnet.save_checkpoint(result.state, out / "separator.ckpt")
    with open(out / "loss_history.json", "w") as fh:
        json.dump([round(v, 6) for v in result.loss_history], fh)
    log.info("stage=train_separator mode=%s final_loss=%.5f out=%s",
             args.mode, result.loss_history[-1], out / "separator.ckpt")
    _finish(out, "train-separator", cfg, [args.manifest], t0)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    state = nnet.load_checkpoint(args.model)
    test_manifest = corpus.CorpusManifest.load(args.test_manifest)
    if args.what == "classifier":
        clf_cfg = classifier.config_from_checkpoint(state)
        threshold = args.threshold
        single = evaluate.eval_classifier_single(state, test_manifest, clf_cfg, threshold)
        multi = evaluate.eval_classifier_multi(
            state, test_manifest, clf_cfg, n_mixtures=args.n_mixtures or cfg.eval.n_mixtures,
            threshold=threshold, seed=cfg.seed)
        payload = {"single": single.to_json(), "multi": multi.to_json(),
                   "threshold": threshold if threshold is not None else clf_cfg.threshold}
        path = out / "classifier_metrics.json"
        log.info("stage=evaluate what=classifier avg_multi_acc=%.4f", multi.avg_accuracy)
    else:
        sep_cfg = separator.config_from_checkpoint(state)
        report = evaluate.evaluate_separation(state, test_manifest, sep_cfg,
                                              frame_s=cfg.eval.sdr_frame_s)
        payload = report.to_json()
        path = out / "sdr.json"
        log.info("stage=evaluate what=separator avg_sdr=%.2f", report.average)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    _finish(out, "evaluate", cfg, [args.model, args.test_manifest], t0)
    return 0


def cmd_report(args) -> int:
    report = pipeline.build_report(args.run_dir)
    pipeline.write_report(Path(args.run_dir), report)
    sys.stdout.write(pipeline.render_report_text(report))
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_run_config(args)
    result = pipeline.run_pipeline(cfg)
    sys.stdout.write(pipeline.render_report_text(result.report))
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="stemrefine",
                     description="Self-refining stem-label cleanup and source separation")
    parser.add_argument("--config", help="INI config file (flags override it)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("print-config", help="print the effective configuration")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--songs", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--split", default="train")

    p = sub.add_parser("corrupt", help="inject label noise into a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--swap", type=float)
    p.add_argument("--bleed", type=float)

    p = sub.add_parser("preprocess", help="two-pass silence removal")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-classifier", help="train the instrument classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--chance-rate", dest="chance_rate", type=float)

    p = sub.add_parser("refine", help="self-refine a noisy corpus for N iterations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=2)
    p.add_argument("--steps", type=int)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("train-separator", help="train the source separator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=separator.MODES, default="standard")
    p.add_argument("--steps", dest="sep_steps", type=int)
    p.add_argument("--p-multi", dest="p_multi", type=float)
    p.add_argument("--loss-domain", dest="loss_domain", choices=("time_l1", "tf_mse"))
    p.add_argument("--segment", dest="segment_s", type=float)

    p = sub.add_parser("evaluate", help="evaluate a trained model")
    p.add_argument("--what", choices=("classifier", "separator"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--n-mixtures", dest="n_mixtures", type=int)

    p = sub.add_parser("report", help="regenerate the report from run artifacts")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("pipeline", help="run the full experiment")
    p.add_argument("--out")
    return parser


_COMMANDS = {
    "print-config": cmd_print_config,
    "gen": cmd_gen,
    "corrupt": cmd_corrupt,
    "preprocess": cmd_preprocess,
    "train-classifier": cmd_train_classifier,
    "refine": cmd_refine,
    "train-separator": cmd_train_separator,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except StemRefineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
