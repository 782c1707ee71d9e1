"""Command-line entry point: ``varspeech <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError
from .data import (CorpusStats, FeatureSequence, SynthCorpus, SynthCorpusSpec, UnsupportedSampleRate,
                   generate_synth_corpus, load_corpus, load_pairs, make_discrimination_pairs,
                   read_feature_file, save_corpus, save_pairs, wav_to_features, write_feature_file)
from .flow import FlowNumericError
from .runtime import TrainingDivergedError, load_checkpoint, train
from .tokenizer import Codebook, fit_codebook, sample_frames, tokenize

log = logging.getLogger("varspeech")

USER_ERRORS = (ConfigError, ValueError, FileNotFoundError, IsADirectoryError, KeyError,
               UnsupportedSampleRate, TrainingDivergedError, FlowNumericError)


class CliError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as one JSON line on stderr, exit status 2."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message, "command": self.prog}), file=sys.stderr)
        self.exit(2)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, tuple):
            parser.add_argument(_flag(f.name), type=type(default[0]), nargs=len(default), default=None)
        elif isinstance(default, bool):
            parser.add_argument(_flag(f.name), type=lambda s: s.lower() in ("1", "true", "yes"), default=None)
        else:
            parser.add_argument(_flag(f.name), type=type(default) if default is not None else str, default=None)


def _overrides(args, cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        v = getattr(args, f.name, None)
        if v is not None:
            out[f.name] = tuple(v) if isinstance(v, list) else v
    return out


def _features(path) -> FeatureSequence:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return FeatureSequence(read_feature_file(path), source_id=path.stem)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    spec = SynthCorpusSpec(**_overrides(args, SynthCorpusSpec))
    corpus = generate_synth_corpus(spec)
    save_corpus(args.out, corpus)
    _emit({"corpus": str(args.out), "utterances": len(corpus), "d_x": spec.d_x})


def cmd_features(args) -> None:
    from scipy.io import wavfile

    rate, audio = wavfile.read(args.wav)
    if audio.ndim > 1:
        audio = audio.mean(axis=1)
    if np.issubdtype(audio.dtype, np.integer):
        audio = audio / float(np.iinfo(audio.dtype).max)
    seq = wav_to_features(audio, rate)
    write_feature_file(args.out, seq.frames)
    _emit({"out": str(args.out), "frames": seq.num_frames, "d_x": seq.dim})


def cmd_pairs(args) -> None:
    corpus = load_corpus(args.corpus)
    if not isinstance(corpus, SynthCorpus):
        raise CliError(f"{args.corpus} has no ground-truth states; pairs need a synthetic corpus")
    pairs = make_discrimination_pairs(corpus, args.corruption, args.span_frames, args.seed, args.num_pairs)
    save_pairs(args.out, pairs)
    _emit({"pairs": str(args.out), "n": len(pairs), "corruption": args.corruption})


def _corpus_frames(corpus) -> list[np.ndarray]:
    utts = corpus.utterances if isinstance(corpus, SynthCorpus) else corpus
    return [u.frames for u in utts]


def cmd_tokenizer_fit(args) -> None:
    frames = _corpus_frames(load_corpus(args.corpus))
    stats = CorpusStats.fit(frames)
    sample = [stats.standardize(f) for f in sample_frames(frames, args.sample_frac, args.seed)]
    cb = fit_codebook(sample, args.k, seed=args.seed, max_iter=args.max_iter, feature_kind=args.feature_kind)
    cb.fit_stats["standardization"] = stats.to_dict()
    cb.save(args.out)
    _emit({"codebook": str(Path(args.out).with_suffix(".npy")), "k": cb.k, "inertia": cb.fit_stats["inertia"]})


def _codebook_stats(cb: Codebook) -> CorpusStats | None:
    d = cb.fit_stats.get("standardization")
    return CorpusStats.from_dict(d) if d else None


def cmd_tokenizer_apply(args) -> None:
    cb = Codebook.load(args.codebook)
    frames = _features(args.inp).frames
    stats = _codebook_stats(cb)
    tokens = tokenize(stats.standardize(frames) if stats else frames, cb).tokens
    text = " ".join(str(t) for t in tokens)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_train(args) -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    corpus = load_corpus(args.corpus)
    if args.resume:
        bundle = train(None, corpus, args.out, resume=args.resume)
    else:
        config = Config.load(args.config) if args.config else Config()
        overrides = _overrides(args, Config)
        if overrides:
            config = Config.from_dict({**config.to_dict(), **overrides})
        codebook = stats = None
        if args.codebook:
            codebook = Codebook.load(args.codebook)
            stats = _codebook_stats(codebook)
        bundle = train(config, corpus, args.out, codebook=codebook, stats=stats)
    last = bundle.history[-1] if bundle.history else {}
    _emit({"out": str(args.out), "step": bundle.step, "final": last})


def cmd_reconstruct(args) -> None:
    from .inference import reconstruct

    bundle = load_checkpoint(args.ckpt)
    out = reconstruct(bundle, _features(args.inp), seed=args.seed)
    write_feature_file(args.out, out.frames)
    _emit({"out": str(args.out), "frames": out.num_frames})


def cmd_continue(args) -> None:
    from .inference import continue_speech

    bundle = load_checkpoint(args.ckpt)
    out = continue_speech(bundle, _features(args.prompt), args.seconds, args.seed, args.prompt_seconds)
    write_feature_file(args.out, out.frames)
    _emit({"out": str(args.out), "frames": out.num_frames})


def cmd_score(args) -> None:
    from .inference import default_score_mode, score_pairs

    bundle = load_checkpoint(args.ckpt)
    pairs = load_pairs(args.pairs)
    mode = args.mode or default_score_mode(bundle)
    acc = score_pairs(bundle, pairs, mode)
    _emit({"accuracy": acc, "mode": mode, "n_pairs": len(pairs)})


def cmd_eval(args) -> None:
    from .evaluate import eval_report

    bundle = load_checkpoint(args.ckpt)
    report = eval_report(bundle, load_corpus(args.corpus), args.report, seed=args.seed, figure=not args.no_figure)
    _emit({"report": str(args.report), "f0_rmse": report.f0_rmse, "mcd": report.mcd,
           "token_content_error": report.token_content_error, "n_failed": report.n_failed})


def cmd_plot(args) -> None:
    from .plotting import plot_sweep, plot_training_log, read_log

    if args.log:
        out = plot_training_log(read_log(args.log), args.out)
    else:
        text = Path(args.sweep).read_text()
        rows = json.loads(text) if text.lstrip().startswith("[") else [json.loads(l) for l in text.splitlines() if l.strip()]
        if not rows or any(args.param not in r for r in rows):
            raise CliError(f"every sweep row needs a {args.param!r} field")
        out = plot_sweep(rows, args.param, args.out)
    _emit({"figure": str(out)})


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = JsonArgumentParser(prog="varspeech", description="Token + variational-feature speech language model")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus directory")
    s.add_argument("--out", required=True)
    _add_dataclass_flags(s, SynthCorpusSpec)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="convert a WAV file to log-mel features")
    s.add_argument("--wav", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("pairs", help="build positive/negative discrimination pairs")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corruption", choices=("resample_states", "swap_span"), default="resample_states")
    s.add_argument("--span-frames", type=int, default=20)
    s.add_argument("--num-pairs", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_pairs)

    tok = sub.add_parser("tokenizer", help="fit or apply the k-means tokenizer")
    tsub = tok.add_subparsers(dest="tokenizer_command", required=True)
    s = tsub.add_parser("fit")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=200)
    s.add_argument("--sample-frac", type=float, default=0.1)
    s.add_argument("--feature-kind", choices=("raw_frame", "context_window"), default="raw_frame")
    s.add_argument("--max-iter", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_tokenizer_fit)
    s = tsub.add_parser("apply")
    s.add_argument("--codebook", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_tokenizer_apply)

    s = sub.add_parser("train", help="train a model; every config field can be overridden by a flag")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to resume from (config comes from the checkpoint)")
    s.add_argument("--codebook", help="pre-fitted codebook from `tokenizer fit`")
    _add_dataclass_flags(s, Config)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="deterministic reconstruction of a feature file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("continue", help="continue a prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--prompt-seconds", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_continue)

    s = sub.add_parser("score", help="paired discrimination accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--mode", choices=("tokens_only", "latents_only", "joint"))
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="reconstruction metrics report (JSON + TSV + PNG)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-figure", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="render training curves or a beta/gamma sweep")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--log", help="JSONL training log")
    src.add_argument("--sweep", help="JSON/JSONL rows with metrics per run")
    s.add_argument("--param", default="beta", help="swept field for --sweep")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, *USER_ERRORS) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
