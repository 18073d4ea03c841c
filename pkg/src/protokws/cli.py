"""Command-line entry point: ``protokws <command> [flags]``.

Any command accepts ``--config FILE`` with ``key=value`` lines (keys are
flag names without the leading dashes); flags given on the command line
override the file.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import audio_io, datasets, evaluator, inference, manifest, protonet, sampler, trainer
from .encoder import Block, EncoderConfig, embed, init_params
from .features import FeatureStore
from .frontend import FrontendConfig, log_mel

log = logging.getLogger("protokws")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_SAMPLING = 4
EXIT_TRAINING = 5
EXIT_IO = 6


class UsageError(Exception):
    pass


# -- argument helpers -------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _ratio(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"ratio must be in (0, 1), got {text}")
    return v


def _int_list(text):
    try:
        vals = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text}")
    return vals


def _blocks(text):
    """``16:2,32:2,64:1,64:1`` -> blocks of (channels, stride)."""
    try:
        out = []
        for part in str(text).split(","):
            ch, _, st = part.partition(":")
            out.append(Block(int(ch), int(st or 1)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad block list {text!r}") from None
    return tuple(out)


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


DEFAULT_BLOCKS = "16:2,32:2,64:1,64:1"


def _add_common(p):
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="worker thread cap (default: available cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_encoder(p):
    p.add_argument("--blocks", type=_blocks, default=DEFAULT_BLOCKS,
                   help=f"conv blocks as channels:stride list (default {DEFAULT_BLOCKS})")
    p.add_argument("--embed-dim", type=_positive_int, default=64, help="embedding dimension")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protokws", description="Few-shot keyword spotting "
                                     "with prototypical networks.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate the synthetic keyword corpus")
    p.add_argument("--out", help="output directory")
    p.add_argument("--classes", type=_positive_int, default=50, help="number of classes")
    p.add_argument("--clips", type=_positive_int, default=30, help="clips per class")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    _add_common(p)

    p = sub.add_parser("prepare", help="filter a manifest and split it by keyword")
    p.add_argument("--manifest", action="append", help="input manifest (repeat to pool languages)")
    p.add_argument("--out", help="output directory for train.csv, test.csv, stats.csv")
    p.add_argument("--ratio", type=_ratio, default=0.8, help="train share of keywords")
    p.add_argument("--min-clips", type=_positive_int, default=None,
                   help="uniform minimum clips per keyword (default: none)")
    p.add_argument("--multilingual-filter", action="store_true",
                   help="200 clips for en/de/es/fr/fa/ru/rw, 25 for other languages")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    _add_common(p)

    p = sub.add_parser("train", help="episodic training")
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--out", help="output directory for checkpoints and metrics.csv")
    p.add_argument("--n-way", type=_positive_int, default=10, help="classes per episode")
    p.add_argument("--k-shot", type=_positive_int, default=5, help="support clips per class")
    p.add_argument("--queries", type=_positive_int, default=10, help="query clips per class")
    p.add_argument("--episodes", type=_positive_int, default=2000, help="training episodes")
    p.add_argument("--lr", type=_positive_float, default=1e-3, help="Adam learning rate")
    p.add_argument("--checkpoint-every", type=_positive_int, default=500,
                   help="episodes between periodic checkpoints")
    p.add_argument("--seed", type=int, default=0, help="init and episode seed")
    p.add_argument("--timing", action="store_true",
                   help="record per-episode wall_ms (otherwise 0, keeping metrics.csv "
                        "reproducible byte-for-byte)")
    _add_encoder(p)
    _add_common(p)

    for name, hlp in (("eval", "few-shot accuracy on test episodes"),
                      ("sweep", "accuracy over a grid of (N, K)")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--checkpoint", help="encoder checkpoint")
        p.add_argument("--manifest", help="test manifest")
        if name == "eval":
            p.add_argument("--n-way", type=_positive_int, default=5, help="classes per episode")
            p.add_argument("--k-shot", type=_positive_int, default=1, help="support clips per class")
            p.add_argument("--per-episode", help="also write per-episode accuracies here")
        else:
            p.add_argument("--ns", type=_int_list, default="5,10,15,25", help="N values")
            p.add_argument("--ks", type=_int_list, default="1,2,5", help="K values")
        p.add_argument("--queries", type=_positive_int, default=15, help="query clips per class")
        p.add_argument("--episodes", type=_positive_int, default=1000, help="test episodes")
        p.add_argument("--seed", type=int, default=0, help="episode seed")
        p.add_argument("--language-id", action="store_true",
                       help="relabel clips by language before sampling")
        p.add_argument("--out", help="report file (default: stdout)")
        _add_common(p)

    p = sub.add_parser("enroll", help="build a prototype bank from support clips")
    p.add_argument("--checkpoint", help="encoder checkpoint")
    p.add_argument("--support", help="manifest of support clips; keyword order is kept")
    p.add_argument("--out", help="bank file to write")
    p.add_argument("--augment-to", type=_positive_int, default=None,
                   help="expand single-clip keywords to this many augmented clips")
    p.add_argument("--seed", type=int, default=0, help="augmentation seed")
    _add_common(p)

    p = sub.add_parser("classify", help="label whole clips against a bank")
    p.add_argument("--checkpoint", help="encoder checkpoint")
    p.add_argument("--bank", help="prototype bank")
    p.add_argument("--wav", action="append", help="clip to classify (repeatable)")
    p.add_argument("--reject-threshold", type=float, default=None,
                   help="label REJECTED when the best score is below this")
    p.add_argument("--out", help="output file (default: stdout)")
    _add_common(p)

    p = sub.add_parser("detect", help="scan a long recording in one-second windows")
    p.add_argument("--checkpoint", help="encoder checkpoint")
    p.add_argument("--bank", help="prototype bank")
    p.add_argument("--wav", help="recording")
    p.add_argument("--window", type=_positive_float, default=1.0, help="window length, seconds")
    p.add_argument("--hop", type=_positive_float, default=0.5, help="window hop, seconds")
    p.add_argument("--reject-threshold", type=float, default=None,
                   help="label REJECTED when the best score is below this")
    p.add_argument("--out", help="output file (default: stdout)")
    _add_common(p)

    p = sub.add_parser("embed", help="export embeddings or a spectrogram")
    p.add_argument("--checkpoint", help="encoder checkpoint")
    p.add_argument("--manifest", help="clips to embed")
    p.add_argument("--spectrogram", help="dump this WAV's log-Mel matrix instead")
    p.add_argument("--out", help="output file (default: stdout)")
    _add_common(p)

    p = sub.add_parser("bench", help="encoder forward latency")
    p.add_argument("--checkpoint", help="encoder checkpoint (default: random init)")
    p.add_argument("--repeats", type=_positive_int, default=200, help="timed runs")
    p.add_argument("--warmup", type=int, default=10, help="untimed runs first")
    p.add_argument("--batch", type=_positive_int, default=1, help="clips per forward call")
    p.add_argument("--seed", type=int, default=0, help="input and init seed")
    p.add_argument("--out", help="output file (default: stdout)")
    _add_encoder(p)
    _add_common(p)

    return parser


REQUIRED = {
    "synth": ["out"],
    "prepare": ["manifest", "out"],
    "train": ["manifest", "out"],
    "eval": ["checkpoint", "manifest"],
    "sweep": ["checkpoint", "manifest"],
    "enroll": ["checkpoint", "support", "out"],
    "classify": ["checkpoint", "bank", "wav"],
    "detect": ["checkpoint", "bank", "wav"],
    "embed": [],
    "bench": [],
}


def _subparser(parser, name) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def read_config_file(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{n}: expected key=value")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in values.items():
        if key in ("config", "help") or key not in actions:
            raise UsageError(f"unknown config key {key!r} for this command")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = _bool(val)
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v.strip() for v in val.split(",")]
        else:
            defaults[key] = val
    sub.set_defaults(**defaults)


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in REQUIRED:
        _apply_config(_subparser(parser, known.command), read_config_file(known.config))
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("no command given")
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) in (None, [])]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def config_echo(args) -> str:
    skip = {"config", "verbose", "func", "threads"}
    doc = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        if isinstance(v, tuple) and v and isinstance(v[0], Block):
            v = ",".join(f"{b.out_channels}:{b.stride}" for b in v)
        doc[k] = v
    return "config: " + json.dumps(doc, sort_keys=True)


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    spec = datasets.SynthSpec(n_classes=args.classes, clips_per_class=args.clips, seed=args.seed)
    m = datasets.synth_dataset(spec, args.out)
    log.info("wrote %d clips to %s", len(m), args.out)


def cmd_prepare(args):
    m = sampler.pool_languages(manifest.load_manifest(p) for p in args.manifest).absolute()
    if args.multilingual_filter:
        m = datasets.filter_min_clips(m, datasets.FilterPolicy.multilingual_preset())
    elif args.min_clips:
        m = datasets.filter_min_clips(m, args.min_clips)
    split = sampler.split_classes(m, args.ratio, args.seed)
    os.makedirs(args.out, exist_ok=True)
    manifest.write_manifest(m.subset(split.train), os.path.join(args.out, "train.csv"))
    manifest.write_manifest(m.subset(split.test), os.path.join(args.out, "test.csv"))
    echo = config_echo(args)
    _emit(f"# {echo}\n" + datasets.format_stats(datasets.corpus_stats(m)),
          os.path.join(args.out, "stats.csv"))
    log.info("%d train / %d test keywords", len(split.train), len(split.test))


def cmd_train(args):
    data = manifest.load_manifest(args.manifest)
    tcfg = trainer.TrainConfig(n_way=args.n_way, k_shot=args.k_shot, q_queries=args.queries,
                               episodes=args.episodes, lr=args.lr, seed=args.seed,
                               checkpoint_every=args.checkpoint_every)
    fe = FrontendConfig()
    enc = EncoderConfig.for_frontend(blocks=args.blocks, embed_dim=args.embed_dim, frontend=fe)
    feats = FeatureStore(data, fe)
    feats.warm(threads=args.threads)
    _, metrics = trainer.train(data, tcfg, enc, fe, features=feats, out_dir=args.out,
                               progress_every=100 if args.verbose else 0)
    _emit(metrics.to_csv(config_echo(args), timing=args.timing),
          os.path.join(args.out, "metrics.csv"))


def _eval_pool(args):
    pool = manifest.load_manifest(args.manifest)
    if args.language_id:
        pool = evaluator.relabel_for_language_id(pool)
    return pool


def cmd_eval(args):
    ck = trainer.load_checkpoint(args.checkpoint)
    pool = _eval_pool(args)
    cfg = evaluator.EvalConfig(args.n_way, args.k_shot, args.queries, args.episodes, args.seed)
    report = evaluator.evaluate(ck, pool, cfg)
    _emit(evaluator.format_reports([report], config_echo(args)), args.out)
    if args.per_episode:
        _emit(f"# {config_echo(args)}\n" + evaluator.format_per_episode(report), args.per_episode)


def cmd_sweep(args):
    ck = trainer.load_checkpoint(args.checkpoint)
    pool = _eval_pool(args)
    base = evaluator.EvalConfig(q_queries=args.queries, episodes=args.episodes, seed=args.seed)
    reports = evaluator.sweep(ck, pool, args.ns, args.ks, base)
    _emit(evaluator.format_reports(reports, config_echo(args)), args.out)


def cmd_enroll(args):
    ck = trainer.load_checkpoint(args.checkpoint)
    m = manifest.load_manifest(args.support)
    support: dict[str, list] = {}
    for e in m:
        support.setdefault(e.keyword, []).append(audio_io.load_clip(m.resolve(e)))
    bank = inference.enroll(ck, support, augment_to=args.augment_to, seed=args.seed)
    protonet.save_bank(bank, args.out)


def _check_bank(ck, bank):
    if bank.dim != ck.encoder.embed_dim:
        raise ValueError(f"bank dimension {bank.dim} does not match checkpoint "
                         f"embedding dimension {ck.encoder.embed_dim}")


def cmd_classify(args):
    ck = trainer.load_checkpoint(args.checkpoint)
    bank = protonet.load_bank(args.bank)
    _check_bank(ck, bank)
    lines = [f"# {config_echo(args)}", "path,label,score,margin"]
    for path in args.wav:
        d = inference.classify_clip(ck, bank, audio_io.load_clip(path), args.reject_threshold)
        lines.append(f"{path},{d.label},{d.score!r},{d.margin!r}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_detect(args):
    ck = trainer.load_checkpoint(args.checkpoint)
    bank = protonet.load_bank(args.bank)
    _check_bank(ck, bank)
    audio = audio_io.read_wav(args.wav)
    dets = inference.detect_stream(ck, bank, audio, args.window, args.hop, args.reject_threshold)
    _emit(inference.format_detections(dets, config_echo(args)), args.out)


def cmd_embed(args):
    if args.spectrogram:
        feat = log_mel(audio_io.load_clip(args.spectrogram))
        lines = [f"# {config_echo(args)}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in feat]
        _emit("\n".join(lines) + "\n", args.out)
        return
    if not args.checkpoint or not args.manifest:
        raise UsageError("embed: need --checkpoint and --manifest (or --spectrogram)")
    ck = trainer.load_checkpoint(args.checkpoint)
    m = manifest.load_manifest(args.manifest)
    lines = [f"# {config_echo(args)}",
             "path,keyword," + ",".join(f"e{i}" for i in range(ck.encoder.embed_dim))]
    for e in m:
        z = inference.embed_clip(ck, audio_io.load_clip(m.resolve(e)))
        lines.append(f"{e.path},{e.keyword}," + ",".join(repr(float(v)) for v in z))
    _emit("\n".join(lines) + "\n", args.out)


def cmd_bench(args):
    if args.checkpoint:
        params = trainer.load_checkpoint(args.checkpoint).params
    else:
        params = init_params(EncoderConfig.for_frontend(blocks=args.blocks,
                                                        embed_dim=args.embed_dim), args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch,) + tuple(params.config.input_shape))
    for _ in range(args.warmup):
        embed(params, x)
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        embed(params, x)
        times.append(1000.0 * (time.perf_counter() - t0))
    t = np.array(times)
    lines = [f"# {config_echo(args)}", "repeats,mean_ms,p50_ms,p95_ms,params",
             f"{len(t)},{t.mean():.4f},{np.percentile(t, 50):.4f},{np.percentile(t, 95):.4f},"
             f"{params.n_params()}"]
    _emit("\n".join(lines) + "\n", args.out)


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
    "sweep": cmd_sweep, "enroll": cmd_enroll, "classify": cmd_classify, "detect": cmd_detect,
    "embed": cmd_embed, "bench": cmd_bench,
}


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, ValueError, OSError) as exc:
        print(f"protokws: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _limit_threads(args.threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    except (manifest.ManifestError, audio_io.WavParseError, trainer.CheckpointError,
            protonet.BankFormatError) as exc:
        return _fail(exc, EXIT_DATA)
    except sampler.SamplingError as exc:
        return _fail(exc, EXIT_SAMPLING)
    except trainer.TrainingError as exc:
        return _fail(exc, EXIT_TRAINING)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    except ValueError as exc:
        return _fail(exc, EXIT_FAILURE)
    return EXIT_OK


def _fail(exc, code) -> int:
    print(f"protokws: error: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
