"""Command-line interface: ``mtk {vocab,train,translate,rescore,score}``.

Options resolve as defaults <- ``--config`` file <- command-line flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import Vocabulary, build_vocab, invert_r2l, read_lines
from .errors import ContractError, DataError, DimensionError, MtkError, NumericError
from .modelio import load_model
from .models import ARCHITECTURES, ModelConfig, build_model, parameter_count, parse_key_values
from .search import format_nbest, parse_nbest, rescore, score, translate_lines
from .training import TrainConfig, Trainer, validation_loss

log = logging.getLogger("mtk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(MtkError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# name: (type, default, help). Anything here may also come from --config.
TRAIN_OPTIONS = {
    "model": (str, None, "output model file; training state goes to <model>.ckpt"),
    "type": (str, "s2s-shallow", f"architecture: {', '.join(ARCHITECTURES)}"),
    "train-sets": ("list", None, "training corpora: sources..., target"),
    "vocabs": ("list", None, "vocabulary files, one per corpus"),
    "valid-sets": ("list", [], "validation corpora (cross-entropy reported after each epoch)"),
    "workers": (int, 1, "number of data-parallel workers"),
    "sync": ("bool", True, "synchronous (true) or asynchronous (false) updates"),
    "mini-batch-tokens": (int, 1000, "token budget per batch (padded slots over all streams)"),
    "right-left": ("bool", False, "train on reversed target sentences"),
    "epochs": (int, 1, "number of epochs"),
    "max-updates": (int, 0, "stop after this many updates (0 = no limit)"),
    "learning-rate": (float, 0.0003, "base learning rate"),
    "lr-warmup": (int, 16000, "linear warmup updates before inverse-sqrt decay"),
    "avg-decay": (float, 0.9999, "decay of the exponential parameter average"),
    "clip-norm": (float, 0.0, "clip gradients to this global norm (0 = off)"),
    "dim-emb": (int, 64, "embedding size"),
    "dim-rnn": (int, 128, "RNN state size"),
    "heads": (int, 4, "attention heads (transformer)"),
    "layers": (int, 2, "transformer layers"),
    "enc-depth": (int, 0, "GRU blocks per encoder cell (0 = architecture default)"),
    "dec-depth": (int, 0, "GRU blocks per decoder cell (0 = architecture default)"),
    "dropout": (float, 0.1, "dropout probability"),
    "tying": (str, "all", "embedding tying: all, src-trg or none"),
    "layer-norm": ("bool", True, "layer normalisation in RNN blocks"),
    "encoder": (str, "", "override the encoder kind"),
    "decoder": (str, "", "override the decoder kind"),
    "seed": (int, None, "random seed (falls back to MTK_SEED, then 1234)"),
    "log-every": (int, 10, "write a metrics line every N updates"),
    "checkpoint-every": (int, 0, "write the training checkpoint every N updates (0 = at the end)"),
    "metrics-log": (str, None, "append metrics lines to this file"),
    "no-restore": ("bool", False, "ignore an existing checkpoint and start afresh"),
}


def _to_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


def _convert(kind, raw, key):
    try:
        if kind == "list":
            return raw if isinstance(raw, list) else [x for x in str(raw).replace(",", " ").split() if x]
        if kind == "bool":
            return _to_bool(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise UsageError(f"bad value {raw!r} for {key}") from None


def resolve_options(table: dict, config_path, flags: dict) -> dict:
    """defaults <- config file <- flags (rightmost wins); unknown config keys are errors."""
    out = {k: v[1] for k, v in table.items()}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            items = parse_key_values(path.read_text(encoding="utf-8"))
        except ContractError as exc:
            raise UsageError(f"{path}: {exc}") from None
        unknown = sorted(set(items) - set(table))
        if unknown:
            raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
        for k, v in items.items():
            out[k] = _convert(table[k][0], v, k)
    for k, v in flags.items():
        if v is not None:
            out[k] = _convert(table[k][0], v, k)
    return out


def _add_options(parser, table):
    for key, (kind, default, help_text) in table.items():
        flag = f"--{key}"
        dest = key.replace("-", "_")
        if kind == "bool":
            parser.add_argument(flag, dest=dest, nargs="?", const="true", default=None,
                                metavar="BOOL", help=f"{help_text} (default: {default})")
        elif kind == "list":
            parser.add_argument(flag, dest=dest, nargs="+", default=None, help=help_text)
        else:
            parser.add_argument(flag, dest=dest, type=str, default=None,
                                help=f"{help_text} (default: {default})")


def _flags(args, table):
    return {k: getattr(args, k.replace("-", "_")) for k in table}


def _seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("MTK_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MTK_SEED must be an integer, got {env!r}") from None
    return 1234


def _log_config(opts):
    log.info("resolved configuration:\n%s",
             "\n".join(f"  {k}: {' '.join(map(str, v)) if isinstance(v, list) else v}"
                       for k, v in sorted(opts.items())))


def _split_models(values):
    return [p for v in values for p in v.split(",") if p]


# -- commands ------------------------------------------------------------------

def cmd_vocab(args) -> int:
    lines = [line for path in args.corpus for line in read_lines(path)]
    vocab = build_vocab(lines, args.max_size)
    vocab.save(args.output)
    log.info("wrote %d entries to %s", len(vocab), args.output)
    return EXIT_OK


def _read_corpus(paths, vocabs):
    streams = []
    for path, vocab in zip(paths, vocabs):
        streams.append([vocab.encode(line) for line in read_lines(path)])
    lengths = {len(s) for s in streams}
    if len(lengths) > 1:
        raise DataError(f"corpora {paths} have different line counts {[len(s) for s in streams]}")
    return streams


def cmd_train(args) -> int:
    flags = _flags(args, TRAIN_OPTIONS)
    if args.async_:
        if flags["sync"] is not None and _to_bool(flags["sync"]):
            raise UsageError("train: --sync and --async are mutually exclusive")
        flags["sync"] = "false"
    opts = resolve_options(TRAIN_OPTIONS, args.config, flags)
    opts["seed"] = _seed(opts["seed"])
    for key in ("model", "train-sets", "vocabs"):
        if not opts[key]:
            raise UsageError(f"train: --{key} is required")
    if opts["type"] not in ARCHITECTURES:
        raise UsageError(f"train: unknown --type {opts['type']!r}; choose from {', '.join(ARCHITECTURES)}")
    n_sources = ARCHITECTURES[opts["type"]][2]
    if len(opts["train-sets"]) != n_sources + 1:
        raise UsageError(f"train: {opts['type']} needs {n_sources + 1} training corpora, "
                         f"got {len(opts['train-sets'])}")
    if len(opts["vocabs"]) != len(opts["train-sets"]):
        raise UsageError("train: need one vocabulary per training corpus")
    _log_config(opts)

    vocabs = [Vocabulary.load(p) for p in opts["vocabs"]]
    streams = _read_corpus(opts["train-sets"], vocabs)
    valid = _read_corpus(opts["valid-sets"], vocabs) if opts["valid-sets"] else None
    if opts["right-left"]:
        streams[-1] = [invert_r2l(s) for s in streams[-1]]
        if valid:
            valid[-1] = [invert_r2l(s) for s in valid[-1]]

    config = ModelConfig(
        type=opts["type"], vocab_sizes=[len(v) for v in vocabs], dim_emb=opts["dim-emb"],
        dim_rnn=opts["dim-rnn"], heads=opts["heads"], layers=opts["layers"],
        enc_depth=opts["enc-depth"], dec_depth=opts["dec-depth"], dropout=opts["dropout"],
        tying=opts["tying"], layer_norm=opts["layer-norm"],
        direction="r2l" if opts["right-left"] else "l2r",
        encoder=opts["encoder"], decoder=opts["decoder"], seed=opts["seed"])
    if config.tying != "none" and len({len(v) for v in vocabs}) > 1:
        raise DataError(f"tying={config.tying} needs one joint vocabulary; vocab sizes are "
                        f"{[len(v) for v in vocabs]} (build it with 'mtk vocab' over all corpora)")
    tcfg = TrainConfig(lr=opts["learning-rate"], warmup=opts["lr-warmup"], avg_decay=opts["avg-decay"],
                       mini_batch_tokens=opts["mini-batch-tokens"], epochs=opts["epochs"],
                       max_updates=opts["max-updates"], workers=opts["workers"], sync=opts["sync"],
                       seed=opts["seed"], log_every=opts["log-every"], clip_norm=opts["clip-norm"],
                       checkpoint_every=opts["checkpoint-every"])

    model_path = Path(opts["model"])
    ckpt = model_path.with_name(model_path.name + ".ckpt")
    metrics = open(opts["metrics-log"], "a", encoding="utf-8") if opts["metrics-log"] else None

    def sink(line):
        print(line, file=sys.stderr, flush=True)
        if metrics:
            metrics.write(line + "\n")
            metrics.flush()

    if ckpt.is_file() and not opts["no-restore"]:
        trainer = Trainer.resume(ckpt, tcfg, log_sink=sink)
        if trainer.model.config != config.resolved():
            raise UsageError(f"{ckpt} was written with a different model configuration")
        log.info("resumed from %s at update %d", ckpt, trainer.update)
    else:
        trainer = Trainer(build_model(config), tcfg, log_sink=sink)
    log.info("model has %d parameters", parameter_count(trainer.model))

    def epoch_end(t):
        if valid:
            from .data import make_batches
            batches = make_batches(valid, n_sources, tcfg.mini_batch_tokens, shuffle=False)
            sink(f"epoch={t.epoch} valid-ce={validation_loss(t.model, batches):.6f}")
        return False

    try:
        trainer.train(streams, n_sources, epoch_end=epoch_end, checkpoint_path=ckpt)
    finally:
        if metrics:
            metrics.close()
    from .modelio import save_model
    save_model(trainer.model, model_path,
               extra_tensors={f"avg.{k}": v for k, v in trainer.average.items()})
    log.info("saved %s after %d updates", model_path, trainer.update)
    return EXIT_OK


def _load_models(paths, use_average=False):
    models = []
    for p in paths:
        model, _, tensors = load_model(p)
        if use_average:
            for k, v in model.params.items():
                if f"avg.{k}" not in tensors:
                    raise DataError(f"{p} has no averaged parameters")
                v[...] = tensors[f"avg.{k}"]
        models.append(model)
    return models


def _source_vocabs(vocabs, n_sources):
    if len(vocabs) != n_sources + 1:
        raise UsageError(f"need {n_sources + 1} vocabularies (sources..., target), got {len(vocabs)}")
    loaded = [Vocabulary.load(p) for p in vocabs]
    return loaded[:-1], loaded[-1]


def cmd_translate(args) -> int:
    models = _load_models(_split_models(args.models), args.use_average)
    src_vocabs, trg_vocab = _source_vocabs(args.vocabs, len(args.input))
    if args.beam_size < 1:
        raise UsageError("--beam-size must be at least 1")
    beam = max(args.beam_size, args.n_best or 0)
    lines = [read_lines(p) for p in args.input]
    results, stats = translate_lines(models, lines, src_vocabs, trg_vocab, beam_size=beam,
                                     n_best=args.n_best or None, batch_size=args.mini_batch,
                                     batch_tokens=args.batch_tokens, alpha=args.normalize,
                                     max_len_factor=args.max_length_factor)
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for entries in results:
            if args.n_best:
                for e in entries:
                    out.write(format_nbest(e) + "\n")
            else:
                out.write(" ".join(entries[0].tokens) + "\n")
    finally:
        if args.output:
            out.close()
    print(f"translated {stats['sentences']} sentences in {stats['seconds']:.3f} s "
          f"({stats['tokens_per_second']:.1f} source tokens/s)", file=sys.stderr)
    return EXIT_OK


def cmd_score(args) -> int:
    (model,) = _load_models([args.model])
    src_vocabs, trg_vocab = _source_vocabs(args.vocabs, len(args.source))
    sources = [[v.encode(line) for line in read_lines(p)] for v, p in zip(src_vocabs, args.source)]
    targets = [trg_vocab.encode(line) for line in read_lines(args.target)]
    if any(len(s) != len(targets) for s in sources):
        raise DataError(f"line counts differ: sources {[len(s) for s in sources]}, "
                        f"target {len(targets)}")
    if model.config.direction == "r2l":
        targets = [invert_r2l(t) for t in targets]
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for i, (total, per) in enumerate(score(model, sources, targets)):
            out.write(f"{i} {total:.6f} {' '.join(f'{p:.6f}' for p in per)}\n")
    finally:
        if args.output:
            out.close()
    return EXIT_OK


def cmd_rescore(args) -> int:
    paths = _split_models(args.models)
    models = _load_models(paths)
    if args.right_left is not None:
        flags = [_to_bool(x) for x in _split_models(args.right_left)]
        if len(flags) != len(models):
            raise UsageError(f"--right-left needs one flag per model ({len(models)})")
    else:
        flags = [m.config.direction == "r2l" for m in models]
    weights = None
    if args.weights:
        try:
            weights = [float(w) for w in _split_models(args.weights)]
        except ValueError:
            raise UsageError(f"bad --weights {args.weights}") from None
    src_vocabs, trg_vocab = _source_vocabs(args.vocabs, len(args.input))
    sources = [[v.encode(line) for line in read_lines(p)] for v, p in zip(src_vocabs, args.input)]
    nbest = parse_nbest(read_lines(args.nbest))
    if sources and len(nbest) > len(sources[0]):
        raise DataError(f"n-best list has {len(nbest)} sentences, source has {len(sources[0])}")
    scorers = [(f"{'R2L' if r else 'L2R'}{k}", m, "r2l" if r else "l2r")
               for k, (m, r) in enumerate(zip(models, flags))]
    ranked = rescore(nbest, scorers, sources, trg_vocab, weights, alpha=args.normalize)
    with open(args.output, "w", encoding="utf-8") as f:
        for entries in ranked:
            for e in entries:
                f.write(format_nbest(e) + "\n")
    if args.output_best:
        with open(args.output_best, "w", encoding="utf-8") as f:
            for entries in ranked:
                f.write(" ".join(entries[0].tokens) + "\n")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtk", description="Neural machine translation toolkit.")
    parser.add_argument("--version", action="version", version=f"mtk {__version__}")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("vocab", help="build a joint vocabulary from corpora")
    p.add_argument("--corpus", nargs="+", required=True, help="one or more corpus files")
    p.add_argument("--max-size", type=int, default=None, help="maximum entries, reserved ones included")
    p.add_argument("--output", required=True, help="vocabulary file to write")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="'key: value' file with any of the options below")
    _add_options(p, TRAIN_OPTIONS)
    p.add_argument("--async", dest="async_", action="store_true", help="same as --sync false")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="beam-search translation with an ensemble")
    p.add_argument("--models", nargs="+", required=True, help="model files (comma or space separated)")
    p.add_argument("--vocabs", nargs="+", required=True, help="source vocabularies, then the target one")
    p.add_argument("--input", nargs="+", required=True, help="source file(s), one per source stream")
    p.add_argument("--output", help="output file (default: stdout)")
    p.add_argument("--beam-size", type=int, default=5, help="beam size (default: 5)")
    p.add_argument("--n-best", type=int, default=0, help="write this many hypotheses per line "
                   "in n-best format; the beam grows to at least N")
    p.add_argument("--normalize", type=float, default=0.6, help="length normalisation exponent")
    p.add_argument("--max-length-factor", type=float, default=2.0,
                   help="maximum output length as a multiple of source length")
    p.add_argument("--mini-batch", type=int, default=64, help="sentences per batch")
    p.add_argument("--batch-tokens", type=int, default=0, help="padded source tokens per batch (0 = off)")
    p.add_argument("--use-average", action="store_true", help="decode with the averaged parameters")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("rescore", help="rescore an n-best list")
    p.add_argument("--nbest", required=True, help="n-best file to rescore")
    p.add_argument("--models", nargs="+", required=True, help="scoring models")
    p.add_argument("--right-left", nargs="+", help="per-model flags (default: each model's direction)")
    p.add_argument("--weights", nargs="+", help="weights: incoming total, then one per model")
    p.add_argument("--normalize", type=float, default=0.6,
                   help="length normalisation exponent for the new features")
    p.add_argument("--vocabs", nargs="+", required=True, help="source vocabularies, then the target one")
    p.add_argument("--input", nargs="+", required=True, help="source file(s)")
    p.add_argument("--output", required=True, help="reranked n-best file")
    p.add_argument("--output-best", help="1-best file")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("score", help="score parallel data with a model")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--vocabs", nargs="+", required=True, help="source vocabularies, then the target one")
    p.add_argument("--source", nargs="*", default=[], help="source file(s); none for language models")
    p.add_argument("--target", required=True, help="target file")
    p.add_argument("--output", help="output file (default: stdout)")
    p.set_defaults(func=cmd_score)
    return parser


def _setup_logging(quiet: bool) -> None:
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[%(asctime)s] %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.quiet)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
