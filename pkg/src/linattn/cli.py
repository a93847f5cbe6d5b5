"""Command-line entry point: ``linattn <command> ...``.

Exit codes: 0 success, 1 validation failure (bad input, unknown document,
failed self-test), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from linattn.config import read_kv

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2
MODE_CHOICES = ("none", "softmax", "linear", "gated")


def _common(defaults: bool) -> argparse.ArgumentParser:
    # the global flags are accepted before or after the command name
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, help="random seed", **({"default": None} if defaults else kw))
    p.add_argument("--k", type=int, help="hidden / sketch dimension", **({"default": None} if defaults else kw))
    p.add_argument("--mode", choices=MODE_CHOICES, help="attention mechanism",
                   **({"default": None} if defaults else kw))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(defaults=False)
    parser = argparse.ArgumentParser(prog="linattn", parents=[_common(defaults=True)],
                                     description="Linear attention kernels, cloze reader, sketch store and benchmarks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("encode", parents=[common], help="encode a directory of token files into a sketch store")
    p.add_argument("corpus")
    p.add_argument("store")
    p.add_argument("--params", help="trained model (.npz) whose encoders to use; random encoders otherwise")
    p.add_argument("--d", type=int, default=32, help="embedding size for random encoders")

    p = sub.add_parser("query", parents=[common], help="look up a stored document with a query")
    p.add_argument("store")
    p.add_argument("doc_id")
    p.add_argument("query", nargs="+", help="query text")

    p = sub.add_parser("train", parents=[common], help="train a cloze reader from a key = value config")
    p.add_argument("config")
    p.add_argument("--out", help="write trained parameters (.npz)")
    p.add_argument("--log", help="write per-epoch JSON lines here (default stdout)")
    p.add_argument("--dump-valid", help="write the validation set as TSV for later eval")

    p = sub.add_parser("eval", parents=[common], help="accuracy of saved parameters on a TSV dataset")
    p.add_argument("params")
    p.add_argument("dataset")

    p = sub.add_parser("bench", parents=[common], help="lookup and encoding benchmarks (CSV on stdout)")
    p.add_argument("config")
    p.add_argument("--out", help="also write the CSV here")

    sub.add_parser("selftest", parents=[common], help="gradient, equivalence and reversibility suites")
    return parser


def _load_model(path):
    from linattn.qa.data import Vocabulary
    from linattn.qa.model import ModelParams

    params, extra = ModelParams.load(path)
    if "vocab" not in extra:
        raise ValueError(f"{path} carries no vocabulary; save it with `linattn train --out`")
    return params, Vocabulary.from_json(extra["vocab"])


def cmd_encode(args) -> int:
    from linattn.store import Encoder, describe, encode_corpus, vocab_from_corpus

    if args.params:
        params, vocab = _load_model(args.params)
        encoder = Encoder.from_model(params, vocab)
    else:
        encoder = Encoder.random(vocab_from_corpus(args.corpus), args.d, args.k or 32, args.seed or 0)
    if not Path(args.corpus).is_dir():
        raise ValueError(f"corpus {args.corpus} is not a directory")
    index = encode_corpus(args.corpus, encoder, args.store)
    print(describe(index))
    return EXIT_OK


def cmd_query(args) -> int:
    from linattn.store import SketchStore

    store = SketchStore(args.store)
    R = store.query(args.doc_id, " ".join(args.query).split())
    print(" ".join(repr(float(x)) for x in R))
    return EXIT_OK


def cmd_train(args) -> int:
    from linattn.qa.data import generate_synthetic_cloze, write_examples
    from linattn.qa.train import TrainConfig, train

    values = read_kv(args.config)
    for key in ("seed", "k", "mode"):
        if getattr(args, key) is not None:
            values[key] = str(getattr(args, key))
    cfg = TrainConfig.from_mapping(values)
    data = generate_synthetic_cloze(cfg)
    sink = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        params, _ = train(cfg, data=data, sink=sink)
    finally:
        if args.log:
            sink.close()
    vocab = data[2]
    if args.out:
        params.save(args.out, vocab=vocab.to_json())
    if args.dump_valid:
        write_examples(args.dump_valid, data[1], vocab)
    return EXIT_OK


def cmd_eval(args) -> int:
    from linattn.qa.data import ingest_examples
    from linattn.qa.train import evaluate

    params, vocab = _load_model(args.params)
    examples, _ = ingest_examples(args.dataset, vocab)
    mode = args.mode or params.mode
    acc = evaluate(params, examples, vocab, mode)
    print(json.dumps({"mode": mode, "examples": len(examples), "accuracy": acc}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from linattn.bench import BenchConfig, pin_to_one_cpu, run_bench, to_csv

    values = read_kv(args.config)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.k is not None:
        values["ks"] = str(args.k)
    cfg = BenchConfig.from_mapping(values)
    pin_to_one_cpu()
    records, summary = run_bench(cfg)
    text = to_csv(records)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from linattn.checks import run_selftest

    results = run_selftest(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<30} {r.detail}  ({r.seconds:.2f}s)")
    n_ok = sum(r.passed for r in results)
    print(f"{n_ok}/{len(results)} suites passed")
    return EXIT_OK if n_ok == len(results) else EXIT_INVALID


COMMANDS = {"encode": cmd_encode, "query": cmd_query, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "selftest": cmd_selftest}


def main(argv=None) -> int:
    from linattn.qa.train import TrainingDiverged
    from linattn.store import SketchFileError, UnknownDocumentError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UnknownDocumentError as exc:
        print(f"error: unknown document id {exc.args[0]!r}", file=sys.stderr)
    except (ValueError, SketchFileError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
