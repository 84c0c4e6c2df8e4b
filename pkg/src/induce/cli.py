"""Command-line entry point.

Subcommands: train, eval, decode, ablate, select, baseline, sample,
gradcheck. Exit codes: 0 success, 1 usage error, 2 data error. The log
level comes from the INDUCE_LOG environment variable (default WARNING).

Heavy imports happen inside the handlers so that --threads can pin the
BLAS thread count before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .errors import DataError, UsageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

log = logging.getLogger("induce.cli")


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; our contract reserves 2 for data errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _pct(x: float) -> float:
    return round(100.0 * x, 2)


def _display_metrics(metrics: dict[str, float]) -> dict[str, float]:
    """F1 fields are fractions internally; reports show percentages."""
    out = dict(metrics)
    for key in ("corpus_f1", "sentence_f1"):
        if key in out:
            out[key] = _pct(out[key])
    out["f1_scale"] = "percent"
    return out


# ---------------------------------------------------------------------------
# shared data loading


def _load_corpus(path: str, max_length: int):
    from .corpus import load_corpus

    return load_corpus(path, max_length=max_length)


def _load_gold(path: str, corpus):
    from .corpus import check_parallel, load_gold_trees

    golds = load_gold_trees(path, corpus.dropped)
    check_parallel(corpus, golds)
    return golds


def _load_embeddings(path: str | None):
    if path is None:
        return None, 0.0
    from .embedfile import read_embeddings

    tick = time.monotonic()
    store = read_embeddings(path)
    return store, time.monotonic() - tick


def _load_model(path: str, precision: str):
    from .model import Model

    return Model.load(path, precision=precision)


def _prepare_eval_inputs(args, model):
    """Corpus (encoded with the model's vocabulary), gold trees, embeddings."""
    from .corpus import encode_corpus
    from .embedfile import check_embedding_alignment

    corpus = _load_corpus(args.corpus, args.max_length)
    encode_corpus(corpus, model.vocab)
    golds = _load_gold(args.trees, corpus) if getattr(args, "trees", None) else None
    embeddings, _ = _load_embeddings(args.embeddings)
    if model.mode == "llm" and model.latent:
        if embeddings is None:
            raise UsageError("this checkpoint conditions on embeddings; pass --embeddings")
        check_embedding_alignment(embeddings, [len(s) for s in corpus.sentences])
    return corpus, golds, embeddings


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_train(args) -> int:
    from .config import config_hash, parse_config_file, resolve_config
    from .trainer import train_run

    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "zero_train": args.zero_train,
        "decoder": args.decoder,
        "precision": args.precision,
    }
    config = resolve_config(file_values, overrides)
    log.info("resolved config %s hash %s", config, config_hash(config))

    train_corpus = _load_corpus(args.corpus, config.max_length)
    val_corpus = _load_corpus(args.val, config.max_length)
    val_gold = _load_gold(args.val_trees, val_corpus)
    test_corpus = test_gold = None
    if args.test:
        test_corpus = _load_corpus(args.test, config.max_length)
        if args.test_trees:
            test_gold = _load_gold(args.test_trees, test_corpus)
    train_emb, t_load = _load_embeddings(args.embeddings)
    val_emb, v_load = _load_embeddings(args.val_embeddings)
    test_emb, s_load = _load_embeddings(args.test_embeddings)

    record = train_run(
        config,
        train_corpus,
        val_corpus,
        val_gold,
        args.out,
        train_embeddings=train_emb,
        val_embeddings=val_emb,
        test_corpus=test_corpus,
        test_gold=test_gold,
        test_embeddings=test_emb,
        embed_load_seconds=t_load + v_load + s_load,
    )
    _emit(
        {
            "config_hash": record.config_hash,
            "seed": record.seed,
            "best_epoch": record.best_epoch,
            "val_metrics": _display_metrics(record.val_metrics),
            "test_metrics": _display_metrics(record.test_metrics) if record.test_metrics else None,
            "checkpoint": record.checkpoint_path,
            "record": str(Path(args.out) / "record.json"),
        }
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate_model

    model = _load_model(args.checkpoint, args.precision)
    corpus, golds, embeddings = _prepare_eval_inputs(args, model)
    metrics = evaluate_model(model, corpus, golds, embeddings, decoder=args.decoder)
    _emit({"config_hash": model.config_hash, "decoder": args.decoder, **_display_metrics(metrics)})
    return EXIT_OK


def cmd_decode(args) -> int:
    from .trees import linearize

    model = _load_model(args.checkpoint, args.precision)
    corpus, _, embeddings = _prepare_eval_inputs(args, model)
    trees = model.decode(corpus.sentences, embeddings, decoder=args.decoder)
    lines = [linearize(t, tokens=s.tokens) for t, s in zip(trees, corpus.sentences)]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        for line in lines:
            print(line)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import ABLATION_KINDS, ablated_eval

    model = _load_model(args.checkpoint, args.precision)
    corpus, golds, embeddings = _prepare_eval_inputs(args, model)
    kinds = ABLATION_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        report = ablated_eval(
            model, corpus, golds, embeddings, kind=kind, seed=args.seed, decoder=args.decoder
        )
        print(
            json.dumps(
                {
                    "ablation": report.kind,
                    "config_hash": model.config_hash,
                    "identical_to_default": report.identical_to_default,
                    **_display_metrics(report.metrics),
                },
                sort_keys=True,
            )
        )
    return EXIT_OK


def cmd_select(args) -> int:
    from .evaluate import select_runs
    from .trainer import RunRecord

    paths = sorted(Path(args.runs).glob("**/record.json"))
    if not paths:
        raise DataError(f"no record.json files under {args.runs}")
    records = [RunRecord.from_json(p.read_text(encoding="utf-8")) for p in paths]
    sel = select_runs(records, criterion=args.criterion, k=args.k)
    _emit(
        {
            "criterion": sel.criterion,
            "k": args.k,
            "runs_considered": len(records),
            "chosen_seeds": sel.chosen_seeds,
            "corpus_f1": {"mean": _pct(sel.mean_corpus_f1), "std": _pct(sel.std_corpus_f1)},
            "sentence_f1": {"mean": _pct(sel.mean_sentence_f1), "std": _pct(sel.std_sentence_f1)},
            "f1_scale": "percent",
            "reported_split": "test" if sel.used_test_metrics else "val",
        }
    )
    return EXIT_OK


def cmd_baseline(args) -> int:
    import numpy as np

    from .evaluate import baseline_tree, corpus_f1, corpus_mbf, sentence_f1

    corpus = _load_corpus(args.corpus, args.max_length)
    golds = _load_gold(args.trees, corpus)
    rng = np.random.default_rng(args.seed)
    trees = [baseline_tree(args.kind, len(s), rng) for s in corpus.sentences]
    cf1 = corpus_f1(trees, golds)
    _emit(
        {
            "baseline": args.kind,
            "seed": args.seed if args.kind == "random" else None,
            "corpus_f1": _pct(cf1.f1),
            "precision": _pct(cf1.precision),
            "recall": _pct(cf1.recall),
            "sentence_f1": _pct(sentence_f1(trees, golds)),
            "mbf": corpus_mbf(trees),
            "f1_scale": "percent",
        }
    )
    return EXIT_OK


def cmd_sample(args) -> int:
    from .grammar import explicit_grammar, parse_grammar_file
    from .parser import sample_corpus
    from .trees import linearize

    grammar = explicit_grammar(parse_grammar_file(Path(args.grammar).read_text(encoding="utf-8")))
    samples = sample_corpus(grammar, args.count, max_len=args.max_len, seed=args.seed)
    token_lines = [" ".join(tokens) for tokens, _ in samples]
    tree_lines = [linearize(tree, tokens=tokens) for tokens, tree in samples]
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.tokens").write_text("\n".join(token_lines) + "\n", encoding="utf-8")
        Path(f"{prefix}.trees").write_text("\n".join(tree_lines) + "\n", encoding="utf-8")
        log.info("wrote %s.tokens and %s.trees", prefix, prefix)
    else:
        for line in tree_lines:
            print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import autograd as ag
    from .config import TrainConfig
    from .corpus import Sentence, Vocabulary
    from .embedfile import EmbeddingStore
    from .model import Model
    from .trainer import batch_pooled, draw_noise, elbo_loss

    tolerance = 1e-6
    results = {}
    for mode, zero_train in (("baseline", True), ("baseline", False), ("llm", False)):
        config = TrainConfig(
            n_nonterminals=2, n_preterminals=3, dim=8, z_dim=4, mode=mode,
            zero_train=zero_train, batch_size=4, max_length=10, vocab_size=10,
            seed=args.seed, precision="f64",
        )
        vocab = Vocabulary.from_tokens(["<unk>", "a", "b", "c", "d"])
        llm_dim = 12 if mode == "llm" else None
        model = Model.build(config, vocab, llm_dim=llm_dim, config_hash="gradcheck")
        rng = np.random.default_rng(args.seed + 1)
        ids = rng.integers(0, len(vocab), size=(3, 4))
        sents = [
            Sentence([vocab.tokens[i] for i in row], si, ids=np.asarray(row))
            for si, row in enumerate(ids)
        ]
        embeddings = None
        if mode == "llm":
            embeddings = EmbeddingStore(
                llm_dim, [rng.standard_normal((4, llm_dim)).astype(np.float32) for _ in range(3)]
            )
        noise = None
        if not zero_train:
            noise = draw_noise(rng, 3, model.encoder_in_dim, config.z_dim, config.dropout, np.float64)

        def loss_fn(store):
            return elbo_loss(model, ids, batch_pooled(model, sents, embeddings), noise).loss

        results[f"{mode},zero_train={zero_train}"] = ag.finite_diff_check(loss_fn, model.store)

    worst = max(results.values())
    _emit({"max_relative_error": results, "tolerance": tolerance, "ok": worst <= tolerance})
    if worst > tolerance:
        raise DataError(f"gradient check failed: max relative error {worst:.3e} > {tolerance}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser construction and dispatch


def _add_eval_flags(p: _ArgumentParser, trees_required: bool) -> None:
    p.add_argument("checkpoint", help="model checkpoint file")
    p.add_argument("corpus", help="corpus file, one sentence per line")
    if trees_required:
        p.add_argument("--trees", required=True, help="gold trees, one bracketed line per sentence")
    p.add_argument("--embeddings", default=None, help="embedding file for llm-mode checkpoints")
    p.add_argument("--decoder", choices=("mbr", "viterbi"), default="mbr")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--max-length", type=int, default=45)


def build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="induce", description=__doc__.split("\n\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="train one seed, write checkpoint + record")
    p.add_argument("corpus")
    p.add_argument("--val", required=True)
    p.add_argument("--val-trees", required=True)
    p.add_argument("--test", default=None)
    p.add_argument("--test-trees", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--val-embeddings", default=None)
    p.add_argument("--test-embeddings", default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=("baseline", "llm"), default=None)
    p.add_argument("--zero-train", action="store_const", const=True, default=None)
    p.add_argument("--decoder", choices=("mbr", "viterbi"), default=None)
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for a checkpoint on a corpus with gold trees")
    _add_eval_flags(p, trees_required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="parse a corpus, one bracketed tree per line")
    _add_eval_flags(p, trees_required=False)
    p.add_argument("--out", default=None, help="write trees here instead of stdout")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("ablate", help="evaluate with a latent or input pathway disabled")
    _add_eval_flags(p, trees_required=True)
    p.add_argument(
        "--kind",
        choices=("all", "default", "zero_z", "random_z", "shuffle", "zero_captions"),
        default="all",
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("select", help="top-k of several runs by a validation criterion")
    p.add_argument("runs", help="directory tree containing record.json files")
    p.add_argument("--criterion", choices=("val_f1", "ppl", "mbf"), default="val_f1")
    p.add_argument("--k", type=int, default=4)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("baseline", help="score a rule-based tree baseline")
    p.add_argument("corpus")
    p.add_argument("--trees", required=True)
    p.add_argument("--kind", choices=("left", "right", "random"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-length", type=int, default=45)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sample", help="sample sentences and trees from an explicit grammar")
    p.add_argument("--grammar", required=True, help="text file, one rule per line: 'A -> B C 0.5'")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=45)
    p.add_argument("--out", default=None, help="path prefix for .tokens and .trees files")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference self-test on a tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _configure_logging() -> None:
    level = os.environ.get("INDUCE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
