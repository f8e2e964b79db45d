"""Command line interface: ``qraug <subcommand> ...``.

Every subcommand reads the layered configuration (``--config``,
``--profile``, ``QRAUG_*`` environment variables) and lets its own flags
override single keys. Exit status is 2 for usage and schema errors and 1 for
runtime failures.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import REWARDS, reward
from .augmenter import MODES, AugmentSummary, augment, merge_training_sets
from .config import PROFILES, Config
from .corpus import Vocabulary, build_vocab, read_pairs, split_pairs, write_pairs
from .encoder import SemanticEncoder
from .phonetics import load_lexicon
from .retrieval import build_index, evaluate_p_at_k, train_retriever
from .rewards import score_pairs, train_semantic_encoder
from .scst import train_scst
from .seq2seq import Seq2SeqModel, as_examples, train_mle
from .synthetic import CorpusStats, generate_synthetic_corpus
from .util import JsonlWriter, read_jsonl, write_jsonl

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _metrics(path: str | None) -> JsonlWriter | None:
    return JsonlWriter(path) if path else None


def _read_rewrites(path: str) -> list[str]:
    """Rewrites from a JSON-lines dataset (``rewrite`` field) or a text file."""
    p = Path(path)
    if ".jsonl" in p.suffixes:
        out = []
        for lineno, record in read_jsonl(p):
            if not isinstance(record.get("rewrite"), str):
                raise ValueError(f"{path}:{lineno}: field 'rewrite' must be a string")
            out.append(record["rewrite"])
        return out
    return [line for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def _write_report(report: dict, path: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _dev_split(pairs, config: Config):
    f = config.corpus.dev_fraction
    return split_pairs(pairs, [1.0 - f, f], config.corpus.seed)


def cmd_gen_corpus(args, config: Config) -> None:
    c = config.corpus
    stats = CorpusStats()
    pairs = generate_synthetic_corpus(c.seed, c.n_pairs, load_lexicon(args.lexicon), weights=c.weights, stats=stats)
    n = write_pairs(args.out, pairs)
    logger.info("wrote %d pairs to %s (%s)", n, args.out, dict(stats.tags))


def cmd_build_vocab(args, config: Config) -> None:
    vocab = build_vocab(read_pairs(args.input), config.corpus.min_count)
    vocab.save(args.out)
    logger.info("wrote %d tokens to %s", len(vocab), args.out)


def cmd_train_mle(args, config: Config) -> None:
    pairs = read_pairs(args.data)
    vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab(pairs, config.corpus.min_count)
    if args.dev:
        fit, dev = pairs, read_pairs(args.dev)
    else:
        fit, dev = _dev_split(pairs, config)
    max_len = config.model.max_len
    model = Seq2SeqModel(config.model, vocab)
    metrics = _metrics(args.metrics)
    try:
        result = train_mle(
            model,
            as_examples(fit, vocab, max_len=max_len),
            config.train,
            dev=as_examples(dev, vocab, max_len=max_len) or None,
            metrics=metrics,
            progress=args.progress,
        )
    finally:
        if metrics is not None:
            metrics.close()
    model.save(args.out_ckpt)
    logger.info("mle: %s, saved %s", result, args.out_ckpt)


def cmd_train_encoder(args, config: Config) -> None:
    pairs = read_pairs(args.data)
    metrics = _metrics(args.metrics)
    try:
        if args.kind == "retrieval":
            encoder = train_retriever(pairs, config.retrieval, metrics=metrics, progress=args.progress)
        else:
            encoder = train_semantic_encoder(pairs, config.encoder, metrics=metrics, progress=args.progress)
    finally:
        if metrics is not None:
            metrics.close()
    encoder.save(args.out_ckpt)
    logger.info("saved %s encoder %s", args.kind, args.out_ckpt)


def _reward(name: str, config: Config, lexicon_path: str | None, encoder_path: str | None):
    params: dict = {}
    if name in ("phonetic", "combined"):
        params["lexicon"] = load_lexicon(lexicon_path)
    if name in ("semantic", "combined"):
        if not encoder_path:
            raise ValueError(f"the {name} reward needs --encoder")
        params["encoder"] = SemanticEncoder.load(encoder_path)
    if name == "combined":
        params["alpha"] = config.scst.alpha
    return reward(name, **params)


def cmd_train_scst(args, config: Config) -> None:
    model = Seq2SeqModel.load(args.ckpt)
    fit, dev = _dev_split(read_pairs(args.data), config)
    max_len = model.config.max_len
    fn = _reward(config.scst.reward, config, args.lexicon, args.encoder)
    metrics = _metrics(args.metrics)
    try:
        result = train_scst(
            model,
            as_examples(fit, model.vocab, max_len=max_len),
            fn,
            config.scst,
            dev=as_examples(dev, model.vocab, max_len=max_len) or None,
            metrics=metrics,
            progress=args.progress,
        )
    finally:
        if metrics is not None:
            metrics.close()
    model.save(args.out_ckpt)
    logger.info(
        "scst: %d steps, %d restores, best dev reward %s", result.steps, result.restores, result.best_dev_reward
    )


def cmd_augment(args, config: Config) -> None:
    model = Seq2SeqModel.load(args.ckpt)
    lexicon = load_lexicon(args.lexicon)
    encoder = SemanticEncoder.load(args.encoder) if args.encoder else None
    summary = AugmentSummary()
    pairs = augment(
        model,
        _read_rewrites(args.rewrites),
        config.augment,
        lexicon=lexicon,
        encoder=encoder,
        summary=summary,
        progress=args.progress,
    )
    n = write_pairs(args.out, pairs)
    logger.info(
        "wrote %d synthetic pairs to %s (%d inputs, %d candidates)", n, args.out, summary.inputs, summary.candidates
    )


def cmd_score_rewards(args, config: Config) -> None:
    encoder = SemanticEncoder.load(args.encoder) if args.encoder else None
    records = score_pairs(read_pairs(args.pairs), load_lexicon(args.lexicon), encoder, config.scst.alpha)
    n = write_jsonl(args.out, records)
    logger.info("scored %d pairs into %s", n, args.out)


def cmd_merge(args, config: Config) -> None:
    merged = merge_training_sets(read_pairs(args.a), read_pairs(args.b))
    write_pairs(args.out, merged)


def cmd_eval_retrieval(args, config: Config) -> None:
    encoder = SemanticEncoder.load(args.encoder)
    index = build_index(encoder, _read_rewrites(args.index_data))
    report = evaluate_p_at_k(index, read_pairs(args.test), config.retrieval.ks)
    _write_report(report.to_record(), args.report)


def cmd_run_experiment(args, config: Config) -> None:
    from .experiment import run_experiment

    _write_report(run_experiment(config, workdir=args.workdir, progress=args.progress), args.report)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--profile", choices=sorted(PROFILES), help="configuration profile")
    common.add_argument(
        "--progress",
        action=argparse.BooleanOptionalAction,
        default=sys.stderr.isatty(),
        help="progress bars on standard error (default: when it is a terminal)",
    )

    parser = argparse.ArgumentParser(prog="qraug", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging threshold (default: INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=func)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "generate a synthetic (request, rewrite) corpus")
    p.add_argument("--seed", type=int, dest="corpus.seed")
    p.add_argument("--n", type=int, dest="corpus.n_pairs", help="number of pairs")
    p.add_argument("--lexicon", help="pronouncing dictionary (default: bundled)")
    p.add_argument("--out", required=True)

    p = add("build-vocab", cmd_build_vocab, "build a vocabulary from a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--min-count", type=int, dest="corpus.min_count")
    p.add_argument("--out", required=True)

    p = add("train-mle", cmd_train_mle, "train the rewrite-to-request model by maximum likelihood")
    p.add_argument("--data", required=True)
    p.add_argument("--dev", help="dev dataset (default: split off the training data)")
    p.add_argument("--vocab", help="vocabulary file (default: built from --data)")
    p.add_argument("--steps", type=int, dest="train.steps")
    p.add_argument("--lr", type=float, dest="train.lr")
    p.add_argument("--seed", type=int, dest="train.seed")
    p.add_argument("--metrics", help="JSON-lines metrics file")
    p.add_argument("--out-ckpt", required=True)

    p = add("train-encoder", cmd_train_encoder, "train a sentence encoder contrastively")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=["reward", "retrieval"], default="reward")
    p.add_argument("--metrics", help="JSON-lines metrics file")
    p.add_argument("--out-ckpt", required=True)

    p = add("train-scst", cmd_train_scst, "fine-tune with self-critical policy gradients")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--reward", choices=sorted(REWARDS), dest="scst.reward")
    p.add_argument("--alpha", type=float, dest="scst.alpha")
    p.add_argument("--mle-weight", type=float, dest="scst.mle_weight")
    p.add_argument("--steps", type=int, dest="scst.steps")
    p.add_argument("--seed", type=int, dest="scst.seed")
    p.add_argument("--lexicon", help="pronouncing dictionary (default: bundled)")
    p.add_argument("--encoder", help="frozen reward encoder checkpoint")
    p.add_argument("--metrics", help="JSON-lines metrics file")
    p.add_argument("--out-ckpt", required=True)

    p = add("augment", cmd_augment, "generate synthetic pairs from golden rewrites")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rewrites", required=True, help="text file (one per line) or JSON-lines dataset")
    p.add_argument("--mode", choices=MODES, dest="augment.mode")
    p.add_argument("--n-per-input", type=int, dest="augment.n_per_input")
    p.add_argument("--temperature", type=float, dest="augment.temperature")
    p.add_argument("--seed", type=int, dest="augment.seed")
    p.add_argument("--lexicon", help="pronouncing dictionary (default: bundled)")
    p.add_argument("--encoder", help="reward encoder checkpoint, adds r_d to every pair")
    p.add_argument("--out", required=True)

    p = add("score-rewards", cmd_score_rewards, "score dataset pairs with the rewards")
    p.add_argument("--pairs", required=True)
    p.add_argument("--lexicon", help="pronouncing dictionary (default: bundled)")
    p.add_argument("--encoder", help="reward encoder checkpoint, adds r_d and r_c")
    p.add_argument("--alpha", type=float, dest="scst.alpha")
    p.add_argument("--out", required=True)

    p = add("merge", cmd_merge, "merge two datasets, dropping duplicate pairs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)

    p = add("eval-retrieval", cmd_eval_retrieval, "measure P@K of a retrieval encoder")
    p.add_argument("--encoder", required=True)
    p.add_argument("--index-data", required=True, help="rewrites to index")
    p.add_argument("--test", required=True)
    p.add_argument("--ks", type=_int_list, dest="retrieval.ks", help="comma-separated K values (default: 1,5)")
    p.add_argument("--report", help="JSON report path (default: standard output)")

    p = add("run-experiment", cmd_run_experiment, "run the full augmentation comparison")
    p.add_argument("--seed", type=int, dest="experiment.seed")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, dest="experiment.augment", default=None)
    p.add_argument("--workdir", help="directory for datasets and metrics")
    p.add_argument("--report", help="JSON report path (default: standard output)")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            out.setdefault(section, {})[key] = value
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = Config.load(args.config, profile=args.profile, overrides=_overrides(args))
    except (ValueError, TypeError) as e:
        print(f"qraug: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"qraug: error: {e}", file=sys.stderr)
        return 1
    try:
        args.func(args, config)
    except (ValueError, TypeError) as e:
        print(f"qraug {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as e:
        print(f"qraug {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0
