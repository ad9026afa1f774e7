"""Command-line entry point: ``robust-embed {train,eval,attack,plot}``.

Settings resolve as command-line flag > ``--config`` file > built-in default.
The config file is flat ``key = value`` text with ``#`` comments.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .attacks import (
    ClassificationGoal,
    VictimModel,
    char_bugger_attack,
    summarize,
    synonym_swap_attack,
)
from .checkpoint import CheckpointError
from .encoder import EncoderConfig, TextEncoder, Vocab, random_encoder, tokenize
from .evaluation import (
    ProbeClassifier,
    build_advsts,
    embedding_metrics,
    evaluate_sts,
    transfer_probe,
)
from .perturbation import HyperParams
from .plotting import ReportError, plot_reports, read_report
from .trainer import TrainingDiverged, derive_seed, load_text_encoder, save_checkpoint, train

log = logging.getLogger("robust_embed")

EXIT_USAGE = 2
EXIT_DIVERGED = 3
MISMATCH_OOV = 0.5

_HYPER = {f.name: f for f in fields(HyperParams)}
_ENCODER = {f.name: f for f in fields(EncoderConfig) if f.name != "vocab_size"}
_RUN = {
    "seed": 0,
    "embedding_init": "random",
    "reset_v_each_epoch": False,
    "workers": 1,
}


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def default_config() -> dict:
    cfg = HyperParams().as_dict()
    cfg.update({k: f.default for k, f in _ENCODER.items()})
    cfg.update(_RUN)
    return cfg


def _types() -> dict:
    out = {}
    for k, v in default_config().items():
        if k == "sigma":
            out[k] = float
        elif isinstance(v, bool):
            out[k] = _parse_bool
        else:
            out[k] = type(v)
    return out


def _parse_bool(s) -> bool:
    if isinstance(s, bool):
        return s
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def format_value(v) -> str:
    if isinstance(v, float):
        # 1e-05 -> 1e-5
        return re.sub(r"e([+-])0*(\d)", r"e\1\2", repr(v))
    return str(v)


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    types = _types()
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        key, sep, val = s.partition("=")
        key = key.strip()
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key = value")
        if key not in types:
            raise CliError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            out[key] = types[key](val.strip())
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def resolve_config(args) -> dict:
    """Defaults, then the config file, then explicitly passed flags."""
    cfg = default_config()
    explicit = read_config_file(args.config) if getattr(args, "config", None) else {}
    explicit.update({k: getattr(args, k) for k in cfg if getattr(args, k, None) is not None})
    cfg.update(explicit)
    if "sigma" not in explicit:
        # the initial perturbation radius follows epsilon unless set on its own
        cfg["sigma"] = cfg["epsilon"]
    try:
        hyper_from(cfg)
        EncoderConfig(vocab_size=1, **{k: cfg[k] for k in _ENCODER})
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    if cfg["embedding_init"] not in ("random", "distributional"):
        raise CliError("invalid configuration: embedding_init must be random or distributional")
    if cfg["workers"] < 1:
        raise CliError("invalid configuration: workers must be >= 1")
    return cfg


def hyper_from(cfg) -> HyperParams:
    return HyperParams(**{k: cfg[k] for k in _HYPER})


def dump_config(cfg) -> str:
    return "".join(f"{k}={format_value(cfg[k])}\n" for k in sorted(cfg))


def output_root() -> Path:
    return Path(os.environ.get("ROBUST_EMBED_HOME", "runs"))


def _out_dir(args, name) -> Path:
    p = Path(args.out) if getattr(args, "out", None) else output_root() / name
    p.mkdir(parents=True, exist_ok=True)
    return p


def _need_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"file not found: {p}")
    return p


def _dataset(path, name) -> Path:
    return _need_file(path) if path else D.bundled_path(name)


def _write_report(out: Path, metrics: dict, cfg: dict, extra: dict | None = None):
    lines = "".join(f"{k}={format_value(v)}\n" for k, v in metrics.items())
    (out / "report.txt").write_text(lines, encoding="utf-8")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    summary = dict(metrics)
    summary.update(extra or {})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(lines)
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


def _check_vocab(model: TextEncoder, texts, what):
    words = [w for t in texts for w in tokenize(t)]
    if not words:
        raise CliError(f"{what} contains no tokens")
    oov = sum(w not in model.vocab for w in words) / len(words)
    if oov > MISMATCH_OOV:
        raise CliError(f"checkpoint/dataset mismatch: {oov:.0%} of {what} tokens are unknown to the checkpoint vocabulary")


def _load_model(args, cfg) -> TextEncoder:
    if getattr(args, "random_init", False):
        sents = D.read_corpus(_dataset(getattr(args, "corpus", None), "corpus"))
        vocab = Vocab.build(sents)
        enc = random_encoder(len(vocab), seed=derive_seed(cfg["seed"], "init"),
                             **{k: cfg[k] for k in _ENCODER})
        enc.eval()
        return TextEncoder(vocab, enc)
    if not args.checkpoint:
        raise CliError("--checkpoint is required (or --random-init)")
    ck = _need_file(args.checkpoint)
    try:
        return load_text_encoder(ck)
    except CheckpointError as exc:
        raise CliError(f"cannot load checkpoint {ck}: {exc}") from exc


# ------------------------------------------------------------------ commands

def cmd_train(args, cfg):
    corpus = _need_file(args.corpus) if args.corpus else D.bundled_path("corpus")
    sentences = D.read_corpus(corpus)
    out = _out_dir(args, "train")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    hyper = hyper_from(cfg)
    validate = None
    if args.dev:
        dev = D.read_sts(_need_file(args.dev))
        validate = lambda m: evaluate_sts(m, dev)  # noqa: E731
    try:
        state, records = train(
            sentences, hyper, seed=cfg["seed"],
            encoder_kwargs={k: cfg[k] for k in _ENCODER},
            validate=validate, log_path=out / "train.log",
            reset_v_each_epoch=cfg["reset_v_each_epoch"],
            embedding_init=cfg["embedding_init"],
        )
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    save_checkpoint(state, out / "checkpoint")
    by_epoch = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r["L_total"])
    means = {e: float(np.mean(v)) for e, v in by_epoch.items()}
    metrics = {
        "steps": state.step,
        "epochs": hyper.epochs,
        "first_epoch_loss": means[1],
        "final_epoch_loss": means[hyper.epochs],
        "final_L_con": records[-1]["L_con"],
        "checkpoint": str(out / "checkpoint"),
    }
    if state.best_metric is not None:
        metrics["best_dev_spearman"] = state.best_metric
    _write_report(out, metrics, cfg, {"epoch_mean_loss": means})


def cmd_eval(args, cfg):
    model = _load_model(args, cfg)
    out = _out_dir(args, f"eval-{args.task}")
    label = {"label": args.label} if args.label else {}
    if args.task == "sts":
        data = D.read_sts(_dataset(args.data, "sts"))
        _check_vocab(model, [e.sentence_a + " " + e.sentence_b for e in data], "STS data")
        metrics = {**label, "spearman": evaluate_sts(model, data), "n": len(data)}
    elif args.task == "transfer":
        tr = D.read_classification(_dataset(args.train, "sentiment_train"))
        te = D.read_classification(_dataset(args.test, "sentiment_test"))
        _check_vocab(model, [e.text for e in tr + te], "classification data")
        res = transfer_probe(model, tr, te, seed=cfg["seed"])
        metrics = {**label, "accuracy": res.accuracy, "n_train": len(tr), "n_test": len(te)}
    else:
        sents = D.read_corpus(_dataset(args.data, "corpus"))[: args.n]
        _check_vocab(model, sents, "sentences")
        metrics = {**label, **_alignment_uniformity(model, sents, cfg["seed"]), "n": len(sents)}
    _write_report(out, metrics, cfg)


def _alignment_uniformity(model: TextEncoder, sents, seed):
    """Alignment between two dropout views; uniformity of the clean embeddings."""
    s1, s2 = derive_seed(seed, "align-a"), derive_seed(seed, "align-b")

    @torch.no_grad()
    def views(texts):
        b = model.batch(texts)
        return (model.encoder.encode(b, s1).double().numpy(), model.encoder.encode(b, s2).double().numpy())

    return embedding_metrics(model, sents, dropout_model=views)


def _run_attacks(jobs, workers):
    if workers == 1:
        return [j() for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: j(), jobs))


def cmd_attack(args, cfg):
    model = _load_model(args, cfg)
    out = _out_dir(args, f"attack-{args.task}")
    lex = D.read_lexicon(_dataset(args.lexicon, "lexicon"))
    seed = cfg["seed"]

    def make_attack(i):
        if args.attack == "synonym":
            return lambda v, t, g: synonym_swap_attack(v, t, lex, budget=args.budget, goal=g, saliency=args.saliency)
        return lambda v, t, g: char_bugger_attack(v, t, budget=args.budget, goal=g, seed=derive_seed(seed, f"bug-{i}"))

    label = {"label": args.label} if args.label else {}
    if args.task == "classify":
        tr = D.read_classification(_dataset(args.train, "sentiment_train"))
        te = D.read_classification(_dataset(args.test, "sentiment_test"))[: args.n]
        _check_vocab(model, [e.text for e in tr + te], "classification data")
        probe = transfer_probe(model, tr, te, seed=seed)
        clf = ProbeClassifier(model, probe.classifier)
        jobs = [
            (lambda i=i, e=e: make_attack(i)(VictimModel(clf), e.text, ClassificationGoal(e.label)))
            for i, e in enumerate(te)
        ]
        results = _run_attacks(jobs, cfg["workers"])
        s = summarize(results)
        metrics = {
            **label,
            "success_rate": s.success_rate,
            "mean_queries": s.mean_queries,
            "clean_accuracy": s.clean_accuracy,
            "adversarial_accuracy": s.adversarial_accuracy,
            "accuracy_reduction": s.clean_accuracy - s.adversarial_accuracy,
            "n": s.n,
            "eligible": s.eligible,
        }
    else:
        data = D.read_sts(_dataset(args.data, "sts"))[: args.n]
        _check_vocab(model, [e.sentence_a + " " + e.sentence_b for e in data], "STS data")
        outcome = build_advsts(model, data, make_attack(0), delta_threshold=args.delta)
        results = outcome.results
        D.write_sts(out / "advsts.tsv", outcome.examples)
        metrics = {
            **label,
            "success_rate": outcome.success_rate,
            "mean_queries": float(np.mean([r.queries for r in results])),
            "delta": args.delta,
            "n": len(results),
        }
    with open(out / "results.jsonl", "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")
    _write_report(out, metrics, cfg)


def cmd_plot(args, cfg):
    try:
        reports = [read_report(_need_file(p)) for p in args.reports]
        written = plot_reports(reports, _out_dir(args, "plots") if reports else None)
    except ReportError as exc:
        raise CliError(str(exc)) from exc
    for p in written:
        print(f"wrote={p}")


# ------------------------------------------------------------------ parsing

def _add_config_flags(p, default=None):
    g = p.add_argument_group("settings (override --config and defaults)")
    for name, typ in _types().items():
        flag = "--" + name.replace("_", "-")
        if name in ("K", "T"):
            flag = "--" + name
        if typ is _parse_bool:
            g.add_argument(flag, dest=name, nargs="?", const=True, default=default, type=_parse_bool)
        else:
            g.add_argument(flag, dest=name, type=typ, default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-embed", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved settings and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(parser)
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: $ROBUST_EMBED_HOME/<command>)")
    common.add_argument("--label", help="name used for this run in plots")

    t = sub.add_parser("train", parents=[common], help="train an encoder")
    t.add_argument("--corpus", help="one sentence per line (default: bundled toy corpus)")
    t.add_argument("--dev", help="STS file used to keep the best epoch")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint")
    model.add_argument("--random-init", action="store_true", help="use an untrained encoder instead")
    model.add_argument("--corpus", help="vocabulary source for --random-init")

    e = sub.add_parser("eval", parents=[common, model], help="evaluate a checkpoint")
    e.add_argument("task", choices=["sts", "transfer", "metrics"])
    e.add_argument("--data")
    e.add_argument("--train")
    e.add_argument("--test")
    e.add_argument("--n", type=int, default=200, help="sentences used by the metrics task")

    a = sub.add_parser("attack", parents=[common, model], help="attack a checkpoint")
    a.add_argument("task", choices=["classify", "advsts"])
    a.add_argument("--data")
    a.add_argument("--train")
    a.add_argument("--test")
    a.add_argument("--lexicon")
    a.add_argument("--n", type=int, default=None, help="number of examples to attack")
    a.add_argument("--budget", type=int, default=2000)
    a.add_argument("--attack", choices=["synonym", "char"], default="synonym")
    a.add_argument("--saliency", choices=["delete", "pwws"], default="delete")
    a.add_argument("--delta", type=float, default=1.0)

    pl = sub.add_parser("plot", parents=[common], help="plot one or more report.txt files")
    pl.add_argument("reports", nargs="*")

    for p in (t, e, a, pl):
        p.add_argument("--config", help=argparse.SUPPRESS, default=argparse.SUPPRESS)
        p.add_argument("--dump-config", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        # SUPPRESS keeps a subparser from resetting flags given before the command
        _add_config_flags(p, default=argparse.SUPPRESS)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
