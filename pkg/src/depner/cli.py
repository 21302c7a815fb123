"""Command-line front end: train, eval, predict, corpus statistics,
hyperparameter sweep, and a gradient-check harness.

Run configurations are flat ``key = value`` text files mirroring MtlConfig
plus corpus/vocabulary/provider paths.  Log verbosity is controlled by the
DEPNER_LOG environment variable (debug|info|warning|quiet).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from collections import Counter
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, check_gradients
from .depparse import DepHead, dep_loss, eval_las_uas, write_conllu
from .embed import FileProvider, HashProvider
from .ingest import SubwordVocab, read_conllu, read_ner
from .mtl import (
    CheckpointError,
    ConfigError,
    MtlConfig,
    TASK_DEP,
    TASK_NER,
    TaskData,
    checkpoint_load,
    train,
)
from .nertag import NerHead, crf_loss, eval_micro_f1, write_ner

log = logging.getLogger("depner")

_PATH_KEYS = (
    "dep_train", "dep_dev", "dep_test",
    "ner_train", "ner_dev", "ner_test",
    "vocab", "provider_path", "out_dir",
)
_EXTRA_KEYS = _PATH_KEYS + ("provider",)
_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(MtlConfig)}


class RunConfig:
    """Parsed run configuration: an MtlConfig plus resolved paths."""

    def __init__(self, options: dict[str, str], base_dir: str = "."):
        self.raw = dict(options)
        mtl_kwargs = {}
        self.paths: dict[str, str] = {}
        self.provider_kind = "hash"
        for key, value in options.items():
            if key in _CONFIG_FIELDS:
                mtl_kwargs[key] = _convert(key, value)
            elif key == "provider":
                if value not in ("hash", "file"):
                    raise ConfigError(f"provider must be 'hash' or 'file', got {value!r}")
                self.provider_kind = value
            elif key in _PATH_KEYS:
                path = value if os.path.isabs(value) else os.path.join(base_dir, value)
                self.paths[key] = path
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        self.mtl = MtlConfig(**mtl_kwargs)
        for key, path in self.paths.items():
            if key == "out_dir":
                continue
            if not os.path.exists(path):
                raise ConfigError(f"{key}: no such file {path}")
        if self.provider_kind == "file" and "provider_path" not in self.paths:
            raise ConfigError("provider=file needs provider_path")
        if "vocab" not in self.paths:
            raise ConfigError("configuration needs a 'vocab' path")

    def make_provider(self):
        if self.provider_kind == "file":
            return FileProvider(self.paths["provider_path"])
        return HashProvider(self.mtl.seed, self.mtl.d_bert)


def _convert(key: str, value: str):
    kind = _CONFIG_FIELDS[key]
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def load_run_config(path: str) -> RunConfig:
    options: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in options:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            options[key] = value
    return RunConfig(options, base_dir=os.path.dirname(os.path.abspath(path)))


def _load_task_data(cfg: RunConfig) -> tuple[TaskData | None, TaskData | None]:
    dep = ner = None
    if "dep_train" in cfg.paths:
        dep = TaskData(
            train=read_conllu(cfg.paths["dep_train"]),
            dev=read_conllu(cfg.paths["dep_dev"]) if "dep_dev" in cfg.paths else None,
        )
    if "ner_train" in cfg.paths:
        ner = TaskData(
            train=read_ner(cfg.paths["ner_train"]),
            dev=read_ner(cfg.paths["ner_dev"]) if "ner_dev" in cfg.paths else None,
        )
    return dep, ner


# -- subcommands ----------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.mtl.seed = args.seed
    out_dir = args.out or cfg.paths.get("out_dir")
    if out_dir is None:
        raise ConfigError("no output directory: pass --out or set out_dir")
    subwords = SubwordVocab.load(cfg.paths["vocab"])
    dep_data, ner_data = _load_task_data(cfg)
    provider = cfg.make_provider()
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        for key, value in sorted(dataclasses.asdict(cfg.mtl).items()):
            fh.write(f"{key} = {value}\n")
        for key, value in sorted(cfg.paths.items()):
            fh.write(f"{key} = {value}\n")
        fh.write(f"provider = {cfg.provider_kind}\n")
    _, records = train(cfg.mtl, dep_data, ner_data, provider, subwords, out_dir=out_dir)
    log.info("finished after %d epochs", records[-1]["epoch"] if records else 0)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = checkpoint_load(args.checkpoint)
    out_dir = args.out
    if args.dep_test is None and args.ner_test is None:
        raise ConfigError("nothing to evaluate: pass --dep-test and/or --ner-test")
    if args.dep_test is not None:
        if model.dep is None:
            raise ConfigError("checkpoint has no dependency component")
        golds = read_conllu(args.dep_test)
        preds = model.predict_dep(golds)
        scores = eval_las_uas(preds, golds, model.dep_labels)
        print(f"DEP LAS: {scores['las'] * 100:.2f}%  UAS: {scores['uas'] * 100:.2f}%")
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            write_conllu(os.path.join(out_dir, "dep_pred.conllu"), golds, preds,
                         model.dep_labels)
    if args.ner_test is not None:
        if model.ner is None:
            raise ConfigError("checkpoint has no entity component")
        golds = read_ner(args.ner_test)
        tags = model.predict_ner(golds)
        scores = eval_micro_f1(tags, [s.gold_ner for s in golds])
        print(
            f"NER F1: {scores['f1'] * 100:.2f}%  "
            f"P: {scores['p'] * 100:.2f}%  R: {scores['r'] * 100:.2f}%"
        )
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            write_ner(os.path.join(out_dir, "ner_pred.tsv"), golds, tags)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = checkpoint_load(args.checkpoint)
    if args.dep_input is None and args.ner_input is None:
        raise ConfigError("nothing to predict: pass --dep-input and/or --ner-input")
    os.makedirs(args.out, exist_ok=True)
    if args.dep_input is not None:
        if model.dep is None:
            raise ConfigError("checkpoint has no dependency component")
        sentences = read_conllu(args.dep_input)
        preds = model.predict_dep(sentences)
        write_conllu(os.path.join(args.out, "dep_pred.conllu"), sentences, preds,
                     model.dep_labels)
    if args.ner_input is not None:
        if model.ner is None:
            raise ConfigError("checkpoint has no entity component")
        sentences = read_ner(args.ner_input)
        tags = model.predict_ner(sentences)
        write_ner(os.path.join(args.out, "ner_pred.tsv"), sentences, tags)
    return 0


# -- corpus statistics ------------------------------------------------------------


def _corpus_words(path: str) -> list[list[str]]:
    """Sentences as word lists; CoNLL-U when the extension says so, else the
    three-column entity format."""
    if path.endswith((".conllu", ".conll")):
        return [s.words for s in read_conllu(path)]
    return [s.words for s in read_ner(path)]


def _sample_words(sentences: list[list[str]], target: int,
                  rng: np.random.Generator) -> list[str]:
    """Uniformly sample sentences without replacement until the word target
    is reached; the sentence that crosses the target is kept whole."""
    total = sum(len(s) for s in sentences)
    if total < target:
        raise ValueError(
            f"corpus has only {total} words, cannot sample {target}"
        )
    words: list[str] = []
    for i in rng.permutation(len(sentences)):
        words.extend(sentences[i])
        if len(words) >= target:
            break
    return words


def rare_word_histogram(paths: Sequence[str], words: int, repeats: int,
                        seed: int) -> dict[str, dict[int, float]]:
    """Per corpus: average histogram of word-occurrence counts over
    ``repeats`` uniform samples of ``words`` words."""
    out: dict[str, dict[int, float]] = {}
    for path in paths:
        sentences = _corpus_words(path)
        acc: Counter[int] = Counter()
        rng = np.random.default_rng(seed)
        for _ in range(repeats):
            sample = _sample_words(sentences, words, rng)
            freq = Counter(sample)
            for count in freq.values():
                acc[count] += 1
        out[path] = {k: v / repeats for k, v in sorted(acc.items())}
    return out


def unknown_word_counts(train_path: str, test_path: str, test_words: int,
                        train_sizes: Sequence[int], repeats: int,
                        seed: int) -> dict[int, float]:
    """Average number of test-set tokens unseen in a sampled training set,
    for each training-set size."""
    train_sentences = _corpus_words(train_path)
    test_sentences = _corpus_words(test_path)
    rng = np.random.default_rng(seed)
    test_sample = _sample_words(test_sentences, test_words, rng)
    out: dict[int, float] = {}
    for n in train_sizes:
        totals = []
        for _ in range(repeats):
            vocab = set(_sample_words(train_sentences, n, rng))
            totals.append(sum(1 for w in test_sample if w not in vocab))
        out[n] = sum(totals) / len(totals)
    return out


DEFAULT_TRAIN_SIZES = (5000, 10000, 15000, 20000, 25000, 30000)


def cmd_stats(args: argparse.Namespace) -> int:
    writer = csv.writer(args.out_fh)
    if args.mode == "rare":
        hists = rare_word_histogram(args.corpus, args.words, args.repeats, args.seed)
        writer.writerow(["corpus", "occurrences", "avg_word_types"])
        for path, hist in hists.items():
            for occurrences, count in hist.items():
                writer.writerow([path, occurrences, f"{count:.4f}"])
    else:
        if len(args.corpus) != 2:
            raise ConfigError("unknown mode needs two corpora: TRAIN TEST")
        sizes = args.train_sizes or list(DEFAULT_TRAIN_SIZES)
        counts = unknown_word_counts(
            args.corpus[0], args.corpus[1], args.test_words, sizes,
            args.repeats, args.seed,
        )
        writer.writerow(["train_words", "avg_unknown"])
        for n, avg in counts.items():
            writer.writerow([n, f"{avg:.4f}"])
    return 0


# -- hyperparameter sweep ----------------------------------------------------------


def load_grid(path: str) -> dict[str, list]:
    grid: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = v1,v2,...")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown hyperparameter {key!r}")
            values = [v.strip() for v in value.split(",") if v.strip()]
            if not values:
                raise ConfigError(f"{path}:{lineno}: empty value list")
            grid[key] = [_convert(key, v) for v in values]
    if not grid:
        raise ConfigError(f"{path}: empty grid")
    return grid


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    grid = load_grid(args.grid)
    keys = sorted(grid)
    combos: list[dict] = [{}]
    for key in keys:
        combos = [dict(c, **{key: v}) for c in combos for v in grid[key]]
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(combos))
    chosen = [combos[i] for i in order[: min(args.trials, len(combos))]]

    subwords = SubwordVocab.load(cfg.paths["vocab"])
    dep_data, ner_data = _load_task_data(cfg)
    metric_task = args.metric or cfg.mtl.low_task
    results = []
    for trial, overrides in enumerate(chosen):
        mtl_cfg = dataclasses.replace(cfg.mtl, **overrides)
        mtl_cfg.max_epochs = min(mtl_cfg.max_epochs, 40)
        provider = cfg.make_provider()
        _, records = train(mtl_cfg, dep_data, ner_data, provider, subwords)
        best = max(
            (
                (r["las"] if metric_task == TASK_DEP else r["f1"])
                for r in records
                if r["task"] == metric_task
            ),
            default=0.0,
        )
        results.append({"trial": trial, "metric": best, **overrides})
        log.info("trial %d: %s -> %.4f", trial, overrides, best)
    results.sort(key=lambda r: -r["metric"])
    writer = csv.writer(args.out_fh)
    writer.writerow(["rank", "trial", "metric"] + keys)
    for rank, r in enumerate(results, start=1):
        writer.writerow(
            [rank, r["trial"], f"{r['metric']:.4f}"] + [r.get(k, "") for k in keys]
        )
    return 0


# -- gradient-check harness ---------------------------------------------------------


def gradient_checks(seed: int = 0) -> list[tuple[str, float, float]]:
    """(name, max relative error, tolerance) for every differentiable
    primitive and both end-to-end task losses, at small sizes."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float, float]] = []

    def primitive(name, f, shape, tol=1e-4):
        x = Tensor(rng.standard_normal(shape), requires_grad=True)
        checks.append((name, check_gradients(f, x), tol))

    w = rng.standard_normal((5, 4))
    primitive("matmul", lambda x: ad.tsum(x @ Tensor(w)), (3, 5))
    primitive("add_broadcast", lambda x: ad.tsum(x + Tensor(rng.standard_normal(4))), (3, 4))
    primitive("mul", lambda x: ad.tsum(x * Tensor(rng.standard_normal((3, 4)))), (3, 4))
    primitive("sigmoid", lambda x: ad.tsum(ad.sigmoid(x)), (6,))
    primitive("tanh", lambda x: ad.tsum(ad.tanh(x)), (6,))
    primitive(
        "relu",
        lambda x: ad.tsum(ad.relu(x + 3.0)),  # keep clear of the kink at 0
        (6,),
    )
    soft_w = rng.standard_normal((3, 4))
    primitive("softmax_rows", lambda x: ad.tsum(ad.softmax_rows(x) * Tensor(soft_w)), (3, 4))
    primitive("log_sum_exp", lambda x: ad.log_sum_exp(x), (7,))
    primitive("log_sum_exp_axis", lambda x: ad.tsum(ad.log_sum_exp(x, axis=0)), (4, 3))
    primitive("concat", lambda x: ad.tsum(ad.concat([x, x * 2.0], axis=1)), (3, 2))
    primitive("slice", lambda x: ad.tsum(x[1:3, 0:2]), (4, 3))
    primitive(
        "gather",
        lambda x: ad.tsum(x[np.array([0, 2, 2]), np.array([1, 0, 1])]),
        (3, 2),
    )
    primitive("mean", lambda x: ad.tmean(x), (5, 2))
    primitive("transpose", lambda x: ad.tsum(x.T @ Tensor(rng.standard_normal((3, 2)))), (3, 4))
    primitive("reshape", lambda x: ad.tsum(ad.reshape(x, (2, 6)) @ Tensor(rng.standard_normal((6, 1)))), (3, 4))
    primitive("stack", lambda x: ad.tsum(ad.stack([x, 2.0 * x], axis=0)), (2, 3))
    primitive(
        "dropout_train",
        lambda x: ad.tsum(ad.dropout(x, 0.4, np.random.default_rng(7), True)),
        (8,),
    )

    embed_rng = np.random.default_rng(seed + 1)
    table = Tensor(embed_rng.standard_normal((5, 3)), requires_grad=True)
    ids = np.array([1, 4, 1])
    checks.append(
        ("embedding_lookup", check_gradients(lambda t: ad.tsum(t[ids]), table), 1e-4)
    )

    # end-to-end losses on a three-word sentence, over every parameter
    d_in, hidden, inner, n_labels = 6, 4, 4, 3
    enc = np.random.default_rng(seed + 2).standard_normal((3, d_in))
    dep = DepHead(d_in, hidden, 2, inner, n_labels, 0.0,
                  np.random.default_rng(seed + 3))
    gold_heads, gold_labels = [0, 1, 1], [2, 0, 1]

    def dep_full() -> float:
        worst = 0.0
        for p in dep.parameters():
            def f(_p, _enc=enc):
                scores = dep.score_sentence(Tensor(_enc))
                return dep_loss(scores, gold_heads, gold_labels)
            worst = max(worst, check_gradients(f, p))
        return worst

    checks.append(("dep_loss_full", dep_full(), 1e-3))

    ner = NerHead(d_in, hidden, 2, 4, 0.0, np.random.default_rng(seed + 4))
    tags = [0, 3, 2]

    def ner_full() -> float:
        worst = 0.0
        for p in ner.parameters():
            def f(_p, _enc=enc):
                emissions = ner.emissions(Tensor(_enc))
                return crf_loss(emissions, ner.transitions, tags)
            worst = max(worst, check_gradients(f, p))
        return worst

    checks.append(("crf_loss_full", ner_full(), 1e-3))
    return checks


def cmd_gradcheck(args: argparse.Namespace) -> int:
    failures = 0
    for name, err, tol in gradient_checks(args.seed):
        ok = err < tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max_rel_err={err:.3e} (tol {tol:g})")
    return 0 if failures == 0 else 1


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depner",
        description="Train and evaluate the joint dependency/entity tagger.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on test files")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dep-test", default=None)
    p_eval.add_argument("--ner-test", default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="write predictions for input files")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--dep-input", default=None)
    p_pred.add_argument("--ner-input", default=None)
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_stats = sub.add_parser("stats", help="corpus sampling statistics (CSV)")
    p_stats.add_argument("--mode", choices=("rare", "unknown"), required=True)
    p_stats.add_argument("corpus", nargs="+")
    p_stats.add_argument("--words", type=int, default=30000,
                         help="sample size for rare mode")
    p_stats.add_argument("--test-words", type=int, default=1000)
    p_stats.add_argument("--train-sizes", type=int, nargs="*", default=None)
    p_stats.add_argument("--repeats", type=int, default=10)
    p_stats.add_argument("--seed", type=int, default=0)
    p_stats.add_argument("--out", default=None)
    p_stats.set_defaults(func=cmd_stats)

    p_sweep = sub.add_parser("sweep", help="seeded random search over a grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--trials", type=int, default=50)
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--metric", choices=(TASK_DEP, TASK_NER), default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)

    return parser


def _setup_logging() -> None:
    level = os.environ.get("DEPNER_LOG", "info").lower()
    mapping = {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "quiet": logging.CRITICAL,
    }
    logging.basicConfig(level=mapping.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    out_path = getattr(args, "out", None)
    needs_fh = args.command in ("stats", "sweep")
    if needs_fh:
        args.out_fh = open(out_path, "w", newline="", encoding="utf-8") if out_path else sys.stdout
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 1
    finally:
        if needs_fh and out_path:
            args.out_fh.close()


if __name__ == "__main__":
    sys.exit(main())
