"""Multi-task orchestration: the five architecture settings in both task
orderings, the prediction/representation bridges between components, the
training protocol (warmup, random task sampling, plateau learning-rate
decay, dual early stopping), and checkpointing."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .depparse import DepHead, DepPrediction, DepScores, decode, dep_loss, eval_las_uas
from .embed import (
    EmbedDropout,
    EmbeddingTable,
    SharedEncoding,
    Vocab,
    casing_vocab,
    encode_batch,
)
from .ingest import Batch, Sentence, SubwordVocab, make_batches
from .nertag import NerHead, crf_loss, eval_micro_f1, viterbi

TASK_DEP = "DEP"
TASK_NER = "NER"
SETTINGS = ("single", "flat", "hier_pred_hard", "hier_pred_soft", "hier_repr")

XPOS_UNK = "<UNK>"

CHECKPOINT_MAGIC = b"DEPNER1\n"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """The run configuration is inconsistent or incomplete."""


class CheckpointError(ValueError):
    """A checkpoint file is damaged or incompatible with the request."""


@dataclass
class MtlConfig:
    """Architecture and training hyperparameters.

    Defaults reproduce the reference configuration; tests shrink the
    dimensions for speed.
    """

    setting: str = "single"
    low_task: str = TASK_DEP
    high_task: str = TASK_NER
    d_bert: int = 768
    d_cas: int = 32
    d_pos: int = 64
    lstm_hidden: int = 400
    lstm_layers: int = 3
    biaffine_inner: int = 400
    dep_lstm_dropout: float = 0.34
    ner_lstm_dropout: float = 0.43
    bert_dropout: float = 0.5
    embedding_dropout: float = 0.4
    dep_bridge_dim: int = 128
    ner_bridge_dim: int = 128
    warmup_epochs: int = 5
    steps_per_epoch: int = 100
    word_budget: int = 500
    max_epochs: int = 100
    lr: float = 0.004
    weight_decay: float = 0.001
    lr_decay: float = 0.1286
    lr_patience: int = 3
    early_stop: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; pick one of {SETTINGS}")
        for name in ("low_task", "high_task"):
            if getattr(self, name) not in (TASK_DEP, TASK_NER):
                raise ConfigError(f"{name} must be DEP or NER")
        if self.setting != "single" and self.low_task == self.high_task:
            raise ConfigError("low_task and high_task must differ")

    @property
    def tasks(self) -> tuple[str, ...]:
        if self.setting == "single":
            return (self.low_task,)
        return (self.low_task, self.high_task)

    @property
    def hierarchical(self) -> bool:
        return self.setting.startswith("hier")

    @property
    def shared_dim(self) -> int:
        return self.d_bert + self.d_cas + self.d_pos


@dataclass
class BridgeEmbedding:
    """Label-embedding table that feeds low-task predictions to the high
    task, either as the argmax row (hard) or a probability mixture (soft)."""

    table: EmbeddingTable
    mode: str  # "hard" | "soft"


def _bridge_rows(scores: "DepScores | Tensor") -> Tensor:
    """Per-word label score rows that a bridge consumes.

    For dependency scores this is, per word, the label vector at its argmax
    edge head; emission matrices are used as-is.  Head selection is an
    argmax over values, so no gradient flows through it.
    """
    if isinstance(scores, DepScores):
        edge = scores.masked_edge()
        heads = np.argmax(edge[1:], axis=1)
        rows = scores.label[np.arange(1, scores.n + 1), heads]
        return rows
    return scores


def bridge_hard(scores: "DepScores | Tensor", table: EmbeddingTable) -> Tensor:
    """Embedding row of the best label per word.  The argmax is treated as
    a constant, so gradient reaches the table only."""
    rows = _bridge_rows(scores)
    ids = np.argmax(rows.data, axis=1)
    return table.weights[ids]


def bridge_soft(scores: "DepScores | Tensor", table: EmbeddingTable) -> Tensor:
    """Probability-weighted mixture of the label embedding rows; fully
    differentiable into both the scores and the table."""
    rows = _bridge_rows(scores)
    probs = ad.softmax_rows(rows)
    return probs @ table.weights


def bridge_repr(h_low: Tensor) -> Tensor:
    """Identity pass-through of the low component's encoder states, kept as
    an explicit seam so the wiring of the settings reads uniformly."""
    return h_low


class MtlModel:
    """All trainable components for one configuration, plus the frozen
    provider, with per-sentence forward passes for either task."""

    def __init__(
        self,
        config: MtlConfig,
        xpos_tags: Sequence[str],
        dep_labels: Sequence[str] | None,
        ner_labels: Sequence[str] | None,
        subwords: SubwordVocab,
        provider,
    ):
        self.config = config
        self.subwords = subwords
        self.provider = provider
        init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        self.dropout_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

        self.xpos_vocab = Vocab(sorted(xpos_tags), unk=XPOS_UNK)
        self.cas_vocab = casing_vocab()
        self.cas_table = EmbeddingTable("casing", self.cas_vocab, config.d_cas, init_rng)
        self.pos_table = EmbeddingTable("xpos", self.xpos_vocab, config.d_pos, init_rng)
        self.embed_dropout = EmbedDropout(config.bert_dropout, config.embedding_dropout)

        uses = config.tasks
        self.dep_labels = list(dep_labels) if dep_labels is not None else None
        self.ner_labels = list(ner_labels) if ner_labels is not None else None
        self._dep_label_ids = (
            {r: i for i, r in enumerate(self.dep_labels)} if self.dep_labels else {}
        )
        self._ner_label_ids = (
            {t: i for i, t in enumerate(self.ner_labels)} if self.ner_labels else {}
        )

        d = config.shared_dim
        dep_in, ner_in = d, d
        if config.hierarchical:
            extra_for_high = (
                2 * config.lstm_hidden
                if config.setting == "hier_repr"
                else (config.dep_bridge_dim if config.low_task == TASK_DEP
                      else config.ner_bridge_dim)
            )
            if config.high_task == TASK_DEP:
                dep_in += extra_for_high
            else:
                ner_in += extra_for_high

        self.dep: DepHead | None = None
        self.ner: NerHead | None = None
        if TASK_DEP in uses:
            if not self.dep_labels:
                raise ConfigError("DEP task configured but no dependency labels")
            self.dep = DepHead(
                dep_in, config.lstm_hidden, config.lstm_layers, config.biaffine_inner,
                len(self.dep_labels), config.dep_lstm_dropout, init_rng,
            )
        if TASK_NER in uses:
            if not self.ner_labels:
                raise ConfigError("NER task configured but no entity labels")
            self.ner = NerHead(
                ner_in, config.lstm_hidden, config.lstm_layers,
                len(self.ner_labels), config.ner_lstm_dropout, init_rng,
            )

        self.bridge: BridgeEmbedding | None = None
        if config.setting in ("hier_pred_hard", "hier_pred_soft"):
            low_labels = self.dep_labels if config.low_task == TASK_DEP else self.ner_labels
            dim = (config.dep_bridge_dim if config.low_task == TASK_DEP
                   else config.ner_bridge_dim)
            table = EmbeddingTable(
                f"{config.low_task.lower()}_bridge", low_labels, dim, init_rng,
                pad_row=False,
            )
            self.bridge = BridgeEmbedding(
                table=table, mode="hard" if config.setting.endswith("hard") else "soft"
            )

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        names: dict[str, Tensor] = {
            "shared.casing": self.cas_table.weights,
            "shared.xpos": self.pos_table.weights,
        }
        if self.dep is not None:
            for i, p in enumerate(self.dep.parameters()):
                names[f"dep.{i}"] = p
        if self.ner is not None:
            for i, p in enumerate(self.ner.parameters()):
                names[f"ner.{i}"] = p
        if self.bridge is not None:
            names["bridge.table"] = self.bridge.table.weights
        return names

    def group_parameters(self, group: str) -> list[Tensor]:
        if group == "shared":
            return [self.cas_table.weights, self.pos_table.weights]
        if group == TASK_DEP:
            return self.dep.parameters() if self.dep is not None else []
        if group == TASK_NER:
            return self.ner.parameters() if self.ner is not None else []
        if group == "bridge":
            return [self.bridge.table.weights] if self.bridge is not None else []
        raise ValueError(f"unknown parameter group {group!r}")

    def update_parameters(self, task: str) -> list[Tensor]:
        """Parameters a step on ``task`` is allowed to change: that task's
        component plus the shared layer (plus the bridge table on high-task
        steps of a prediction setting)."""
        params = self.group_parameters("shared") + self.group_parameters(task)
        if self.bridge is not None and task == self.config.high_task:
            params += self.group_parameters("bridge")
        return params

    # -- forward passes -------------------------------------------------------

    def _head_input(self, task: str, enc: SharedEncoding, mode: str,
                    rng: np.random.Generator | None) -> Tensor:
        x = enc.words()
        cfg = self.config
        if not cfg.hierarchical or task != cfg.high_task:
            return x
        if cfg.setting == "hier_repr":
            low_stack = self.dep.stack if cfg.low_task == TASK_DEP else self.ner.stack
            h_low = low_stack(x, mode=mode, rng=rng)
            return ad.concat([x, bridge_repr(h_low)], axis=1)
        if cfg.low_task == TASK_DEP:
            low_scores: DepScores | Tensor = self.dep.score_sentence(x, mode=mode, rng=rng)
        else:
            low_scores = self.ner.emissions(x, mode=mode, rng=rng)
        bridge_fn = bridge_hard if self.bridge.mode == "hard" else bridge_soft
        return ad.concat([x, bridge_fn(low_scores, self.bridge.table)], axis=1)

    def task_loss(self, task: str, enc: SharedEncoding, mode: str = "train",
                  rng: np.random.Generator | None = None) -> Tensor:
        sent = enc.sentence
        x = self._head_input(task, enc, mode, rng)
        if task == TASK_DEP:
            if sent.gold_heads is None or sent.gold_deprels is None:
                raise ValueError(f"sentence {sent.id} has no gold tree")
            scores = self.dep.score_sentence(x, mode=mode, rng=rng)
            labels = [self._dep_label_ids[r] for r in sent.gold_deprels]
            return dep_loss(scores, sent.gold_heads, labels)
        if sent.gold_ner is None:
            raise ValueError(f"sentence {sent.id} has no gold entity tags")
        emissions = self.ner.emissions(x, mode=mode, rng=rng)
        tags = [self._ner_label_ids[t] for t in sent.gold_ner]
        return crf_loss(emissions, self.ner.transitions, tags)

    def encode(self, batch: Batch, mode: str = "eval",
               rng: np.random.Generator | None = None) -> list[SharedEncoding]:
        return encode_batch(
            batch, self.provider, self.cas_table, self.pos_table,
            dropout=self.embed_dropout, mode=mode, rng=rng,
        )

    # -- prediction -----------------------------------------------------------

    def predict_dep(self, sentences: Sequence[Sentence]) -> list[DepPrediction]:
        if self.dep is None:
            raise ConfigError("this model has no dependency component")
        preds: list[DepPrediction] = []
        for batch in make_batches(sentences, self.config.word_budget, self.subwords):
            for enc in self.encode(batch):
                x = self._head_input(TASK_DEP, enc, "eval", None)
                preds.append(decode(self.dep.score_sentence(x)))
        return preds

    def predict_ner(self, sentences: Sequence[Sentence]) -> list[list[str]]:
        if self.ner is None:
            raise ConfigError("this model has no entity component")
        out: list[list[str]] = []
        for batch in make_batches(sentences, self.config.word_budget, self.subwords):
            for enc in self.encode(batch):
                x = self._head_input(TASK_NER, enc, "eval", None)
                emissions = self.ner.emissions(x)
                ids = viterbi(emissions.data, self.ner.transitions.data)
                out.append([self.ner_labels[i] for i in ids])
        return out

    def evaluate(self, task: str, sentences: Sequence[Sentence]) -> dict[str, float]:
        if task == TASK_DEP:
            preds = self.predict_dep(sentences)
            return eval_las_uas(preds, sentences, self.dep_labels)
        tags = self.predict_ner(sentences)
        return eval_micro_f1(tags, [s.gold_ner for s in sentences])


class AdamW:
    """Adam with decoupled weight decay.  ``step`` takes the subset of
    parameters the current task is allowed to update; moment estimates and
    step counts are kept per parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self._state: dict[int, tuple[np.ndarray, np.ndarray, int]] = {
            id(p): (np.zeros_like(p.data), np.zeros_like(p.data), 0) for p in self.params
        }

    def step(self, subset: Sequence[Tensor]) -> None:
        b1, b2 = self.betas
        for p in subset:
            g = p.grad
            if g is None:
                continue
            m, v, t = self._state[id(p)]
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._state[id(p)] = (m, v, t)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TaskData:
    train: list[Sentence]
    dev: list[Sentence] | None = None

    @property
    def dev_or_train(self) -> list[Sentence]:
        return self.dev if self.dev else self.train


def _metric_of(task: str, metrics: dict[str, float]) -> float:
    return metrics["las"] if task == TASK_DEP else metrics["f1"]


def train(
    config: MtlConfig,
    dep_data: TaskData | None,
    ner_data: TaskData | None,
    provider,
    subwords: SubwordVocab,
    out_dir: str | None = None,
) -> tuple[MtlModel, list[dict]]:
    """Run the full training protocol and return the trained model plus one
    metrics record per task per epoch.

    During the first ``warmup_epochs`` (settings with two tasks) every step
    trains the low-level task; afterwards each step draws a task uniformly
    at random.  A step updates the drawn component and the shared layer
    only.  Validation metrics drive per-task plateau learning-rate decay
    and dual early stopping: when either task goes ``early_stop`` epochs
    without improving, training stops for both.
    """
    data = {TASK_DEP: dep_data, TASK_NER: ner_data}
    for task in config.tasks:
        if data[task] is None or not data[task].train:
            raise ConfigError(f"setting {config.setting!r} needs a {task} corpus")

    used = config.tasks
    xpos: set[str] = set()
    for task in used:
        for s in data[task].train:
            xpos.update(s.xpos)
    dep_labels = None
    if TASK_DEP in used:
        dep_labels = sorted(
            {r for s in data[TASK_DEP].train for r in (s.gold_deprels or [])}
        )
    ner_labels = None
    if TASK_NER in used:
        ner_labels = sorted(
            {t for s in data[TASK_NER].train for t in (s.gold_ner or [])}
        )

    model = MtlModel(config, sorted(xpos), dep_labels, ner_labels, subwords, provider)
    batches = {
        task: make_batches(
            data[task].train, config.word_budget, subwords,
            seed=int(np.random.SeedSequence([config.seed, 3]).generate_state(1)[0]),
        )
        for task in used
    }
    data_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    opt = AdamW(list(model.named_parameters().values()), config.lr, config.weight_decay)

    best = {task: -np.inf for task in used}
    bad_stop = {task: 0 for task in used}
    bad_lr = {task: 0 for task in used}
    records: list[dict] = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")

    try:
        for epoch in range(1, config.max_epochs + 1):
            warm = len(used) == 2 and epoch <= config.warmup_epochs
            epoch_losses: dict[str, list[float]] = {task: [] for task in used}
            for _ in range(config.steps_per_epoch):
                if warm:
                    task = config.low_task
                else:
                    task = used[int(data_rng.integers(len(used)))]
                batch = batches[task][int(data_rng.integers(len(batches[task])))]
                with Tape() as tape:
                    encs = model.encode(batch, mode="train", rng=model.dropout_rng)
                    total = None
                    for enc in encs:
                        loss = model.task_loss(task, enc, mode="train",
                                               rng=model.dropout_rng)
                        total = loss if total is None else total + loss
                    total = total * (1.0 / len(encs))
                    tape.backward(total)
                opt.step(model.update_parameters(task))
                opt.zero_grad()
                epoch_losses[task].append(float(total.data))

            stop = False
            for task in used:
                metrics = model.evaluate(task, data[task].dev_or_train)
                losses = epoch_losses[task]
                record = {
                    "epoch": epoch,
                    "task": task,
                    "loss": (sum(losses) / len(losses)) if losses else None,
                    "las": metrics.get("las"),
                    "uas": metrics.get("uas"),
                    "f1": metrics.get("f1"),
                    "lr": opt.lr,
                }
                records.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                active = len(used) == 1 or task == config.low_task or epoch > config.warmup_epochs
                if not active:
                    continue
                score = _metric_of(task, metrics)
                if score > best[task]:
                    best[task] = score
                    bad_stop[task] = 0
                    bad_lr[task] = 0
                    if out_dir is not None:
                        checkpoint_save(model, os.path.join(out_dir, f"best_{task}.ckpt"))
                else:
                    bad_stop[task] += 1
                    bad_lr[task] += 1
                    if bad_lr[task] > config.lr_patience:
                        opt.lr *= config.lr_decay
                        bad_lr[task] = 0
                    if bad_stop[task] > config.early_stop:
                        stop = True
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        checkpoint_save(model, os.path.join(out_dir, "final.ckpt"))
    return model, records


# -- checkpoints ---------------------------------------------------------------


def checkpoint_save(model: MtlModel, path: str) -> None:
    """Serialize config, vocabularies and parameters into one versioned
    container: magic, manifest length, JSON manifest, float64 blobs."""
    named = model.named_parameters()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "provider": model.provider.spec() if hasattr(model.provider, "spec") else {"kind": "custom"},
        "vocabs": {
            "xpos": [s for s in model.xpos_vocab.symbols[1:] if s != XPOS_UNK],
            "dep_labels": model.dep_labels,
            "ner_labels": model.ner_labels,
            "subwords": model.subwords.pieces,
        },
        "params": [{"name": k, "shape": list(v.shape)} for k, v in named.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in named.values():
            fh.write(v.data.astype("<f8").tobytes())


def checkpoint_load(path: str, provider=None,
                    expect: MtlConfig | None = None) -> MtlModel:
    """Rebuild a model from a checkpoint.

    The stored provider description is honoured when possible (hash
    providers are reconstructed; file providers reopened); pass ``provider``
    to override.  With ``expect`` given, the stored configuration must
    match its setting and tasks exactly.
    """
    from .embed import FileProvider, HashProvider

    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise CheckpointError(f"{path}: truncated manifest length")
        (m_len,) = struct.unpack("<I", raw_len)
        blob = fh.read(m_len)
        if len(blob) < m_len:
            raise CheckpointError(f"{path}: truncated manifest")
        manifest = json.loads(blob.decode("utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported version {manifest.get('version')!r}"
            )
        config = MtlConfig(**manifest["config"])
        if expect is not None and (
            config.setting != expect.setting or config.tasks != expect.tasks
        ):
            raise CheckpointError(
                f"{path}: checkpoint is a {config.setting!r} model over "
                f"{config.tasks}, incompatible with {expect.setting!r} over "
                f"{expect.tasks}"
            )
        if provider is None:
            spec = manifest.get("provider", {})
            kind = spec.get("kind")
            if kind == "hash":
                provider = HashProvider(spec["seed"], spec["d_bert"])
            elif kind == "file":
                provider = FileProvider(spec["path"])
            else:
                raise CheckpointError(
                    f"{path}: checkpoint stores no reusable provider; pass one"
                )
        vocabs = manifest["vocabs"]
        model = MtlModel(
            config,
            vocabs["xpos"],
            vocabs["dep_labels"],
            vocabs["ner_labels"],
            SubwordVocab(vocabs["subwords"]),
            provider,
        )
        named = model.named_parameters()
        stored = manifest["params"]
        if [p["name"] for p in stored] != list(named.keys()):
            raise CheckpointError(f"{path}: parameter inventory mismatch")
        for meta in stored:
            tensor = named[meta["name"]]
            if list(tensor.shape) != meta["shape"]:
                raise CheckpointError(
                    f"{path}: parameter {meta['name']} has shape {meta['shape']}, "
                    f"model expects {list(tensor.shape)}"
                )
            want = tensor.data.size * 8
            payload = fh.read(want)
            if len(payload) < want:
                raise CheckpointError(f"{path}: truncated parameter {meta['name']}")
            tensor.data[...] = np.frombuffer(payload, dtype="<f8").reshape(tensor.shape)
        trailer = fh.read(1)
        if trailer:
            raise CheckpointError(f"{path}: trailing bytes after parameters")
    return model
