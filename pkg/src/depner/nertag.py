"""NER head: highway LSTM over shared encodings, per-word emission scores,
a linear-chain CRF trained by forward-score minus gold-path-score, Viterbi
decoding, and entity-level micro F1."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import HighwayLstmStack, Linear, uniform_init
from .ingest import Sentence, check_iob2


class NerHead:
    """Produces the (n, num_tags) emission matrix and owns the transition
    table, which carries two extra states for sequence start and stop."""

    def __init__(self, d_in: int, hidden: int, num_layers: int, num_tags: int,
                 dropout: float, rng: np.random.Generator):
        self.stack = HighwayLstmStack(d_in, hidden, num_layers, dropout, rng)
        self.fc = Linear(self.stack.d_out, num_tags, rng)
        self.num_tags = num_tags
        size = num_tags + 2
        self.transitions = Tensor(
            uniform_init(rng, (size, size), size, size), requires_grad=True
        )

    @property
    def start(self) -> int:
        return self.num_tags

    @property
    def stop(self) -> int:
        return self.num_tags + 1

    def emissions(self, enc: Tensor, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
        return self.fc(self.stack(enc, mode=mode, rng=rng))

    def parameters(self) -> list[Tensor]:
        return self.stack.parameters() + self.fc.parameters() + [self.transitions]


def path_score(emissions: Tensor, transitions: Tensor, tags: Sequence[int]) -> Tensor:
    """Score of one tag path: its emissions plus every transition, including
    the start->first and last->stop boundary transitions."""
    n, num_tags = emissions.shape
    if len(tags) != n:
        raise ValueError(f"path has {len(tags)} tags for {n} words")
    start, stop = num_tags, num_tags + 1
    ids = np.asarray(tags, dtype=np.intp)
    if ids.min() < 0 or ids.max() >= num_tags:
        raise ValueError(f"tag id out of range 0..{num_tags - 1}")
    emit = ad.tsum(emissions[np.arange(n), ids])
    froms = np.concatenate(([start], ids))
    tos = np.concatenate((ids, [stop]))
    trans = ad.tsum(transitions[froms, tos])
    return emit + trans


def forward_score(emissions: Tensor, transitions: Tensor) -> Tensor:
    """log-sum-exp over the path scores of all tag sequences, by the
    standard forward recursion."""
    n, num_tags = emissions.shape
    start, stop = num_tags, num_tags + 1
    alpha = transitions[start : start + 1, 0:num_tags] + emissions[0:1, :]
    inner = transitions[0:num_tags, 0:num_tags]
    for t in range(1, n):
        within = alpha.T + inner  # [prev, next]
        alpha = ad.log_sum_exp(within, axis=0, keepdims=True) + emissions[t : t + 1, :]
    final = alpha + transitions[0:num_tags, stop : stop + 1].T
    return ad.log_sum_exp(final)


def crf_loss(emissions: Tensor, transitions: Tensor, tags: Sequence[int]) -> Tensor:
    """Negative log-likelihood of the gold path under the CRF:
    forward_score - path_score.  Non-negative for any parameters."""
    return forward_score(emissions, transitions) - path_score(
        emissions, transitions, tags
    )


def viterbi(emissions: np.ndarray, transitions: np.ndarray) -> list[int]:
    """Highest-scoring tag path by max-product dynamic programming.

    Ties break toward the lowest tag id.
    """
    emissions = np.asarray(emissions, dtype=np.float64)
    transitions = np.asarray(transitions, dtype=np.float64)
    n, num_tags = emissions.shape
    if n < 1:
        raise ValueError("cannot decode an empty sequence")
    start, stop = num_tags, num_tags + 1
    delta = transitions[start, :num_tags] + emissions[0]
    back: list[np.ndarray] = []
    for t in range(1, n):
        cand = delta[:, None] + transitions[:num_tags, :num_tags]
        prev = np.argmax(cand, axis=0)
        delta = cand[prev, np.arange(num_tags)] + emissions[t]
        back.append(prev)
    delta = delta + transitions[:num_tags, stop]
    tag = int(np.argmax(delta))
    path = [tag]
    for prev in reversed(back):
        tag = int(prev[tag])
        path.append(tag)
    path.reverse()
    return path


def extract_entities(tags: Sequence[str], repair: bool = False) -> set[tuple[int, int, str]]:
    """Maximal (start, end, type) spans of an IOB-2 sequence.

    With ``repair`` a dangling I-X (after O, sequence start, or a different
    type) is treated as B-X, so any tag sequence yields a span set.
    """
    spans: set[tuple[int, int, str]] = set()
    open_start: int | None = None
    open_type: str | None = None

    def close(end: int) -> None:
        nonlocal open_start, open_type
        if open_start is not None:
            spans.add((open_start, end, open_type))
            open_start, open_type = None, None

    for i, tag in enumerate(tags):
        if tag == "O":
            close(i)
        elif tag.startswith("B-") and len(tag) > 2:
            close(i)
            open_start, open_type = i, tag[2:]
        elif tag.startswith("I-") and len(tag) > 2:
            if open_type == tag[2:]:
                continue
            if not repair:
                raise ValueError(f"dangling {tag!r} at position {i}")
            close(i)
            open_start, open_type = i, tag[2:]
        else:
            raise ValueError(f"invalid IOB-2 tag {tag!r} at position {i}")
    close(len(tags))
    return spans


def eval_micro_f1(pred_tags: Sequence[Sequence[str]],
                  gold_tags: Sequence[Sequence[str]]) -> dict[str, float]:
    """Corpus-level micro precision/recall/F1 over exact (span, type)
    matches.  Gold sequences must be valid IOB-2; predictions are repaired
    first (a dangling I-X counts as B-X)."""
    if len(pred_tags) != len(gold_tags):
        raise ValueError(f"{len(pred_tags)} predictions for {len(gold_tags)} golds")
    tp = fp = fn = 0
    for k, (pred, gold) in enumerate(zip(pred_tags, gold_tags)):
        if len(pred) != len(gold):
            raise ValueError(
                f"sentence {k}: {len(pred)} predicted tags for {len(gold)} words"
            )
        check_iob2(gold, context=f"gold sentence {k}: ")
        p_spans = extract_entities(pred, repair=True)
        g_spans = extract_entities(gold)
        tp += len(p_spans & g_spans)
        fp += len(p_spans - g_spans)
        fn += len(g_spans - p_spans)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"p": precision, "r": recall, "f1": f1}


def write_ner(path: str, sentences: Sequence[Sentence],
              pred_tags: Sequence[Sequence[str]]) -> None:
    """Write the NER file format with a fourth predicted-tag column."""
    with open(path, "w", encoding="utf-8") as fh:
        for sent, tags in zip(sentences, pred_tags):
            for i, word in enumerate(sent.words):
                gold = sent.gold_ner[i] if sent.gold_ner is not None else "_"
                fh.write(f"{word}\t{sent.xpos[i]}\t{gold}\t{tags[i]}\n")
            fh.write("\n")
