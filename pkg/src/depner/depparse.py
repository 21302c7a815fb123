"""Graph-based dependency head: biaffine edge/label scoring over highway
LSTM states, the combined edge+label training loss, maximum-arborescence
decoding, and attachment-score evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import BiaffineScorer, HighwayLstmStack, uniform_init
from .ingest import Sentence

NEG_INF = -np.inf


@dataclass
class DepScores:
    """Edge and label scores for one sentence.

    Both tensors index position 0 as the synthetic root; rows are
    dependents and columns candidate heads.  The diagonal and the
    root-as-dependent row are masked out of every use.
    """

    edge: Tensor  # (n+1, n+1)
    label: Tensor  # (n+1, n+1, num_labels)
    n: int

    @property
    def num_labels(self) -> int:
        return self.label.shape[2]

    def masked_edge(self) -> np.ndarray:
        """Edge scores with forbidden cells at -inf, for decoding."""
        m = self.edge.data.copy()
        np.fill_diagonal(m, NEG_INF)
        m[0, :] = NEG_INF
        return m


@dataclass
class DepPrediction:
    heads: list[int]  # per word, in [0, n]; 0 names the root
    labels: list[int]  # label ids


class DepHead:
    """Scores every (dependent, head) pair of a sentence and every label."""

    def __init__(self, d_in: int, hidden: int, num_layers: int, inner: int,
                 num_labels: int, dropout: float, rng: np.random.Generator):
        self.stack = HighwayLstmStack(d_in, hidden, num_layers, dropout, rng)
        d_state = self.stack.d_out
        self.root = Tensor(uniform_init(rng, (1, d_state), 1, d_state),
                           requires_grad=True)
        self.edge_scorer = BiaffineScorer(d_state, inner, 1, rng)
        self.label_scorer = BiaffineScorer(d_state, inner, num_labels, rng)
        self.num_labels = num_labels

    def states(self, enc: Tensor, mode: str = "eval",
               rng: np.random.Generator | None = None) -> Tensor:
        return self.stack(enc, mode=mode, rng=rng)

    def score_sentence(self, enc: Tensor, mode: str = "eval",
                       rng: np.random.Generator | None = None) -> DepScores:
        n = enc.shape[0]
        h = self.states(enc, mode=mode, rng=rng)
        h = ad.concat([self.root, h], axis=0)  # learned root occupies row 0
        return DepScores(
            edge=self.edge_scorer.edge_matrix(h),
            label=self.label_scorer.label_tensor(h),
            n=n,
        )

    def parameters(self) -> list[Tensor]:
        return (
            self.stack.parameters()
            + [self.root]
            + self.edge_scorer.parameters()
            + self.label_scorer.parameters()
        )


def dep_loss(scores: DepScores, gold_heads: Sequence[int],
             gold_labels: Sequence[int]) -> Tensor:
    """Sum of two cross-entropies per word: the head distribution (softmax
    over the candidate heads of that word) against the gold head, and the
    label distribution at the gold head column against the gold label."""
    n = scores.n
    if len(gold_heads) != n or len(gold_labels) != n:
        raise ValueError(f"gold annotations must have length {n}")
    num_labels = scores.num_labels
    total = None
    for i in range(1, n + 1):
        head = gold_heads[i - 1]
        label = gold_labels[i - 1]
        if not 0 <= head <= n or head == i:
            raise ValueError(f"gold head {head} invalid for word {i} of {n}")
        if not 0 <= label < num_labels:
            raise ValueError(f"gold label {label} out of range {num_labels}")
        candidates = np.array([j for j in range(n + 1) if j != i], dtype=np.intp)
        gold_pos = head if head < i else head - 1
        row = scores.edge[i, candidates]
        edge_nll = ad.log_sum_exp(row) - row[gold_pos]
        lvec = scores.label[i, head]
        label_nll = ad.log_sum_exp(lvec) - lvec[label]
        term = edge_nll + label_nll
        total = term if total is None else total + term
    return total


def _greedy_heads(scores: np.ndarray) -> np.ndarray:
    heads = np.argmax(scores, axis=1)
    heads[0] = 0
    return heads


def _find_cycle(heads: np.ndarray) -> list[int] | None:
    m = len(heads)
    color = [0] * m  # 0 unseen, 1 on current path, 2 settled
    color[0] = 2
    for start in range(1, m):
        if color[start]:
            continue
        path = []
        v = start
        while color[v] == 0:
            color[v] = 1
            path.append(v)
            v = int(heads[v])
        if color[v] == 1:
            return path[path.index(v) :]
        for u in path:
            color[u] = 2
    return None


def _cle(scores: np.ndarray) -> np.ndarray:
    """Unconstrained maximum arborescence on a masked score matrix
    (scores[dep, head]; row 0 and the diagonal already at -inf)."""
    m = scores.shape[0]
    heads = _greedy_heads(scores)
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    in_cycle = np.zeros(m, dtype=bool)
    in_cycle[cycle] = True
    cyc_gain = {v: scores[v, heads[v]] for v in cycle}
    total_gain = sum(cyc_gain.values())
    rest = [v for v in range(m) if not in_cycle[v]]
    k = len(rest)
    sub = np.full((k + 1, k + 1), NEG_INF)  # node k is the contracted cycle
    # arcs untouched by the cycle
    for a, va in enumerate(rest):
        for b, vb in enumerate(rest):
            if a != b:
                sub[a, b] = scores[va, vb]
    # arcs entering the cycle: breaking one internal arc costs its gain
    enter_choice = np.zeros(k, dtype=np.intp)
    for b, vb in enumerate(rest):
        options = np.array([scores[v, vb] + total_gain - cyc_gain[v] for v in cycle])
        best = int(np.argmax(options))
        enter_choice[b] = cycle[best]
        sub[k, b] = options[best]
    # arcs leaving the cycle
    exit_choice = np.zeros(k, dtype=np.intp)
    for a, va in enumerate(rest):
        options = np.array([scores[va, v] for v in cycle])
        best = int(np.argmax(options))
        exit_choice[a] = cycle[best]
        sub[a, k] = options[best]
    sub[0, :] = NEG_INF
    np.fill_diagonal(sub, NEG_INF)
    sub_heads = _cle(sub)
    heads = heads.copy()
    for a, va in enumerate(rest):
        h = sub_heads[a]
        if a == 0:
            continue
        heads[va] = exit_choice[a] if h == k else rest[h]
    entry = sub_heads[k]
    broken = enter_choice[entry]
    heads[broken] = rest[entry]
    return heads


def tree_score(scores: np.ndarray, heads: Sequence[int]) -> float:
    return float(sum(scores[i + 1, h] for i, h in enumerate(heads)))


def chu_liu_edmonds(edge_scores: np.ndarray) -> list[int]:
    """Maximum-score arborescence rooted at position 0, with exactly one
    word attached to the root.

    ``edge_scores[d, h]`` scores attaching dependent d to head h.  Returns
    one head per word (n entries for an (n+1) x (n+1) matrix).  When the
    unconstrained optimum already has a single root child it is returned
    directly; otherwise every candidate root child is tried with the other
    root arcs masked, and the best total wins.  Ties break toward lower
    indices.
    """
    m = edge_scores.shape[0]
    if m < 2:
        raise ValueError("need at least one word to decode")
    masked = np.asarray(edge_scores, dtype=np.float64).copy()
    np.fill_diagonal(masked, NEG_INF)
    masked[0, :] = NEG_INF
    if m == 2:
        return [0]
    heads = _cle(masked)
    if int(np.sum(heads[1:] == 0)) == 1:
        return [int(h) for h in heads[1:]]
    best_heads: list[int] | None = None
    best_total = NEG_INF
    for r in range(1, m):
        constrained = masked.copy()
        constrained[1:, 0] = NEG_INF
        constrained[r, 0] = masked[r, 0]
        candidate = _cle(constrained)
        total = tree_score(constrained, candidate[1:])
        if total > best_total:
            best_total = total
            best_heads = [int(h) for h in candidate[1:]]
    assert best_heads is not None
    return best_heads


def decode(scores: DepScores) -> DepPrediction:
    """Best tree via the arborescence solver, then the best label at each
    chosen head column."""
    heads = chu_liu_edmonds(scores.masked_edge())
    label_data = scores.label.data
    labels = [
        int(np.argmax(label_data[i, heads[i - 1]])) for i in range(1, scores.n + 1)
    ]
    return DepPrediction(heads=heads, labels=labels)


def eval_las_uas(preds: Sequence[DepPrediction], golds: Sequence[Sentence],
                 label_names: Sequence[str]) -> dict[str, float]:
    """Unlabeled and labeled attachment scores over all words.

    UAS counts correct heads; LAS additionally requires the label.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} sentences")
    words = 0
    head_hits = 0
    both_hits = 0
    for pred, gold in zip(preds, golds):
        if gold.gold_heads is None or gold.gold_deprels is None:
            raise ValueError(f"sentence {gold.id} has no gold tree")
        if len(pred.heads) != len(gold) or len(pred.labels) != len(gold):
            raise ValueError(
                f"sentence {gold.id}: prediction length {len(pred.heads)} "
                f"vs {len(gold)} words"
            )
        for i in range(len(gold)):
            words += 1
            if pred.heads[i] == gold.gold_heads[i]:
                head_hits += 1
                if label_names[pred.labels[i]] == gold.gold_deprels[i]:
                    both_hits += 1
    if words == 0:
        return {"las": 0.0, "uas": 0.0}
    return {"las": both_hits / words, "uas": head_hits / words}


def write_conllu(path: str, sentences: Sequence[Sentence],
                 preds: Sequence[DepPrediction], label_names: Sequence[str]) -> None:
    """Write sentences with predicted HEAD and DEPREL in CoNLL-U layout."""
    with open(path, "w", encoding="utf-8") as fh:
        for sent, pred in zip(sentences, preds):
            fh.write(f"# sent_id = {sent.id}\n")
            for i, word in enumerate(sent.words):
                cols = [
                    str(i + 1), word, "_", "_", sent.xpos[i], "_",
                    str(pred.heads[i]), label_names[pred.labels[i]], "_", "_",
                ]
                fh.write("\t".join(cols) + "\n")
            fh.write("\n")
