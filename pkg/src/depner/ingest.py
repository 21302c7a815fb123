"""Corpus ingestion: CoNLL-U and NER readers, casing categories, greedy
wordpiece segmentation, and two-stage padded batching with word-to-subtoken
alignment."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# casing categories, by precedence
APOSTROPHE = "APOSTROPHE"
NUMERIC = "NUMERIC"
ALLCAPS = "ALLCAPS"
TITLE = "TITLE"
LOWER = "LOWER"
CASING_CATEGORIES = (TITLE, ALLCAPS, LOWER, APOSTROPHE, NUMERIC)

PAD_WORD = "[PAD]"
PAD_TAG = "<PAD>"


class ParseError(ValueError):
    """A corpus file violated its format; the message carries file:line."""


class OversizeError(ValueError):
    """A single sentence exceeds the batch word budget."""


def classify_casing(word: str) -> str:
    """Map a word to one of the five casing categories.

    Precedence: APOSTROPHE > NUMERIC > ALLCAPS > TITLE > LOWER.  Words that
    fit none of the first four fall back to LOWER.
    """
    if not word:
        raise ValueError("cannot classify the casing of an empty word")
    if "'" in word or "’" in word:
        return APOSTROPHE
    if all(c.isdigit() for c in word):
        return NUMERIC
    letters = [c for c in word if c.isalpha()]
    if len(letters) >= 2 and all(c.isupper() for c in letters):
        return ALLCAPS
    if word[0].isupper() and all(c.islower() for c in letters[1:]):
        return TITLE
    return LOWER


def check_iob2(tags: Sequence[str], context: str = "") -> None:
    """Raise ValueError on the first invalid IOB-2 transition or tag."""
    prev = "O"
    for i, tag in enumerate(tags):
        if tag == "O":
            prev = tag
            continue
        if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
            if tag[0] == "I":
                if not (prev != "O" and prev[2:] == tag[2:]):
                    raise ValueError(
                        f"{context}invalid IOB-2: {tag!r} at position {i} "
                        f"after {prev!r}"
                    )
            prev = tag
            continue
        raise ValueError(f"{context}invalid IOB-2 tag {tag!r} at position {i}")


def is_iob2(tags: Sequence[str]) -> bool:
    try:
        check_iob2(tags)
        return True
    except ValueError:
        return False


@dataclass
class Sentence:
    """Words with tags and optional gold annotations for either task.

    ``gold_heads`` uses 1-based word positions with 0 for the root.
    """

    id: str
    words: list[str]
    xpos: list[str]
    casing: list[str] | None = None
    gold_heads: list[int] | None = None
    gold_deprels: list[str] | None = None
    gold_ner: list[str] | None = None

    def __post_init__(self) -> None:
        n = len(self.words)
        if n == 0:
            raise ValueError(f"sentence {self.id}: empty")
        if self.casing is None:
            self.casing = [classify_casing(w) for w in self.words]
        for name in ("xpos", "casing", "gold_heads", "gold_deprels", "gold_ner"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(
                    f"sentence {self.id}: {name} has length {len(value)}, "
                    f"expected {n}"
                )
        if self.gold_heads is not None:
            for i, h in enumerate(self.gold_heads):
                if not 0 <= h <= n:
                    raise ValueError(
                        f"sentence {self.id}: head {h} of word {i + 1} out of range"
                    )
                if h == i + 1:
                    raise ValueError(
                        f"sentence {self.id}: word {i + 1} is its own head"
                    )
        if self.gold_ner is not None:
            check_iob2(self.gold_ner, context=f"sentence {self.id}: ")

    def __len__(self) -> int:
        return len(self.words)


def read_conllu(path: str) -> list[Sentence]:
    """Read a CoNLL-U file, consuming FORM, XPOS, HEAD and DEPREL.

    Comment lines, multiword-token ranges ("3-4") and empty nodes ("3.1")
    are skipped.  HEAD/DEPREL may be entirely absent ("_") in a sentence,
    in which case the sentence carries no gold tree.
    """
    sentences: list[Sentence] = []
    words: list[str] = []
    xpos: list[str] = []
    heads: list[int | None] = []
    deprels: list[str] = []
    sent_id: str | None = None

    def flush(lineno: int) -> None:
        nonlocal words, xpos, heads, deprels, sent_id
        if not words:
            sent_id = None
            return
        have = [h is not None for h in heads]
        if any(have) and not all(have):
            raise ParseError(f"{path}:{lineno}: sentence mixes HEAD values and '_'")
        sid = sent_id if sent_id is not None else f"s{len(sentences) + 1}"
        sentences.append(
            Sentence(
                id=sid,
                words=words,
                xpos=xpos,
                gold_heads=list(heads) if all(have) else None,
                gold_deprels=list(deprels) if all(have) else None,
            )
        )
        words, xpos, heads, deprels = [], [], [], []
        sent_id = None

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("sent_id"):
                    _, _, value = body.partition("=")
                    if value.strip():
                        sent_id = value.strip()
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise ParseError(
                    f"{path}:{lineno}: expected 10 tab-separated columns, "
                    f"got {len(cols)}"
                )
            tid = cols[0]
            if "-" in tid or "." in tid:
                continue  # multiword-token range or empty node
            words.append(cols[1])
            xpos.append(cols[4])
            if cols[6] == "_":
                heads.append(None)
                deprels.append("_")
            else:
                try:
                    heads.append(int(cols[6]))
                except ValueError:
                    raise ParseError(
                        f"{path}:{lineno}: non-integer HEAD {cols[6]!r}"
                    ) from None
                deprels.append(cols[7])
        flush(lineno + 1)
    return sentences


def read_ner(path: str) -> list[Sentence]:
    """Read a FORM<TAB>XPOS<TAB>NERTAG file with blank-line sentence breaks.

    Gold tag sequences must be valid IOB-2.
    """
    sentences: list[Sentence] = []
    words: list[str] = []
    xpos: list[str] = []
    tags: list[str] = []

    def flush() -> None:
        nonlocal words, xpos, tags
        if not words:
            return
        sid = f"s{len(sentences) + 1}"
        check_iob2(tags, context=f"{path}: sentence {sid}: ")
        sentences.append(Sentence(id=sid, words=words, xpos=xpos, gold_ner=tags))
        words, xpos, tags = [], [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 3 tab-separated columns, "
                    f"got {len(cols)}"
                )
            words.append(cols[0])
            xpos.append(cols[1])
            tags.append(cols[2])
        flush()
    return sentences


class SubwordVocab:
    """Subtoken inventory for greedy longest-match-first segmentation.

    Continuation pieces carry a literal "##" prefix.  The inventory must
    contain the [UNK] and [PAD] entries.
    """

    PAD = "[PAD]"
    UNK = "[UNK]"

    def __init__(self, pieces: Iterable[str]):
        self.pieces = list(pieces)
        self.index = {p: i for i, p in enumerate(self.pieces)}
        if len(self.index) != len(self.pieces):
            raise ValueError("duplicate subtoken in vocabulary")
        for required in (self.PAD, self.UNK):
            if required not in self.index:
                raise ValueError(f"subword vocabulary is missing {required}")

    @classmethod
    def load(cls, path: str) -> "SubwordVocab":
        with open(path, encoding="utf-8") as fh:
            pieces = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(pieces)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.pieces:
                fh.write(p + "\n")

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    def tokenize(self, word: str) -> list[str]:
        """Greedy longest-match-first segmentation of one word.

        Concatenating the pieces (with "##" stripped) reproduces the word;
        if some position cannot be covered the result is ``[UNK]``.
        """
        if not word:
            raise ValueError("cannot tokenize an empty word")
        pieces: list[str] = []
        start = 0
        while start < len(word):
            end = len(word)
            match = None
            while start < end:
                candidate = word[start:end]
                if start > 0:
                    candidate = "##" + candidate
                if candidate in self.index:
                    match = candidate
                    break
                end -= 1
            if match is None:
                return [self.UNK]
            pieces.append(match)
            start = end
        return pieces


def wordpiece_tokenize(word: str, vocab: SubwordVocab) -> list[str]:
    return vocab.tokenize(word)


@dataclass
class SubwordAlignment:
    """Subtokens of a word sequence plus, per word, its contiguous span."""

    subtokens: list[str]
    spans: list[tuple[int, int]]


def align_words(words: Sequence[str], vocab: SubwordVocab) -> SubwordAlignment:
    subtokens: list[str] = []
    spans: list[tuple[int, int]] = []
    for word in words:
        pieces = [vocab.PAD] if word == PAD_WORD else vocab.tokenize(word)
        spans.append((len(subtokens), len(subtokens) + len(pieces)))
        subtokens.extend(pieces)
    return SubwordAlignment(subtokens=subtokens, spans=spans)


@dataclass
class Batch:
    """Sentences padded to a common word length (stage 1) whose subtoken
    rows are padded to a common subtoken length (stage 2)."""

    sentences: list[Sentence]
    padded_words: list[list[str]]
    padded_xpos: list[list[str]]
    padded_casing: list[list[str]]
    word_mask: list[list[int]]
    subtokens: list[list[str]]
    spans: list[list[tuple[int, int]]]

    @property
    def word_length(self) -> int:
        return len(self.padded_words[0])

    @property
    def subtoken_length(self) -> int:
        return len(self.subtokens[0])

    def word_count(self) -> int:
        return sum(len(s) for s in self.sentences)


def _build_batch(group: list[Sentence], vocab: SubwordVocab) -> Batch:
    stage1 = max(len(s) for s in group)
    padded_words, padded_xpos, padded_casing, masks = [], [], [], []
    aligned: list[SubwordAlignment] = []
    for s in group:
        pad = stage1 - len(s)
        words = list(s.words) + [PAD_WORD] * pad
        padded_words.append(words)
        padded_xpos.append(list(s.xpos) + [PAD_TAG] * pad)
        padded_casing.append(list(s.casing) + [PAD_TAG] * pad)
        masks.append([1] * len(s) + [0] * pad)
        aligned.append(align_words(words, vocab))
    stage2 = max(len(a.subtokens) for a in aligned)
    subtokens = [a.subtokens + [vocab.PAD] * (stage2 - len(a.subtokens)) for a in aligned]
    return Batch(
        sentences=list(group),
        padded_words=padded_words,
        padded_xpos=padded_xpos,
        padded_casing=padded_casing,
        word_mask=masks,
        subtokens=subtokens,
        spans=[a.spans for a in aligned],
    )


def make_batches(
    sentences: Sequence[Sentence],
    word_budget: int,
    vocab: SubwordVocab,
    seed: int | None = None,
) -> list[Batch]:
    """Greedily pack sentences into batches of at most ``word_budget``
    non-pad words, then apply both padding stages.

    With ``seed`` given, the sentence order is shuffled first; otherwise the
    input order is kept.  Deterministic either way.
    """
    order = list(sentences)
    if seed is not None:
        rng = np.random.default_rng(seed)
        order = [order[i] for i in rng.permutation(len(order))]
    batches: list[Batch] = []
    group: list[Sentence] = []
    used = 0
    for s in order:
        if len(s) > word_budget:
            raise OversizeError(
                f"sentence {s.id} has {len(s)} words, over the budget of {word_budget}"
            )
        if group and used + len(s) > word_budget:
            batches.append(_build_batch(group, vocab))
            group, used = [], 0
        group.append(s)
        used += len(s)
    if group:
        batches.append(_build_batch(group, vocab))
    return batches


def unbatch(batch: Batch) -> list[Sentence]:
    """Reconstruct the sentences of a batch from its padded arrays.

    Used to verify the round-trip invariant: stripping both padding stages
    recovers each original sentence.
    """
    out: list[Sentence] = []
    for i, original in enumerate(batch.sentences):
        n = sum(batch.word_mask[i])
        out.append(
            Sentence(
                id=original.id,
                words=batch.padded_words[i][:n],
                xpos=batch.padded_xpos[i][:n],
                casing=batch.padded_casing[i][:n],
                gold_heads=original.gold_heads,
                gold_deprels=original.gold_deprels,
                gold_ner=original.gold_ner,
            )
        )
    return out


def corpus_path(name: str) -> str:
    """Path of a bundled data file (synthetic corpus, subword vocabulary)."""
    return os.path.join(os.path.dirname(__file__), "data", name)
