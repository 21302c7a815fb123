"""Shared word representations: a frozen contextual subword provider plus
trainable casing and XPOS embedding tables.

Per word j the encoding is the concatenation  context ++ casing ++ xpos,
where the context part is the mean over the word's subtokens of the mean of
the provider's four layer outputs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ingest import Batch, CASING_CATEGORIES, PAD_TAG, Sentence, SubwordVocab

PROVIDER_LAYERS = 4


class ProviderFormatError(ValueError):
    """A provider file does not match the expected binary layout."""


class Vocab:
    """Symbol inventory with a reserved PAD row 0 and an optional UNK."""

    def __init__(self, symbols: Sequence[str], unk: str | None = None, pad: str = PAD_TAG):
        self.pad = pad
        self.unk = unk
        self.symbols = [pad] + [s for s in symbols if s != pad]
        if unk is not None and unk not in self.symbols:
            self.symbols.append(unk)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate symbol in vocabulary")

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        i = self.index.get(symbol)
        if i is None:
            if self.unk is not None:
                return self.index[self.unk]
            raise ValueError(f"symbol {symbol!r} not in vocabulary and no UNK configured")
        return i

    def name(self, i: int) -> str:
        return self.symbols[i]


class EmbeddingTable:
    """Trainable lookup table, initialized uniformly within the bound
    sqrt(6 / (rows + dim)).  When the vocabulary reserves a PAD row it is
    zeroed and, being unreachable from any loss, stays zero."""

    def __init__(self, name: str, vocab: Vocab | Sequence[str], dim: int,
                 rng: np.random.Generator, pad_row: bool = True):
        self.name = name
        self.vocab = vocab if isinstance(vocab, Vocab) else None
        self.labels = vocab.symbols if isinstance(vocab, Vocab) else list(vocab)
        self.dim = dim
        rows = len(self.labels)
        bound = np.sqrt(6.0 / (rows + dim))
        weights = rng.uniform(-bound, bound, size=(rows, dim))
        self.pad_row = 0 if (pad_row and self.vocab is not None) else None
        if self.pad_row is not None:
            weights[self.pad_row] = 0.0
        if not np.all(np.abs(weights) <= bound):
            raise AssertionError(f"table {name}: init exceeded bound {bound}")
        self.init_bound = bound
        self.weights = Tensor(weights, requires_grad=True)

    def __len__(self) -> int:
        return len(self.labels)

    def lookup(self, ids: Sequence[int]) -> Tensor:
        return self.weights[np.asarray(ids, dtype=np.intp)]


def aggregate_subwords(vectors: np.ndarray, spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Collapse per-subtoken, per-layer vectors to one vector per word:
    mean over the four layers, then mean over the word's subtokens."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 3 or vectors.shape[1] != PROVIDER_LAYERS:
        raise ValueError(
            f"expected (subtokens, {PROVIDER_LAYERS}, dim) vectors, got {vectors.shape}"
        )
    per_token = vectors.mean(axis=1)
    rows = []
    for start, end in spans:
        if not 0 <= start < end <= len(per_token):
            raise ValueError(f"empty or out-of-range span ({start}, {end})")
        rows.append(per_token[start:end].mean(axis=0))
    return np.stack(rows)


class HashProvider:
    """Deterministic stand-in for a frozen contextual encoder.

    Each subtoken gets a base vector seeded by a hash of its string; each
    layer output mixes the base vector with its neighbours in a +-2 window
    using fixed, layer-specific weights, so the same subtoken in different
    contexts gets different vectors.  PAD subtokens yield zero vectors.
    """

    _MIX = np.array(
        [
            [0.05, 0.15, 0.60, 0.15, 0.05],
            [0.10, 0.20, 0.40, 0.20, 0.10],
            [0.00, 0.25, 0.50, 0.25, 0.00],
            [0.15, 0.10, 0.50, 0.10, 0.15],
        ]
    )

    def __init__(self, seed: int, d_bert: int = 768):
        self.seed = int(seed)
        self.d_bert = int(d_bert)
        self._cache: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        return {"kind": "hash", "seed": self.seed, "d_bert": self.d_bert}

    def _base(self, piece: str) -> np.ndarray:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        if piece == SubwordVocab.PAD:
            vec = np.zeros(self.d_bert)
        else:
            digest = hashlib.blake2b(
                f"{self.seed}:{piece}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.uniform(-1.0, 1.0, size=self.d_bert)
        self._cache[piece] = vec
        return vec

    def subtoken_vectors(self, sentence_id: str, subtokens: Sequence[str]) -> np.ndarray:
        m = len(subtokens)
        bases = np.stack([self._base(p) for p in subtokens])
        out = np.zeros((m, PROVIDER_LAYERS, self.d_bert))
        for i, piece in enumerate(subtokens):
            if piece == SubwordVocab.PAD:
                continue
            for layer in range(PROVIDER_LAYERS):
                acc = np.zeros(self.d_bert)
                for off in range(-2, 3):
                    j = i + off
                    if 0 <= j < m:
                        acc += self._MIX[layer, off + 2] * bases[j]
                out[i, layer] = acc
        return out


class FileProvider:
    """Precomputed subword vectors keyed by sentence id.

    File layout: one UTF-8 JSON header line {"version", "d_bert", "layers"},
    then records of (uint32 id length, id bytes, uint32 subtoken count n,
    n * 4 * d_bert little-endian float32 values).
    """

    def __init__(self, path: str):
        self.path = path
        with open(path, "rb") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ProviderFormatError(f"{path}: bad header: {exc}") from None
            if header.get("version") != 1:
                raise ProviderFormatError(
                    f"{path}: unsupported version {header.get('version')!r}"
                )
            if header.get("layers") != PROVIDER_LAYERS:
                raise ProviderFormatError(
                    f"{path}: expected {PROVIDER_LAYERS} layers, "
                    f"got {header.get('layers')!r}"
                )
            self.d_bert = int(header["d_bert"])
            self._records: dict[str, np.ndarray] = {}
            while True:
                prefix = fh.read(4)
                if not prefix:
                    break
                if len(prefix) < 4:
                    raise ProviderFormatError(f"{path}: truncated record header")
                (id_len,) = struct.unpack("<I", prefix)
                id_bytes = fh.read(id_len)
                count_bytes = fh.read(4)
                if len(id_bytes) < id_len or len(count_bytes) < 4:
                    raise ProviderFormatError(f"{path}: truncated record")
                (n,) = struct.unpack("<I", count_bytes)
                want = n * PROVIDER_LAYERS * self.d_bert * 4
                payload = fh.read(want)
                if len(payload) < want:
                    raise ProviderFormatError(f"{path}: truncated vector payload")
                vec = np.frombuffer(payload, dtype="<f4").astype(np.float64)
                self._records[id_bytes.decode("utf-8")] = vec.reshape(
                    (n, PROVIDER_LAYERS, self.d_bert)
                )

    def spec(self) -> dict:
        return {"kind": "file", "path": self.path, "d_bert": self.d_bert}

    def subtoken_vectors(self, sentence_id: str, subtokens: Sequence[str]) -> np.ndarray:
        rec = self._records.get(sentence_id)
        if rec is None:
            raise KeyError(f"{self.path}: no vectors for sentence id {sentence_id!r}")
        real = sum(1 for p in subtokens if p != SubwordVocab.PAD)
        if rec.shape[0] != real:
            raise ProviderFormatError(
                f"{self.path}: sentence {sentence_id!r} has {rec.shape[0]} stored "
                f"subtokens, batch supplies {real}"
            )
        out = np.zeros((len(subtokens), PROVIDER_LAYERS, self.d_bert))
        out[:real] = rec
        return out


def write_provider_file(path: str, records: dict[str, np.ndarray], d_bert: int) -> None:
    """Write precomputed provider vectors in the FileProvider layout."""
    with open(path, "wb") as fh:
        header = {"version": 1, "d_bert": d_bert, "layers": PROVIDER_LAYERS}
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for sid, vec in records.items():
            vec = np.asarray(vec)
            if vec.ndim != 3 or vec.shape[1:] != (PROVIDER_LAYERS, d_bert):
                raise ValueError(
                    f"record {sid!r}: expected (n, {PROVIDER_LAYERS}, {d_bert}), "
                    f"got {vec.shape}"
                )
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", vec.shape[0]))
            fh.write(vec.astype("<f4").tobytes())


@dataclass
class EmbedDropout:
    provider: float = 0.5
    tables: float = 0.4


@dataclass
class SharedEncoding:
    """Per-word shared representation of one (possibly padded) sentence."""

    sentence: Sentence
    tensor: Tensor  # (padded length, d_bert + d_cas + d_pos)
    n: int
    d_bert: int
    d_cas: int
    d_pos: int

    @property
    def dim(self) -> int:
        return self.d_bert + self.d_cas + self.d_pos

    def words(self) -> Tensor:
        """Rows for the real (non-pad) words."""
        return self.tensor[0 : self.n]


def casing_vocab() -> Vocab:
    return Vocab(list(CASING_CATEGORIES))


def encode_batch(
    batch: Batch,
    provider,
    casing_table: EmbeddingTable,
    pos_table: EmbeddingTable,
    dropout: EmbedDropout | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> list[SharedEncoding]:
    """Produce the shared encoding for every sentence of a batch.

    The three parts are concatenated in a fixed order (context, casing,
    xpos).  Dropout on the provider part and on the table parts applies in
    training mode only.  PAD rows stay all-zero.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    cas_vocab = casing_table.vocab
    pos_vocab = pos_table.vocab
    out: list[SharedEncoding] = []
    for i, sent in enumerate(batch.sentences):
        vectors = provider.subtoken_vectors(sent.id, batch.subtokens[i])
        bert = Tensor(aggregate_subwords(vectors, batch.spans[i]))
        cas_ids = [cas_vocab.id(c) for c in batch.padded_casing[i]]
        pos_ids = [pos_vocab.id(t) for t in batch.padded_xpos[i]]
        v_cas = casing_table.lookup(cas_ids)
        v_pos = pos_table.lookup(pos_ids)
        if train and dropout is not None:
            bert = ad.dropout(bert, dropout.provider, rng, True)
            v_cas = ad.dropout(v_cas, dropout.tables, rng, True)
            v_pos = ad.dropout(v_pos, dropout.tables, rng, True)
        enc = ad.concat([bert, v_cas, v_pos], axis=1)
        out.append(
            SharedEncoding(
                sentence=sent,
                tensor=enc,
                n=len(sent),
                d_bert=vectors.shape[2],
                d_cas=casing_table.dim,
                d_pos=pos_table.dim,
            )
        )
    return out
