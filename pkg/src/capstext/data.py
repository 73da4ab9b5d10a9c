"""Corpus ingestion, vocabulary, embeddings, batching, and perturbations.

External formats:
  * corpus TSV: one ``label<TAB>text`` line per example, 0-based labels;
  * manifest: flat ``key = path`` file with train/val/test entries;
  * vector file: ``token v1 v2 ... ve``, space-separated, no header;
  * rewrite TSV: ``original<TAB>variant`` sentence pairs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

# Lowercase words, apostrophe-led contraction pieces ("'s", "'nt"), digits,
# and single punctuation marks.  Contractions stay attached to the
# apostrophe so possessives split off as their own token.
_TOKEN_RE = re.compile(r"'[a-z0-9]+|[a-z0-9]+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word, contraction, and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id map with reserved padding and unknown entries."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self._index: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for token in tokens:
            self.add(token)

    def add(self, token: str) -> int:
        if token not in self._index:
            self._index[token] = len(self._tokens)
            self._tokens.append(token)
        return self._index[token]

    @classmethod
    def from_corpus(cls, token_lists: Iterable[Sequence[str]]) -> "Vocabulary":
        """Index every distinct token in first-occurrence order."""
        vocab = cls()
        for tokens in token_lists:
            for token in tokens:
                vocab.add(token)
        return vocab

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        """Strict lookup; raises KeyError for unknown tokens."""
        return self._index[token]

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK_ID) for t in tokens]


def build_vocab(corpora: Iterable[Iterable[Sequence[str]]]) -> Vocabulary:
    """Vocabulary over several corpora (typically train plus validation)."""
    vocab = Vocabulary()
    for corpus in corpora:
        for tokens in corpus:
            for token in tokens:
                vocab.add(token)
    return vocab


@dataclass
class EmbeddingMatrix:
    """Word vectors with per-row provenance.

    ``provenance[i]`` is "pad", "pretrained", or "random"; the padding row
    is always all zeros, and ``coverage`` counts the pretrained rows.
    """

    vectors: np.ndarray
    provenance: list[str]

    def __post_init__(self):
        if len(self.provenance) != self.vectors.shape[0]:
            raise ValueError("provenance length must match row count")
        if not np.all(self.vectors[PAD_ID] == 0):
            raise ValueError("padding row must be all zeros")

    @property
    def coverage(self) -> int:
        return sum(1 for p in self.provenance if p == "pretrained")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def random_embeddings(vocab: Vocabulary, dim: int, rng: np.random.Generator,
                      dtype=np.float32) -> EmbeddingMatrix:
    """Unit-scale random vectors for every non-padding token.

    Word vectors trained from scratch start at unit per-coordinate scale
    so the convolutional front-end sees healthy activations; rows backing
    a pretrained file keep that file's scale instead.
    """
    vectors = rng.normal(0.0, 1.0, size=(len(vocab), dim)).astype(dtype)
    vectors[PAD_ID] = 0.0
    provenance = ["pad"] + ["random"] * (len(vocab) - 1)
    return EmbeddingMatrix(vectors=vectors, provenance=provenance)


def load_pretrained_vectors(path, vocab: Vocabulary, rng: np.random.Generator,
                            dtype=np.float32) -> EmbeddingMatrix:
    """Fill vocabulary rows from a text vector file.

    Tokens missing from the file get uniform [-0.25, 0.25] vectors; the
    padding row stays zero.  Lines whose width disagrees with the first
    line raise a FormatError naming the offending line.
    """
    found: dict[int, np.ndarray] = {}
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: expected 'token v1 ...'")
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise FormatError(
                    f"{path}:{lineno}: expected {dim} values, got {len(values)}"
                )
            if token in vocab:
                try:
                    found[vocab.id(token)] = np.array([float(v) for v in values], dtype=dtype)
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: bad number: {exc}") from exc
    if dim is None:
        raise FormatError(f"{path}: no vector lines found")
    vectors = rng.uniform(-0.25, 0.25, size=(len(vocab), dim)).astype(dtype)
    provenance = ["random"] * len(vocab)
    vectors[PAD_ID] = 0.0
    provenance[PAD_ID] = "pad"
    for idx, vec in found.items():
        if idx == PAD_ID:
            continue
        vectors[idx] = vec
        provenance[idx] = "pretrained"
    return EmbeddingMatrix(vectors=vectors, provenance=provenance)


@dataclass
class TextDataset:
    """Examples of one split: parallel label and token-id lists."""

    labels: list[int]
    token_ids: list[list[int]]
    split: str
    max_len: int
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def pad_ids(ids: Sequence[int], max_len: int) -> list[int]:
    """Left-pad with the padding id, or keep the trailing ``max_len`` tokens."""
    if len(ids) >= max_len:
        return list(ids[len(ids) - max_len:])
    return [PAD_ID] * (max_len - len(ids)) + list(ids)


def pad_batch(examples: Sequence[tuple[int, Sequence[int]]], max_len: int,
              batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Group examples into (ids, labels) batches of at most ``batch_size``.

    Every sequence comes out exactly ``max_len`` long, padded at the front.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        ids = np.array([pad_ids(seq, max_len) for _, seq in chunk], dtype=np.int64)
        labels = np.array([label for label, _ in chunk], dtype=np.int64)
        batches.append((ids, labels))
    return batches


def dataset_batches(dataset: TextDataset, batch_size: int,
                    order: np.ndarray | None = None):
    examples = list(zip(dataset.labels, dataset.token_ids))
    if order is not None:
        examples = [examples[i] for i in order]
    return pad_batch(examples, dataset.max_len, batch_size)


def shuffle_word_order(tokens: Sequence[str], mode: str = "full", seed: int = 0,
                       rewrites: dict[str, str] | None = None) -> list[str]:
    """Perturb token order: a seeded uniform permutation, or a replayed
    human-edited variant looked up by the joined sentence."""
    if not tokens:
        raise ValueError("cannot shuffle an empty token list")
    if mode == "full":
        rng = np.random.default_rng(seed)
        return [tokens[i] for i in rng.permutation(len(tokens))]
    if mode == "phrase_rewrite_file":
        if rewrites is None:
            raise ValueError("phrase_rewrite_file mode needs a rewrite table")
        key = " ".join(tokens)
        if key not in rewrites:
            raise KeyError(f"no rewrite recorded for: {key!r}")
        return tokenize(rewrites[key])
    raise ValueError(f"unknown shuffle mode {mode!r}")


def load_rewrite_rows(path) -> list[tuple[str, str]]:
    """Ordered (original, variant) pairs from a two-column TSV."""
    rows: list[tuple[str, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'original<TAB>variant'")
        rows.append((parts[0], parts[1]))
    return rows


def load_rewrites(path) -> dict[str, str]:
    """original -> variant map keyed by the tokenized original sentence."""
    return {" ".join(tokenize(orig)): var for orig, var in load_rewrite_rows(path)}


def nearest_words(embedding: EmbeddingMatrix, vocab: Vocabulary, query: str,
                  top_k: int = 5) -> list[str]:
    """Tokens ranked by cosine similarity to the query's vector.

    The query itself is excluded, zero vectors never rank, and exact ties
    break toward the lower index.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    qid = vocab.id(query)  # raises KeyError when unknown
    vectors = embedding.vectors
    q = vectors[qid].astype(np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError(f"query {query!r} has a zero vector; cosine undefined")
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = (vectors.astype(np.float64) @ q) / (norms * qn)
    sims[norms == 0] = -np.inf
    sims[qid] = -np.inf
    # stable sort on negated scores keeps index order for exact ties
    ranked = np.argsort(-sims, kind="stable")[:top_k]
    return [vocab.token(int(i)) for i in ranked]


def load_corpus_tsv(path) -> list[tuple[int, str]]:
    """(label, text) pairs from a corpus TSV."""
    examples: list[tuple[int, str]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t", 1)
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'label<TAB>text'")
        try:
            label = int(parts[0])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad label {parts[0]!r}") from exc
        if label < 0:
            raise FormatError(f"{path}:{lineno}: labels must be non-negative")
        examples.append((label, parts[1]))
    return examples


def load_manifest(path) -> dict[str, Path]:
    """Resolve the train/val/test corpus paths listed in a manifest file."""
    base = Path(path).parent
    entries: dict[str, Path] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'split = path'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = base / value
    missing = {"train", "val", "test"} - set(entries)
    if missing:
        raise FormatError(f"{path}: manifest is missing splits: {sorted(missing)}")
    return entries


@dataclass
class DataBundle:
    """Tokenized splits plus the vocabulary they share."""

    train: TextDataset
    val: TextDataset
    test: TextDataset
    vocab: Vocabulary
    num_classes: int
    max_len: int


def derive_max_len(lengths: Sequence[int], floor: int = 1) -> int:
    """95th percentile of training lengths, never below ``floor``."""
    if not lengths:
        raise ValueError("cannot derive max_len from an empty split")
    return max(int(np.ceil(np.percentile(lengths, 95))), floor)


def load_bundle(manifest_path, max_len: int | None = None,
                min_len: int = 1) -> DataBundle:
    """Load, tokenize, and index the three splits named by a manifest.

    The vocabulary covers train and validation; ``max_len`` of None is
    derived from the training lengths.  ``min_len`` lets callers force
    room for their convolution filters.
    """
    paths = load_manifest(manifest_path)
    raw = {split: load_corpus_tsv(paths[split]) for split in ("train", "val", "test")}
    tokens = {
        split: [tokenize(text) for _, text in examples]
        for split, examples in raw.items()
    }
    vocab = build_vocab([tokens["train"], tokens["val"]])
    if max_len is None:
        max_len = derive_max_len([len(t) for t in tokens["train"]], floor=min_len)
    max_len = max(max_len, min_len)
    num_classes = 1 + max(label for examples in raw.values() for label, _ in examples)
    splits = {}
    for split in ("train", "val", "test"):
        splits[split] = TextDataset(
            labels=[label for label, _ in raw[split]],
            token_ids=[vocab.encode(t) for t in tokens[split]],
            split=split,
            max_len=max_len,
            num_classes=num_classes,
        )
    return DataBundle(train=splits["train"], val=splits["val"], test=splits["test"],
                      vocab=vocab, num_classes=num_classes, max_len=max_len)
