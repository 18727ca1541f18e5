"""Corpus loading and contiguous language-model batching."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorpusTooSmall, EmptyCorpus, OutOfVocab

UNK = "<unk>"
EOS = "<eos>"


class Vocab:
    """Bidirectional token <-> id map. Char-level tokens are ints (bytes)."""

    def __init__(self, level: str, tokens: Sequence):
        if level not in ("char", "word"):
            raise ValueError(f"level must be char or word, got {level!r}")
        self.level = level
        self.itos: List = list(tokens)
        self.stoi: Dict = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and (self.level, self.itos) == (other.level, other.itos)

    def encode(self, tokens: Sequence) -> np.ndarray:
        if self.level == "word":
            unk = self.stoi[UNK]
            return np.array([self.stoi.get(t, unk) for t in tokens], dtype=np.int64)
        try:
            return np.array([self.stoi[t] for t in tokens], dtype=np.int64)
        except KeyError as e:
            raise OutOfVocab(f"byte {e.args[0]} not in the character vocabulary") from None

    def decode(self, ids: Sequence[int]) -> List:
        return [self.itos[i] for i in ids]

    def to_list(self) -> List:
        return list(self.itos)

    @classmethod
    def build(cls, level: str, texts: Sequence[bytes]) -> "Vocab":
        if level == "char":
            seen = set()
            for t in texts:
                seen.update(t)
            return cls("char", sorted(seen))
        words = []
        seen = set()
        for t in texts:
            for w in tokenize_words(t):
                if w not in seen:
                    seen.add(w)
                    words.append(w)
        specials = [UNK, EOS]
        return cls("word", specials + [w for w in words if w not in specials])


def tokenize_words(raw: bytes) -> List[str]:
    lines = raw.decode("utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out: List[str] = []
    for line in lines:
        out.extend(line.split())
        out.append(EOS)
    return out


def tokenize(raw: bytes, level: str) -> List:
    return list(raw) if level == "char" else tokenize_words(raw)


@dataclass
class Corpus:
    level: str
    ids: np.ndarray
    vocab: Vocab
    split: str = "train"

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def load_corpus(path, level: str, vocab: Optional[Vocab] = None, split: str = "train",
                vocab_texts: Sequence[bytes] = ()) -> Corpus:
    """Tokenize one split.

    Char level: raw bytes. Word level: whitespace split with newline -> <eos>.
    Without ``vocab`` the vocabulary is built from this file (plus
    ``vocab_texts`` for char level); word-level OOV maps to <unk>.
    """
    raw = Path(path).read_bytes()
    if not raw.strip():
        raise EmptyCorpus(f"{path} contains no tokens")
    if vocab is None:
        extra = list(vocab_texts) if level == "char" else []
        vocab = Vocab.build(level, [raw] + extra)
    elif vocab.level != level:
        raise ValueError(f"vocabulary is {vocab.level}-level, corpus requested {level}")
    return Corpus(level, vocab.encode(tokenize(raw, level)), vocab, split)


def load_splits(paths: Dict[str, str], level: str) -> Dict[str, Corpus]:
    """Load train/valid/test with a vocabulary from the train split.

    Char level pools the bytes of every given split so that no byte is out of
    vocabulary; word level uses train only and maps the rest to <unk>.
    """
    if "train" not in paths:
        raise ValueError("a train split is required")
    others = [Path(p).read_bytes() for s, p in paths.items() if s != "train" and p]
    train = load_corpus(paths["train"], level, vocab_texts=others)
    out = {"train": train}
    for split, p in paths.items():
        if split != "train" and p:
            out[split] = load_corpus(p, level, vocab=train.vocab, split=split)
    return out


@dataclass
class BatchStream:
    """Batches of (inputs, targets), each (batch_size, seq_len).

    The corpus is cut into ``batch_size`` contiguous streams; batch k holds
    tokens k*seq_len .. (k+1)*seq_len-1 of every stream, so segment-level
    memory always sees the true preceding text.
    """

    streams: np.ndarray
    seq_len: int

    @property
    def batch_size(self) -> int:
        return self.streams.shape[0]

    def __len__(self) -> int:
        return (self.streams.shape[1] - 1) // self.seq_len

    def __getitem__(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        if not 0 <= k < len(self):
            raise IndexError(k)
        a = k * self.seq_len
        return self.streams[:, a:a + self.seq_len], self.streams[:, a + 1:a + 1 + self.seq_len]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for k in range(len(self)):
            yield self[k]


def make_batches(corpus, batch_size: int, seq_len: int) -> BatchStream:
    ids = corpus.ids if isinstance(corpus, Corpus) else np.asarray(corpus)
    if batch_size < 1 or seq_len < 1:
        raise ValueError("batch_size and seq_len must be >= 1")
    n = ids.shape[0]
    if n < batch_size * (seq_len + 1):
        raise CorpusTooSmall(
            f"{n} tokens cannot fill {batch_size} streams of {seq_len + 1} tokens")
    per = n // batch_size
    return BatchStream(ids[:per * batch_size].reshape(batch_size, per), seq_len)


def segments(ids: np.ndarray, seq_len: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Consecutive (input, target) segments covering every predictable token.

    The last segment may be shorter than ``seq_len``.
    """
    out = []
    n = ids.shape[0] - 1
    for a in range(0, n, seq_len):
        b = min(a + seq_len, n)
        out.append((ids[a:b], ids[a + 1:b + 1]))
    return out
