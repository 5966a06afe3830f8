"""Tokenization for both model families.

A trainable word-level vocabulary with special tokens feeds the encoder;
character n-grams with a hashing trick feed the static-embedding baseline.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ConfigError

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>", "<cls>")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

DEFAULT_MAX_LEN = 512
DEFAULT_NGRAM_BUCKETS = 2**20


def tokenize(text: str) -> list:
    """Lowercased word tokens; punctuation and whitespace are separators."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    token_to_id: dict

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                fh.write(f"{token}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        mapping = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                token, _, idx = line.rstrip("\n").partition("\t")
                mapping[token] = int(idx)
        return cls(mapping)


def build_vocab(corpus, max_size: int) -> Vocabulary:
    """Most frequent word tokens over all notes, ties broken lexicographically.

    Special tokens occupy the first four ids.  Deterministic: rebuilding on
    the same corpus yields the identical mapping.
    """
    if max_size < len(SPECIAL_TOKENS):
        raise ConfigError(f"max_size must be >= {len(SPECIAL_TOKENS)} to fit special tokens")
    counts: dict = {}
    for patient in corpus:
        for note in patient.notes:
            for token in tokenize(note.text):
                counts[token] = counts.get(token, 0) + 1
    if not counts:
        raise ConfigError("corpus has no tokens; cannot build a vocabulary")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for token, _ in ranked[: max_size - len(SPECIAL_TOKENS)]:
        mapping[token] = len(mapping)
    return Vocabulary(mapping)


@dataclass
class TokenizedNote:
    """Fixed-length id sequence: [CLS] + token ids, truncated then PAD-filled."""

    ids: list
    attention_len: int  # number of non-PAD positions


def encode(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenizedNote:
    tokens = tokenize(text)
    ids = [CLS] + [vocab.id_of(t) for t in tokens]
    ids = ids[:max_len]
    attention_len = len(ids)
    ids = ids + [PAD] * (max_len - len(ids))
    return TokenizedNote(ids=ids, attention_len=attention_len)


# --------------------------------------------------------------------------
# character n-grams with the hashing trick
# --------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: str) -> int:
    """FNV-1a over the UTF-8 bytes; stable across platforms and runs."""
    h = _FNV_OFFSET
    for byte in data.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def char_ngrams(
    token: str,
    n_min: int = 3,
    n_max: int = 6,
    n_buckets: int = DEFAULT_NGRAM_BUCKETS,
) -> list:
    """Bucket ids for the token's character n-grams plus the whole token.

    The token is wrapped in boundary markers ``<`` and ``>``.  All positional
    n-grams with n in [n_min, n_max] are hashed into [0, n_buckets), except an
    n-gram spanning the entire wrapped token, which is covered by the final
    whole-token entry.  Duplicate n-grams (possible in repetitive tokens) keep
    their own slots.
    """
    if n_min > n_max:
        raise ConfigError("n_min must be <= n_max")
    if n_buckets <= 0:
        raise ConfigError("n_buckets must be > 0")
    wrapped = f"<{token}>"
    m = len(wrapped)
    buckets = []
    for n in range(n_min, n_max + 1):
        if n >= m:
            continue
        for i in range(m - n + 1):
            buckets.append(fnv1a_64(wrapped[i : i + n]) % n_buckets)
    buckets.append(fnv1a_64(wrapped) % n_buckets)
    return buckets
