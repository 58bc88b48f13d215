"""Byte-level corpus ingestion plus a seeded synthetic text generator."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError

MAX_LEN = 512
HELDOUT_FRACTION = 0.1

_WORDS = (
    "the of and to in is was for on that with as by at from it this be are or an "
    "which cache layer head key value model memory token long context window attention "
    "query signal river stone garden north winter market paper light sound table water "
    "city engine mountain letter morning number system field record music story street "
    "green quiet early simple heavy bright small large old new fast slow open close "
    "carry build write read follow hold move turn keep find give show bring leave "
    "under over after before between through around against without during"
).split()


def tokenize(text: str) -> list:
    return list(text.encode("utf-8"))


def detokenize(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8")


def load_corpus(path, max_len: int = MAX_LEN) -> list:
    """One document per non-empty line, as byte-id sequences truncated to ``max_len``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    docs = [tokenize(line)[:max_len] for line in lines if line.strip()]
    if not docs:
        raise InputError(f"corpus {path} contains no documents")
    return docs


def split_heldout(docs: list, fraction: float = HELDOUT_FRACTION):
    """Last ``fraction`` of the documents (at least one) are held out."""
    if len(docs) < 2:
        raise InputError("need at least two documents to hold one out")
    n_eval = max(1, int(round(len(docs) * fraction)))
    return docs[:-n_eval], docs[-n_eval:]


def synthetic_text(n_docs: int = 60, min_chars: int = 600, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        parts = []
        size = 0
        while size < min_chars:
            n = int(rng.integers(5, 14))
            words = [_WORDS[j] for j in rng.integers(0, len(_WORDS), n)]
            sentence = " ".join(words).capitalize() + "."
            parts.append(sentence)
            size += len(sentence) + 1
        docs.append(" ".join(parts))
    return docs


def write_synthetic_corpus(path, n_docs: int = 60, min_chars: int = 600, seed: int = 0) -> Path:
    path = Path(path)
    path.write_text("\n".join(synthetic_text(n_docs, min_chars, seed)) + "\n", encoding="utf-8")
    return path
