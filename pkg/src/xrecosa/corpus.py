"""Dialogue corpus ingestion, tokenisation, vocabulary and batching.

Corpus files follow the DailyDialog distribution convention: one dialogue per
line, utterances separated by ``__eou__``.
"""

from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError

logger = logging.getLogger(__name__)

EOU = "__eou__"
PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass
class Dialogue:
    utterances: List[str]

    def __post_init__(self):
        self.utterances = [u.strip() for u in self.utterances]
        if any(not u for u in self.utterances):
            raise FormatError("dialogue contains an empty utterance")

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass
class Sample:
    """A context (most recent turn last) and the response that follows it, as token ids."""

    context: List[List[int]]
    response: List[int]


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace; punctuation marks become separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def split_line(line: str) -> List[str]:
    parts = [p.strip() for p in line.split(EOU)]
    while parts and not parts[-1]:
        parts.pop()
    return parts


def parse_dialogues(lines: Iterable[str]):
    """Parse corpus lines; returns ``(dialogues, skipped)`` where dialogues with fewer than two turns are skipped."""
    dialogues, skipped = [], 0
    for line in lines:
        if not line.strip():
            continue
        parts = [p for p in split_line(line) if p]
        if len(parts) < 2:
            skipped += 1
            continue
        dialogues.append(Dialogue(parts))
    return dialogues, skipped


def load_dialogues(path) -> List[Dialogue]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        dialogues, skipped = parse_dialogues(fh)
    if skipped:
        logger.warning("skipped %d dialogues with fewer than 2 utterances in %s", skipped, path)
    if not dialogues:
        raise FormatError(f"no dialogues parsed from {path}")
    return dialogues


def load_contexts(path) -> List[List[str]]:
    """One context per line; every utterance on the line is context. Blank lines are kept as empty contexts."""
    with open(path, encoding="utf-8") as fh:
        return [split_line(line) for line in fh.read().splitlines()]


def load_references(path) -> List[List[str]]:
    """Sidecar reference file: one line per context, alternatives separated by TAB."""
    with open(path, encoding="utf-8") as fh:
        return [[r.strip() for r in line.split("\t") if r.strip()] for line in fh.read().splitlines()]


def save_dialogues(path, dialogues: Iterable[Dialogue]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write("".join(f"{u} {EOU} " for u in d.utterances).rstrip() + "\n")


class Vocab:
    """Token/id bijection with the four special tokens at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise FormatError(f"vocabulary must start with {SPECIALS}, got {tokens[:4]}")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids]

    def encode_text(self, text: str) -> List[int]:
        return self.encode(tokenize(text))

    def decode_text(self, ids: Sequence[int]) -> str:
        return detokenize(self.decode([i for i in ids if i not in (PAD, BOS, EOS)]))

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(dialogues: Iterable[Dialogue], max_size: int = 13500) -> Vocab:
    """Specials first, then tokens by descending count with ties broken alphabetically.

    ``max_size`` counts the specials.
    """
    counts = Counter(tok for d in dialogues for u in d.utterances for tok in tokenize(u))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = max(0, max_size - len(SPECIALS))
    return Vocab(list(SPECIALS) + [t for t, _ in ranked[:keep]])


def expand_samples(d: Dialogue, vocab: Vocab, max_turns: int = 10) -> List[Sample]:
    """Turn a K-utterance dialogue into K-1 (context, next utterance) samples.

    Contexts keep only the most recent ``max_turns - 1`` utterances.
    """
    if len(d) < 2:
        raise ContractError(f"dialogue needs at least 2 utterances, got {len(d)}")
    ids = [vocab.encode_text(u) for u in d.utterances]
    window = max_turns - 1
    return [Sample(ids[max(0, j - window):j], ids[j]) for j in range(1, len(ids))]


def expand_all(dialogues: Iterable[Dialogue], vocab: Vocab, max_turns: int = 10) -> List[Sample]:
    return [s for d in dialogues for s in expand_samples(d, vocab, max_turns)]


@dataclass
class Batch:
    ctx_ids: np.ndarray  # [B, turns, words]
    ctx_word_mask: np.ndarray
    turn_mask: np.ndarray  # [B, turns]
    resp_in: np.ndarray  # [B, T], BOS first
    resp_target: np.ndarray  # [B, T], EOS last
    resp_mask: np.ndarray

    def __len__(self) -> int:
        return self.ctx_ids.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.resp_mask.sum())


def collate(samples: Sequence[Sample], max_turns: int = 10, max_sentence_len: int = 50) -> Batch:
    """Pad a list of samples into one batch; PAD is 0 so zero-filled arrays are already padding."""
    if not samples:
        raise ContractError("cannot collate an empty sample list")
    contexts = [[u[:max_sentence_len] for u in s.context[-(max_turns - 1):]] for s in samples]
    responses = [s.response[:max_sentence_len] for s in samples]
    B = len(samples)
    n_turns = max(len(c) for c in contexts)
    n_words = max(1, max((len(u) for c in contexts for u in c), default=1))
    T = max(len(r) for r in responses) + 1

    ctx = np.zeros((B, n_turns, n_words), dtype=np.int64)
    turn_mask = np.zeros((B, n_turns), dtype=bool)
    resp_in = np.zeros((B, T), dtype=np.int64)
    resp_target = np.zeros((B, T), dtype=np.int64)
    for b, (c, r) in enumerate(zip(contexts, responses)):
        for i, u in enumerate(c):
            ctx[b, i, : len(u)] = u
            turn_mask[b, i] = len(u) > 0
        resp_in[b, : len(r) + 1] = [BOS] + r
        resp_target[b, : len(r) + 1] = r + [EOS]
    return Batch(ctx, ctx != PAD, turn_mask, resp_in, resp_target, resp_target != PAD)


def collate_contexts(contexts: Sequence[Sequence[Sequence[int]]], max_turns: int = 10,
                     max_sentence_len: int = 50) -> Batch:
    """Batch contexts alone, with a BOS-only response slot, for decoding."""
    return collate([Sample([list(u) for u in c], []) for c in contexts], max_turns, max_sentence_len)


def make_batches(samples: Sequence[Sample], vocab: Optional[Vocab] = None, batch_size: int = 32,
                 max_turns: int = 10, max_sentence_len: int = 50, seed: Optional[int] = None) -> List[Batch]:
    """Split samples into padded batches; shuffled deterministically when ``seed`` is given.

    The final partial batch is kept.
    """
    if not samples:
        raise ContractError("make_batches: empty sample list")
    if batch_size <= 0:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    if vocab is not None:
        top = max(max((max(u, default=0) for u in s.context), default=0) for s in samples)
        top = max(top, max(max(s.response, default=0) for s in samples))
        if top >= len(vocab):
            raise ContractError(f"sample id {top} is outside the vocabulary of {len(vocab)} tokens")
    order = np.arange(len(samples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(samples))
    return [
        collate([samples[i] for i in order[k: k + batch_size]], max_turns, max_sentence_len)
        for k in range(0, len(samples), batch_size)
    ]
