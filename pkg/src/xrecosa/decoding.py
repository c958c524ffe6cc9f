"""Greedy and beam-search reply generation.

Both strategies need only ``model.cfg``, ``model.encode(batch)`` and
``model.decode_logits(enc, resp_in)``, so any object with that surface can be
decoded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, collate_contexts
from .errors import ConfigError


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_width: int = 4
    max_len: Optional[int] = None
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ConfigError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")


def _max_len(model, cfg: Optional[DecodeConfig]) -> int:
    if cfg is not None and cfg.max_len is not None:
        return cfg.max_len
    return model.cfg.max_sentence_len


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _encode(model, contexts):
    batch = collate_contexts(contexts, model.cfg.max_turns, model.cfg.max_sentence_len)
    return model.encode(batch)


def greedy_decode_batch(model, contexts: Sequence, cfg: Optional[DecodeConfig] = None) -> List[List[int]]:
    """Greedy replies for several contexts at once; EOS is not included in the output."""
    max_len = _max_len(model, cfg)
    n = len(contexts)
    if n == 0:
        return []
    with T.no_grad():
        enc = _encode(model, contexts)
        seqs = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        out: List[List[int]] = [[] for _ in range(n)]
        for _ in range(max_len):
            logp = _log_softmax(model.decode_logits(enc, seqs).data[:, -1, :])
            # argmax returns the lowest id on ties
            nxt = logp.argmax(axis=-1)
            for i in np.flatnonzero(~done):
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            seqs = np.concatenate([seqs, np.where(done, EOS, nxt)[:, None]], axis=1)
    return out


def greedy_decode(model, context, cfg: Optional[DecodeConfig] = None) -> List[int]:
    return greedy_decode_batch(model, [context], cfg)[0]


def _score(logprob: float, length: int, alpha: float) -> float:
    return logprob / (max(length, 1) ** alpha) if alpha else logprob


def beam_search(model, context, cfg: Optional[DecodeConfig] = None):
    """Beam search returning ``(tokens, score, retired)`` where ``retired`` lists every finished hypothesis.

    Candidates are ranked by cumulative log-probability; finished hypotheses are compared by
    ``logprob / len**alpha`` with ``len`` counting the EOS token.
    """
    cfg = cfg or DecodeConfig(strategy="beam")
    width, alpha = cfg.beam_width, cfg.length_penalty
    max_len = _max_len(model, cfg)
    finished = []  # (score, logprob, tokens)
    with T.no_grad():
        enc1 = _encode(model, [context])
        live_tokens: List[List[int]] = [[]]
        live_lp = np.zeros(1)
        for _ in range(max_len):
            k = len(live_tokens)
            seqs = np.array([[BOS] + t for t in live_tokens], dtype=np.int64)
            enc = enc1 if k == 1 else enc1.repeat(k)
            logp = _log_softmax(model.decode_logits(enc, seqs).data[:, -1, :])
            total = live_lp[:, None] + logp
            V = logp.shape[-1]
            beam_idx = np.repeat(np.arange(k), V)
            tok_idx = np.tile(np.arange(V), k)
            order = np.lexsort((tok_idx, beam_idx, -logp.ravel(), -total.ravel()))[:width]
            new_tokens, new_lp = [], []
            for j in order:
                b, tok, lp = beam_idx[j], int(tok_idx[j]), float(total.ravel()[j])
                if tok == EOS:
                    hyp = list(live_tokens[b])
                    finished.append((_score(lp, len(hyp) + 1, alpha), lp, hyp))
                else:
                    new_tokens.append(live_tokens[b] + [tok])
                    new_lp.append(lp)
            if not new_tokens:
                break
            live_tokens, live_lp = new_tokens, np.array(new_lp)
            # log-probs only fall, so no live beam can beat the best finished one
            if alpha == 0 and finished and max(f[0] for f in finished) >= live_lp.max():
                break
    if finished:
        best = max(finished, key=lambda f: f[0])
        return best[2], best[0], finished
    i = int(np.argmax(live_lp))
    return live_tokens[i], _score(float(live_lp[i]), len(live_tokens[i]), alpha), finished


def beam_decode(model, context, cfg: Optional[DecodeConfig] = None) -> List[int]:
    return beam_search(model, context, cfg)[0]


def decode(model, context, cfg: Optional[DecodeConfig] = None) -> List[int]:
    cfg = cfg or DecodeConfig()
    if cfg.strategy == "beam":
        return beam_decode(model, context, cfg)
    return greedy_decode(model, context, cfg)


def decode_many(model, contexts: Sequence, cfg: Optional[DecodeConfig] = None, batch_size: int = 64) -> List[List[int]]:
    """Decode a list of contexts; greedy decoding is batched."""
    cfg = cfg or DecodeConfig()
    if cfg.strategy == "beam":
        return [beam_decode(model, c, cfg) for c in contexts]
    out: List[List[int]] = []
    for k in range(0, len(contexts), batch_size):
        out += greedy_decode_batch(model, contexts[k: k + batch_size], cfg)
    return out
