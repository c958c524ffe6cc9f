import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrecosa.corpus import BOS, EOS
from xrecosa.decoding import (
    DecodeConfig, beam_decode, beam_search, decode, decode_many, greedy_decode, greedy_decode_batch,
)
from xrecosa.errors import ConfigError
from xrecosa.model import ModelConfig, XReCoSa
from xrecosa.tensor import Tensor


class _Enc:
    def repeat(self, n):
        return self


class TableModel:
    """Stub decoder: next-token log-probabilities are a fixed function of the prefix."""

    def __init__(self, table, V, default=None):
        self.cfg = SimpleNamespace(max_turns=4, max_sentence_len=10)
        self.table, self.V, self.default = table, V, default

    def encode(self, batch):
        return _Enc()

    def logprobs(self, prefix):
        prefix = tuple(prefix)
        if prefix in self.table:
            return np.asarray(self.table[prefix], float)
        return self.default(prefix)

    def decode_logits(self, enc, seqs):
        seqs = np.asarray(seqs)
        out = np.zeros(seqs.shape + (self.V,))
        for i, row in enumerate(seqs):
            assert row[0] == BOS
            out[i, -1] = self.logprobs(row[1:])
        return Tensor(out)


NEG = -1e9


def dist(probs, V=6):
    """Log-probabilities for ids 2.. (EOS and real tokens); PAD and BOS are impossible."""
    lp = np.full(V, NEG)
    for tok, p in probs.items():
        lp[tok] = math.log(p) if p > 0 else NEG
    return lp


def random_table_model(seed, V=6, alphabet=(2, 3, 4, 5)):
    def default(prefix):
        rng = np.random.default_rng([seed, *prefix, 99])
        p = rng.dirichlet(np.ones(len(alphabet)))
        return dist(dict(zip(alphabet, p)), V)
    return TableModel({}, V, default)


def tiny_model(seed=0):
    cfg = ModelConfig(d=8, heads=2, enc_layers=1, dec_layers_intention=1, dec_layers_generation=1, vocab_size=12,
                      max_turns=4, max_sentence_len=6)
    return XReCoSa(cfg, seed=seed)


def random_context(rng, V=12):
    return [list(rng.integers(3, V, size=rng.integers(1, 5))) for _ in range(rng.integers(1, 4))]


# -- config ----------------------------------------------------------------------


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(strategy="sample")
    with pytest.raises(ConfigError):
        DecodeConfig(beam_width=0)
    assert DecodeConfig().beam_width == 4 and DecodeConfig().length_penalty == 0.0


# -- greedy ------------------------------------------------------------------------


def test_greedy_forced_eos_gives_empty_reply():
    model = tiny_model()
    model.params["out.b"].data[EOS] = 1e3
    assert greedy_decode(model, [[4, 5]]) == []
    assert beam_decode(model, [[4, 5]], DecodeConfig("beam", 3)) == []


def test_greedy_tie_picks_lowest_id():
    model = TableModel({(): dist({3: 0.4, 4: 0.4, 2: 0.2}), (3,): dist({2: 1.0}), (4,): dist({2: 1.0})}, 6)
    assert greedy_decode(model, [[3]]) == [3]


def test_greedy_stops_at_max_len():
    model = TableModel({}, 6, lambda prefix: dist({5: 0.9, 2: 0.1}))
    assert greedy_decode(model, [[3]], DecodeConfig(max_len=4)) == [5, 5, 5, 5]
    assert len(greedy_decode(model, [[3]])) == 10


def test_greedy_deterministic():
    model = tiny_model(1)
    rng = np.random.default_rng(0)
    ctxs = [random_context(rng) for _ in range(5)]
    assert [greedy_decode(model, c) for c in ctxs] == [greedy_decode(model, c) for c in ctxs]


def test_batched_greedy_matches_single():
    model = tiny_model(2)
    rng = np.random.default_rng(1)
    ctxs = [random_context(rng) for _ in range(12)]
    assert greedy_decode_batch(model, ctxs) == [greedy_decode(model, c) for c in ctxs]
    assert decode_many(model, ctxs, batch_size=5) == [greedy_decode(model, c) for c in ctxs]
    assert greedy_decode_batch(model, []) == []


# -- beam ---------------------------------------------------------------------------


def test_width_one_equals_greedy_on_100_contexts():
    model = tiny_model(3)
    rng = np.random.default_rng(2)
    cfg = DecodeConfig("beam", beam_width=1)
    for _ in range(100):
        c = random_context(rng)
        assert beam_decode(model, c, cfg) == greedy_decode(model, c)


def test_width_one_equals_greedy_on_table_models():
    for seed in range(30):
        model = random_table_model(seed)
        cfg = DecodeConfig("beam", beam_width=1, max_len=5)
        assert beam_decode(model, [[3]], cfg) == greedy_decode(model, [[3]], cfg)


def test_width_three_beats_greedy_and_matches_enumeration():
    # greedy commits to 3 (p=.6) then gets .5; the best path is 4,3 with .4*.9=.36
    table = {
        (): dist({3: 0.6, 4: 0.4}),
        (3,): dist({3: 0.5, 4: 0.5}),
        (4,): dist({3: 0.9, 4: 0.1}),
    }
    for a, b in itertools.product((3, 4), repeat=2):
        table[(a, b)] = dist({2: 1.0})
    # the third beam slot holds an impossible (log-prob -1e9) prefix; give it any distribution
    model = TableModel(table, 6, lambda prefix: dist({2: 1.0}))
    best = max(itertools.product((3, 4), repeat=2),
               key=lambda s: sum(model.logprobs(s[:i])[s[i]] for i in range(2)) + model.logprobs(s)[EOS])
    cfg = DecodeConfig("beam", beam_width=3, max_len=3)
    assert beam_decode(model, [[3]], cfg) == list(best) == [4, 3]
    assert greedy_decode(model, [[3]], cfg) == [3, 3]


def _enumerate_finished(model, max_len, alphabet=(3, 4, 5)):
    """Every EOS-terminated sequence of at most ``max_len`` tokens with its log-prob."""
    out = []
    for n in range(max_len):
        for seq in itertools.product(alphabet, repeat=n):
            lp = sum(model.logprobs(seq[:i])[seq[i]] for i in range(n)) + model.logprobs(seq)[EOS]
            out.append((list(seq), lp))
    return out


@pytest.mark.parametrize("alpha", [0.0, 0.7])
@pytest.mark.parametrize("seed", range(8))
def test_wide_beam_equals_exhaustive_search(seed, alpha):
    model = random_table_model(seed)
    finished = _enumerate_finished(model, 3)
    score = lambda s, lp: lp / (len(s) + 1) ** alpha
    best_seq, best_lp = max(finished, key=lambda f: score(*f))
    tokens, sc, retired = beam_search(model, [[3]], DecodeConfig("beam", beam_width=27, max_len=3, length_penalty=alpha))
    assert tokens == best_seq
    assert sc == pytest.approx(score(best_seq, best_lp), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.sampled_from([0.0, 0.5, 1.0]))
def test_returned_score_dominates_retired(seed, width, alpha):
    model = random_table_model(seed)
    tokens, sc, retired = beam_search(model, [[3]], DecodeConfig("beam", width, max_len=4, length_penalty=alpha))
    if retired:
        assert sc >= max(r[0] for r in retired)
        assert tokens in [r[2] for r in retired]
    assert EOS not in tokens


def test_beam_without_finished_returns_best_live():
    model = TableModel({}, 6, lambda prefix: dist({5: 0.7, 4: 0.3}))
    tokens, sc, retired = beam_search(model, [[3]], DecodeConfig("beam", 2, max_len=3))
    assert retired == [] and tokens == [5, 5, 5]
    assert sc == pytest.approx(3 * math.log(0.7), abs=1e-12)


def test_decode_dispatch_and_determinism():
    model = tiny_model(4)
    c = [[4, 5, 6], [7]]
    g, b = DecodeConfig("greedy"), DecodeConfig("beam", 3)
    assert decode(model, c, g) == greedy_decode(model, c)
    assert decode(model, c, b) == decode(model, c, b) == beam_decode(model, c, b)
    assert decode_many(model, [c, c], b) == [beam_decode(model, c, b)] * 2
