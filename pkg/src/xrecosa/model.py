"""The X-ReCoSa network.

A word-level GRU turns every context utterance into one vector (the sentence
representations ``H_u``); a transformer encoder over those vectors yields the
context representations ``H_c``. The decoder stack is split in two: the
intention part cross-attends to ``H_c`` and the generation part, fed by the
intention output, cross-attends to ``H_u``.

``decoder_mode`` swaps the memories each part reads:

=============  ===============  ================
mode           intention part   generation part
=============  ===============  ================
x_fusion       H_c              H_u
context_only   H_c              H_c
sentence_only  H_u              H_u
=============  ===============  ================

``context_only`` is the ReCoSa ablation.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import layers as Lyr
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

DECODER_MODES = ("x_fusion", "context_only", "sentence_only")


@dataclass
class ModelConfig:
    d: int = 512
    heads: int = 8
    enc_layers: int = 2
    dec_layers_intention: int = 2
    dec_layers_generation: int = 2
    vocab_size: int = 13500
    max_turns: int = 10
    max_sentence_len: int = 50
    decoder_mode: str = "x_fusion"
    dropout: float = 0.0
    turn_positions: bool = True
    token_positions: bool = True
    d_ff: Optional[int] = None
    tie_embeddings: bool = False
    gru_bias: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d

    @property
    def dec_layers(self) -> int:
        return self.dec_layers_intention + self.dec_layers_generation

    def validate(self) -> None:
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"hidden width d={self.d} must be a positive multiple of heads={self.heads}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"decoder_mode must be one of {DECODER_MODES}, got {self.decoder_mode!r}")
        if min(self.enc_layers, self.dec_layers_intention, self.dec_layers_generation) < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.dec_layers == 0:
            raise ConfigError("the decoder needs at least one layer")
        if self.decoder_mode == "x_fusion" and (
            self.dec_layers_intention != self.dec_layers_generation or self.dec_layers_generation == 0
        ):
            raise ConfigError(
                "x_fusion splits the decoder into two even parts; got "
                f"{self.dec_layers_intention} intention + {self.dec_layers_generation} generation layers"
            )
        if self.max_turns < 2:
            raise ConfigError(f"max_turns must be at least 2, got {self.max_turns}")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no room beyond the special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout rate {self.dropout} outside [0, 1)")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ParamSet(Mapping):
    """Named learnable tensors, iterated in lexicographic name order."""

    def __init__(self, tensors: Optional[dict] = None):
        self._t: dict = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __setitem__(self, name: str, t) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        t = t if isinstance(t, Tensor) else Tensor(t)
        t.requires_grad = True
        t.name = name
        self._t[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def __len__(self) -> int:
        return len(self._t)

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def grads(self) -> dict:
        return {n: (self[n].grad if self[n].grad is not None else np.zeros_like(self[n].data)) for n in self}

    def num_parameters(self) -> int:
        return sum(t.size for t in self._t.values())

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: Tensor(self[n].data, dtype=dtype) for n in self})

    def copy(self) -> "ParamSet":
        return ParamSet({n: Tensor(self[n].data.copy(), dtype=self[n].data.dtype.type) for n in self})


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def _mha_specs(prefix: str, cfg: ModelConfig):
    H, d = cfg.heads, cfg.d
    dk = d // H
    for w in ("W_Q", "W_K", "W_V"):
        yield f"{prefix}.{w}", (H, d, dk), "uniform", d
    yield f"{prefix}.W_O", (d, d), "uniform", d


def _block_specs(prefix: str, cfg: ModelConfig, decoder: bool):
    d, f = cfg.d, cfg.ffn_width
    yield from _mha_specs(f"{prefix}.{'cross_attn' if decoder else 'attn'}", cfg)
    if decoder:
        yield from _mha_specs(f"{prefix}.self_attn", cfg)
    yield f"{prefix}.ffn.W1", (d, f), "uniform", d
    yield f"{prefix}.ffn.b1", (f,), "zeros", 0
    yield f"{prefix}.ffn.W2", (f, d), "uniform", f
    yield f"{prefix}.ffn.b2", (d,), "zeros", 0
    for ln in ("ln0", "ln1", "ln2") if decoder else ("ln1", "ln2"):
        yield f"{prefix}.{ln}.gamma", (d,), "ones", 0
        yield f"{prefix}.{ln}.beta", (d,), "zeros", 0


def param_specs(cfg: ModelConfig):
    """(name, shape, init kind, fan_in) for every learnable tensor."""
    d, V = cfg.d, cfg.vocab_size
    specs = [("emb.table", (V, d), "normal", 0)]
    for w in ("W_z", "W_r", "W"):
        specs.append((f"enc.gru.{w}", (d, d), "uniform", d))
    for u in ("U_z", "U_r", "U"):
        specs.append((f"enc.gru.{u}", (d, d), "uniform", d))
    if cfg.gru_bias:
        specs += [(f"enc.gru.{b}", (d,), "zeros", 0) for b in ("b_z", "b_r", "b")]
    for i in range(cfg.enc_layers):
        specs += list(_block_specs(f"enc.layers.{i}", cfg, decoder=False))
    for i in range(cfg.dec_layers):
        specs += list(_block_specs(f"dec.layers.{i}", cfg, decoder=True))
    if not cfg.tie_embeddings:
        specs.append(("out.W", (d, V), "uniform", d))
    specs.append(("out.b", (V,), "zeros", 0))
    return sorted(specs)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> ParamSet:
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    for name, shape, kind, fan_in in param_specs(cfg):
        if kind == "uniform":
            data = Lyr.uniform_init(rng, shape, fan_in)
        elif kind == "normal":
            data = Lyr.normal_init(rng, shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        ps[name] = Tensor(data, dtype=dtype)
    return ps


def gru_params(ps: Mapping, prefix: str = "enc.gru") -> Lyr.GruParams:
    opt = {b: ps.get(f"{prefix}.{b}") for b in ("b_z", "b_r", "b")}
    return Lyr.GruParams(*(ps[f"{prefix}.{n}"] for n in ("W_z", "W_r", "W", "U_z", "U_r", "U")), **opt)


def mha_params(ps: Mapping, prefix: str) -> Lyr.MhaParams:
    return Lyr.MhaParams(*(ps[f"{prefix}.{n}"] for n in ("W_Q", "W_K", "W_V", "W_O")))


def block_params(ps: Mapping, prefix: str, decoder: bool) -> Lyr.TransformerBlockParams:
    def ln(name):
        return Lyr.LayerNormParams(ps[f"{prefix}.{name}.gamma"], ps[f"{prefix}.{name}.beta"])

    ffn = Lyr.FeedForwardParams(*(ps[f"{prefix}.ffn.{n}"] for n in ("W1", "b1", "W2", "b2")))
    if decoder:
        return Lyr.TransformerBlockParams(
            mha_params(ps, f"{prefix}.cross_attn"), ffn, ln("ln1"), ln("ln2"),
            self_attention=mha_params(ps, f"{prefix}.self_attn"), ln0=ln("ln0"),
        )
    return Lyr.TransformerBlockParams(mha_params(ps, f"{prefix}.attn"), ffn, ln("ln1"), ln("ln2"))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class EncodedContext:
    H_u: Tensor
    H_c: Tensor
    turn_mask: np.ndarray

    def __post_init__(self):
        if self.H_u.shape != self.H_c.shape:
            raise DimensionError(f"H_u {self.H_u.shape} and H_c {self.H_c.shape} differ")

    def memories(self, mode: str):
        """Cross-attention memories (intention part, generation part) for a decoder mode."""
        if mode == "x_fusion":
            return self.H_c, self.H_u
        if mode == "context_only":
            return self.H_c, self.H_c
        if mode == "sentence_only":
            return self.H_u, self.H_u
        raise ConfigError(f"unknown decoder mode {mode!r}")

    def repeat(self, n: int) -> "EncodedContext":
        """Tile a single-context encoding ``n`` times along the batch axis (no gradient)."""
        return EncodedContext(
            Tensor._wrap(np.repeat(self.H_u.data, n, axis=0)),
            Tensor._wrap(np.repeat(self.H_c.data, n, axis=0)),
            np.repeat(self.turn_mask, n, axis=0),
        )


@dataclass
class _Dropout:
    rate: float = 0.0
    rng: Optional[np.random.Generator] = field(default=None)


def encode(cfg: ModelConfig, params: Mapping, batch, dropout: Optional[_Dropout] = None) -> EncodedContext:
    ctx_ids = np.asarray(batch.ctx_ids)
    word_mask = np.asarray(batch.ctx_word_mask, dtype=bool)
    turn_mask = np.asarray(batch.turn_mask, dtype=bool)
    if ctx_ids.ndim != 3:
        raise DimensionError(f"context ids must be [B, turns, words], got shape {ctx_ids.shape}")
    B, N, Lw = ctx_ids.shape
    empty = ~turn_mask.any(axis=1)
    if empty.any():
        raise ContractError(f"empty context (all turns padded) in batch rows {np.flatnonzero(empty).tolist()}")

    x = T.embedding(params["emb.table"], ctx_ids.reshape(B * N, Lw))
    lengths = word_mask.reshape(B * N, Lw).sum(axis=1)
    H_u = T.reshape(Lyr.gru_encode(gru_params(params), x, lengths, warn_empty=False), (B, N, cfg.d))

    h = Lyr.positional_encode(H_u) if cfg.turn_positions else H_u
    key_mask = turn_mask[:, None, :]
    rate, rng = (dropout.rate, dropout.rng) if dropout else (0.0, None)
    for i in range(cfg.enc_layers):
        h = Lyr.transformer_block(block_params(params, f"enc.layers.{i}", False), h, h, key_mask, dropout=rate, rng=rng)
    return EncodedContext(H_u, h, turn_mask)


def embed_response(cfg: ModelConfig, params: Mapping, resp_in) -> Tensor:
    resp_in = np.asarray(resp_in)
    if resp_in.shape[-1] > cfg.max_sentence_len + 2:
        raise ContractError(
            f"response length {resp_in.shape[-1]} exceeds max_sentence_len + 2 = {cfg.max_sentence_len + 2}"
        )
    x = T.embedding(params["emb.table"], resp_in)
    return Lyr.positional_encode(x) if cfg.token_positions else x


def _decode_part(cfg, params, x, memory, turn_mask, causal, layer_ids, dropout):
    rate, rng = (dropout.rate, dropout.rng) if dropout else (0.0, None)
    key_mask = np.asarray(turn_mask, dtype=bool)[:, None, :]
    for i in layer_ids:
        p = block_params(params, f"dec.layers.{i}", True)
        x = Lyr.transformer_block(p, x, memory, key_mask, self_mask=causal, dropout=rate, rng=rng)
    return x


def decode_intention(cfg: ModelConfig, params: Mapping, X_r: Tensor, enc: EncodedContext, causal_mask=None,
                     dropout: Optional[_Dropout] = None) -> Tensor:
    """The first half of the decoder: causal self-attention, then cross-attention onto the intention memory."""
    Tn = X_r.shape[-2]
    if Tn > cfg.max_sentence_len + 2:
        raise ContractError(f"response length {Tn} exceeds max_sentence_len + 2 = {cfg.max_sentence_len + 2}")
    causal = Lyr.causal_mask(Tn) if causal_mask is None else causal_mask
    memory, _ = enc.memories(cfg.decoder_mode)
    return _decode_part(cfg, params, X_r, memory, enc.turn_mask, causal, range(cfg.dec_layers_intention), dropout)


def decode_generation(cfg: ModelConfig, params: Mapping, O_c: Tensor, enc: EncodedContext, causal_mask=None,
                      dropout: Optional[_Dropout] = None) -> Tensor:
    """The second half of the decoder, queried by the intention output."""
    Tn = O_c.shape[-2]
    causal = Lyr.causal_mask(Tn) if causal_mask is None else causal_mask
    _, memory = enc.memories(cfg.decoder_mode)
    layer_ids = range(cfg.dec_layers_intention, cfg.dec_layers)
    return _decode_part(cfg, params, O_c, memory, enc.turn_mask, causal, layer_ids, dropout)


def output_logits(cfg: ModelConfig, params: Mapping, O_r: Tensor) -> Tensor:
    W = T.transpose(params["emb.table"]) if cfg.tie_embeddings else params["out.W"]
    return T.matmul(O_r, W) + params["out.b"]


def decode_logits(cfg: ModelConfig, params: Mapping, enc: EncodedContext, resp_in,
                  dropout: Optional[_Dropout] = None) -> Tensor:
    X_r = embed_response(cfg, params, resp_in)
    causal = Lyr.causal_mask(X_r.shape[-2])
    O_c = decode_intention(cfg, params, X_r, enc, causal, dropout)
    O_r = decode_generation(cfg, params, O_c, enc, causal, dropout)
    return output_logits(cfg, params, O_r)


def forward_logits(cfg: ModelConfig, params: Mapping, batch, enc: Optional[EncodedContext] = None,
                   dropout: Optional[_Dropout] = None) -> Tensor:
    """Teacher-forced logits ``[B, T, V]`` for ``batch.resp_in``.

    ``enc`` overrides the encoder output, which lets callers probe the decoder
    with hand-built memories.
    """
    cfg.validate()
    if enc is None:
        enc = encode(cfg, params, batch, dropout)
    return decode_logits(cfg, params, enc, batch.resp_in, dropout)


def nll_loss(logits: Tensor, targets, target_mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    mask = np.asarray(target_mask, dtype=bool)
    bad = targets[mask & ((targets < 0) | (targets >= V))]
    if bad.size:
        raise IndexError(f"target id {int(bad[0])} out of range for vocabulary of {V}")
    if not mask.any():
        raise ContractError("nll_loss: no unmasked target positions")
    return T.cross_entropy(logits, np.where(mask, targets, 0), mask)


class XReCoSa:
    """Model configuration bundled with its parameters."""

    def __init__(self, cfg: ModelConfig, params: Optional[ParamSet] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        missing = {n for n, *_ in param_specs(cfg)} ^ set(self.params)
        if missing:
            raise ConfigError(f"parameter set does not match config: {sorted(missing)[:5]}")

    def encode(self, batch) -> EncodedContext:
        return encode(self.cfg, self.params, batch)

    def logits(self, batch, enc: Optional[EncodedContext] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
        drop = _Dropout(self.cfg.dropout, rng) if rng is not None and self.cfg.dropout > 0 else None
        return forward_logits(self.cfg, self.params, batch, enc, drop)

    def loss(self, batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        return nll_loss(self.logits(batch, rng=rng), batch.resp_target, batch.resp_mask)

    def decode_logits(self, enc: EncodedContext, resp_in) -> Tensor:
        return decode_logits(self.cfg, self.params, enc, resp_in)
