"""Parameterised building blocks: embedding, GRU, attention and transformer blocks."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

MASK_FILL = -1e9


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


# ---------------------------------------------------------------------------
# embedding / linear
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    table: Tensor

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]


def embed_lookup(table: EmbeddingTable, ids) -> Tensor:
    return T.embedding(table.table, ids)


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = T.matmul(x, W)
    return y if b is None else y + b


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    """Gate weights of a bias-free GRU; input maps are ``d_in x d``, recurrent maps ``d x d``."""

    W_z: Tensor
    W_r: Tensor
    W: Tensor
    U_z: Tensor
    U_r: Tensor
    U: Tensor
    b_z: Optional[Tensor] = None
    b_r: Optional[Tensor] = None
    b: Optional[Tensor] = None

    def __post_init__(self):
        d = self.U.shape[0]
        d_in = self.W.shape[0]
        for name in ("W_z", "W_r", "W"):
            if getattr(self, name).shape != (d_in, d):
                raise DimensionError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(d_in, d)}")
        for name in ("U_z", "U_r", "U"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(d, d)}")

    @property
    def hidden_size(self) -> int:
        return self.U.shape[0]


def _bias(y: Tensor, b: Optional[Tensor]) -> Tensor:
    return y if b is None else y + b


def _gru_cell(p: GruParams, xz: Tensor, xr: Tensor, xh: Tensor, h_prev: Tensor) -> Tensor:
    # xz, xr, xh are the input projections W_z x, W_r x, W x
    z = T.sigmoid(_bias(xz + T.matmul(h_prev, p.U_z), p.b_z))
    r = T.sigmoid(_bias(xr + T.matmul(h_prev, p.U_r), p.b_r))
    h_bar = T.tanh(_bias(xh + T.matmul(r * h_prev, p.U), p.b))
    return (1.0 - z) * h_prev + z * h_bar


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update for a batch: ``x_t`` is ``[B, d_in]``, ``h_prev`` is ``[B, d]``."""
    if x_t.shape[-1] != p.W.shape[0] or h_prev.shape[-1] != p.hidden_size:
        raise DimensionError(
            f"gru_step: x_t {x_t.shape} / h_prev {h_prev.shape} incompatible with d_in={p.W.shape[0]}, d={p.hidden_size}"
        )
    return _gru_cell(p, T.matmul(x_t, p.W_z), T.matmul(x_t, p.W_r), T.matmul(x_t, p.W), h_prev)


def gru_encode(p: GruParams, xs: Tensor, lengths, warn_empty: bool = True) -> Tensor:
    """Run the GRU over ``xs`` ``[B, L, d_in]`` and return each row's state at its true last step.

    Steps at or beyond ``lengths[b]`` leave row ``b`` untouched, so trailing padding
    has no influence on the result. A zero-length row returns the zero initial state.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L, d_in = xs.shape
    if lengths.shape != (B,):
        raise DimensionError(f"gru_encode: {lengths.shape[0] if lengths.ndim else 0} lengths for batch of {B}")
    if np.any(lengths > L) or np.any(lengths < 0):
        raise DimensionError(f"gru_encode: lengths {lengths.tolist()} exceed sequence length {L}")
    if warn_empty and np.any(lengths == 0):
        warnings.warn("gru_encode: zero-length sequence; returning the zero state", RuntimeWarning, stacklevel=2)

    h = Tensor._wrap(np.zeros((B, p.hidden_size), dtype=xs.dtype))
    steps = int(lengths.max()) if B else 0
    if steps == 0:
        return h
    xz, xr, xh = (T.matmul(xs, W) for W in (p.W_z, p.W_r, p.W))
    for t in range(steps):
        h_new = _gru_cell(p, xz[:, t], xr[:, t], xh[:, t], h)
        h = T.where((t < lengths)[:, None], h_new, h)
    return h


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


@dataclass
class MhaParams:
    """Per-head projections stacked as ``[H, d, d/H]`` plus the output map ``[d, d]``."""

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor

    def __post_init__(self):
        H, d, dk = self.W_Q.shape
        if d % H or dk * H != d:
            raise DimensionError(f"MHA head projections {self.W_Q.shape} inconsistent: d={d} must equal H*(d/H)")
        for name in ("W_K", "W_V"):
            if getattr(self, name).shape != (H, d, dk):
                raise DimensionError(f"MHA {name} has shape {getattr(self, name).shape}, expected {(H, d, dk)}")
        if self.W_O.shape != (d, d):
            raise DimensionError(f"MHA W_O has shape {self.W_O.shape}, expected {(d, d)}")

    @property
    def heads(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(dk)) V`` over the last two axes.

    ``mask`` is boolean, broadcastable to ``[..., Lq, Lk]``, true where a query may
    attend to a key. Query rows with no allowed key produce a zero vector.
    """
    dk = Q.shape[-1]
    if K.shape[-1] != dk:
        raise DimensionError(f"attention: query width {dk} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    scores = T.matmul(Q, T.transpose(K)) * (1.0 / np.sqrt(dk))
    dead = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        scores = T.masked_fill(scores, ~mask, MASK_FILL)
        dead = ~mask.any(axis=-1, keepdims=True)
    weights = T.softmax_lastdim(scores)
    if dead is not None and dead.any():
        logger.debug("attention: %d fully masked query rows set to zero", int(dead.sum()))
        weights = T.masked_fill(weights, np.broadcast_to(dead, weights.shape), 0.0)
    out = T.matmul(weights, V)
    return (out, weights) if return_weights else out


def split_heads_project(x: Tensor, W: Tensor) -> Tensor:
    """``[..., L, d] x [H, d, dk] -> [..., H, L, dk]``."""
    H, d, dk = W.shape
    W_cat = T.reshape(T.transpose(W, (1, 0, 2)), (d, H * dk))
    y = T.matmul(x, W_cat)
    y = T.reshape(y, y.shape[:-1] + (H, dk))
    nd = y.ndim
    return T.transpose(y, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def merge_heads(m: Tensor) -> Tensor:
    """``[..., H, L, dk] -> [..., L, H*dk]``, i.e. the heads concatenated along features."""
    nd = m.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    m = T.transpose(m, axes)
    return T.reshape(m, m.shape[:-2] + (m.shape[-2] * m.shape[-1],))


def multi_head_attention(p: MhaParams, Q_in: Tensor, K_in: Tensor, V_in: Tensor, mask=None, return_weights=False):
    """H parallel heads of width d/H, concatenated and mapped by ``W_O``.

    ``mask`` is broadcastable to ``[..., Lq, Lk]`` and shared by all heads.
    """
    q = split_heads_project(Q_in, p.W_Q)
    k = split_heads_project(K_in, p.W_K)
    v = split_heads_project(V_in, p.W_V)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask.reshape(mask.shape[:-2] + (1,) + mask.shape[-2:])
    heads, weights = scaled_dot_attention(q, k, v, mask, return_weights=True)
    out = T.matmul(merge_heads(heads), p.W_O)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# transformer blocks (post-norm)
# ---------------------------------------------------------------------------


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FeedForwardParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class TransformerBlockParams:
    attention: MhaParams
    ffn: FeedForwardParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    # decoder blocks only
    self_attention: Optional[MhaParams] = None
    ln0: Optional[LayerNormParams] = None

    @property
    def is_decoder(self) -> bool:
        return self.self_attention is not None


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return T.layer_norm(x, p.gamma, p.beta)


def feed_forward(p: FeedForwardParams, x: Tensor) -> Tensor:
    return linear(T.relu(linear(x, p.W1, p.b1)), p.W2, p.b2)


def causal_mask(length: int) -> np.ndarray:
    """``[L, L]`` boolean, true where query ``i`` may see key ``j <= i``."""
    return np.tril(np.ones((length, length), dtype=bool))


def transformer_block(
    p: TransformerBlockParams,
    x: Tensor,
    kv: Tensor,
    mask=None,
    self_mask=None,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Post-norm block: ``h = LN(x + MHA(x, kv, kv)); out = LN(h + FFN(h))``.

    Decoder blocks first apply ``x = LN0(x + MHA(x, x, x, self_mask))``.
    """

    def drop(t):
        return T.dropout(t, dropout, rng) if dropout > 0 and rng is not None else t

    if p.is_decoder:
        x = layer_norm(x + drop(multi_head_attention(p.self_attention, x, x, x, self_mask)), p.ln0)
    h = layer_norm(x + drop(multi_head_attention(p.attention, x, kv, kv, mask)), p.ln1)
    return layer_norm(h + drop(feed_forward(p.ffn, h)), p.ln2)


def sinusoidal_table(length: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def positional_encode(x: Tensor, kind: str = "sinusoidal") -> Tensor:
    """Add the fixed sinusoidal encoding of each position along axis -2."""
    if kind != "sinusoidal":
        raise ValueError(f"unknown positional encoding {kind!r}")
    return x + sinusoidal_table(x.shape[-2], x.shape[-1], x.dtype)
