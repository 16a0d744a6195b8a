"""
Context-extraction mechanisms placed between the CNN encoders and the LSTM
decoders: dot-product alignment (Luong), bi-directional additive alignment
(Bahdanau), local/global additive/multiplicative self-attention, and masked
multi-head attention with sinusoidal positional encoding.

All functions accept an unbatched ``[T, F]`` sequence or a batched
``[B, T, F]`` one. Masks are applied by adding ``MASK_VALUE`` to the scores
before the softmax.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import LstmParams, Module, bilstm_sequence, glorot_uniform
from .tensor import Tensor, as_tensor, concat, matmul, softmax, swap_last, tanh

MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    d_k: int = 64
    heads: int = 1
    locality: str = "global"
    window: int = 3
    scoring: str = "multiplicative"
    masked: bool = False

    def __post_init__(self):
        if self.d_k < 1 or self.heads < 1:
            raise ConfigurationError(f"d_k and heads must be positive, got {self.d_k}, {self.heads}")
        if self.locality not in ("global", "local"):
            raise ConfigurationError(f"locality must be 'global' or 'local', got {self.locality!r}")
        if self.scoring not in ("additive", "multiplicative"):
            raise ConfigurationError(f"scoring must be 'additive' or 'multiplicative', got {self.scoring!r}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError(f"local window must be an odd positive integer, got {self.window}")


@dataclass
class ContextVector:
    values: Tensor
    weights: Tensor


class ProjectionSet(Module):
    """Query/key/value projections ``[d_model, d_k]``, plus additive-score weights."""

    def __init__(self, d_model, d_k, rng, additive=False, d_a=None):
        self.W_Q = glorot_uniform(rng, (d_model, d_k), d_model, d_k)
        self.W_K = glorot_uniform(rng, (d_model, d_k), d_model, d_k)
        self.W_V = glorot_uniform(rng, (d_model, d_k), d_model, d_k)
        if additive:
            d_a = d_a or d_k
            self.W1 = glorot_uniform(rng, (d_a, d_k), d_k, d_a)
            self.W2 = glorot_uniform(rng, (d_a, d_k), d_k, d_a)
            self.v = glorot_uniform(rng, (d_a,), d_a, 1)

    @property
    def d_k(self):
        return self.W_Q.shape[1]


def _lead(x):
    return x.shape[:-2]


def additive_scores(q, k, W1, W2, v):
    """``S[t, i] = v . tanh(W1 q_t + W2 k_i)`` for every query/key pair."""
    lead = _lead(q)
    T, S = q.shape[-2], k.shape[-2]
    d_a = W1.shape[0]
    a = matmul(q, W1.T).reshape(lead + (T, 1, d_a))
    b = matmul(k, W2.T).reshape(lead + (1, S, d_a))
    e = matmul(tanh(a + b), as_tensor(v).reshape(d_a, 1))
    return e.reshape(lead + (T, S))


def attention_mask(T: int, cfg: AttentionConfig) -> np.ndarray:
    """Boolean ``[T, T]`` matrix; entry ``[t, i]`` says row t may attend to i."""
    allowed = np.ones((T, T), dtype=bool)
    pos = np.arange(T)
    if cfg.locality == "local":
        half = (cfg.window - 1) // 2
        allowed &= np.abs(pos[None, :] - pos[:, None]) <= half
    if cfg.masked:
        allowed &= pos[None, :] <= pos[:, None]
    if not allowed.any(axis=1).all():
        raise ContractError("every position in some attention row is masked")
    return allowed


def self_attention(x, proj: ProjectionSet, cfg: AttentionConfig, return_weights=False):
    """Scaled dot-product or additive self-attention over ``[.., T, d_model]``."""
    x = as_tensor(x)
    if x.shape[-1] != proj.W_Q.shape[0]:
        raise DimensionError(f"self_attention: input width {x.shape[-1]} vs projections {proj.W_Q.shape}")
    T = x.shape[-2]
    q, k, v = matmul(x, proj.W_Q), matmul(x, proj.W_K), matmul(x, proj.W_V)
    if cfg.scoring == "multiplicative":
        scores = matmul(q, swap_last(k)) * (1.0 / np.sqrt(proj.d_k))
    else:
        if not hasattr(proj, "W1"):
            raise ConfigurationError("additive scoring needs a ProjectionSet built with additive=True")
        scores = additive_scores(q, k, proj.W1, proj.W2, proj.v)
    allowed = attention_mask(T, cfg)
    if not allowed.all():
        scores = scores + np.where(allowed, 0.0, MASK_VALUE)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigurationError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((T, d_model))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


def multi_head_attend(x, projs, W_O, cfg: AttentionConfig, positional="sinusoidal",
                      return_weights=False):
    """Masked multi-head attention.

    ``positional`` is ``"sinusoidal"``, ``None`` (no encoding) or an explicit
    ``[T, d_model]`` array to add.
    """
    x = as_tensor(x)
    T, d_model = x.shape[-2], x.shape[-1]
    h = len(projs)
    if h == 0 or d_model != h * projs[0].d_k:
        raise ConfigurationError(
            f"d_model={d_model} must equal heads*d_k={h}*{projs[0].d_k if h else '?'}")
    if positional is not None:
        pe = positional_encoding(T, d_model) if isinstance(positional, str) else positional
        x = x + pe
    head_cfg = replace(cfg, scoring="multiplicative")
    outs, ws = [], []
    for proj in projs:
        o, w = self_attention(x, proj, head_cfg, return_weights=True)
        outs.append(o)
        ws.append(w)
    out = matmul(concat(outs, axis=-1), W_O)
    return (out, ws) if return_weights else out


def luong_attend(enc) -> ContextVector:
    """Dot-product alignment of the previous rows against the last (target) row."""
    enc = as_tensor(enc)
    N = enc.shape[-2]
    if N < 2:
        raise ContractError("luong_attend needs at least one previous subsequence (N >= 2)")
    lead = _lead(enc)
    F = enc.shape[-1]
    prev = enc[..., :N - 1, :]
    target = enc[..., N - 1:N, :]
    scores = matmul(prev, swap_last(target)).reshape(lead + (N - 1,))
    alpha = softmax(scores, axis=-1)
    ctx = matmul(alpha.reshape(lead + (1, N - 1)), prev).reshape(lead + (F,))
    return ContextVector(ctx, alpha)


class BahdanauScore(Module):
    def __init__(self, width, rng, d_a=None):
        d_a = d_a or width
        self.W1 = glorot_uniform(rng, (d_a, width), width, d_a)
        self.W2 = glorot_uniform(rng, (d_a, width), width, d_a)
        self.v = glorot_uniform(rng, (d_a,), d_a, 1)


def bahdanau_attend(enc, p_fwd: LstmParams, p_bwd: LstmParams, score: BahdanauScore) -> ContextVector:
    """Additive alignment over bi-LSTM states; the last state is the query."""
    enc = as_tensor(enc)
    N = enc.shape[-2]
    if N < 2:
        raise ContractError("bahdanau_attend needs at least one previous subsequence (N >= 2)")
    states = bilstm_sequence(enc, p_fwd, p_bwd)
    lead = _lead(states)
    width = states.shape[-1]
    prev = states[..., :N - 1, :]
    query = states[..., N - 1:N, :]
    e = additive_scores(query, prev, score.W2, score.W1, score.v).reshape(lead + (N - 1,))
    alpha = softmax(e, axis=-1)
    ctx = matmul(alpha.reshape(lead + (1, N - 1)), prev).reshape(lead + (width,))
    return ContextVector(ctx, alpha)


class SelfAttention(Module):
    def __init__(self, d_model, cfg: AttentionConfig, rng):
        self.cfg = cfg
        self.proj = ProjectionSet(d_model, cfg.d_k, rng, additive=cfg.scoring == "additive")

    def forward(self, x, return_weights=False):
        return self_attention(x, self.proj, self.cfg, return_weights)


class MultiHeadAttention(Module):
    def __init__(self, d_model, cfg: AttentionConfig, rng):
        if d_model % cfg.heads:
            raise ConfigurationError(f"d_model={d_model} is not divisible by heads={cfg.heads}")
        d_k = d_model // cfg.heads
        self.cfg = replace(cfg, d_k=d_k, masked=True, scoring="multiplicative")
        self.heads = [ProjectionSet(d_model, d_k, rng) for _ in range(cfg.heads)]
        self.W_O = glorot_uniform(rng, (d_model, d_model), d_model, d_model)

    def forward(self, x, return_weights=False, positional="sinusoidal"):
        return multi_head_attend(x, self.heads, self.W_O, self.cfg, positional, return_weights)


class BahdanauAttention(Module):
    def __init__(self, d_in, hidden, rng):
        self.fwd = LstmParams(d_in, hidden, rng)
        self.bwd = LstmParams(d_in, hidden, rng)
        self.score = BahdanauScore(2 * hidden, rng)

    def forward(self, enc) -> ContextVector:
        return bahdanau_attend(enc, self.fwd, self.bwd, self.score)
