"""Attention primitives and the stacked visual encoder.

Attention follows softmax(Q K^T / sqrt(d)) V with an optional boolean mask
(True = attend allowed). Multi-head attention projects queries, keys and
values with per-head parameter slices, concatenates the head outputs and
applies a final output projection.

Layers are post-norm by default (normalization after each residual sum);
a pre-norm flag exists for stability experiments. Feed-forward blocks use
GELU.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class AttentionStats:
    """Counts degenerate attention rows (every key masked out)."""

    def __init__(self):
        self.fully_masked_rows = 0

    def reset(self):
        self.fully_masked_rows = 0


stats = AttentionStats()


def attention(q: Tensor, k: Tensor, v: Tensor,
              mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over a single head.

    q: [m, d], k: [n, d], v: [n, dv]; mask: bool [m, n], True = allowed.
    Rows with no allowed key produce zeros (softmax of an empty support);
    each such row increments the module-level stats counter.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape} vs key dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: key count {k.shape} vs value count {v.shape}")
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        dead = ~mask.any(axis=-1)
        if dead.any():
            n_dead = int(dead.sum())
            stats.fully_masked_rows += n_dead
            logger.warning("attention: %d fully-masked rows produced zero output", n_dead)
        scores = T.masked_fill(scores, ~mask, -np.inf)
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v)


def _linear_init(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.normal(0.0, 0.02, size=(d_in, d_out)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
    return w, b


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


class MultiHeadAttention:
    """h attention heads over a shared d_model, concatenated then projected."""

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        if d_model % num_heads != 0:
            raise ContractError(f"d_model {d_model} not divisible by {num_heads} heads")
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.wq, self.bq = _linear_init(rng, d_model, d_model, dtype)
        self.wk, self.bk = _linear_init(rng, d_model, d_model, dtype)
        self.wv, self.bv = _linear_init(rng, d_model, d_model, dtype)
        self.wo, self.bo = _linear_init(rng, d_model, d_model, dtype)

    def __call__(self, q_in: Tensor, kv_in: Tensor,
                 mask: Optional[np.ndarray] = None) -> Tensor:
        q = linear(q_in, self.wq, self.bq)
        k = linear(kv_in, self.wk, self.bk)
        v = linear(kv_in, self.wv, self.bv)
        heads = []
        for h in range(self.num_heads):
            lo = h * self.d_head
            heads.append(attention(T.narrow(q, 1, lo, self.d_head),
                                   T.narrow(k, 1, lo, self.d_head),
                                   T.narrow(v, 1, lo, self.d_head),
                                   mask))
        merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
        return linear(merged, self.wo, self.bo)

    def parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo}


class FeedForward:
    """Position-wise two-layer block with GELU in between."""

    def __init__(self, d_model: int, d_hidden: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.w1, self.b1 = _linear_init(rng, d_model, d_hidden, dtype)
        self.w2, self.b2 = _linear_init(rng, d_hidden, d_model, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(T.gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class LayerNormParams:
    def __init__(self, d: int, dtype=np.float32):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class TransformerLayer:
    """Self-attention (+ optional cross-attention) + feed-forward sublayers."""

    def __init__(self, d_model: int, num_heads: int, d_ff: int,
                 rng: np.random.Generator, causal: bool = False,
                 with_cross: bool = False, dropout: float = 0.0,
                 pre_norm: bool = False, dtype=np.float32):
        self.causal = causal
        self.dropout = dropout
        self.pre_norm = pre_norm
        self.self_attn = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.cross_attn = MultiHeadAttention(d_model, num_heads, rng, dtype) if with_cross else None
        self.ff = FeedForward(d_model, d_ff, rng, dtype)
        self.ln1 = LayerNormParams(d_model, dtype)
        self.ln2 = LayerNormParams(d_model, dtype)
        self.ln3 = LayerNormParams(d_model, dtype) if with_cross else None

    def _sub(self, x: Tensor, ln: LayerNormParams, f, training, rng) -> Tensor:
        if self.pre_norm:
            out = f(ln(x))
            out = T.dropout(out, self.dropout, rng, training) if training else out
            return T.add(x, out)
        out = f(x)
        out = T.dropout(out, self.dropout, rng, training) if training else out
        return ln(T.add(x, out))

    def __call__(self, x: Tensor, enc: Optional[Tensor] = None,
                 self_mask: Optional[np.ndarray] = None,
                 cross_mask: Optional[np.ndarray] = None,
                 training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        mask = self_mask
        if self.causal:
            n = x.shape[0]
            tri = np.tril(np.ones((n, n), dtype=bool))
            mask = tri if mask is None else (tri & mask)
        x = self._sub(x, self.ln1, lambda y: self.self_attn(y, y, mask), training, rng)
        if self.cross_attn is not None:
            if enc is None:
                raise ContractError("cross-attention layer called without encoder features")
            x = self._sub(x, self.ln2, lambda y: self.cross_attn(y, enc, cross_mask),
                          training, rng)
            return self._sub(x, self.ln3, self.ff, training, rng)
        return self._sub(x, self.ln2, self.ff, training, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, comp in (("attn", self.self_attn), ("cross", self.cross_attn),
                             ("ff", self.ff), ("ln1", self.ln1), ("ln2", self.ln2),
                             ("ln3", self.ln3)):
            if comp is None:
                continue
            for k, v in comp.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out


class VisualEncoder:
    """Patch embedding + learned positions + stacked self-attention layers.

    An optional output projection maps encoder width to the decoder width
    so both decoder architectures consume features of their own dimension.
    """

    def __init__(self, patch_dim: int, d_model: int, num_heads: int, d_ff: int,
                 num_layers: int, max_positions: int, rng: np.random.Generator,
                 out_dim: Optional[int] = None, dropout: float = 0.0,
                 pre_norm: bool = False, dtype=np.float32):
        self.d_model = d_model
        self.max_positions = max_positions
        self.dropout = dropout
        self.pre_norm = pre_norm
        self.embed_w, self.embed_b = _linear_init(rng, patch_dim, d_model, dtype)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_positions, d_model)).astype(dtype),
                          requires_grad=True)
        self.layers = [TransformerLayer(d_model, num_heads, d_ff, rng,
                                        dropout=dropout, pre_norm=pre_norm, dtype=dtype)
                       for _ in range(num_layers)]
        self.final_ln = LayerNormParams(d_model, dtype) if pre_norm else None
        if out_dim is not None and out_dim != d_model:
            self.proj_w, self.proj_b = _linear_init(rng, d_model, out_dim, dtype)
        else:
            self.proj_w = self.proj_b = None
        self.out_dim = out_dim if out_dim is not None else d_model

    def __call__(self, patches: Tensor, pad_mask: Optional[np.ndarray] = None,
                 training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        length = patches.shape[0]
        if length > self.max_positions:
            raise CapacityError(
                f"sequence length {length} exceeds max positions {self.max_positions}")
        x = T.add(linear(patches, self.embed_w, self.embed_b),
                  T.narrow(self.pos, 0, 0, length))
        if training:
            x = T.dropout(x, self.dropout, rng, training)
        self_mask = None
        if pad_mask is not None:
            keys_ok = ~np.asarray(pad_mask, dtype=bool)
            self_mask = np.broadcast_to(keys_ok, (length, length))
        for layer in self.layers:
            x = layer(x, self_mask=self_mask, training=training, rng=rng)
        if self.final_ln is not None:
            x = self.final_ln(x)
        if self.proj_w is not None:
            x = linear(x, self.proj_w, self.proj_b)
        return x

    def infer(self, patches: np.ndarray,
              pad_mask: Optional[np.ndarray] = None) -> np.ndarray:
        """Evaluation-mode forward returning a plain array."""
        with T.no_grad():
            out = self(Tensor(patches.astype(self.embed_w.dtype)), pad_mask=pad_mask)
        return out.data

    def parameters(self) -> dict[str, Tensor]:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b, "pos": self.pos}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layers.{i}.{k}"] = v
        if self.final_ln is not None:
            for k, v in self.final_ln.parameters().items():
                out[f"final_ln.{k}"] = v
        if self.proj_w is not None:
            out["proj.w"] = self.proj_w
            out["proj.b"] = self.proj_b
        return out


# ---------------------------------------------------------------------------
# incremental evaluation-mode machinery (key/value caching for decoding)
#
# These helpers recompute the same math as the taped layers but one position
# at a time on plain arrays, appending each new key/value row to a per-layer
# cache. Consistency with the taped path is covered by tests.


def _np_ln(x: np.ndarray, ln: LayerNormParams, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + eps) * ln.gain.data + ln.bias.data


def _np_gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x * 0.7071067811865476))


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _mha_step(mha: MultiHeadAttention, x: np.ndarray,
              keys: np.ndarray, values: np.ndarray,
              key_ok: Optional[np.ndarray] = None) -> np.ndarray:
    """One query vector attending over cached key/value rows."""
    q = x @ mha.wq.data + mha.bq.data
    out = np.empty_like(q)
    dh = mha.d_head
    inv = 1.0 / np.sqrt(dh)
    for h in range(mha.num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = keys[:, sl] @ q[sl] * inv
        if key_ok is not None:
            scores = np.where(key_ok, scores, -np.inf)
        out[sl] = _np_softmax(scores) @ values[:, sl]
    return out @ mha.wo.data + mha.bo.data


class LayerCache:
    """Per-layer growing self-attention key/value rows plus fixed cross rows."""

    __slots__ = ("self_k", "self_v", "cross_k", "cross_v")

    def __init__(self, cross_k=None, cross_v=None):
        self.self_k: Optional[np.ndarray] = None
        self.self_v: Optional[np.ndarray] = None
        self.cross_k = cross_k
        self.cross_v = cross_v

    def clone(self) -> "LayerCache":
        c = LayerCache(self.cross_k, self.cross_v)
        c.self_k = self.self_k
        c.self_v = self.self_v
        return c


def make_caches(layers: list[TransformerLayer],
                enc_out: Optional[np.ndarray] = None) -> list[LayerCache]:
    """Fresh caches; cross keys/values are precomputed once from enc_out."""
    caches = []
    for layer in layers:
        if layer.cross_attn is not None:
            if enc_out is None:
                raise ContractError("cross-attention layers need encoder output")
            ck = enc_out @ layer.cross_attn.wk.data + layer.cross_attn.bk.data
            cv = enc_out @ layer.cross_attn.wv.data + layer.cross_attn.bv.data
            caches.append(LayerCache(ck, cv))
        else:
            caches.append(LayerCache())
    return caches


def clone_caches(caches: list[LayerCache]) -> list[LayerCache]:
    return [c.clone() for c in caches]


def step_layer(layer: TransformerLayer, x: np.ndarray, cache: LayerCache,
               cross_ok: Optional[np.ndarray] = None) -> np.ndarray:
    """Advance one position through a layer, appending to the cache.

    The cache rows are the *pre-attention* projections of every position
    seen so far, so causal masking is implicit.
    """
    sa = layer.self_attn

    def self_block(y: np.ndarray) -> np.ndarray:
        k_new = y @ sa.wk.data + sa.bk.data
        v_new = y @ sa.wv.data + sa.bv.data
        cache.self_k = k_new[None] if cache.self_k is None else np.vstack([cache.self_k, k_new])
        cache.self_v = v_new[None] if cache.self_v is None else np.vstack([cache.self_v, v_new])
        return _mha_step(sa, y, cache.self_k, cache.self_v)

    if layer.pre_norm:
        x = x + self_block(_np_ln(x, layer.ln1))
        if layer.cross_attn is not None:
            x = x + _mha_step(layer.cross_attn, _np_ln(x, layer.ln2),
                              cache.cross_k, cache.cross_v, cross_ok)
            normed = _np_ln(x, layer.ln3)
        else:
            normed = _np_ln(x, layer.ln2)
        ff = layer.ff
        return x + ((_np_gelu(normed @ ff.w1.data + ff.b1.data)) @ ff.w2.data + ff.b2.data)

    x = _np_ln(x + self_block(x), layer.ln1)
    if layer.cross_attn is not None:
        x = _np_ln(x + _mha_step(layer.cross_attn, x, cache.cross_k,
                                 cache.cross_v, cross_ok), layer.ln2)
        final_ln = layer.ln3
    else:
        final_ln = layer.ln2
    ff = layer.ff
    return _np_ln(x + ((_np_gelu(x @ ff.w1.data + ff.b1.data)) @ ff.w2.data + ff.b2.data),
                  final_ln)
