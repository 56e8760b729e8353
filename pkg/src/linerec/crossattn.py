"""Sequence-to-sequence decoding path: causal self-attention layers with
cross-attention over the visual features, trained by cross-entropy and
decoded autoregressively (greedy or beam).

Decoding caches self-attention keys/values per hypothesis and precomputes
the cross-attention projections of the encoder output once per line, which
is the configuration all latency figures refer to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError
from .tensor import Tensor
from .tokenizer import BOS_ID, EOS_ID
from .transformer import (LayerNormParams, TransformerLayer, _linear_init,
                          _np_ln, clone_caches, linear, make_caches,
                          step_layer)
from .transducer import _log_softmax_np


def cross_entropy_loss(logits: Tensor, reference: Sequence[int],
                       pad_positions: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    logits: [N, |V|]; reference: N target ids (the decoder input shifted
    left, ending with EOS). Pad positions contribute exactly zero.
    """
    refs = list(reference)
    if logits.shape[0] != len(refs):
        raise ContractError(
            f"cross_entropy_loss: {logits.shape[0]} logit rows vs {len(refs)} references")
    logp = T.log_softmax(logits, axis=-1)
    picked = T.select_index(logp, refs)
    if pad_positions is None:
        return T.scale(T.tensor_sum(picked), -1.0 / len(refs))
    keep = ~np.asarray(pad_positions, dtype=bool)
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ContractError("cross_entropy_loss: every position is padding")
    weights = Tensor(keep.astype(logits.dtype.type))
    return T.scale(T.tensor_sum(T.mul(picked, weights)), -1.0 / n_keep)


@dataclass
class Seq2SeqHypothesis:
    tokens: tuple[int, ...]
    score: float
    caches: list
    next_logp: np.ndarray


class CrossAttnDecoder:
    """Token/positional embeddings, decoder layers, output projection."""

    def __init__(self, vocab_size: int, d_model: int, num_heads: int, d_ff: int,
                 num_layers: int, max_positions: int, rng: np.random.Generator,
                 dropout: float = 0.0, pre_norm: bool = False, dtype=np.float32,
                 bos_id: int = BOS_ID, eos_id: int = EOS_ID):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_positions = max_positions
        self.dropout = dropout
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.tok = Tensor(rng.normal(0.0, 0.02, size=(vocab_size, d_model)).astype(dtype),
                          requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_positions, d_model)).astype(dtype),
                          requires_grad=True)
        self.layers = [TransformerLayer(d_model, num_heads, d_ff, rng, causal=True,
                                        with_cross=True, dropout=dropout,
                                        pre_norm=pre_norm, dtype=dtype)
                       for _ in range(num_layers)]
        self.final_ln = LayerNormParams(d_model, dtype) if pre_norm else None
        self.out_w, self.out_b = _linear_init(rng, d_model, vocab_size, dtype)

    # -- training path -------------------------------------------------------

    def teacher_forced_logits(self, visual: Tensor, target: Sequence[int],
                              visual_pad_mask: Optional[np.ndarray] = None,
                              training: bool = False,
                              rng: Optional[np.random.Generator] = None) -> Tensor:
        """One logit row per input position for a BOS-prefixed target."""
        ids = list(target)
        if not ids or ids[0] != self.bos_id:
            raise ContractError("teacher_forced_logits: target must begin with BOS")
        if len(ids) > self.max_positions:
            raise CapacityError(
                f"target length {len(ids)} exceeds max positions {self.max_positions}")
        x = T.add(T.embedding(self.tok, ids), T.narrow(self.pos, 0, 0, len(ids)))
        if training:
            x = T.dropout(x, self.dropout, rng, training)
        cross_mask = None
        if visual_pad_mask is not None:
            keys_ok = ~np.asarray(visual_pad_mask, dtype=bool)
            cross_mask = np.broadcast_to(keys_ok, (len(ids), visual.shape[0]))
        for layer in self.layers:
            x = layer(x, enc=visual, cross_mask=cross_mask, training=training, rng=rng)
        if self.final_ln is not None:
            x = self.final_ln(x)
        return linear(x, self.out_w, self.out_b)

    def loss(self, visual: Tensor, target_ids: Sequence[int],
             visual_pad_mask: Optional[np.ndarray] = None,
             training: bool = False,
             rng: Optional[np.random.Generator] = None) -> Tensor:
        """Teacher-forced cross entropy for a raw label sequence (no BOS/EOS)."""
        decoder_in = [self.bos_id] + list(target_ids)
        reference = list(target_ids) + [self.eos_id]
        logits = self.teacher_forced_logits(visual, decoder_in, visual_pad_mask,
                                            training, rng)
        return cross_entropy_loss(logits, reference)

    # -- incremental path ----------------------------------------------------

    def _step(self, token: int, position: int, caches,
              cross_ok: Optional[np.ndarray]) -> np.ndarray:
        x = self.tok.data[token] + self.pos.data[position]
        for layer, cache in zip(self.layers, caches):
            x = step_layer(layer, x, cache, cross_ok)
        if self.final_ln is not None:
            x = _np_ln(x, self.final_ln)
        return x @ self.out_w.data + self.out_b.data

    def _start(self, visual: np.ndarray,
               pad_mask: Optional[np.ndarray]) -> tuple[np.ndarray, list]:
        caches = make_caches(self.layers, visual.astype(self.out_w.dtype))
        cross_ok = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
        logits = self._step(self.bos_id, 0, caches, cross_ok)
        return _log_softmax_np(logits.astype(np.float64)), caches

    def greedy_decode(self, visual: np.ndarray, max_len: int = 256,
                      pad_mask: Optional[np.ndarray] = None) -> list[int]:
        """Append the argmax token until EOS or max_len; EOS is not returned."""
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        cross_ok = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
        logp, caches = self._start(visual, pad_mask)
        out: list[int] = []
        for _ in range(max_len):
            k = int(np.argmax(logp))
            if k == self.eos_id:
                break
            out.append(k)
            if len(out) >= self.max_positions:
                break
            logits = self._step(k, len(out), caches, cross_ok)
            logp = _log_softmax_np(logits.astype(np.float64))
        return out

    def beam_decode(self, visual: np.ndarray, width: int, max_len: int = 256,
                    length_norm: bool = False,
                    pad_mask: Optional[np.ndarray] = None) -> list[int]:
        tokens, _ = self.beam_decode_with_score(visual, width, max_len,
                                                length_norm, pad_mask)
        return tokens

    def beam_decode_with_score(self, visual: np.ndarray, width: int,
                               max_len: int = 256, length_norm: bool = False,
                               pad_mask: Optional[np.ndarray] = None
                               ) -> tuple[list[int], float]:
        """Step-synchronous beam over the full vocabulary.

        Hypotheses that pick EOS are frozen and compete at the end; live
        hypotheses remaining at max_len compete with their raw scores.
        With length_norm the final comparison divides by step count.
        """
        if width < 1:
            raise ContractError("beam width must be >= 1")
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        cross_ok = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
        logp0, caches0 = self._start(visual, pad_mask)
        live = [Seq2SeqHypothesis((), 0.0, caches0, logp0)]
        finished: list[tuple[tuple[int, ...], float, int]] = []

        for _ in range(max_len):
            if not live:
                break
            candidates = []
            for hyp in live:
                for k in range(self.vocab_size):
                    candidates.append((hyp.score + hyp.next_logp[k], hyp, k))
            candidates.sort(key=lambda c: -c[0])
            live = []
            for score, hyp, k in candidates[:width]:
                if k == self.eos_id:
                    finished.append((hyp.tokens, score, len(hyp.tokens) + 1))
                    continue
                tokens = hyp.tokens + (k,)
                if len(tokens) >= self.max_positions:
                    finished.append((tokens, score, len(tokens)))
                    continue
                caches = clone_caches(hyp.caches)
                logits = self._step(k, len(tokens), caches, cross_ok)
                live.append(Seq2SeqHypothesis(
                    tokens, score, caches,
                    _log_softmax_np(logits.astype(np.float64))))
        for hyp in live:
            finished.append((hyp.tokens, hyp.score, max(len(hyp.tokens), 1)))

        def rank(item):
            tokens, score, steps = item
            return score / steps if length_norm else score

        best = max(finished, key=rank)
        return list(best[0]), best[1]

    def sequence_log_prob(self, visual: np.ndarray, tokens: Sequence[int],
                          pad_mask: Optional[np.ndarray] = None,
                          include_eos: bool = True) -> float:
        """Stepwise log-probability the incremental scorer assigns a sequence."""
        cross_ok = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
        logp, caches = self._start(visual, pad_mask)
        total = 0.0
        for i, tok in enumerate(tokens):
            total += float(logp[tok])
            logits = self._step(tok, i + 1, caches, cross_ok)
            logp = _log_softmax_np(logits.astype(np.float64))
        if include_eos:
            total += float(logp[self.eos_id])
        return total

    def parameters(self) -> dict[str, Tensor]:
        out = {"tok": self.tok, "pos": self.pos,
               "out.w": self.out_w, "out.b": self.out_b}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layers.{i}.{k}"] = v
        if self.final_ln is not None:
            for k, v in self.final_ln.parameters().items():
                out[f"final_ln.{k}"] = v
        return out
