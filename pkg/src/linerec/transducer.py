"""Transducer decoding path: causal label encoder, additive joiner, the
alignment-lattice loss, and frame-by-frame greedy/beam search.

The loss marginalizes over every monotone alignment between T visual
frames and U target labels. A lattice node (t, u) holds the normalized
distribution over the vocabulary given frame t and label history y[:u];
taking BLANK advances t, taking y[u+1] advances u. Forward/backward
variables are computed by dynamic programming in float64 log space, and
the whole loss is exposed to the autodiff tape as one custom node whose
adjoint comes from transition posteriors, chained through the per-node
softmax. That keeps memory at O(T*U) instead of taping every logsumexp.

During decoding the joiner's affine map is split: logits equal
W(visual_t + label_u) + b = A[t] + B[u] with A precomputed for all frames
and B refreshed only when a label is emitted, so blank steps are cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, NumericError, ShapeError
from .tensor import Tensor
from .tokenizer import BLANK_ID, BOS_ID
from .transformer import (LayerCache, LayerNormParams, TransformerLayer,
                          _linear_init, _np_ln, clone_caches, linear,
                          make_caches, step_layer)

_NEG_INF = -math.inf


def _ladd(a: float, b: float) -> float:
    """logaddexp on plain floats with -inf as absorbing zero."""
    if a == _NEG_INF:
        return b
    if b == _NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log1p(math.exp(-abs(a - b)))


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class LabelEncoder:
    """Causal transformer over previously emitted tokens (no visual input).

    Position 0 consumes BOS, standing in for the empty history; the feature
    at position u therefore conditions on exactly the first u labels.
    """

    def __init__(self, vocab_size: int, d_model: int, num_heads: int, d_ff: int,
                 num_layers: int, max_positions: int, rng: np.random.Generator,
                 dropout: float = 0.0, pre_norm: bool = False, dtype=np.float32):
        self.d_model = d_model
        self.max_positions = max_positions
        self.dropout = dropout
        self.tok = Tensor(rng.normal(0.0, 0.02, size=(vocab_size, d_model)).astype(dtype),
                          requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_positions, d_model)).astype(dtype),
                          requires_grad=True)
        self.layers = [TransformerLayer(d_model, num_heads, d_ff, rng, causal=True,
                                        dropout=dropout, pre_norm=pre_norm, dtype=dtype)
                       for _ in range(num_layers)]
        self.final_ln = LayerNormParams(d_model, dtype) if pre_norm else None

    def __call__(self, tokens: Sequence[int], training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        """Features for [BOS] + tokens; output [len(tokens)+1, d_model]."""
        ids = [BOS_ID] + list(tokens)
        if len(ids) > self.max_positions:
            raise CapacityError(
                f"label sequence length {len(ids)} exceeds max positions {self.max_positions}")
        x = T.add(T.embedding(self.tok, ids), T.narrow(self.pos, 0, 0, len(ids)))
        if training:
            x = T.dropout(x, self.dropout, rng, training)
        for layer in self.layers:
            x = layer(x, training=training, rng=rng)
        if self.final_ln is not None:
            x = self.final_ln(x)
        return x

    # incremental path -----------------------------------------------------

    def start_state(self) -> tuple[np.ndarray, list[LayerCache]]:
        """Feature for the empty history plus the cache holding BOS."""
        caches = make_caches(self.layers)
        feat = self._step(BOS_ID, 0, caches)
        return feat, caches

    def step(self, token: int, position: int,
             caches: list[LayerCache]) -> np.ndarray:
        """Append one token (at `position`, BOS = 0) and return its feature."""
        if position >= self.max_positions:
            raise CapacityError(
                f"label position {position} exceeds max positions {self.max_positions}")
        return self._step(token, position, caches)

    def _step(self, token: int, position: int, caches) -> np.ndarray:
        x = self.tok.data[token] + self.pos.data[position]
        for layer, cache in zip(self.layers, caches):
            x = step_layer(layer, x, cache)
        if self.final_ln is not None:
            x = _np_ln(x, self.final_ln)
        return x

    def parameters(self) -> dict[str, Tensor]:
        out = {"tok": self.tok, "pos": self.pos}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layers.{i}.{k}"] = v
        if self.final_ln is not None:
            for k, v in self.final_ln.parameters().items():
                out[f"final_ln.{k}"] = v
        return out


class Joiner:
    """Adds a label feature to a visual feature and maps to vocabulary logits."""

    def __init__(self, d_model: int, vocab_size: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.w, self.b = _linear_init(rng, d_model, vocab_size, dtype)

    def __call__(self, visual: Tensor, label_feats: Tensor) -> Tensor:
        """Joint logits [T, U+1, |V|] from visual [T, d] and labels [U+1, d]."""
        if visual.shape[-1] != self.d_model or label_feats.shape[-1] != self.d_model:
            raise ContractError(
                f"joiner expects width {self.d_model}, got visual {visual.shape} "
                f"and labels {label_feats.shape}")
        t, d = visual.shape
        u1 = label_feats.shape[0]
        summed = T.add(T.reshape(visual, (t, 1, d)), T.reshape(label_feats, (1, u1, d)))
        flat = linear(T.reshape(summed, (t * u1, d)), self.w, self.b)
        return T.reshape(flat, (t, u1, self.vocab_size))

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


@dataclass
class AlignmentLattice:
    """Log-probability grid with forward/backward variables.

    log_probs[t, u, k] is the normalized log-probability of symbol k at
    node (t, u). alpha[t, u] sums paths that reached (t, u); beta[t, u]
    sums completions from (t, u) including its own emission, so
    alpha[T-1, U] + log_blank[T-1, U] = beta[0, 0] = log P(y | x).
    """

    log_probs: np.ndarray
    targets: tuple[int, ...]
    blank: int = BLANK_ID
    alpha: np.ndarray = field(init=False)
    beta: np.ndarray = field(init=False)

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 3:
            raise ShapeError(f"lattice log_probs must be [T, U+1, V], got {lp.shape}")
        if np.isnan(lp).any():
            raise NumericError("lattice contains NaN log-probabilities")
        t_len, u1, _ = lp.shape
        if u1 != len(self.targets) + 1:
            raise ShapeError(
                f"lattice has {u1} label rows but {len(self.targets)} targets")
        if self.blank in self.targets:
            raise ContractError("targets must not contain the blank id")
        self.log_probs = lp
        self.targets = tuple(int(x) for x in self.targets)
        self.alpha = self._forward()
        self.beta = self._backward()

    @property
    def t_len(self) -> int:
        return self.log_probs.shape[0]

    @property
    def u_len(self) -> int:
        return len(self.targets)

    @property
    def log_blank(self) -> np.ndarray:
        return self.log_probs[:, :, self.blank]

    @property
    def log_label(self) -> np.ndarray:
        """[T, U]: log-probability of emitting y[u+1] at node (t, u)."""
        if self.u_len == 0:
            return np.zeros((self.t_len, 0))
        cols = np.asarray(self.targets)
        return self.log_probs[:, np.arange(self.u_len), cols]

    def _forward(self) -> np.ndarray:
        t_len, u_len = self.t_len, self.u_len
        lb, ll = self.log_blank, self.log_label
        a = np.full((t_len, u_len + 1), _NEG_INF)
        a[0, 0] = 0.0
        for t in range(t_len):
            for u in range(u_len + 1):
                if t == 0 and u == 0:
                    continue
                from_blank = a[t - 1, u] + lb[t - 1, u] if t > 0 else _NEG_INF
                from_label = a[t, u - 1] + ll[t, u - 1] if u > 0 else _NEG_INF
                a[t, u] = _ladd(from_blank, from_label)
        return a

    def _backward(self) -> np.ndarray:
        t_len, u_len = self.t_len, self.u_len
        lb, ll = self.log_blank, self.log_label
        b = np.full((t_len, u_len + 1), _NEG_INF)
        b[t_len - 1, u_len] = lb[t_len - 1, u_len]
        for t in range(t_len - 1, -1, -1):
            for u in range(u_len, -1, -1):
                if t == t_len - 1 and u == u_len:
                    continue
                via_blank = lb[t, u] + b[t + 1, u] if t + 1 < t_len else _NEG_INF
                via_label = ll[t, u] + b[t, u + 1] if u < u_len else _NEG_INF
                b[t, u] = _ladd(via_blank, via_label)
        return b

    @property
    def log_prob(self) -> float:
        return float(self.alpha[-1, -1] + self.log_blank[-1, -1])

    def loss(self) -> float:
        return -self.log_prob

    def logit_gradients(self) -> np.ndarray:
        """d(loss)/d(joint logits), via posteriors through the node softmax."""
        t_len, u_len = self.t_len, self.u_len
        logp = self.log_prob
        # beta extended with the terminal state (probability one past (T-1, U))
        beta_ext = np.full((t_len + 1, u_len + 1), _NEG_INF)
        beta_ext[:t_len] = self.beta
        beta_ext[t_len, u_len] = 0.0

        with np.errstate(invalid="ignore"):
            post_blank = np.exp(self.alpha + self.log_blank + beta_ext[1:] - logp)
            post_blank = np.nan_to_num(post_blank, nan=0.0, posinf=0.0)
        d_logp = np.zeros_like(self.log_probs)
        d_logp[:, :, self.blank] = -post_blank
        occupancy = post_blank
        if u_len:
            with np.errstate(invalid="ignore"):
                post_label = np.exp(self.alpha[:, :-1] + self.log_label
                                    + self.beta[:, 1:] - logp)
                post_label = np.nan_to_num(post_label, nan=0.0, posinf=0.0)
            cols = np.asarray(self.targets)
            rows = np.arange(u_len)
            for t in range(t_len):
                d_logp[t, rows, cols] -= post_label[t]
            occupancy = occupancy.copy()
            occupancy[:, :-1] += post_label
        return d_logp + np.exp(self.log_probs) * occupancy[:, :, None]


def lattice_from_logits(logits: np.ndarray, targets: Sequence[int],
                        blank: int = BLANK_ID) -> AlignmentLattice:
    return AlignmentLattice(_log_softmax_np(np.asarray(logits, dtype=np.float64)),
                            tuple(targets), blank)


def rnnt_loss(logits: Tensor, targets: Sequence[int],
              blank: int = BLANK_ID) -> Tensor:
    """Negative log marginal probability as a single differentiable node."""
    lattice = lattice_from_logits(logits.data, targets, blank)
    grad = lattice.logit_gradients().astype(logits.dtype)

    def backward_fn(g):
        if logits.requires_grad:
            logits.accumulate_grad(float(g) * grad)

    return T._result(np.asarray(lattice.loss(), dtype=logits.dtype),
                     (logits,), backward_fn)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class TransducerHypothesis:
    """Partial label sequence with score, frame position and encoder state."""

    tokens: tuple[int, ...]
    score: float
    frame: int
    emitted_in_frame: int
    caches: list
    label_logits: np.ndarray  # B term of the split joint: feat @ W + b


class TransducerDecoder:
    """Label encoder + joiner with greedy and beam search."""

    def __init__(self, label_encoder: LabelEncoder, joiner: Joiner,
                 blank: int = BLANK_ID):
        if label_encoder.d_model != joiner.d_model:
            raise ContractError(
                f"label encoder width {label_encoder.d_model} != joiner width {joiner.d_model}")
        self.label_encoder = label_encoder
        self.joiner = joiner
        self.blank = blank

    def joint_logits(self, visual: Tensor, targets: Sequence[int],
                     training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
        feats = self.label_encoder(targets, training=training, rng=rng)
        return self.joiner(visual, feats)

    def loss(self, visual: Tensor, targets: Sequence[int],
             training: bool = False,
             rng: Optional[np.random.Generator] = None) -> Tensor:
        return rnnt_loss(self.joint_logits(visual, targets, training, rng),
                         targets, self.blank)

    # -- shared decode plumbing ---------------------------------------------

    def _visual_logits(self, visual: np.ndarray) -> np.ndarray:
        """A[t] = visual_t @ W for every frame (bias lives in the label part)."""
        return visual.astype(self.joiner.w.dtype) @ self.joiner.w.data

    def _label_logits(self, feat: np.ndarray) -> np.ndarray:
        return feat @ self.joiner.w.data + self.joiner.b.data

    def _start(self) -> tuple[np.ndarray, list]:
        feat, caches = self.label_encoder.start_state()
        return self._label_logits(feat), caches

    def _node_log_probs(self, a_t: np.ndarray, b_u: np.ndarray) -> np.ndarray:
        return _log_softmax_np((a_t + b_u).astype(np.float64))

    def greedy_decode(self, visual: np.ndarray,
                      max_symbols_per_frame: int = 10) -> list[int]:
        """Argmax walk: blank advances the frame, a label emits and stays."""
        if max_symbols_per_frame < 1:
            raise ContractError("max_symbols_per_frame must be >= 1")
        a = self._visual_logits(visual)
        b, caches = self._start()
        out: list[int] = []
        max_pos = self.label_encoder.max_positions
        for t in range(a.shape[0]):
            emitted = 0
            while emitted < max_symbols_per_frame and len(out) + 1 < max_pos:
                lp = self._node_log_probs(a[t], b)
                k = int(np.argmax(lp))
                if k == self.blank:
                    break
                out.append(k)
                emitted += 1
                feat = self.label_encoder.step(k, len(out), caches)
                b = self._label_logits(feat)
        return out

    def beam_decode(self, visual: np.ndarray, width: int,
                    max_symbols_per_frame: int = 10) -> list[int]:
        tokens, _ = self.beam_decode_with_score(visual, width, max_symbols_per_frame)
        return tokens

    def beam_decode_with_score(self, visual: np.ndarray, width: int,
                               max_symbols_per_frame: int = 10
                               ) -> tuple[list[int], float]:
        """Beam search over (frame, emit-count, labels) states.

        All live hypotheses advance one transition per round; candidates
        reaching the same state are merged by log-sum-exp, the best `width`
        survive, and hypotheses that consume the final frame's blank are
        frozen. Finished scores for identical label sequences are merged,
        so with a wide enough beam the result is the exact marginal argmax.
        Returns the winning sequence and its merged log-probability.
        """
        if width < 1:
            raise ContractError("beam width must be >= 1")
        a = self._visual_logits(visual)
        t_total = a.shape[0]
        b0, caches0 = self._start()
        live = [TransducerHypothesis((), 0.0, 0, 0, caches0, b0)]
        finished: dict[tuple[int, ...], float] = {}

        while live:
            # candidate key -> [merged score, parent, emitted token or None];
            # any parent reaching a key owns an identical label prefix, so
            # the surviving caches are well defined regardless of merge order
            candidates: dict = {}
            order: list = []
            for hyp in live:
                lp = self._node_log_probs(a[hyp.frame], hyp.label_logits)
                key = (hyp.frame + 1, 0, hyp.tokens)
                self._offer(candidates, order, key, hyp.score + lp[self.blank], hyp, None)
                can_emit = (hyp.emitted_in_frame < max_symbols_per_frame
                            and len(hyp.tokens) + 1 < self.label_encoder.max_positions)
                if can_emit:
                    for k in range(self.joiner.vocab_size):
                        if k == self.blank:
                            continue
                        key = (hyp.frame, hyp.emitted_in_frame + 1, hyp.tokens + (k,))
                        self._offer(candidates, order, key,
                                    hyp.score + lp[k], hyp, k)
            top = sorted(order, key=lambda key: -candidates[key][0])[:width]
            live = []
            for key in top:
                score, parent, token = candidates[key]
                frame, in_frame, tokens = key
                if token is None:
                    if frame == t_total:
                        prev = finished.get(tokens)
                        finished[tokens] = score if prev is None else _ladd(prev, score)
                        continue
                    live.append(TransducerHypothesis(
                        tokens, score, frame, in_frame, parent.caches,
                        parent.label_logits))
                else:
                    caches = clone_caches(parent.caches)
                    feat = self.label_encoder.step(token, len(tokens), caches)
                    live.append(TransducerHypothesis(
                        tokens, score, frame, in_frame, caches,
                        self._label_logits(feat)))
        best = max(finished.items(), key=lambda kv: kv[1])
        return list(best[0]), best[1]

    @staticmethod
    def _offer(candidates, order, key, score, parent, token):
        entry = candidates.get(key)
        if entry is None:
            candidates[key] = [score, parent, token]
            order.append(key)
        else:
            entry[0] = _ladd(entry[0], score)

    def joint_all(self, visual: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
        """Full joint logits for a fixed label sequence, evaluation mode."""
        with T.no_grad():
            logits = self.joint_logits(
                Tensor(visual.astype(self.joiner.w.dtype)), list(tokens))
        return logits.data

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.label_encoder.parameters().items():
            out[f"label_encoder.{k}"] = v
        for k, v in self.joiner.parameters().items():
            out[f"joiner.{k}"] = v
        return out
