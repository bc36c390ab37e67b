"""Attention-based encoder-decoder ASR (listen-attend-spell style).

Bidirectional recurrent encoder; single-layer recurrent decoder with additive
multi-head attention. The end-of-sequence symbol (id 1) doubles as the
decoder start symbol. ``las_forward`` teacher-forces a given token sequence
and exposes the per-step decoder hidden rows for the hidden interface;
scoring a sequence that should terminate naturally is the caller's business
(append the end symbol to the targets).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ShapeError, concat, no_grad, softmax, tanh
from .decoding import DecodeError, Hypothesis, NBest, VocabularyError
from .layers import AdditiveAttention, BiRnnStack, Embedding, Linear, Module, RnnStack
from .rnnt import BLANK_ID

__all__ = ["EOS_ID", "LasModel", "LasOutputs", "las_forward", "las_beam_decode"]

EOS_ID = 1


class LasModel(Module):
    def __init__(self, rng, vocab_size: int, feat_dim: int, enc_units: int = 32,
                 enc_layers: int = 2, dec_units: int = 64, emb_dim: int = 32,
                 att_units: int = 32, att_heads: int = 2):
        self.vocab_size = vocab_size
        self.dec_units = dec_units
        self.encoder = BiRnnStack(rng, feat_dim, enc_units, enc_layers)
        self.embedding = Embedding(rng, vocab_size, emb_dim)
        self.attention = AdditiveAttention(rng, self.encoder.out_dim, dec_units,
                                           att_units, att_heads)
        self.ctx_dim = self.attention.context_dim
        self.dec_rnn = RnnStack(rng, emb_dim + self.ctx_dim, dec_units, 1)
        self.pre_out = Linear(rng, dec_units + self.ctx_dim, dec_units)
        self.out_proj = Linear(rng, dec_units, vocab_size)


class LasOutputs:
    def __init__(self, h_e: Tensor, h_d: Tensor, logits: Tensor, posteriors: Tensor,
                 attention_weights: list):
        self.h_e = h_e          # (T, E)
        self.h_d = h_d          # (U, D)
        self.logits = logits    # (U, V)
        self.posteriors = posteriors  # (U, V), rows sum to 1
        self.attention_weights = attention_weights  # per step, per head (T, 1)


def _check_tokens(tokens, vocab_size: int):
    for tok in tokens:
        if not (0 <= int(tok) < vocab_size):
            raise VocabularyError(f"token id {tok} outside vocabulary of size {vocab_size}")
        if int(tok) == BLANK_ID:
            raise VocabularyError("blank (id 0) is reserved and cannot be a decoder target")


def _decoder_step(model: LasModel, enc: Tensor, tok: int, states, ctx):
    """One decoder step; returns (h_d row, logits row, new states, new ctx, weights)."""
    emb = model.embedding([tok])
    s, states = model.dec_rnn.step(concat([emb, ctx], axis=1), states)
    ctx, weights = model.attention(enc, s, return_weights=True)
    h_d = tanh(model.pre_out(concat([s, ctx], axis=1)))
    return h_d, model.out_proj(h_d), states, ctx, weights


def las_forward(model: LasModel, x, y) -> LasOutputs:
    """Teacher-forced decode of token sequence ``y`` (length U >= 1)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"audio features must be (T>=1, feat), got {x.shape}")
    y = [int(t) for t in y]
    if not y:
        raise ShapeError("teacher forcing needs at least one target token")
    _check_tokens(y, model.vocab_size)

    h_e = model.encoder(x)
    states = model.dec_rnn.init_state()
    ctx = Tensor(np.zeros((1, model.ctx_dim)))
    h_rows, logit_rows, attn = [], [], []
    prev = EOS_ID
    for tok in y:
        h_d, logits_row, states, ctx, weights = _decoder_step(model, h_e, prev, states, ctx)
        h_rows.append(h_d)
        logit_rows.append(logits_row)
        attn.append(weights)
        prev = tok
    h_d = concat(h_rows, axis=0)
    logits = concat(logit_rows, axis=0)
    return LasOutputs(h_e=h_e, h_d=h_d, logits=logits,
                      posteriors=softmax(logits, axis=-1), attention_weights=attn)


def las_beam_decode(model: LasModel, x, beam_width: int, max_len: int) -> NBest:
    """Beam search terminating on the end symbol or at ``max_len`` tokens.

    Candidates are ranked globally per step; end-symbol continuations retire a
    hypothesis (tokens exclude the end symbol, score includes its log-prob).
    Hypotheses still alive at max_len are retired as-is. Posterior and decoder
    hidden rows come from a teacher-forced rescoring pass over the final
    tokens, so they match ``las_forward`` on the same sequence bit for bit.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    x_arr = np.asarray(x, dtype=np.float64)
    if x_arr.ndim != 2 or x_arr.shape[0] < 1:
        raise DecodeError(f"cannot decode empty audio, got shape {x_arr.shape}")

    with no_grad():
        h_e = model.encoder(Tensor(x_arr))
        live = {(): (0.0, model.dec_rnn.init_state(), Tensor(np.zeros((1, model.ctx_dim))))}
        finished: dict[tuple, float] = {}
        for _ in range(max_len):
            if not live:
                break
            cands = []
            for prefix in sorted(live):
                lp, states, ctx = live[prefix]
                prev = prefix[-1] if prefix else EOS_ID
                _, logits_row, n_states, n_ctx, _ = _decoder_step(model, h_e, prev, states, ctx)
                row = logits_row.data[0]
                m = row.max()
                log_post = row - m - np.log(np.exp(row - m).sum())
                for k in range(model.vocab_size):
                    cands.append((lp + log_post[k], prefix, k, n_states, n_ctx))
            cands.sort(key=lambda c: (-c[0], c[1] + (c[2],)))
            live = {}
            for score, prefix, k, n_states, n_ctx in cands[:beam_width]:
                if k == EOS_ID:
                    if prefix not in finished or score > finished[prefix]:
                        finished[prefix] = score
                else:
                    live[prefix + (k,)] = (score, n_states, n_ctx)
        for prefix, (lp, _, _) in live.items():
            if prefix not in finished or lp > finished[prefix]:
                finished[prefix] = lp

    ranked = sorted(finished.items(), key=lambda kv: (-kv[1], kv[0]))[:beam_width]
    hyps = [_finalize(model, x_arr, prefix, lp) for prefix, lp in ranked]
    return NBest(hypotheses=hyps, beam_width=beam_width)


def _finalize(model: LasModel, x: np.ndarray, prefix: tuple, lp: float) -> Hypothesis:
    if prefix:
        with no_grad():
            out = las_forward(model, x, list(prefix))
        posts = out.posteriors.data.copy()
        h_d = out.h_d.data.copy()
    else:
        posts = np.zeros((0, model.vocab_size))
        h_d = np.zeros((0, model.dec_units))
    return Hypothesis(tokens=prefix, log_prob=float(lp), token_posteriors=posts,
                      decoder_states=h_d)
