"""RNN-Transducer: encoder + prediction + joint networks, loss, beam search.

The joint grid is laid out as (T, U+1, .) where prefix row u holds the state
after consuming the first u output tokens (row 0 is the empty prefix), so the
label transition out of lattice node (t, u) reads row u. The blank symbol has
the fixed output index 0.

The transducer loss marginalizes over all monotone alignments with a
forward-backward recursion; its gradient w.r.t. the per-node log-probs is the
usual occupancy form, wrapped as a single tape op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, concat, log_softmax, neg, no_grad, reshape, tanh, _make
from .data import BLANK_ID, EOS_ID
from .decoding import DecodeError, Hypothesis, NBest, VocabularyError
from .layers import Embedding, Linear, Module, RnnStack

__all__ = [
    "BLANK_ID",
    "RnntModel",
    "RnntOutputs",
    "rnnt_forward",
    "rnnt_loss",
    "rnnt_beam_decode",
]


class RnntModel(Module):
    def __init__(self, rng, vocab_size: int, feat_dim: int, enc_units: int = 64,
                 enc_layers: int = 2, pred_units: int = 64, emb_dim: int = 32,
                 joint_units: int = 64):
        self.vocab_size = vocab_size
        self.joint_units = joint_units
        self.encoder = RnnStack(rng, feat_dim, enc_units, enc_layers)
        self.embedding = Embedding(rng, vocab_size, emb_dim)
        self.pred_rnn = RnnStack(rng, emb_dim, pred_units, 1)
        self.enc_proj = Linear(rng, enc_units, joint_units, bias=False)
        self.pred_proj = Linear(rng, pred_units, joint_units, bias=True)
        self.out_proj = Linear(rng, joint_units, vocab_size)


@dataclass
class RnntOutputs:
    h_e: Tensor  # (T, E) encoder states
    h_p: Tensor  # (U+1, P) prediction states, row u = prefix of length u
    h_j: Tensor  # (T, U+1, J) joint hidden grid (post-tanh)
    logits: Tensor  # (T, U+1, V)


def _check_tokens(tokens, vocab_size: int):
    for tok in tokens:
        if not (0 <= int(tok) < vocab_size):
            raise VocabularyError(f"token id {tok} outside vocabulary of size {vocab_size}")
        if int(tok) == BLANK_ID:
            raise VocabularyError("blank (id 0) cannot appear in a transcript")


def rnnt_forward(model: RnntModel, x, y) -> RnntOutputs:
    """Full joint grid for audio ``x`` (T, feat) against token prefix ``y``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"audio features must be (T>=1, feat), got {x.shape}")
    y = [int(t) for t in y]
    _check_tokens(y, model.vocab_size)

    h_e = model.encoder(x)

    states = model.pred_rnn.init_state()
    rows = []
    for tok in [BLANK_ID] + y:  # blank doubles as the start symbol
        h, states = model.pred_rnn.step(model.embedding([tok]), states)
        rows.append(h)
    h_p = concat(rows, axis=0)

    t_len = x.shape[0]
    u_len = len(y) + 1
    j = model.joint_units
    enc = reshape(model.enc_proj(h_e), (t_len, 1, j))
    pred = reshape(model.pred_proj(h_p), (1, u_len, j))
    h_j = tanh(enc + pred)
    logits = model.out_proj(h_j)
    return RnntOutputs(h_e=h_e, h_p=h_p, h_j=h_j, logits=logits)


def _lae(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == -math.inf:
        return a
    return a + math.log1p(math.exp(b - a))


def _alignment_log_prob(log_probs: Tensor, y: list[int], blank: int) -> Tensor:
    """log sum over all monotone alignments of the token sequence ``y``.

    Forward recursion over the (T, U+1) lattice; the backward rule computes
    occupancies from an extra backward recursion and scatters them onto the
    blank / label entries of the log-prob grid.
    """
    data = log_probs.data
    t_len, u1, _ = data.shape
    u_len = u1 - 1
    y_arr = np.asarray(y, dtype=np.intp)
    lpb = data[:, :, blank]  # (T, U+1)
    lpy = data[:, np.arange(u_len), y_arr] if u_len else np.zeros((t_len, 0))  # (T, U)

    alpha = np.empty((t_len, u1))
    alpha[0, 0] = 0.0
    for u in range(1, u1):
        alpha[0, u] = alpha[0, u - 1] + lpy[0, u - 1]
    for t in range(1, t_len):
        alpha[t, 0] = alpha[t - 1, 0] + lpb[t - 1, 0]
        for u in range(1, u1):
            alpha[t, u] = _lae(alpha[t - 1, u] + lpb[t - 1, u],
                               alpha[t, u - 1] + lpy[t, u - 1])
    total = alpha[t_len - 1, u_len] + lpb[t_len - 1, u_len]

    def bwd(g):
        beta = np.empty((t_len, u1))
        beta[t_len - 1, u_len] = lpb[t_len - 1, u_len]
        for u in range(u_len - 1, -1, -1):
            beta[t_len - 1, u] = lpy[t_len - 1, u] + beta[t_len - 1, u + 1]
        for t in range(t_len - 2, -1, -1):
            beta[t, u_len] = lpb[t, u_len] + beta[t + 1, u_len]
            for u in range(u_len - 1, -1, -1):
                beta[t, u] = _lae(lpb[t, u] + beta[t + 1, u],
                                  lpy[t, u] + beta[t, u + 1])
        occ_blank = np.zeros((t_len, u1))
        if t_len > 1:
            occ_blank[:-1, :] = np.exp(alpha[:-1, :] + lpb[:-1, :] + beta[1:, :] - total)
        occ_blank[t_len - 1, u_len] = math.exp(alpha[t_len - 1, u_len]
                                               + lpb[t_len - 1, u_len] - total)
        grid = np.zeros_like(data)
        grid[:, :, blank] += occ_blank
        if u_len:
            occ_label = np.exp(alpha[:, :u_len] + lpy + beta[:, 1:] - total)
            for u, tok in enumerate(y_arr):
                grid[:, u, tok] += occ_label[:, u]
        if log_probs.grad is None:
            log_probs.grad = np.zeros_like(data)
        log_probs.grad += float(g) * grid

    return _make((log_probs,), np.asarray(total), bwd)


def rnnt_loss(logits: Tensor, y, blank: int = BLANK_ID) -> Tensor:
    """-ln P(y | x), marginalized over all monotone blank/label alignments."""
    y = [int(t) for t in y]
    if logits.ndim != 3:
        raise ShapeError(f"logits must be (T, U+1, V), got {logits.shape}")
    t_len, u1, _ = logits.shape
    if t_len < 1:
        raise ShapeError(f"no alignment exists for T=0 (U={len(y)})")
    if u1 != len(y) + 1:
        raise ShapeError(f"logits prefix axis {u1} does not match U+1={len(y) + 1}")
    lp = log_softmax(logits, axis=-1)
    return neg(_alignment_log_prob(lp, y, blank))


# ---------------------------------------------------------------------------
# beam search


class _Beam:
    __slots__ = ("merged_lp", "path_lp", "frames", "states", "proj")

    def __init__(self, merged_lp, path_lp, frames, states, proj):
        self.merged_lp = merged_lp
        self.path_lp = path_lp
        self.frames = frames
        self.states = states
        self.proj = proj


def _log_softmax_row(row: np.ndarray) -> np.ndarray:
    m = row.max()
    s = row - m
    return s - math.log(np.exp(s).sum())


def _softmax_row(row: np.ndarray) -> np.ndarray:
    m = row.max()
    e = np.exp(row - m)
    return e / e.sum()


def rnnt_beam_decode(model: RnntModel, x, beam_width: int,
                     max_symbols_per_frame: int = 8) -> NBest:
    """Breadth-first per-frame beam search with prefix merging.

    Within a frame, each expansion step ranks all (hypothesis, transition)
    candidates globally and keeps the top ``beam_width``; blank transitions
    retire a hypothesis to the next frame (merging duplicate prefixes by
    log-sum), label transitions re-enter the frontier. With beam_width=1 this
    reduces exactly to greedy decoding. Ties break on lexicographic token
    order. Returned hypotheses carry posteriors and lattice transition
    probabilities from a rescoring pass over the decoded prefix.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    x_arr = np.asarray(x, dtype=np.float64)
    if x_arr.ndim != 2 or x_arr.shape[0] < 1:
        raise DecodeError(f"cannot decode empty audio, got shape {x_arr.shape}")

    with no_grad():
        h_e = model.encoder(Tensor(x_arr))
        enc_proj = model.enc_proj(h_e).data  # (T, J)
        h0, st0 = model.pred_rnn.step(model.embedding([BLANK_ID]),
                                      model.pred_rnn.init_state())
        proj0 = model.pred_proj(h0).data[0]

    w_out = model.out_proj.w.data
    b_out = model.out_proj.b.data
    t_total = x_arr.shape[0]
    # the transducer's label space is the vocabulary minus blank; the end
    # symbol is reserved for the attention decoder and never emitted here
    labels = [k for k in range(model.vocab_size) if k not in (BLANK_ID, EOS_ID)]

    def node_log_probs(t: int, proj: np.ndarray) -> np.ndarray:
        return _log_softmax_row(np.tanh(enc_proj[t] + proj) @ w_out + b_out)

    def extend(beam: _Beam, tok: int):
        with no_grad():
            h, st = model.pred_rnn.step(model.embedding([tok]), beam.states)
            return st, model.pred_proj(h).data[0]

    active: dict[tuple, _Beam] = {(): _Beam(0.0, 0.0, (), st0, proj0)}
    for t in range(t_total):
        finished: dict[tuple, _Beam] = {}
        frontier = active
        for step in range(max_symbols_per_frame + 1):
            if not frontier:
                break
            labels_allowed = step < max_symbols_per_frame
            cands = []  # (score, result prefix, token or -1 for blank, beam, lps)
            for prefix in sorted(frontier):
                bm = frontier[prefix]
                lps = node_log_probs(t, bm.proj)
                cands.append((bm.merged_lp + lps[BLANK_ID], prefix, -1, bm, lps))
                if labels_allowed:
                    for k in labels:
                        cands.append((bm.merged_lp + lps[k], prefix + (k,), k, bm, lps))
            cands.sort(key=lambda c: (-c[0], c[1]))
            new_frontier: dict[tuple, _Beam] = {}
            for score, prefix, tok, bm, lps in cands[:beam_width]:
                if tok < 0:
                    path = bm.path_lp + lps[BLANK_ID]
                    old = finished.get(prefix)
                    if old is None:
                        finished[prefix] = _Beam(score, path, bm.frames, bm.states, bm.proj)
                    else:
                        old.merged_lp = np.logaddexp(old.merged_lp, score)
                        if path > old.path_lp:
                            old.path_lp = path
                            old.frames = bm.frames
                else:
                    st, proj = extend(bm, tok)
                    new_frontier[prefix] = _Beam(score, bm.path_lp + lps[tok],
                                                 bm.frames + (t,), st, proj)
            frontier = new_frontier
            if len(finished) >= beam_width and frontier:
                worst_kept = sorted(finished.values(),
                                    key=lambda b: -b.merged_lp)[beam_width - 1].merged_lp
                if max(b.merged_lp for b in frontier.values()) <= worst_kept:
                    break
        ranked = sorted(finished.items(), key=lambda kv: (-kv[1].merged_lp, kv[0]))
        active = dict(ranked[:beam_width])

    ranked = sorted(active.items(), key=lambda kv: (-kv[1].merged_lp, kv[0]))
    hyps = [_finalize(model, x_arr, prefix, bm) for prefix, bm in ranked[:beam_width]]
    return NBest(hypotheses=hyps, beam_width=beam_width)


def _finalize(model: RnntModel, x: np.ndarray, prefix: tuple, bm: _Beam) -> Hypothesis:
    u_len = len(prefix)
    t_len = x.shape[0]
    with no_grad():
        logits = rnnt_forward(model, x, list(prefix)).logits.data
    posts = np.zeros((u_len, model.vocab_size))
    trans = np.zeros((u_len, t_len))
    for u in range(u_len):
        posts[u] = _softmax_row(logits[bm.frames[u], u])
        for t in range(t_len):
            trans[u, t] = _softmax_row(logits[t, u])[prefix[u]]
    return Hypothesis(
        tokens=prefix,
        log_prob=float(bm.merged_lp),
        token_posteriors=posts,
        lattice_transitions=trans,
        selected_frames=bm.frames,
    )
