"""Transformer NLU over interface outputs: self-attention stack, optional
cross-attention over auxiliary audio representations, per-token slot head,
max-pooled intent and domain heads.

A learned start row is always prepended, so intent and domain are predicted
even when the interface delivers an empty sequence. Sinusoidal positions are
added to the input rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, concat, max_pool, relu, reshape
from .interfaces import InterfaceOutput
from .layers import (
    CrossAttention,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    SelfAttention,
    sinusoid_table,
    uniform_param,
)

__all__ = ["NluInputError", "TnluConfig", "TnluModel", "NluPrediction",
           "tnlu_forward", "nlu_predict"]


class NluInputError(ValueError):
    pass


@dataclass
class TnluConfig:
    slot_count: int
    intent_count: int
    domain_count: int
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    d_ff: int = 128
    max_len: int = 256
    input_kind: str = "discrete"  # "discrete" | "continuous"
    vocab_size: int = 0           # discrete input
    input_dim: int = 0            # continuous input
    cross_attend: bool = False
    cross_dim: int = 0

    def validate(self):
        if self.input_kind not in ("discrete", "continuous"):
            raise ValueError(f"input_kind must be discrete|continuous, got {self.input_kind!r}")
        if self.input_kind == "discrete" and self.vocab_size < 1:
            raise ValueError("discrete input needs vocab_size >= 1")
        if self.input_kind == "continuous" and self.input_dim < 1:
            raise ValueError("continuous input needs input_dim >= 1")
        if self.cross_attend and self.cross_dim < 1:
            raise ValueError("cross attention needs cross_dim >= 1")


class TnluLayer(Module):
    def __init__(self, rng, cfg: TnluConfig):
        d = cfg.d_model
        self.self_attn = SelfAttention(rng, d, cfg.heads)
        self.ln1 = LayerNorm(d)
        if cfg.cross_attend:
            self.cross_attn = CrossAttention(rng, d, cfg.cross_dim, cfg.heads)
            self.ln_cross = LayerNorm(d)
        else:
            self.cross_attn = None
            self.ln_cross = None
        self.ffn = FeedForward(rng, d, cfg.d_ff)
        self.ln2 = LayerNorm(d)

    def __call__(self, x: Tensor, memory: Tensor | None, collect=None) -> Tensor:
        sa, w_self = self.self_attn(x, return_weights=True)
        if collect is not None:
            collect["self"].extend(w_self)
        x = self.ln1(x + sa)
        if self.cross_attn is not None:
            ca, w_cross = self.cross_attn(x, memory, return_weights=True)
            if collect is not None:
                collect["cross"].extend(w_cross)
            x = self.ln_cross(x + ca)
        return self.ln2(x + self.ffn(x))


class TnluModel(Module):
    def __init__(self, rng, cfg: TnluConfig):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        if cfg.input_kind == "discrete":
            self.token_emb = Embedding(rng, cfg.vocab_size, d)
        else:
            self.in_proj = Linear(rng, cfg.input_dim, d)
        self.start = uniform_param(rng, (1, d), scale=0.5)
        self.positions = sinusoid_table(cfg.max_len, d)
        self.blocks = [TnluLayer(rng, cfg) for _ in range(cfg.layers)]
        self.slot_head = Linear(rng, d, cfg.slot_count)
        self.intent_hidden = Linear(rng, d, d)
        self.intent_out = Linear(rng, d, cfg.intent_count)
        self.domain_hidden = Linear(rng, d, d)
        self.domain_out = Linear(rng, d, cfg.domain_count)


@dataclass
class NluPrediction:
    slot_logits: Tensor    # (U, |S|)
    intent_logits: Tensor  # (|I|,)
    domain_logits: Tensor  # (|D|,)
    attention: dict | None = None  # {"self": [...], "cross": [...]} when collected


def tnlu_forward(model: TnluModel, io: InterfaceOutput,
                 collect_attention: bool = False) -> NluPrediction:
    """Run the NLU over one interface output."""
    cfg = model.cfg
    if io.h_i is not None and not cfg.cross_attend:
        raise NluInputError("interface delivered audio representations but this "
                            "NLU has no cross-attention stack")
    if cfg.cross_attend and io.h_i is None:
        raise NluInputError("cross-attending NLU needs audio representations")
    if cfg.cross_attend and io.h_i.shape[-1] != cfg.cross_dim:
        raise ShapeError(f"audio representation dim {io.h_i.shape} does not match "
                         f"cross_dim {cfg.cross_dim}")

    if isinstance(io.v, Tensor):
        if cfg.input_kind != "continuous":
            raise NluInputError("continuous interface output fed to a discrete-input NLU")
        if io.v.shape[-1] != cfg.input_dim:
            raise ShapeError(f"continuous input dim {io.v.shape} does not match "
                             f"input_dim {cfg.input_dim}")
        rows = model.in_proj(io.v)
        u_len = io.v.shape[0]
    else:
        if cfg.input_kind != "discrete":
            raise NluInputError("discrete interface output fed to a continuous-input NLU")
        ids = np.asarray(list(io.v), dtype=np.intp)
        rows = model.token_emb(ids)
        u_len = len(ids)

    n = u_len + 1
    if n > cfg.max_len:
        raise ShapeError(f"sequence length {n} exceeds positional table {cfg.max_len}")
    x = concat([model.start, rows], axis=0) + Tensor(model.positions[:n])
    collect = {"self": [], "cross": []} if collect_attention else None
    for block in model.blocks:
        x = block(x, io.h_i, collect)

    slot_logits = model.slot_head(x[1:])
    pooled = reshape(max_pool(x, axis=0), (1, cfg.d_model))
    intent_logits = reshape(model.intent_out(relu(model.intent_hidden(pooled))),
                            (cfg.intent_count,))
    domain_logits = reshape(model.domain_out(relu(model.domain_hidden(pooled))),
                            (cfg.domain_count,))
    return NluPrediction(slot_logits=slot_logits, intent_logits=intent_logits,
                         domain_logits=domain_logits, attention=collect)


def nlu_predict(pred: NluPrediction):
    """Argmax decode of all heads; ties go to the smallest label index."""
    slots = [int(i) for i in pred.slot_logits.data.argmax(axis=-1)] \
        if pred.slot_logits.shape[0] else []
    return slots, int(pred.intent_logits.data.argmax()), int(pred.domain_logits.data.argmax())
