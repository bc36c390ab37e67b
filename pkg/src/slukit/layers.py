"""Shared neural building blocks: parameter containers, RNN cells, attention.

Recurrences are unrolled step by step on the tape (no fused kernels), which
keeps every backward rule elementary and testable.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    embedding,
    layer_norm,
    matmul,
    relu,
    softmax,
    tanh,
    transpose,
)

__all__ = [
    "Module",
    "uniform_param",
    "Linear",
    "Embedding",
    "RnnCell",
    "RnnStack",
    "BiRnnStack",
    "AdditiveAttention",
    "SelfAttention",
    "CrossAttention",
    "FeedForward",
    "LayerNorm",
    "sinusoid_table",
]


class Module:
    """Minimal parameter container.

    Walks instance attributes for Tensors with requires_grad and nested
    Modules (also inside lists) to build a flat name -> Tensor map. Attribute
    insertion order makes the walk deterministic.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[f"{prefix}{name}"] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{prefix}{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def uniform_param(rng: np.random.Generator, shape, scale: float | None = None) -> Tensor:
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        scale = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        self.w = uniform_param(rng, (n_in, n_out))
        self.b = uniform_param(rng, (n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, rng, vocab: int, dim: int):
        self.table = uniform_param(rng, (vocab, dim), scale=0.5)

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids) -> Tensor:
        return embedding(self.table, np.asarray(ids, dtype=np.intp))


class RnnCell(Module):
    """Vanilla tanh recurrence: h' = tanh(x W_x + h W_h + b)."""

    def __init__(self, rng, n_in: int, n_hidden: int):
        self.n_hidden = n_hidden
        self.w_x = uniform_param(rng, (n_in, n_hidden))
        self.w_h = uniform_param(rng, (n_hidden, n_hidden))
        self.b = uniform_param(rng, (n_hidden,))

    def init_state(self) -> Tensor:
        return Tensor(np.zeros((1, self.n_hidden)))

    def step(self, x_row: Tensor, h: Tensor) -> Tensor:
        return tanh(matmul(x_row, self.w_x) + matmul(h, self.w_h) + self.b)


class RnnStack(Module):
    """Stacked unidirectional tanh-RNN layers, unrolled over the tape."""

    def __init__(self, rng, n_in: int, n_hidden: int, n_layers: int):
        dims = [n_in] + [n_hidden] * n_layers
        self.cells = [RnnCell(rng, dims[i], dims[i + 1]) for i in range(n_layers)]

    def init_state(self) -> list[Tensor]:
        return [c.init_state() for c in self.cells]

    def step(self, x_row: Tensor, states: list[Tensor]):
        new_states = []
        h = x_row
        for cell, s in zip(self.cells, states):
            h = cell.step(h, s)
            new_states.append(h)
        return h, new_states

    def __call__(self, x: Tensor) -> Tensor:
        """Run over all rows of x (T, n_in), return stacked top states (T, n_hidden)."""
        states = self.init_state()
        rows = []
        for t in range(x.shape[0]):
            h, states = self.step(x[t : t + 1], states)
            rows.append(h)
        return concat(rows, axis=0)


class BiRnnStack(Module):
    """Stacked bidirectional layers; output dim is 2*n_hidden per layer."""

    def __init__(self, rng, n_in: int, n_hidden: int, n_layers: int):
        self.fwd = []
        self.bwd = []
        dim = n_in
        for _ in range(n_layers):
            self.fwd.append(RnnStack(rng, dim, n_hidden, 1))
            self.bwd.append(RnnStack(rng, dim, n_hidden, 1))
            dim = 2 * n_hidden
        self.out_dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for f, b in zip(self.fwd, self.bwd):
            hf = f(h)
            hb = b(h[::-1])[::-1]
            h = concat([hf, hb], axis=1)
        return h


class AdditiveAttention(Module):
    """Multi-head additive attention; context is per-head contexts concatenated."""

    def __init__(self, rng, enc_dim: int, query_dim: int, att_dim: int, heads: int):
        self.heads = heads
        self.enc_dim = enc_dim
        self.w_enc = [uniform_param(rng, (enc_dim, att_dim)) for _ in range(heads)]
        self.w_query = [uniform_param(rng, (query_dim, att_dim)) for _ in range(heads)]
        self.b = [uniform_param(rng, (att_dim,)) for _ in range(heads)]
        self.v = [uniform_param(rng, (att_dim, 1)) for _ in range(heads)]
        self.context_dim = heads * enc_dim

    def __call__(self, enc: Tensor, query: Tensor, return_weights: bool = False):
        """enc: (T, enc_dim), query: (1, query_dim) -> context (1, heads*enc_dim)."""
        contexts = []
        weights = []
        for h in range(self.heads):
            scores = matmul(
                tanh(matmul(enc, self.w_enc[h]) + matmul(query, self.w_query[h]) + self.b[h]),
                self.v[h],
            )  # (T, 1)
            alpha = softmax(scores, axis=0)
            contexts.append(matmul(transpose(alpha), enc))
            weights.append(alpha)
        ctx = concat(contexts, axis=1)
        if return_weights:
            return ctx, weights
        return ctx


def _scaled_dot(q: Tensor, k: Tensor, v: Tensor, return_weights: bool):
    dk = q.shape[1]
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(dk))
    attn = softmax(scores, axis=1)
    out = matmul(attn, v)
    return (out, attn) if return_weights else (out, None)


class SelfAttention(Module):
    def __init__(self, rng, d_model: int, heads: int):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        dh = d_model // heads
        self.heads = heads
        self.w_q = [uniform_param(rng, (d_model, dh)) for _ in range(heads)]
        self.w_k = [uniform_param(rng, (d_model, dh)) for _ in range(heads)]
        self.w_v = [uniform_param(rng, (d_model, dh)) for _ in range(heads)]
        self.w_o = uniform_param(rng, (d_model, d_model))

    def __call__(self, x: Tensor, return_weights: bool = False):
        outs, weights = [], []
        for h in range(self.heads):
            q = matmul(x, self.w_q[h])
            k = matmul(x, self.w_k[h])
            v = matmul(x, self.w_v[h])
            o, w = _scaled_dot(q, k, v, return_weights)
            outs.append(o)
            if return_weights:
                weights.append(w)
        out = matmul(concat(outs, axis=1), self.w_o)
        if return_weights:
            return out, weights
        return out


class CrossAttention(Module):
    def __init__(self, rng, d_model: int, mem_dim: int, heads: int):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        dh = d_model // heads
        self.heads = heads
        self.w_q = [uniform_param(rng, (d_model, dh)) for _ in range(heads)]
        self.w_k = [uniform_param(rng, (mem_dim, dh)) for _ in range(heads)]
        self.w_v = [uniform_param(rng, (mem_dim, dh)) for _ in range(heads)]
        self.w_o = uniform_param(rng, (d_model, d_model))

    def __call__(self, x: Tensor, memory: Tensor, return_weights: bool = False):
        outs, weights = [], []
        for h in range(self.heads):
            q = matmul(x, self.w_q[h])
            k = matmul(memory, self.w_k[h])
            v = matmul(memory, self.w_v[h])
            o, w = _scaled_dot(q, k, v, return_weights)
            outs.append(o)
            if return_weights:
                weights.append(w)
        out = matmul(concat(outs, axis=1), self.w_o)
        if return_weights:
            return out, weights
        return out


class FeedForward(Module):
    def __init__(self, rng, d_model: int, d_ff: int):
        self.lin1 = Linear(rng, d_model, d_ff)
        self.lin2 = Linear(rng, d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    """Standard sinusoidal position table, (max_len, d), constant."""
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float64)
