"""ASR-to-NLU interfaces: the pair (v, h_i) handed from a decoded hypothesis
and the ASR's exposed hidden representations to the NLU.

Five kinds:

* ``text``            - one-best tokens, detokenized and retokenized with the
                        NLU tokenizer; not differentiable.
* ``tied_embedding``  - one-best tokens looked up in the ASR's own input
                        embedding table (the very same parameter tensor).
* ``posterior``       - the full output distribution at each emitting step.
* ``hidden``          - per-token ASR hidden states: the attention decoder's
                        hidden rows, or for the transducer the joint-network
                        hidden vector at the frame with the maximum label
                        transition probability out of the previous prefix row
                        (argmax ties break toward the smallest frame; the
                        argmax indices are constants, gradient flows through
                        the selected entries only).
* ``audio_attention`` - one-best tokens plus the encoder states h_e for the
                        NLU to cross-attend.

Exposures are built from a rescoring forward pass conditioned on the decoded
tokens, so their values match the hypothesis' decode-time fields bit for bit
while living on the caller's tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, log_softmax, softmax, take
from .data import Tokenizer
from .decoding import Hypothesis
from .las import EOS_ID, LasModel, las_forward
from .rnnt import RnntModel, rnnt_forward

__all__ = [
    "INTERFACE_KINDS",
    "InterfaceError",
    "AsrExposure",
    "InterfaceOutput",
    "expose_asr",
    "expose_rnnt",
    "expose_las",
    "text_interface",
    "tied_embedding_interface",
    "posterior_interface",
    "hidden_interface_rnnt",
    "hidden_interface_las",
    "audio_attention_interface",
    "build_interface_output",
]

INTERFACE_KINDS = ("text", "tied_embedding", "posterior", "hidden", "audio_attention")


class InterfaceError(ValueError):
    pass


@dataclass
class AsrExposure:
    """Hidden representations exposed by one ASR forward over a hypothesis.

    The transducer exposes {h_e, h_p, h_j}; the attention decoder exposes
    {h_e, h_d}. ``posteriors`` holds the differentiable (U, V) rows matching
    ``hypothesis.token_posteriors``; ``joint_logits`` (transducer) and
    ``step_log_probs`` (attention decoder, over tokens + end symbol) support
    rescoring the hypothesis' own sequence log-probability on the tape.
    """

    kind: str  # "rnnt" | "las"
    h_e: Tensor
    hypothesis: Hypothesis
    h_p: Tensor | None = None
    h_j: Tensor | None = None
    h_d: Tensor | None = None
    posteriors: Tensor | None = None
    joint_logits: Tensor | None = None
    step_log_probs: Tensor | None = None


@dataclass
class InterfaceOutput:
    """The (v, h_i) pair: a U-length discrete or continuous sequence plus
    optional auxiliary representations, and whether NLU gradients reach the
    ASR through them."""

    v: object  # list[int] for discrete interfaces, (U, d) Tensor otherwise
    h_i: Tensor | None
    differentiable: bool

    def __len__(self):
        return len(self.v) if not isinstance(self.v, Tensor) else self.v.shape[0]


def expose_rnnt(model: RnntModel, x, hyp: Hypothesis) -> AsrExposure:
    out = rnnt_forward(model, x, list(hyp.tokens))
    u_len = len(hyp.tokens)
    if u_len:
        if hyp.selected_frames is None:
            raise InterfaceError("hypothesis lacks selected frames for posterior rows")
        frames = np.asarray(hyp.selected_frames, dtype=np.intp)
        rows = take(out.logits, (frames, np.arange(u_len)))
        posteriors = softmax(rows, axis=-1)
    else:
        posteriors = Tensor(np.zeros((0, model.vocab_size)))
    return AsrExposure(kind="rnnt", h_e=out.h_e, h_p=out.h_p, h_j=out.h_j,
                       hypothesis=hyp, posteriors=posteriors, joint_logits=out.logits)


def expose_las(model: LasModel, x, hyp: Hypothesis) -> AsrExposure:
    u_len = len(hyp.tokens)
    # rescoring includes the end symbol so the sequence log-prob is proper;
    # rows for the U real tokens are unaffected (the unroll is causal).
    out = las_forward(model, x, list(hyp.tokens) + [EOS_ID])
    h_d = out.h_d[:u_len]
    posteriors = out.posteriors[:u_len]
    return AsrExposure(kind="las", h_e=out.h_e, h_d=h_d, hypothesis=hyp,
                       posteriors=posteriors,
                       step_log_probs=log_softmax(out.logits, axis=-1))


def expose_asr(model, x, hyp: Hypothesis) -> AsrExposure:
    if isinstance(model, RnntModel):
        return expose_rnnt(model, x, hyp)
    if isinstance(model, LasModel):
        return expose_las(model, x, hyp)
    raise InterfaceError(f"unknown ASR model type {type(model).__name__}")


def text_interface(exposure: AsrExposure, asr_tokenizer: Tokenizer,
                   nlu_tokenizer: Tokenizer) -> InterfaceOutput:
    """One-best tokens as text, retokenized for the NLU (possibly a different
    vocabulary). No gradient path."""
    text = asr_tokenizer.detokenize(exposure.hypothesis.tokens)
    return InterfaceOutput(v=nlu_tokenizer.tokenize(text), h_i=None, differentiable=False)


def tied_embedding_interface(exposure: AsrExposure, emb) -> InterfaceOutput:
    """One-best tokens through the ASR's own input embedding table, so the
    same parameter tensor is consumed by both models."""
    v = emb(list(exposure.hypothesis.tokens))
    return InterfaceOutput(v=v, h_i=None, differentiable=True)


def posterior_interface(exposure: AsrExposure) -> InterfaceOutput:
    """Full per-token output distributions at the emitting steps."""
    if exposure.posteriors is None:
        raise InterfaceError("exposure carries no posterior rows")
    if exposure.hypothesis.token_posteriors is None:
        raise InterfaceError("hypothesis carries no token posteriors")
    return InterfaceOutput(v=exposure.posteriors, h_i=None, differentiable=True)


def hidden_interface_las(exposure: AsrExposure) -> InterfaceOutput:
    """Per-token decoder hidden rows, used directly."""
    if exposure.kind != "las":
        raise InterfaceError(f"hidden_interface_las on {exposure.kind} exposure")
    return InterfaceOutput(v=exposure.h_d, h_i=None, differentiable=True)


def hidden_interface_rnnt(exposure: AsrExposure) -> InterfaceOutput:
    """Joint-network hidden rows selected by maximum label transition.

    For token u the frame is i_u = argmax_t P(w_u | t, u-1) over the
    hypothesis' lattice transition matrix (ties toward the smallest t), and v_u
    is the joint hidden vector at (i_u, prefix row u-1). The indices are
    constants; gradient flows only through the selected grid entries.
    """
    if exposure.kind != "rnnt":
        raise InterfaceError(f"hidden_interface_rnnt on {exposure.kind} exposure")
    hyp = exposure.hypothesis
    if hyp.lattice_transitions is None:
        raise InterfaceError("hypothesis carries no lattice transition probabilities")
    u_len = len(hyp.tokens)
    if u_len:
        frames = hyp.lattice_transitions.argmax(axis=1)
        v = take(exposure.h_j, (frames, np.arange(u_len)))
    else:
        v = Tensor(np.zeros((0, exposure.h_j.shape[-1])))
    return InterfaceOutput(v=v, h_i=None, differentiable=True)


def audio_attention_interface(exposure: AsrExposure, asr_tokenizer: Tokenizer,
                              nlu_tokenizer: Tokenizer) -> InterfaceOutput:
    """One-best tokens plus encoder states for NLU cross-attention. The token
    sequence is discrete; gradients flow through h_i only."""
    text = asr_tokenizer.detokenize(exposure.hypothesis.tokens)
    return InterfaceOutput(v=nlu_tokenizer.tokenize(text), h_i=exposure.h_e,
                           differentiable=True)


def build_interface_output(kind: str, exposure: AsrExposure, asr_model,
                           asr_tokenizer: Tokenizer, nlu_tokenizer: Tokenizer) -> InterfaceOutput:
    if kind == "text":
        return text_interface(exposure, asr_tokenizer, nlu_tokenizer)
    if kind == "tied_embedding":
        return tied_embedding_interface(exposure, asr_model.embedding)
    if kind == "posterior":
        return posterior_interface(exposure)
    if kind == "hidden":
        if exposure.kind == "rnnt":
            return hidden_interface_rnnt(exposure)
        return hidden_interface_las(exposure)
    if kind == "audio_attention":
        return audio_attention_interface(exposure, asr_tokenizer, nlu_tokenizer)
    raise InterfaceError(f"unknown interface kind {kind!r}; expected one of {INTERFACE_KINDS}")
