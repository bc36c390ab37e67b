"""Training objectives: MLE losses for ASR and NLU, the multi-task sum, and
the n-best sequence loss whose gradient is sum_c M(c) * grad p_bar(c) with
candidate probabilities renormalized over the n-best list.

The sequence loss is realized by backward through the differentiable
surrogate sum_c M(c) * p_bar(c) with the metric costs treated as constants.
A candidate's log-probability is the joint score of its transcript under the
ASR (the transducer's full alignment marginal, or the attention decoder's
teacher-forced token+end log-probs) plus the NLU's log-probability of the
candidate's own predicted labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, backward, concat, exp, log_softmax, mul, neg, reshape, take, tsum
from .data import LabelMaps, Tokenizer, token_tags_for_words, tags_to_slots, word_tags
from .decoding import Hypothesis, NBest
from .interfaces import AsrExposure, InterfaceOutput, build_interface_output, expose_asr
from .las import LasModel, las_forward
from .metrics import SluAnnotation, levenshtein_align, semer, slu_f1, wer
from .nlu import NluPrediction, TnluModel, nlu_predict, tnlu_forward
from .rnnt import RnntModel, rnnt_forward, rnnt_loss

__all__ = [
    "asr_mle_loss",
    "nlu_loss",
    "multitask_loss",
    "sequence_loss_surrogate",
    "sequence_loss_grad",
    "make_cost",
    "COST_METRICS",
    "SluContext",
    "SluCandidate",
    "run_candidate_through_nlu",
    "asr_sequence_log_prob",
    "nlu_label_log_prob",
    "aligned_word_tags",
    "candidate_nlu_targets",
]


def asr_mle_loss(model, x, y) -> Tensor:
    """-ln P(y | x): transducer marginal, or teacher-forced token log-probs.

    Scores exactly the tokens given; for the attention decoder the caller
    appends the end symbol to targets when training for decodability.
    """
    y = [int(t) for t in y]
    if isinstance(model, RnntModel):
        out = rnnt_forward(model, x, y)
        return rnnt_loss(out.logits, y)
    if isinstance(model, LasModel):
        out = las_forward(model, x, y)
        lp = log_softmax(out.logits, axis=-1)
        return neg(tsum(take(lp, (np.arange(len(y)), np.asarray(y)))))
    raise TypeError(f"unknown ASR model type {type(model).__name__}")


def nlu_loss(pred: NluPrediction, slot_ids, intent_id: int, domain_id: int) -> Tensor:
    """Summed cross-entropies: one per slot token, one intent, one domain."""
    slot_ids = [int(s) for s in slot_ids]
    u_len = pred.slot_logits.shape[0]
    if len(slot_ids) != u_len:
        raise ShapeError(f"{len(slot_ids)} slot targets for {u_len} slot logit rows")
    loss = neg(log_softmax(pred.intent_logits, axis=0)[int(intent_id)])
    loss = loss + neg(log_softmax(pred.domain_logits, axis=0)[int(domain_id)])
    if u_len:
        lp = log_softmax(pred.slot_logits, axis=-1)
        loss = loss + neg(tsum(take(lp, (np.arange(u_len), np.asarray(slot_ids)))))
    return loss


def multitask_loss(l_asr: Tensor, l_nlu: Tensor) -> Tensor:
    return l_asr + l_nlu


def sequence_loss_surrogate(costs, log_probs) -> Tensor:
    """sum_c M(c) * p_bar(c) with p_bar the softmax of candidate log-probs.

    Costs are constants; backward through this accumulates exactly
    sum_c M(c) * grad p_bar(c; theta).
    """
    log_probs = list(log_probs)
    if not log_probs:
        raise ValueError("sequence loss needs a non-empty candidate list")
    costs = np.asarray([float(c) for c in costs])
    if costs.shape[0] != len(log_probs):
        raise ShapeError(f"{costs.shape[0]} costs for {len(log_probs)} candidates")
    if not np.all(np.isfinite(costs)):
        raise ValueError(f"costs must be finite, got {costs.tolist()}")
    vec = concat([reshape(lp, (1,)) for lp in log_probs], axis=0)
    p_bar = exp(log_softmax(vec, axis=0))
    return tsum(mul(p_bar, Tensor(costs)))


def sequence_loss_grad(nbest: NBest, costs, candidate_log_probs) -> None:
    """Accumulate the n-best sequence-loss gradient into parameter grads."""
    if len(nbest) < 1:
        raise ValueError("sequence loss needs a non-empty n-best list")
    backward(sequence_loss_surrogate(costs, candidate_log_probs))


# ---------------------------------------------------------------------------
# metric costs


def _wer_cost(ref: SluAnnotation, hyp: SluAnnotation) -> float:
    return wer(ref.transcript, hyp.transcript)[0]


def _semer_cost(ref: SluAnnotation, hyp: SluAnnotation) -> float:
    return semer(ref, hyp)[0]


def _slu_f1_cost(ref: SluAnnotation, hyp: SluAnnotation) -> float:
    return 1.0 - slu_f1(ref, hyp)[0]


COST_METRICS = {"wer": _wer_cost, "semer": _semer_cost, "slu_f1": _slu_f1_cost}


def make_cost(name: str):
    """Cost function M(candidate, reference) >= 0 with M(c*, c*) == 0."""
    try:
        return COST_METRICS[name]
    except KeyError:
        raise ValueError(f"unknown cost metric {name!r}; expected one of "
                         f"{sorted(COST_METRICS)}") from None


# ---------------------------------------------------------------------------
# candidate pipeline


@dataclass
class SluContext:
    """Models, tokenizers and label maps needed to run candidates end to end."""

    asr_model: object
    nlu_model: TnluModel
    interface_kind: str
    asr_tokenizer: Tokenizer
    nlu_tokenizer: Tokenizer
    labels: LabelMaps


@dataclass
class SluCandidate:
    hypothesis: Hypothesis
    annotation: SluAnnotation
    log_prob: Tensor  # scalar, differentiable
    prediction: NluPrediction
    io: InterfaceOutput
    exposure: AsrExposure


def asr_sequence_log_prob(exposure: AsrExposure) -> Tensor:
    """Differentiable ln P(hypothesis tokens | x) from the exposure's
    rescoring pass: the transducer's alignment marginal, or the attention
    decoder's teacher-forced token + end-symbol log-probs."""
    tokens = list(exposure.hypothesis.tokens)
    if exposure.kind == "rnnt":
        return neg(rnnt_loss(exposure.joint_logits, tokens))
    from .las import EOS_ID

    targets = np.asarray(tokens + [EOS_ID])
    n = len(targets)
    return tsum(take(exposure.step_log_probs, (np.arange(n), targets)))


def nlu_label_log_prob(pred: NluPrediction, slot_ids, intent_id: int) -> Tensor:
    """Differentiable ln P(slot tags, intent) under the NLU's heads."""
    lp = log_softmax(pred.intent_logits, axis=0)[int(intent_id)]
    if slot_ids:
        rows = log_softmax(pred.slot_logits, axis=-1)
        lp = lp + tsum(take(rows, (np.arange(len(slot_ids)), np.asarray(slot_ids))))
    return lp


def _nlu_units(ctx: SluContext, hyp: Hypothesis, io: InterfaceOutput):
    """The surface units the slot tags index, and their tokenizer mode."""
    if isinstance(io.v, Tensor):  # continuous: one unit per ASR token
        units = [ctx.asr_tokenizer.vocab[t] for t in hyp.tokens]
        return units, ctx.asr_tokenizer.mode
    units = [ctx.nlu_tokenizer.vocab[i] for i in io.v]
    return units, ctx.nlu_tokenizer.mode


def run_candidate_through_nlu(ctx: SluContext, x, hyp: Hypothesis) -> SluCandidate:
    """Decode one hypothesis into a full SLU candidate.

    Builds the exposure (rescoring pass on the ambient tape), runs the
    interface and the NLU, argmax-decodes the labels, reconstructs the slot
    spans, and attaches the differentiable joint log-probability of the
    candidate's transcript and predicted labels.
    """
    exposure = expose_asr(ctx.asr_model, x, hyp)
    io = build_interface_output(ctx.interface_kind, exposure, ctx.asr_model,
                                ctx.asr_tokenizer, ctx.nlu_tokenizer)
    pred = tnlu_forward(ctx.nlu_model, io)
    slot_ids, intent_id, domain_id = nlu_predict(pred)

    units, mode = _nlu_units(ctx, hyp, io)
    tags = [ctx.labels.tags[i] for i in slot_ids]
    slots = tags_to_slots(units, tags, mode=mode)
    words = tuple(ctx.asr_tokenizer.detokenize(hyp.tokens).split())
    annotation = SluAnnotation.make(words, slots,
                                    intent=ctx.labels.intents[intent_id],
                                    domain=ctx.labels.domains[domain_id])
    log_prob = asr_sequence_log_prob(exposure) + nlu_label_log_prob(pred, slot_ids, intent_id)
    return SluCandidate(hypothesis=hyp, annotation=annotation, log_prob=log_prob,
                        prediction=pred, io=io, exposure=exposure)


# ---------------------------------------------------------------------------
# slot targets on hypothesis tokens


def aligned_word_tags(ref: SluAnnotation, hyp_words) -> list[str]:
    """Edit-align hypothesis words to the reference; matched and substituted
    words inherit the reference word's tag, inserted words get "O"."""
    ref_tags = word_tags(ref)
    _, ops = levenshtein_align(list(ref.transcript), list(hyp_words))
    tags = []
    for op, i, j in ops:
        if op in ("match", "sub"):
            tags.append(ref_tags[i])
        elif op == "ins":
            tags.append("O")
    return tags


def candidate_nlu_targets(ctx: SluContext, ref: SluAnnotation, hyp: Hypothesis,
                          io: InterfaceOutput):
    """(slot tag ids, intent id, domain id) for training the NLU on a decoded
    hypothesis under the configured interface."""
    units, mode = _nlu_units(ctx, hyp, io)
    hyp_words = ctx.asr_tokenizer.detokenize(hyp.tokens).split()
    wtags = aligned_word_tags(ref, hyp_words)
    token_tags = token_tags_for_words(hyp_words, wtags, mode=mode)
    if len(token_tags) != len(units):
        raise ShapeError(f"{len(token_tags)} tags for {len(units)} NLU units")
    tag_ids = [ctx.labels.tag_id(t) for t in token_tags]
    return tag_ids, ctx.labels.intent_id(ref.intent), ctx.labels.domain_id(ref.domain)
