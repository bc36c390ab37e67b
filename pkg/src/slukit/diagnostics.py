"""Finite-difference gradient suite over tiny models.

Builds desk-top instances (T <= 4) of every loss and every interface and
compares tape gradients against central differences, sampling a few
coordinates per parameter. The candidate sets, predicted labels and metric
costs are frozen before checking, matching how one optimizer step treats
them (gradients flow through the probabilities, not the argmaxes).
"""

from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, Tensor, grad_check_params, no_grad
from .data import LabelMaps, Tokenizer
from .interfaces import INTERFACE_KINDS, build_interface_output, expose_asr
from .las import EOS_ID, LasModel, las_beam_decode
from .losses import (
    SluContext,
    asr_mle_loss,
    asr_sequence_log_prob,
    make_cost,
    multitask_loss,
    nlu_label_log_prob,
    nlu_loss,
    run_candidate_through_nlu,
    sequence_loss_surrogate,
)
from .metrics import SluAnnotation
from .nlu import TnluConfig, TnluModel, tnlu_forward
from .rnnt import RnntModel, rnnt_beam_decode

__all__ = ["tiny_setup", "run_fd_suite"]

_WORDS = ["blue", "gate", "lamp", "move", "red", "stop"]
_FEAT_DIM = 4


def _tiny_labels() -> LabelMaps:
    return LabelMaps(intents=["intent_0", "intent_1"], domains=["domain_0", "domain_1"],
                     slot_types=["slot_0", "slot_1"], words=_WORDS)


def _tiny_nlu(rng, labels: LabelMaps, interface: str, tok: Tokenizer, asr) -> TnluModel:
    cfg = TnluConfig(slot_count=len(labels.tags), intent_count=len(labels.intents),
                     domain_count=len(labels.domains), d_model=8, layers=1, heads=2,
                     d_ff=16, max_len=64)
    if interface == "text":
        cfg.input_kind, cfg.vocab_size = "discrete", tok.vocab_size
    elif interface == "tied_embedding":
        cfg.input_kind, cfg.input_dim = "continuous", asr.embedding.table.shape[1]
    elif interface == "posterior":
        cfg.input_kind, cfg.input_dim = "continuous", tok.vocab_size
    elif interface == "hidden":
        dim = asr.joint_units if isinstance(asr, RnntModel) else asr.dec_units
        cfg.input_kind, cfg.input_dim = "continuous", dim
    else:  # audio_attention
        cfg.input_kind, cfg.vocab_size = "discrete", tok.vocab_size
        cfg.cross_attend = True
        cfg.cross_dim = asr.encoder.out_dim if isinstance(asr, LasModel) else 8
    return TnluModel(rng, cfg)


def tiny_setup(interface: str = "text", asr_kind: str = "rnnt", seed: int = 0,
               t_len: int = 3):
    """A tiny (ctx, x, reference annotation) triple for FD checking."""
    labels = _tiny_labels()
    tok = Tokenizer.for_words(labels.words)
    ss = np.random.SeedSequence([seed, 7])
    asr_rng, nlu_rng, x_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    if asr_kind == "rnnt":
        asr = RnntModel(asr_rng, vocab_size=tok.vocab_size, feat_dim=_FEAT_DIM,
                        enc_units=8, enc_layers=1, pred_units=8, emb_dim=6, joint_units=8)
    else:
        asr = LasModel(asr_rng, vocab_size=tok.vocab_size, feat_dim=_FEAT_DIM,
                       enc_units=4, enc_layers=1, dec_units=8, emb_dim=6,
                       att_units=6, att_heads=1)
    nlu = _tiny_nlu(nlu_rng, labels, interface, tok, asr)
    ctx = SluContext(asr_model=asr, nlu_model=nlu, interface_kind=interface,
                     asr_tokenizer=tok, nlu_tokenizer=tok, labels=labels)
    x = x_rng.normal(size=(t_len, _FEAT_DIM))
    ref_words = ("move", "red", "lamp")
    ref = SluAnnotation.make(ref_words, slots=[("slot_0", ("red", "lamp"))],
                             intent="intent_0", domain="domain_0")
    return ctx, x, ref


def _all_params(ctx: SluContext) -> dict:
    params = {f"asr.{k}": v for k, v in ctx.asr_model.named_parameters().items()}
    params.update({f"nlu.{k}": v for k, v in ctx.nlu_model.named_parameters().items()})
    return params


def _decode(ctx: SluContext, x, width: int = 3):
    if isinstance(ctx.asr_model, RnntModel):
        return rnnt_beam_decode(ctx.asr_model, x, width, max_symbols_per_frame=3)
    return las_beam_decode(ctx.asr_model, x, width, max_len=3)


def _frozen_candidates(ctx: SluContext, x, ref):
    """Decode once; freeze tokens, predicted labels and metric costs."""
    from .nlu import nlu_predict

    nbest = _decode(ctx, x)
    cost_fn = make_cost("semer")
    frozen = []
    with no_grad():
        for hyp in nbest.hypotheses:
            cand = run_candidate_through_nlu(ctx, x, hyp)
            slot_ids, intent_id, _ = nlu_predict(cand.prediction)
            frozen.append((hyp, slot_ids, intent_id, cost_fn(ref, cand.annotation)))
    return frozen


def _surrogate_loss_fn(ctx: SluContext, x, frozen):
    costs = [c for _, _, _, c in frozen]

    def loss_fn():
        lps = []
        for hyp, slot_ids, intent_id, _ in frozen:
            exposure = expose_asr(ctx.asr_model, x, hyp)
            io = build_interface_output(ctx.interface_kind, exposure, ctx.asr_model,
                                        ctx.asr_tokenizer, ctx.nlu_tokenizer)
            pred = tnlu_forward(ctx.nlu_model, io)
            lps.append(asr_sequence_log_prob(exposure)
                       + nlu_label_log_prob(pred, slot_ids, intent_id))
        return sequence_loss_surrogate(costs, lps)

    return loss_fn


def _nlu_via_interface_loss_fn(ctx: SluContext, x, hyp, tag_ids, intent_id, domain_id):
    def loss_fn():
        exposure = expose_asr(ctx.asr_model, x, hyp)
        io = build_interface_output(ctx.interface_kind, exposure, ctx.asr_model,
                                    ctx.asr_tokenizer, ctx.nlu_tokenizer)
        pred = tnlu_forward(ctx.nlu_model, io)
        return nlu_loss(pred, tag_ids, intent_id, domain_id)

    return loss_fn


def run_fd_suite(eps: float = 1e-5, rtol: float = 1e-3, coords_per_param: int = 3,
                 seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Every (loss, interface) FD check; returns (name, report) pairs."""
    results = []

    def check(name, loss_fn, params):
        report = grad_check_params(loss_fn, params, eps=eps, rtol=rtol,
                                   max_coords_per_param=coords_per_param, seed=seed)
        results.append((name, report))

    # MLE losses
    for kind in ("rnnt", "las"):
        ctx, x, _ = tiny_setup("text", kind, seed=seed)
        y = ctx.asr_tokenizer.tokenize("move red")
        check(f"asr_mle_{kind}",
              lambda a=ctx.asr_model, xx=x, yy=y: asr_mle_loss(a, xx, yy),
              {f"asr.{k}": v for k, v in ctx.asr_model.named_parameters().items()})

    # NLU loss on ground-truth text, and the multi-task sum
    ctx, x, ref = tiny_setup("text", "rnnt", seed=seed)
    ids = ctx.nlu_tokenizer.tokenize(" ".join(ref.transcript))
    from .interfaces import InterfaceOutput

    tag_ids = [ctx.labels.tag_id(t) for t in ("O", "B-slot_0", "I-slot_0")]
    io_text = InterfaceOutput(v=ids, h_i=None, differentiable=False)

    def nlu_gt_loss(c=ctx):
        pred = tnlu_forward(c.nlu_model, io_text)
        return nlu_loss(pred, tag_ids, 0, 0)

    check("nlu_mle_text", nlu_gt_loss,
          {f"nlu.{k}": v for k, v in ctx.nlu_model.named_parameters().items()})

    y = ctx.asr_tokenizer.tokenize(" ".join(ref.transcript))

    def mt_loss(c=ctx, xx=x, yy=y):
        pred = tnlu_forward(c.nlu_model, io_text)
        return multitask_loss(asr_mle_loss(c.asr_model, xx, yy),
                              nlu_loss(pred, tag_ids, 0, 0))

    check("multitask_mle", mt_loss, _all_params(ctx))

    # NLU loss through every interface (gradient reaches the ASR where the
    # interface is differentiable), and the sequence-loss surrogate
    for interface in INTERFACE_KINDS:
        ctx, x, ref = tiny_setup(interface, "rnnt", seed=seed)
        nbest = _decode(ctx, x)
        hyp = next((h for h in nbest.hypotheses if len(h.tokens)), nbest.one_best)
        from .losses import candidate_nlu_targets

        with no_grad():
            exposure = expose_asr(ctx.asr_model, x, hyp)
            io = build_interface_output(interface, exposure, ctx.asr_model,
                                        ctx.asr_tokenizer, ctx.nlu_tokenizer)
            t_ids, i_id, d_id = candidate_nlu_targets(ctx, ref, hyp, io)
        check(f"nlu_via_{interface}",
              _nlu_via_interface_loss_fn(ctx, x, hyp, t_ids, i_id, d_id),
              _all_params(ctx))
        check(f"seq_surrogate_{interface}",
              _surrogate_loss_fn(ctx, x, _frozen_candidates(ctx, x, ref)),
              _all_params(ctx))

    # the hidden interface has a second, attention-decoder flavor
    ctx, x, ref = tiny_setup("hidden", "las", seed=seed)
    check("seq_surrogate_hidden_las",
          _surrogate_loss_fn(ctx, x, _frozen_candidates(ctx, x, ref)),
          _all_params(ctx))
    return results
