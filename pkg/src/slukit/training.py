"""Training loops for every mode, evaluation, and run reporting.

Independent mode trains ASR and NLU separately with their MLE losses (the
NLU on ground-truth text) and evaluates by pipelining one-best text into the
NLU. Joint modes warm-start from an independent checkpoint (or an inline
independent phase), then per utterance: decode an n-best, run every candidate
through the configured interface and the NLU, weight metric costs by the
renormalized candidate probabilities, and step on the sequence-loss
surrogate (plus the multi-task MLE term for neural interfaces).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, no_grad
from .checkpoint import CheckpointError, assign_params, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, resolve_out_dir
from .data import (
    Corpus,
    CorpusSpec,
    LabelMaps,
    Tokenizer,
    generate_corpus,
    load_meta,
    read_dataset,
    tags_to_slots,
    token_tags_for_words,
    word_tags,
)
from .interfaces import InterfaceOutput
from .las import EOS_ID, LasModel, las_beam_decode
from .losses import (
    SluContext,
    asr_mle_loss,
    candidate_nlu_targets,
    make_cost,
    multitask_loss,
    nlu_loss,
    run_candidate_through_nlu,
    sequence_loss_surrogate,
)
from .metrics import MetricReport, SluAnnotation, evaluate_corpus
from .nlu import TnluConfig, TnluModel, nlu_predict, tnlu_forward
from .optim import SGD, Adam
from .rnnt import RnntModel, rnnt_beam_decode

__all__ = ["RunReport", "load_corpus", "build_models", "build_context",
           "train_independent", "train_joint", "run_training",
           "evaluate_models", "evaluate_checkpoint", "decode_nbest"]


@dataclass
class RunReport:
    config: dict
    epochs_ran: int
    train_losses: list = field(default_factory=list)  # one dict per epoch
    dev_history: list = field(default_factory=list)
    dev_metrics: dict | None = None
    test_metrics: dict | None = None
    wall_clock_sec: float = 0.0
    run_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "epochs_ran": self.epochs_ran,
            "train_losses": self.train_losses,
            "dev_history": self.dev_history,
            "dev_metrics": self.dev_metrics,
            "test_metrics": self.test_metrics,
            "wall_clock_sec": self.wall_clock_sec,
            "run_hash": self.run_hash,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _source_digest() -> str:
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for f in sorted(pkg.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def run_hash(cfg: RunConfig) -> str:
    h = hashlib.sha256()
    h.update(_source_digest().encode())
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# construction


def load_corpus(cfg: RunConfig):
    """(train, dev, test, labels, spec) from a data dir or an inline spec."""
    if cfg.data_dir:
        d = Path(cfg.data_dir)
        spec, labels = load_meta(d / "meta.json")
        return (read_dataset(d / "train.jsonl"), read_dataset(d / "dev.jsonl"),
                read_dataset(d / "test.jsonl"), labels, spec)
    spec = CorpusSpec.from_dict(cfg.corpus)
    corpus = generate_corpus(spec)
    return corpus.train, corpus.dev, corpus.test, corpus.labels, spec


_RNNT_DEFAULTS = dict(enc_units=64, enc_layers=2, pred_units=64, emb_dim=32, joint_units=64)
_LAS_DEFAULTS = dict(enc_units=32, enc_layers=2, dec_units=64, emb_dim=32,
                     att_units=32, att_heads=2)
_NLU_DEFAULTS = dict(d_model=64, layers=2, heads=2, d_ff=128, max_len=256)


def build_models(cfg: RunConfig, labels: LabelMaps, spec: CorpusSpec):
    """ASR + NLU models and tokenizers for one run, seeded from cfg.seed."""
    ss = np.random.SeedSequence([cfg.seed, 0x51EED])
    asr_rng, nlu_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    asr_tok = Tokenizer.for_words(labels.words)
    nlu_tok = (Tokenizer.for_words(labels.words) if cfg.nlu_tokenizer_mode == "word"
               else Tokenizer.for_chars(labels.words))

    if cfg.asr_kind == "rnnt":
        sizes = {**_RNNT_DEFAULTS, **cfg.asr}
        asr = RnntModel(asr_rng, vocab_size=asr_tok.vocab_size,
                        feat_dim=spec.feature_dim, **sizes)
        hidden_dim = sizes["joint_units"]
        enc_dim = sizes["enc_units"]
        emb_dim = sizes["emb_dim"]
    else:
        sizes = {**_LAS_DEFAULTS, **cfg.asr}
        asr = LasModel(asr_rng, vocab_size=asr_tok.vocab_size,
                       feat_dim=spec.feature_dim, **sizes)
        hidden_dim = sizes["dec_units"]
        enc_dim = asr.encoder.out_dim
        emb_dim = sizes["emb_dim"]

    nlu_sizes = {**_NLU_DEFAULTS, **cfg.nlu}
    tcfg = TnluConfig(slot_count=len(labels.tags), intent_count=len(labels.intents),
                      domain_count=len(labels.domains), **nlu_sizes)
    if cfg.interface in ("text",):
        tcfg.input_kind, tcfg.vocab_size = "discrete", nlu_tok.vocab_size
    elif cfg.interface == "tied_embedding":
        tcfg.input_kind, tcfg.input_dim = "continuous", emb_dim
    elif cfg.interface == "posterior":
        tcfg.input_kind, tcfg.input_dim = "continuous", asr_tok.vocab_size
    elif cfg.interface == "hidden":
        tcfg.input_kind, tcfg.input_dim = "continuous", hidden_dim
    else:  # audio_attention
        tcfg.input_kind, tcfg.vocab_size = "discrete", nlu_tok.vocab_size
        tcfg.cross_attend, tcfg.cross_dim = True, enc_dim
    nlu = TnluModel(nlu_rng, tcfg)
    return asr, nlu, asr_tok, nlu_tok


def build_context(cfg: RunConfig, asr, nlu, asr_tok, nlu_tok, labels) -> SluContext:
    return SluContext(asr_model=asr, nlu_model=nlu, interface_kind=cfg.interface,
                      asr_tokenizer=asr_tok, nlu_tokenizer=nlu_tok, labels=labels)


def _make_optimizer(cfg: RunConfig, params: dict):
    opt = dict(cfg.optimizer)
    name = opt.pop("name", "adam")
    if name == "adam":
        return Adam(params, lr=opt.pop("lr", 1e-3), **opt)
    if name == "sgd":
        return SGD(params, lr=opt.pop("lr", 1e-3))
    raise ConfigError(f"unknown optimizer {name!r}")


def _asr_targets(cfg: RunConfig, tok: Tokenizer, transcript) -> list[int]:
    ids = tok.tokenize(" ".join(transcript))
    # the attention decoder needs an explicit terminator to learn when to stop
    return ids + [EOS_ID] if cfg.asr_kind == "las" else ids


def decode_nbest(asr, x, cfg: RunConfig, beam_width: int | None = None):
    width = beam_width or cfg.beam_width
    if isinstance(asr, RnntModel):
        return rnnt_beam_decode(asr, x, width, max_symbols_per_frame=cfg.max_symbols_per_frame)
    return las_beam_decode(asr, x, width, max_len=cfg.max_decode_len)


# ---------------------------------------------------------------------------
# evaluation


def _gt_text_annotation(ctx: SluContext, utt) -> SluAnnotation:
    text = " ".join(utt.transcript)
    io = InterfaceOutput(v=ctx.nlu_tokenizer.tokenize(text), h_i=None, differentiable=False)
    with no_grad():
        pred = tnlu_forward(ctx.nlu_model, io)
    slot_ids, intent_id, domain_id = nlu_predict(pred)
    units = [ctx.nlu_tokenizer.vocab[i] for i in io.v]
    slots = tags_to_slots(units, [ctx.labels.tags[i] for i in slot_ids],
                          mode=ctx.nlu_tokenizer.mode)
    return SluAnnotation.make(utt.transcript, slots,
                              intent=ctx.labels.intents[intent_id],
                              domain=ctx.labels.domains[domain_id])


def _decoded_annotation(ctx: SluContext, utt, cfg: RunConfig) -> SluAnnotation:
    nbest = decode_nbest(ctx.asr_model, utt.features, cfg)
    with no_grad():
        cand = run_candidate_through_nlu(ctx, utt.features, nbest.one_best)
    return cand.annotation


def evaluate_models(ctx: SluContext, utts, cfg: RunConfig,
                    ground_truth_text: bool = False) -> MetricReport:
    if ground_truth_text:
        hyp_of = lambda u: _gt_text_annotation(ctx, u)
    else:
        hyp_of = lambda u: _decoded_annotation(ctx, u, cfg)
    threads = int(os.environ.get("SLUKIT_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            hyps = list(ex.map(hyp_of, utts))
    else:
        hyps = [hyp_of(u) for u in utts]
    refs = [u.annotation() for u in utts]
    return evaluate_corpus(refs, hyps, with_asr_metrics=not ground_truth_text)


# ---------------------------------------------------------------------------
# independent training


def _train_asr_epoch(cfg, asr, utts, order, asr_tok, opt) -> float:
    total = 0.0
    pending = 0
    for idx in order:
        utt = utts[idx]
        with Tape() as tape:
            loss = asr_mle_loss(asr, utt.features, _asr_targets(cfg, asr_tok, utt.transcript))
        tape.backward(loss)
        total += loss.item()
        pending += 1
        if pending == cfg.batch_size:
            opt.step()
            pending = 0
    if pending:
        opt.step()
    return total / max(len(order), 1)


def _nlu_gt_example(ctx: SluContext, utt):
    """(interface output, slot tag ids, intent id, domain id) on ground truth."""
    text = " ".join(utt.transcript)
    io = InterfaceOutput(v=ctx.nlu_tokenizer.tokenize(text), h_i=None, differentiable=False)
    wt = word_tags(utt.annotation())
    tags = token_tags_for_words(list(utt.transcript), wt, mode=ctx.nlu_tokenizer.mode)
    tag_ids = [ctx.labels.tag_id(t) for t in tags]
    return io, tag_ids, ctx.labels.intent_id(utt.intent), ctx.labels.domain_id(utt.domain)


def _train_nlu_epoch(cfg, ctx, utts, order, opt) -> float:
    total = 0.0
    pending = 0
    for idx in order:
        io, tag_ids, intent_id, domain_id = _nlu_gt_example(ctx, utts[idx])
        with Tape() as tape:
            loss = nlu_loss(tnlu_forward(ctx.nlu_model, io), tag_ids, intent_id, domain_id)
        tape.backward(loss)
        total += loss.item()
        pending += 1
        if pending == cfg.batch_size:
            opt.step()
            pending = 0
    if pending:
        opt.step()
    return total / max(len(order), 1)


def train_independent(cfg: RunConfig):
    """MLE-train ASR and NLU separately; evaluate as a text pipeline."""
    cfg.validate()
    start = time.time()
    train, dev, test, labels, spec = load_corpus(cfg)
    asr, nlu, asr_tok, nlu_tok = build_models(cfg, labels, spec)
    ctx = build_context(cfg, asr, nlu, asr_tok, nlu_tok, labels)
    if cfg.init_checkpoint:
        loaded, _ = load_checkpoint(cfg.init_checkpoint)
        if cfg.pretrained_asr:
            assign_params(asr.named_parameters(), loaded, prefix="asr.")
        if cfg.pretrained_nlu:
            assign_params(nlu.named_parameters(), loaded, prefix="nlu.")

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0DDE]))
    losses = []
    nlu_epochs = cfg.nlu_epochs if cfg.nlu_epochs is not None else cfg.epochs
    opt_nlu = _make_optimizer(cfg, nlu.named_parameters())
    for _ in range(nlu_epochs):
        order = shuffle_rng.permutation(len(train))
        losses.append({"nlu": _train_nlu_epoch(cfg, ctx, train, order, opt_nlu)})

    opt_asr = _make_optimizer(cfg, asr.named_parameters())
    epochs_ran = nlu_epochs
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        losses.append({"asr": _train_asr_epoch(cfg, asr, train, order, asr_tok, opt_asr)})
        epochs_ran += 1
        if cfg.stop_on_perfect_train:
            m = evaluate_models(ctx, train, cfg)
            if m.wer == 0.0 and m.semer == 0.0:
                break

    dev_metrics = evaluate_models(ctx, dev, cfg, ground_truth_text=cfg.eval_ground_truth_text)
    test_metrics = evaluate_models(ctx, test, cfg, ground_truth_text=cfg.eval_ground_truth_text)
    report = RunReport(config=cfg.to_dict(), epochs_ran=epochs_ran, train_losses=losses,
                       dev_metrics=dev_metrics.to_dict(), test_metrics=test_metrics.to_dict(),
                       wall_clock_sec=time.time() - start, run_hash=run_hash(cfg))
    return report, ctx


# ---------------------------------------------------------------------------
# joint training


def _warm_start(cfg: RunConfig, ctx: SluContext, train):
    """Load or inline-train the independent warm start per the pretrained flags."""
    asr_params = ctx.asr_model.named_parameters()
    nlu_params = ctx.nlu_model.named_parameters()
    if cfg.init_checkpoint:
        loaded, _ = load_checkpoint(cfg.init_checkpoint)
        if cfg.pretrained_asr:
            assign_params(asr_params, loaded, prefix="asr.")
        if cfg.pretrained_nlu:
            _load_pretrained_nlu(cfg, ctx, {k[4:]: v for k, v in loaded.items()
                                            if k.startswith("nlu.")})
        return
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x3A12]))
    if cfg.pretrained_asr and cfg.epochs:
        opt = _make_optimizer(cfg, asr_params)
        for _ in range(cfg.epochs):
            order = shuffle_rng.permutation(len(train))
            _train_asr_epoch(cfg, ctx.asr_model, train, order, ctx.asr_tokenizer, opt)
    if cfg.pretrained_nlu and cfg.epochs:
        source = _inline_text_nlu(cfg, ctx, train)
        _load_pretrained_nlu(cfg, ctx, source)


def _inline_text_nlu(cfg: RunConfig, ctx: SluContext, train) -> dict:
    """Train a ground-truth-text NLU from scratch and return its parameters."""
    tcfg = TnluConfig(slot_count=len(ctx.labels.tags), intent_count=len(ctx.labels.intents),
                      domain_count=len(ctx.labels.domains),
                      **{**_NLU_DEFAULTS, **cfg.nlu},
                      input_kind="discrete", vocab_size=ctx.nlu_tokenizer.vocab_size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x51EED, 1]))
    text_nlu = TnluModel(rng, tcfg)
    text_ctx = SluContext(asr_model=ctx.asr_model, nlu_model=text_nlu, interface_kind="text",
                          asr_tokenizer=ctx.asr_tokenizer, nlu_tokenizer=ctx.nlu_tokenizer,
                          labels=ctx.labels)
    nlu_epochs = cfg.nlu_epochs if cfg.nlu_epochs is not None else cfg.epochs
    opt = _make_optimizer(cfg, text_nlu.named_parameters())
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x3A13]))
    for _ in range(nlu_epochs):
        order = shuffle_rng.permutation(len(train))
        _train_nlu_epoch(cfg, text_ctx, train, order, opt)
    return {k: v.data.copy() for k, v in text_nlu.named_parameters().items()}


def _load_pretrained_nlu(cfg: RunConfig, ctx: SluContext, source: dict):
    """Assign pretrained (text-trained) NLU parameters into the run's NLU.

    For the text interface this is a strict copy. For the posterior interface
    the discrete token embedding becomes the continuous input adapter (the
    expected-embedding view of a posterior row); everything else matches by
    name.
    """
    nlu_params = ctx.nlu_model.named_parameters()
    if cfg.interface == "text":
        assign_params(nlu_params, source, strict=True)
        return
    if cfg.interface == "posterior":
        table = source.get("token_emb.table")
        if table is None:
            raise CheckpointError("pretrained NLU lacks token_emb.table")
        if tuple(table.shape) != tuple(ctx.nlu_model.in_proj.w.shape):
            raise CheckpointError(
                f"parameter in_proj.w: pretrained embedding shape {tuple(table.shape)} "
                f"does not match adapter shape {tuple(ctx.nlu_model.in_proj.w.shape)}")
        ctx.nlu_model.in_proj.w.data[...] = table
        ctx.nlu_model.in_proj.b.data[...] = 0.0
        rest = {k: v for k, v in source.items() if k != "token_emb.table"}
        assign_params({k: v for k, v in nlu_params.items()
                       if not k.startswith("in_proj.")}, rest, strict=True)
        return
    raise ConfigError(f"pretrained NLU is not loadable for interface {cfg.interface}")


def _snapshot(params: dict) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict, snap: dict) -> None:
    for k, v in params.items():
        v.data[...] = snap[k]


def train_joint(cfg: RunConfig):
    """Warm start, then sequence-loss (plus MLE for neural interfaces) training."""
    cfg.validate()
    if cfg.mode not in ("joint_seq", "joint_mle_seq"):
        raise ConfigError(f"train_joint needs a joint mode, got {cfg.mode!r}")
    start = time.time()
    train, dev, test, labels, spec = load_corpus(cfg)
    asr, nlu, asr_tok, nlu_tok = build_models(cfg, labels, spec)
    ctx = build_context(cfg, asr, nlu, asr_tok, nlu_tok, labels)
    _warm_start(cfg, ctx, train)

    cost_fn = make_cost(cfg.cost_metric)
    all_params = {f"asr.{k}": v for k, v in asr.named_parameters().items()}
    all_params.update({f"nlu.{k}": v for k, v in nlu.named_parameters().items()})
    trained = {k: v for k, v in all_params.items()
               if not (cfg.freeze_asr and k.startswith("asr."))}
    opt = _make_optimizer(cfg, trained)
    frozen = [v for k, v in all_params.items() if k not in trained]

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x301A]))
    losses = []
    dev_history = []
    best = {"semer": None, "snap": None, "epoch": 0}
    for epoch in range(cfg.joint_epochs):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        pending = 0
        for idx in order:
            utt = train[idx]
            ref = utt.annotation()
            nbest = decode_nbest(asr, utt.features, cfg,
                                 beam_width=max(cfg.beam_width, cfg.nbest_size))
            hyps = nbest.hypotheses[:cfg.nbest_size]
            with Tape() as tape:
                cands = [run_candidate_through_nlu(ctx, utt.features, h) for h in hyps]
                costs = [cost_fn(ref, c.annotation) for c in cands]
                loss = sequence_loss_surrogate(costs, [c.log_prob for c in cands])
                if cfg.lambda_seq != 1.0:
                    loss = loss * cfg.lambda_seq
                if cfg.mode == "joint_mle_seq":
                    l_asr = asr_mle_loss(asr, utt.features,
                                         _asr_targets(cfg, asr_tok, utt.transcript))
                    one = cands[0]
                    tag_ids, intent_id, domain_id = candidate_nlu_targets(
                        ctx, ref, one.hypothesis, one.io)
                    l_nlu = nlu_loss(one.prediction, tag_ids, intent_id, domain_id)
                    loss = multitask_loss(l_asr, l_nlu) + loss
            tape.backward(loss)
            total += loss.item()
            pending += 1
            if pending == cfg.batch_size:
                opt.step()
                for p in frozen:
                    p.zero_grad()
                pending = 0
        if pending:
            opt.step()
            for p in frozen:
                p.zero_grad()
        losses.append({"joint": total / max(len(order), 1)})
        dev_m = evaluate_models(ctx, dev, cfg)
        dev_history.append({"epoch": epoch + 1, "semer": dev_m.semer, "wer": dev_m.wer})
        if best["semer"] is None or dev_m.semer < best["semer"]:
            best = {"semer": dev_m.semer, "snap": _snapshot(all_params), "epoch": epoch + 1}

    if best["snap"] is not None:
        _restore(all_params, best["snap"])
    dev_metrics = evaluate_models(ctx, dev, cfg)
    test_metrics = evaluate_models(ctx, test, cfg)
    report = RunReport(config=cfg.to_dict(), epochs_ran=cfg.joint_epochs,
                       train_losses=losses, dev_history=dev_history,
                       dev_metrics=dev_metrics.to_dict(), test_metrics=test_metrics.to_dict(),
                       wall_clock_sec=time.time() - start, run_hash=run_hash(cfg))
    return report, ctx


# ---------------------------------------------------------------------------
# entry points


def _checkpoint_params(ctx: SluContext) -> dict:
    params = {f"asr.{k}": v for k, v in ctx.asr_model.named_parameters().items()}
    params.update({f"nlu.{k}": v for k, v in ctx.nlu_model.named_parameters().items()})
    return params


def run_training(cfg: RunConfig, write_outputs: bool = True):
    """Train per cfg.mode; write report.json and checkpoint.json to the run dir."""
    cfg.validate()
    if cfg.mode == "independent":
        report, ctx = train_independent(cfg)
    else:
        report, ctx = train_joint(cfg)
    if write_outputs:
        run_dir = Path(resolve_out_dir(cfg)) / cfg.run_name
        run_dir.mkdir(parents=True, exist_ok=True)
        report.save(run_dir / "report.json")
        save_checkpoint(run_dir / "checkpoint.json", _checkpoint_params(ctx),
                        meta={"config": cfg.to_dict()})
    return report, ctx


def evaluate_checkpoint(cfg: RunConfig, checkpoint_path, split: str = "dev") -> MetricReport:
    cfg.validate()
    train, dev, test, labels, spec = load_corpus(cfg)
    utts = {"train": train, "dev": dev, "test": test}[split]
    asr, nlu, asr_tok, nlu_tok = build_models(cfg, labels, spec)
    ctx = build_context(cfg, asr, nlu, asr_tok, nlu_tok, labels)
    loaded, _ = load_checkpoint(checkpoint_path)
    assign_params(asr.named_parameters(), loaded, prefix="asr.")
    assign_params(nlu.named_parameters(), loaded, prefix="nlu.")
    return evaluate_models(ctx, utts, cfg, ground_truth_text=cfg.eval_ground_truth_text)
