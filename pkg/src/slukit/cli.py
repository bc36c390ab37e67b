"""Command line entry points: generate-data, train, evaluate, decode, grad-check.

All behavior is driven by a JSON config file plus repeatable
``--override key=value`` flags (dotted keys, JSON-parsed values). Exit codes:
0 success, 1 structured error, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, load_config, resolve_out_dir
from .data import CorpusSpec, generate_corpus, save_meta, write_dataset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slukit",
                                     description="Joint ASR+NLU training testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic corpus to a directory")
    p.add_argument("--spec", required=True, help="JSON file with CorpusSpec fields")
    p.add_argument("--out", required=True, help="output directory")

    for name in ("train", "evaluate", "decode"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--override", action="append", default=[],
                       help="dotted.key=value (repeatable)")
        if name in ("evaluate", "decode"):
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", default="dev", choices=["train", "dev", "test"])
            p.add_argument("--out", default=None, help="write the result JSON here")

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=3, help="coordinates checked per parameter")
    return parser


def _load_run_config(args) -> RunConfig:
    raw = load_config(args.config)
    raw = apply_overrides(raw, args.override)
    return RunConfig.from_dict(raw).validate()


def _cmd_generate_data(args) -> int:
    spec = CorpusSpec.from_dict(load_config(args.spec))
    corpus = generate_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "train.jsonl", corpus.train)
    write_dataset(out / "dev.jsonl", corpus.dev)
    write_dataset(out / "test.jsonl", corpus.test)
    save_meta(out / "meta.json", spec, corpus.labels)
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} "
          f"train/dev/test utterances to {out}")
    return 0


def _cmd_train(args) -> int:
    from .training import run_training

    cfg = _load_run_config(args)
    report, _ = run_training(cfg)
    run_dir = Path(resolve_out_dir(cfg)) / cfg.run_name
    dev = report.dev_metrics or {}
    print(f"run {cfg.run_name}: epochs={report.epochs_ran} "
          f"dev wer={dev.get('wer')} semer={dev.get('semer')} slu_f1={dev.get('slu_f1')}")
    print(f"report: {run_dir / 'report.json'}")
    return 0


def _cmd_evaluate(args) -> int:
    from .training import evaluate_checkpoint

    cfg = _load_run_config(args)
    report = evaluate_checkpoint(cfg, args.checkpoint, split=args.split)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    return 0


def _cmd_decode(args) -> int:
    from .checkpoint import assign_params, load_checkpoint
    from .training import build_context, build_models, decode_nbest, load_corpus

    cfg = _load_run_config(args)
    train, dev, test, labels, spec = load_corpus(cfg)
    utts = {"train": train, "dev": dev, "test": test}[args.split]
    asr, nlu, asr_tok, nlu_tok = build_models(cfg, labels, spec)
    loaded, _ = load_checkpoint(args.checkpoint)
    assign_params(asr.named_parameters(), loaded, prefix="asr.")
    assign_params(nlu.named_parameters(), loaded, prefix="nlu.")
    rows = []
    for utt in utts:
        nbest = decode_nbest(asr, utt.features, cfg)
        rows.append({"id": utt.uid,
                     "ref": " ".join(utt.transcript),
                     "hyp": asr_tok.detokenize(nbest.one_best.tokens),
                     "log_prob": nbest.one_best.log_prob})
        print(f"{utt.uid}\t{rows[-1]['hyp']}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


def _cmd_grad_check(args) -> int:
    from .diagnostics import run_fd_suite

    results = run_fd_suite(eps=args.eps, rtol=args.rtol, coords_per_param=args.coords)
    failed = 0
    for name, report in results:
        status = "pass" if report.passed else "FAIL"
        print(f"{status}  {name:<40s} max_rel={report.max_rel_error:.3e} rtol={report.rtol:g}")
        failed += 0 if report.passed else 1
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 0 if failed == 0 else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors
        return int(e.code or 0)
    handlers = {
        "generate-data": _cmd_generate_data,
        "train": _cmd_train,
        "evaluate": _cmd_evaluate,
        "decode": _cmd_decode,
        "grad-check": _cmd_grad_check,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # structured message, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
