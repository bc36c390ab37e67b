"""Run configuration: file loading, flag overrides, and validation of the
allowed (interface, training mode, pretrained) matrix.

The matrix, in brief: the independent baseline pipelines one-best text into
the NLU, so it pairs with the text interface only. Joint training through the
text interface uses the sequence loss alone; every neural interface
(tied_embedding, posterior, hidden, audio_attention) trains with MLE +
sequence loss. A pretrained NLU can be leveraged by the text and posterior
interfaces only; pretrained ASR is always allowed. Violations are rejected
before any compute.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

__all__ = ["ConfigError", "RunConfig", "MODES", "INTERFACES", "ASR_KINDS",
           "load_config", "apply_overrides", "allowed_combinations", "resolve_out_dir"]

MODES = ("independent", "joint_seq", "joint_mle_seq")
INTERFACES = ("text", "tied_embedding", "posterior", "hidden", "audio_attention")
ASR_KINDS = ("rnnt", "las")

_JOINT_MODE_FOR = {
    "text": "joint_seq",
    "tied_embedding": "joint_mle_seq",
    "posterior": "joint_mle_seq",
    "hidden": "joint_mle_seq",
    "audio_attention": "joint_mle_seq",
}
_PRETRAINED_NLU_OK = ("text", "posterior")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # identity
    run_name: str = "run"
    seed: int = 0
    out_dir: str = "runs"
    # task
    asr_kind: str = "rnnt"
    interface: str = "text"
    mode: str = "independent"
    pretrained_asr: bool = True
    pretrained_nlu: bool = False
    init_checkpoint: str | None = None
    freeze_asr: bool = False
    # data: either a directory written by generate-data, or an inline spec
    data_dir: str | None = None
    corpus: dict = field(default_factory=dict)
    nlu_tokenizer_mode: str = "word"
    # model sizes
    asr: dict = field(default_factory=dict)
    nlu: dict = field(default_factory=dict)
    # optimization
    epochs: int = 20
    nlu_epochs: int | None = None  # defaults to epochs
    joint_epochs: int = 5
    batch_size: int = 8
    optimizer: dict = field(default_factory=lambda: {"name": "adam", "lr": 1e-3})
    lambda_seq: float = 1.0
    cost_metric: str = "semer"
    stop_on_perfect_train: bool = False
    # decoding
    beam_width: int = 4
    nbest_size: int = 4
    max_decode_len: int = 16
    max_symbols_per_frame: int = 8
    # evaluation
    eval_ground_truth_text: bool = False

    def validate(self) -> "RunConfig":
        if self.asr_kind not in ASR_KINDS:
            raise ConfigError(f"asr_kind {self.asr_kind!r} not in {ASR_KINDS}")
        if self.interface not in INTERFACES:
            raise ConfigError(f"interface {self.interface!r} not in {INTERFACES}")
        if self.mode not in MODES:
            raise ConfigError(f"mode {self.mode!r} not in {MODES}")
        if self.mode == "independent" and self.interface != "text":
            raise ConfigError(
                f"disallowed combination (interface={self.interface}, mode=independent): "
                "independently trained models pipeline one-best text, so the "
                "independent mode pairs with the text interface only")
        if self.mode != "independent" and self.mode != _JOINT_MODE_FOR[self.interface]:
            raise ConfigError(
                f"disallowed combination (interface={self.interface}, mode={self.mode}): "
                f"the {self.interface} interface trains jointly with "
                f"{_JOINT_MODE_FOR[self.interface]} only")
        if self.pretrained_nlu and self.interface not in _PRETRAINED_NLU_OK:
            raise ConfigError(
                f"disallowed combination (interface={self.interface}, pretrained_nlu=true): "
                f"a pretrained NLU can be leveraged by {_PRETRAINED_NLU_OK} only")
        if self.cost_metric not in ("wer", "semer", "slu_f1"):
            raise ConfigError(f"cost_metric {self.cost_metric!r} not in (wer, semer, slu_f1)")
        if self.nlu_tokenizer_mode not in ("word", "char"):
            raise ConfigError(f"nlu_tokenizer_mode {self.nlu_tokenizer_mode!r} must be word|char")
        if self.batch_size < 1 or self.epochs < 0 or self.beam_width < 1 or self.nbest_size < 1:
            raise ConfigError("batch_size/beam_width/nbest_size must be >= 1 and epochs >= 0")
        if not self.data_dir and not self.corpus:
            raise ConfigError("config needs data_dir or an inline corpus spec")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f for f in RunConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return RunConfig(**d)


def allowed_combinations():
    """Every (interface, mode, pretrained_nlu) triple the matrix permits."""
    combos = []
    for interface in INTERFACES:
        modes = ["independent"] if interface == "text" else []
        modes.append(_JOINT_MODE_FOR[interface])
        for mode in modes:
            for pnlu in (False, True):
                if pnlu and interface not in _PRETRAINED_NLU_OK:
                    continue
                combos.append((interface, mode, pnlu))
    return combos


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply "dotted.key=value" overrides; values parse as JSON, falling back
    to raw strings."""
    out = json.loads(json.dumps(cfg))  # deep copy
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into non-object {part!r}")
        node[parts[-1]] = value
    return out


def resolve_out_dir(cfg: RunConfig) -> str:
    return os.environ.get("SLUKIT_OUT_DIR", cfg.out_dir)
