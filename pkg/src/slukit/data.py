"""Synthetic parallel SLU corpus: grammar-templated utterances with audio
features, transcripts, slot spans, intents and domains.

Each vocabulary token owns a fixed random unit prototype vector; audio for a
token is 1..k copies of its prototype plus Gaussian noise, so ``noise_std``
is a direct separability knob (at 0, a nearest-prototype frame classifier
recovers the transcript exactly). Everything is a pure function of
(spec, seed): utterances derive per-index RNG streams, and the train/dev/test
split ranks utterance ids by a stable hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .metrics import SluAnnotation

__all__ = [
    "BLANK_ID",
    "EOS_ID",
    "UNK_ID",
    "RESERVED_TOKENS",
    "DataGenError",
    "DatasetError",
    "Tokenizer",
    "CorpusSpec",
    "Utterance",
    "LabelMaps",
    "Corpus",
    "generate_corpus",
    "synth_audio",
    "feature_prototypes",
    "nearest_prototype_decode",
    "write_dataset",
    "read_dataset",
    "save_meta",
    "load_meta",
    "word_tags",
    "token_tags_for_words",
    "tags_to_slots",
]

BLANK_ID = 0
EOS_ID = 1
UNK_ID = 2
RESERVED_TOKENS = ("<blank>", "<eos>", "<unk>")


class DataGenError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class Tokenizer:
    """Word- or character-level tokenizer with reserved blank/eos/unk ids.

    Round-trips in-vocabulary text exactly; out-of-vocabulary units map to
    unk. Character mode includes the space character as an ordinary unit.
    """

    def __init__(self, units, mode: str = "word"):
        if mode not in ("word", "char"):
            raise ValueError(f"tokenizer mode must be 'word' or 'char', got {mode!r}")
        self.mode = mode
        self.vocab = list(RESERVED_TOKENS) + list(units)
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("tokenizer units collide with each other or reserved tokens")
        self._to_id = {u: i for i, u in enumerate(self.vocab)}

    @staticmethod
    def for_words(words) -> "Tokenizer":
        return Tokenizer(sorted(words), mode="word")

    @staticmethod
    def for_chars(words) -> "Tokenizer":
        chars = sorted(set(" ".join(words)) | {" "})
        return Tokenizer(chars, mode="char")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> list[int]:
        if not text:
            return []
        units = text.split() if self.mode == "word" else list(text)
        return [self._to_id.get(u, UNK_ID) for u in units]

    def detokenize(self, ids) -> str:
        units = []
        for i in ids:
            i = int(i)
            if i in (BLANK_ID, EOS_ID):
                continue
            units.append(self.vocab[i] if 0 <= i < len(self.vocab) else "<unk>")
        sep = " " if self.mode == "word" else ""
        return sep.join(units)


@dataclass
class CorpusSpec:
    vocab_size: int = 40
    num_intents: int = 5
    num_slot_types: int = 4
    num_domains: int = 3
    utterance_count: int = 200
    feature_dim: int = 16
    frames_per_token: tuple[int, int] = (1, 3)
    noise_std: float = 0.1
    seed: int = 0
    templates_per_intent: int = 2
    values_per_slot_type: int = 4

    def validate(self):
        if self.vocab_size < self.num_slot_types:
            raise DataGenError(
                f"vocab_size {self.vocab_size} < num_slot_types {self.num_slot_types}")
        if self.frames_per_token[0] < 1 or self.frames_per_token[1] < self.frames_per_token[0]:
            raise DataGenError(f"bad frames_per_token range {self.frames_per_token}")
        for name in ("num_intents", "num_slot_types", "num_domains", "utterance_count",
                     "feature_dim", "values_per_slot_type", "templates_per_intent"):
            if getattr(self, name) < 1:
                raise DataGenError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_token"] = list(self.frames_per_token)
        return d

    @staticmethod
    def from_dict(d: dict) -> "CorpusSpec":
        d = dict(d)
        if "frames_per_token" in d:
            d["frames_per_token"] = tuple(d["frames_per_token"])
        return CorpusSpec(**d)


@dataclass
class Utterance:
    uid: str
    features: np.ndarray  # (T, feature_dim)
    transcript: tuple[str, ...]
    slots: tuple[tuple[str, tuple[str, ...]], ...]
    intent: str
    domain: str

    def annotation(self) -> SluAnnotation:
        return SluAnnotation.make(self.transcript, self.slots, self.intent, self.domain)


@dataclass
class LabelMaps:
    intents: list[str]
    domains: list[str]
    slot_types: list[str]
    words: list[str]

    # Slot tags are BIO over slot names plus "O" and the subword continuation
    # tag "X" (a word's tag goes to its first token, X to the rest).
    @property
    def tags(self) -> list[str]:
        out = ["O", "X"]
        for s in self.slot_types:
            out.extend([f"B-{s}", f"I-{s}"])
        return out

    def tag_id(self, tag: str) -> int:
        return self.tags.index(tag)

    def intent_id(self, intent: str) -> int:
        return self.intents.index(intent)

    def domain_id(self, domain: str) -> int:
        return self.domains.index(domain)

    def to_dict(self) -> dict:
        return {"intents": self.intents, "domains": self.domains,
                "slot_types": self.slot_types, "words": self.words}

    @staticmethod
    def from_dict(d: dict) -> "LabelMaps":
        return LabelMaps(intents=list(d["intents"]), domains=list(d["domains"]),
                         slot_types=list(d["slot_types"]), words=list(d["words"]))


@dataclass
class Corpus:
    utterances: list[Utterance]
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    labels: LabelMaps
    spec: CorpusSpec


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(n: int) -> list[str]:
    """Deterministic distinct pronounceable words: two consonant-vowel pairs."""
    out = []
    i = 0
    while len(out) < n:
        c1 = _CONSONANTS[i % len(_CONSONANTS)]
        v1 = _VOWELS[(i // len(_CONSONANTS)) % len(_VOWELS)]
        c2 = _CONSONANTS[(i // (len(_CONSONANTS) * len(_VOWELS))) % len(_CONSONANTS)]
        v2 = _VOWELS[(i // (len(_CONSONANTS) * len(_VOWELS) * len(_CONSONANTS))) % len(_VOWELS)]
        out.append(c1 + v1 + c2 + v2)
        i += 1
    return out


def _build_grammar(spec: CorpusSpec, rng: np.random.Generator):
    """Word pools, slot lexicons and per-intent templates.

    A template is a list of items: ("w", word) literals and ("s", slot_type)
    placeholders. Every intent opens with a dedicated keyword and literals
    separate any two slots, so adjacent duplicate words cannot occur.
    """
    n_words = spec.vocab_size - len(RESERVED_TOKENS)
    need = spec.num_intents + 4 + spec.num_slot_types * min(spec.values_per_slot_type, 2)
    if n_words < need:
        raise DataGenError(
            f"vocab_size {spec.vocab_size} too small for {spec.num_intents} intents "
            f"and {spec.num_slot_types} slot types (need >= {need + len(RESERVED_TOKENS)})")

    words = _pseudo_words(n_words)
    slot_types = [f"slot_{i}" for i in range(spec.num_slot_types)]
    intents = [f"intent_{i}" for i in range(spec.num_intents)]
    domains = [f"domain_{i}" for i in range(spec.num_domains)]

    # word budget: intent keywords, then slot value pools, then fillers
    kw = {intents[i]: words[i] for i in range(spec.num_intents)}
    pos = spec.num_intents
    per_pool = max(2, (n_words - pos - 4) // max(spec.num_slot_types, 1))
    lexicons: dict[str, list[tuple[str, ...]]] = {}
    for s in slot_types:
        pool = words[pos:pos + per_pool]
        if len(pool) < 2:
            raise DataGenError(f"slot type {s} has an empty lexicon; increase vocab_size")
        pos += per_pool
        values = []
        for v in range(spec.values_per_slot_type):
            if v % 3 == 2 and len(pool) >= 2:  # every third value is two words
                a, b = pool[v % len(pool)], pool[(v + 1) % len(pool)]
                if a != b:
                    values.append((a, b))
                    continue
            values.append((pool[v % len(pool)],))
        lexicons[s] = values
    fillers = words[pos:] or words[:2]

    templates: dict[str, list[list[tuple[str, str]]]] = {}
    for i, intent in enumerate(intents):
        rows = []
        for t in range(spec.templates_per_intent):
            items: list[tuple[str, str]] = [("w", kw[intent])]
            n_slots = 1 + (t + i) % min(2, spec.num_slot_types)
            for k in range(n_slots):
                items.append(("w", fillers[int(rng.integers(len(fillers)))]))
                items.append(("s", slot_types[(i + t + k) % spec.num_slot_types]))
            if rng.integers(2):
                items.append(("w", fillers[int(rng.integers(len(fillers)))]))
            rows.append(items)
        templates[intent] = rows
    domain_of = {intent: domains[i % spec.num_domains] for i, intent in enumerate(intents)}
    return words, slot_types, intents, domains, lexicons, templates, domain_of


def feature_prototypes(spec: CorpusSpec) -> np.ndarray:
    """Fixed random unit vector per vocabulary id, (vocab_size, feature_dim)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xFEA7]))
    protos = rng.normal(size=(spec.vocab_size, spec.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos


def _render_audio(token_ids, protos, spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    frames = []
    lo, hi = spec.frames_per_token
    for tok in token_ids:
        k = int(rng.integers(lo, hi + 1))
        base = np.tile(protos[tok], (k, 1))
        if spec.noise_std > 0:
            base = base + spec.noise_std * rng.normal(size=base.shape)
        frames.append(base)
    return np.concatenate(frames, axis=0)


def synth_audio(token_ids, spec: CorpusSpec, seed: int) -> np.ndarray:
    """Render token ids to a (T, feature_dim) feature matrix."""
    if not len(token_ids):
        raise DataGenError("cannot render audio for an empty token sequence")
    protos = feature_prototypes(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(seed)]))
    return _render_audio([int(t) for t in token_ids], protos, spec, rng)


def nearest_prototype_decode(features: np.ndarray, protos: np.ndarray) -> list[int]:
    """Oracle ASR: nearest prototype per frame, then collapse repeats."""
    dists = ((features[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    ids = dists.argmin(axis=1)
    out = []
    for i in ids:
        if not out or out[-1] != i:
            out.append(int(i))
    return out


def _split_rank(uid: str) -> str:
    return hashlib.md5(uid.encode("utf-8")).hexdigest()


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic synthetic corpus with an exact 80/10/10 hash-ranked split."""
    spec.validate()
    grammar_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    words, slot_types, intents, domains, lexicons, templates, domain_of = \
        _build_grammar(spec, grammar_rng)
    labels = LabelMaps(intents=intents, domains=domains, slot_types=slot_types, words=words)
    tokenizer = Tokenizer.for_words(words)
    protos = feature_prototypes(spec)

    utts = []
    for idx in range(spec.utterance_count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, idx]))
        intent = intents[int(rng.integers(len(intents)))]
        template = templates[intent][int(rng.integers(len(templates[intent])))]
        transcript: list[str] = []
        slots = []
        for kind, val in template:
            if kind == "w":
                transcript.append(val)
            else:
                values = lexicons[val]
                value = values[int(rng.integers(len(values)))]
                slots.append((val, value))
                transcript.extend(value)
        for a, b in zip(transcript, transcript[1:]):
            if a == b:
                raise DataGenError(f"grammar produced adjacent duplicate word {a!r}")
        token_ids = tokenizer.tokenize(" ".join(transcript))
        features = _render_audio(token_ids, protos, spec, rng)
        utts.append(Utterance(uid=f"utt-{idx:06d}", features=features,
                              transcript=tuple(transcript),
                              slots=tuple((n, tuple(v)) for n, v in slots),
                              intent=intent, domain=domain_of[intent]))

    order = sorted(utts, key=lambda u: _split_rank(u.uid))
    n = len(order)
    n_train = (n * 8) // 10
    n_dev = (n * 9) // 10 - n_train
    train = order[:n_train]
    dev = order[n_train:n_train + n_dev]
    test = order[n_train + n_dev:]
    return Corpus(utterances=utts, train=train, dev=dev, test=test,
                  labels=labels, spec=spec)


# ---------------------------------------------------------------------------
# slot tag helpers (BIO over slot names, "X" for subword continuations)


def word_tags(ann: SluAnnotation) -> list[str]:
    """Per-word BIO tags for a reference annotation's transcript."""
    tags = ["O"] * len(ann.transcript)
    cursor = 0
    for name, value in ann.slots:
        value = list(value)
        # slots appear in transcript order; find the span starting at cursor
        start = None
        for i in range(cursor, len(ann.transcript) - len(value) + 1):
            if list(ann.transcript[i:i + len(value)]) == value:
                start = i
                break
        if start is None:
            raise ValueError(f"slot {name}={value} is not a span of {ann.transcript}")
        tags[start] = f"B-{name}"
        for i in range(start + 1, start + len(value)):
            tags[i] = f"I-{name}"
        cursor = start + len(value)
    return tags


def token_tags_for_words(words, wtags, mode: str = "word") -> list[str]:
    """Expand per-word tags to per-token tags.

    Word mode is the identity. In char mode a word's tag lands on its first
    character and the continuation tag "X" on the rest; the space between two
    words also gets "X" (it extends whatever span is open).
    """
    if mode == "word":
        return list(wtags)
    out: list[str] = []
    for w, tag in zip(words, wtags):
        if out:
            out.append("X")
        out.append(tag)
        out.extend(["X"] * (len(w) - 1))
    return out


def tags_to_slots(units, tags, mode: str = "word") -> tuple[tuple[str, tuple[str, ...]], ...]:
    """Reconstruct slot spans from per-token tags.

    Stray I-tags open a span; "X" continues an open span and is ignored
    otherwise. In char mode the collected units are joined and re-split into
    words to recover word-valued slots.
    """
    raw = []
    name = None
    span: list[str] = []
    for u, tag in zip(units, tags):
        if tag.startswith("B-") or (tag.startswith("I-") and tag[2:] != name):
            if name is not None:
                raw.append((name, span))
            name = tag[2:]
            span = [u]
        elif tag.startswith("I-") and tag[2:] == name:
            span.append(u)
        elif tag == "X" and name is not None:
            span.append(u)
        else:  # "O", or "X" outside a span
            if name is not None:
                raw.append((name, span))
                name, span = None, []
    if name is not None:
        raw.append((name, span))

    slots = []
    for name, span in raw:
        if mode == "char":
            value = tuple("".join(span).split())
        else:
            value = tuple(span)
        if value:
            slots.append((name, value))
    return tuple(slots)


# ---------------------------------------------------------------------------
# dataset files: one JSON record per line


def write_dataset(path, utterances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            rec = {
                "id": utt.uid,
                "features": utt.features.tolist(),
                "transcript": " ".join(utt.transcript),
                "slots": [[name, " ".join(value)] for name, value in utt.slots],
                "intent": utt.intent,
                "domain": utt.domain,
            }
            fh.write(json.dumps(rec) + "\n")


_REQUIRED_FIELDS = ("id", "features", "transcript", "slots", "intent", "domain")


def read_dataset(path) -> list[Utterance]:
    utts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}: line {lineno}: invalid record: {e}") from None
            for fname in _REQUIRED_FIELDS:
                if fname not in rec:
                    raise DatasetError(f"{path}: line {lineno}: missing field {fname!r}")
            features = np.asarray(rec["features"], dtype=np.float64)
            if features.ndim != 2:
                raise DatasetError(f"{path}: line {lineno}: features must be a 2-d array")
            utts.append(Utterance(
                uid=rec["id"],
                features=features,
                transcript=tuple(rec["transcript"].split()),
                slots=tuple((name, tuple(value.split())) for name, value in rec["slots"]),
                intent=rec["intent"],
                domain=rec["domain"],
            ))
    return utts


def save_meta(path, spec: CorpusSpec, labels: LabelMaps) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"format_version": 1, "spec": spec.to_dict(),
                   "labels": labels.to_dict()}, fh, indent=2)


def load_meta(path) -> tuple[CorpusSpec, LabelMaps]:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format_version") != 1:
        raise DatasetError(f"{path}: unsupported meta format_version {d.get('format_version')}")
    return CorpusSpec.from_dict(d["spec"]), LabelMaps.from_dict(d["labels"])
