"""SLU evaluation metrics: WER/SER, ICER/IntAcc, SemER, SLU-F1.

All metrics are pure functions over annotations. WER uses a Levenshtein DP
with a deterministic backtrace (substitution preferred over insertion over
deletion on cost ties). SemER treats the intent as one extra slot; SLU-F1
scores slots only, crediting value substitutions as partial true positives
penalized by the word and character error rates of the slot value.

Units follow common reporting practice: wer, semer and slu_f1 are ratios;
ser, icer and int_acc are percentages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = [
    "MetricError",
    "SluAnnotation",
    "EditCounts",
    "levenshtein_align",
    "wer",
    "ser",
    "icer_intacc",
    "semer",
    "slu_f1",
    "MetricReport",
    "evaluate_corpus",
]

INTENT_SLOT = "__intent__"


class MetricError(ValueError):
    pass


@dataclass
class SluAnnotation:
    """Transcript words plus slot spans, intent and domain labels.

    Slot values are word tuples; for reference annotations they are
    contiguous spans of the transcript. ``intent``/``domain`` may be None for
    a degenerate hypothesis (e.g. nothing decoded).
    """

    transcript: tuple[str, ...]
    slots: tuple[tuple[str, tuple[str, ...]], ...] = ()
    intent: str | None = None
    domain: str | None = None

    @staticmethod
    def make(transcript, slots=(), intent=None, domain=None) -> "SluAnnotation":
        return SluAnnotation(
            transcript=tuple(transcript),
            slots=tuple((name, tuple(value)) for name, value in slots),
            intent=intent,
            domain=domain,
        )


@dataclass
class EditCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0

    @property
    def total(self) -> int:
        return self.sub + self.ins + self.dele

    def __iadd__(self, other: "EditCounts"):
        self.sub += other.sub
        self.ins += other.ins
        self.dele += other.dele
        return self


def levenshtein_align(ref, hyp):
    """Minimum-edit alignment of two token sequences.

    Returns (EditCounts, ops) where ops is a list of (op, ref_idx, hyp_idx)
    with op in {"match", "sub", "ins", "del"} and -1 for the missing side.
    On cost ties the backtrace prefers substitution over insertion over
    deletion, which fixes the op counts deterministically.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = i
    for j in range(1, m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row = dp[i]
        prev = dp[i - 1]
        for j in range(1, m + 1):
            same = ri == hyp[j - 1]
            row[j] = min(prev[j - 1] + (0 if same else 1), row[j - 1] + 1, prev[j] + 1)

    ops = []
    counts = EditCounts()
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] == hyp[j - 1]:
                ops.append(("match", i - 1, j - 1))
            else:
                ops.append(("sub", i - 1, j - 1))
                counts.sub += 1
            i, j = i - 1, j - 1
        elif j > 0 and dp[i][j] == dp[i][j - 1] + 1:
            ops.append(("ins", -1, j - 1))
            counts.ins += 1
            j -= 1
        else:
            ops.append(("del", i - 1, -1))
            counts.dele += 1
            i -= 1
    ops.reverse()
    return counts, ops


def wer(ref, hyp):
    """Word error rate (S+I+D)/len(ref) as a ratio, plus the edit counts."""
    ref = list(ref)
    if not ref:
        raise MetricError("WER needs a non-empty reference")
    counts, _ = levenshtein_align(ref, list(hyp))
    return counts.total / len(ref), counts


def ser(pairs) -> float:
    """Percentage of utterances with any word error; pairs of (ref, hyp)."""
    pairs = list(pairs)
    if not pairs:
        raise MetricError("SER needs at least one utterance")
    wrong = sum(1 for ref, hyp in pairs if levenshtein_align(ref, hyp)[0].total > 0)
    return 100.0 * wrong / len(pairs)


def icer_intacc(pairs):
    """(intent classification error rate, intent accuracy), both percentages."""
    pairs = list(pairs)
    if not pairs:
        raise MetricError("ICER needs at least one utterance")
    wrong = sum(1 for ref, hyp in pairs if ref != hyp)
    icer = 100.0 * wrong / len(pairs)
    return icer, 100.0 - icer


def _slots_for_semer(ann: SluAnnotation):
    slots = []
    if ann.intent is not None:
        slots.append((INTENT_SLOT, (ann.intent,)))
    slots.extend(ann.slots)
    return slots


def _match_slots(ref_slots, hyp_slots):
    """Pair slots by name: exact-value pairs first, then in-order substitutions.

    Returns (exact pairs, substitution pairs, deleted ref indices, inserted
    hyp indices) with indices into the given lists. Duplicate names resolve
    by order of appearance.
    """
    names = []
    for name, _ in ref_slots:
        if name not in names:
            names.append(name)
    for name, _ in hyp_slots:
        if name not in names:
            names.append(name)

    exact, subs, deleted, inserted = [], [], [], []
    for name in names:
        r_idx = [i for i, (n, _) in enumerate(ref_slots) if n == name]
        h_idx = [j for j, (n, _) in enumerate(hyp_slots) if n == name]
        used_h = set()
        r_rest = []
        for i in r_idx:
            hit = next((j for j in h_idx if j not in used_h
                        and hyp_slots[j][1] == ref_slots[i][1]), None)
            if hit is None:
                r_rest.append(i)
            else:
                used_h.add(hit)
                exact.append((i, hit))
        h_rest = [j for j in h_idx if j not in used_h]
        for i, j in zip(r_rest, h_rest):
            subs.append((i, j))
        deleted.extend(r_rest[len(h_rest):])
        inserted.extend(h_rest[len(r_rest):])
    return exact, subs, deleted, inserted


@dataclass
class SlotErrorCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0
    ref_slots: int = 0

    def __iadd__(self, other):
        self.sub += other.sub
        self.ins += other.ins
        self.dele += other.dele
        self.ref_slots += other.ref_slots
        return self

    @property
    def rate(self) -> float:
        if self.ref_slots == 0:
            raise MetricError("SemER needs at least one reference slot (intent included)")
        return (self.sub + self.ins + self.dele) / self.ref_slots


def semer(ref: SluAnnotation, hyp: SluAnnotation):
    """Semantic error rate: slot substitutions + insertions + deletions over
    the number of reference slots, with the intent counted as one slot."""
    ref_slots = _slots_for_semer(ref)
    hyp_slots = _slots_for_semer(hyp)
    if not ref_slots:
        raise MetricError("SemER needs at least one reference slot (intent included)")
    _, subs, deleted, inserted = _match_slots(ref_slots, hyp_slots)
    counts = SlotErrorCounts(sub=len(subs), ins=len(inserted), dele=len(deleted),
                             ref_slots=len(ref_slots))
    return counts.rate, counts


@dataclass
class F1Tallies:
    """Word-level and char-level TP/FP/FN, pooled additively over a corpus."""

    tp_w: float = 0.0
    fp_w: float = 0.0
    fn_w: float = 0.0
    tp_c: float = 0.0
    fp_c: float = 0.0
    fn_c: float = 0.0

    def __iadd__(self, other):
        self.tp_w += other.tp_w
        self.fp_w += other.fp_w
        self.fn_w += other.fn_w
        self.tp_c += other.tp_c
        self.fp_c += other.fp_c
        self.fn_c += other.fn_c
        return self

    @staticmethod
    def _f1(tp, fp, fn) -> float:
        denom = 2.0 * tp + fp + fn
        if denom == 0.0:
            return 1.0  # no slots anywhere and nothing wrong
        return 2.0 * tp / denom

    @property
    def value(self) -> float:
        return 0.5 * (self._f1(self.tp_w, self.fp_w, self.fn_w)
                      + self._f1(self.tp_c, self.fp_c, self.fn_c))


def _clamped_rate(ref_seq, hyp_seq) -> float:
    counts, _ = levenshtein_align(ref_seq, hyp_seq)
    if not ref_seq:
        return 0.0 if not hyp_seq else 1.0
    return min(1.0, counts.total / len(ref_seq))


def slu_f1(ref: SluAnnotation, hyp: SluAnnotation):
    """Slot F1 with substitution credit.

    Exact slot match counts a full TP in both tallies; a deletion an FN; an
    insertion an FP. A substitution (name matches, value differs) counts as a
    partial TP of 1-d with d added to both FN and FP, where d is the word
    (resp. character) error rate of the hypothesis value against the
    reference value, clamped to [0, 1]. The reported value is the mean of the
    word-level and char-level F1. Intent and domain are not slots here.
    """
    exact, subs, deleted, inserted = _match_slots(list(ref.slots), list(hyp.slots))
    t = F1Tallies()
    t.tp_w += len(exact)
    t.tp_c += len(exact)
    t.fn_w += len(deleted)
    t.fn_c += len(deleted)
    t.fp_w += len(inserted)
    t.fp_c += len(inserted)
    for i, j in subs:
        ref_words = list(ref.slots[i][1])
        hyp_words = list(hyp.slots[j][1])
        d_w = _clamped_rate(ref_words, hyp_words)
        d_c = _clamped_rate(list(" ".join(ref_words)), list(" ".join(hyp_words)))
        t.tp_w += 1.0 - d_w
        t.fn_w += d_w
        t.fp_w += d_w
        t.tp_c += 1.0 - d_c
        t.fn_c += d_c
        t.fp_c += d_c
    return t.value, t


@dataclass
class MetricReport:
    """Corpus-level metric values plus the pooled raw tallies."""

    wer: float | None
    ser: float | None
    icer: float
    int_acc: float
    semer: float
    slu_f1: float
    word_edits: dict = field(default_factory=dict)
    slot_errors: dict = field(default_factory=dict)
    f1_tallies: dict = field(default_factory=dict)
    utterances: int = 0

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "ser": self.ser,
            "icer": self.icer,
            "int_acc": self.int_acc,
            "semer": self.semer,
            "slu_f1": self.slu_f1,
            "word_edits": dict(self.word_edits),
            "slot_errors": dict(self.slot_errors),
            "f1_tallies": dict(self.f1_tallies),
            "utterances": self.utterances,
        }


def evaluate_corpus(refs, hyps, with_asr_metrics: bool = True) -> MetricReport:
    """Pool per-utterance tallies, then compute corpus metrics.

    WER pools edit counts over pooled reference lengths; SemER pools slot
    error counts over pooled reference slots; SLU-F1 pools TP/FP/FN before
    computing F1. With ``with_asr_metrics=False`` (ground-truth-text NLU
    evaluation) wer and ser are reported as None.
    """
    refs = list(refs)
    hyps = list(hyps)
    if len(refs) != len(hyps):
        raise MetricError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise MetricError("cannot evaluate an empty corpus")

    edits = EditCounts()
    ref_len = 0
    sentences_wrong = 0
    slot_counts = SlotErrorCounts()
    tallies = F1Tallies()
    intents_wrong = 0
    for ref, hyp in zip(refs, hyps):
        if with_asr_metrics:
            _, c = wer(ref.transcript, hyp.transcript)
            edits += c
            ref_len += len(ref.transcript)
            if c.total > 0:
                sentences_wrong += 1
        if ref.intent != hyp.intent:
            intents_wrong += 1
        _, sc = semer(ref, hyp)
        slot_counts += sc
        _, ft = slu_f1(ref, hyp)
        tallies += ft

    n = len(refs)
    icer = 100.0 * intents_wrong / n
    return MetricReport(
        wer=(edits.total / ref_len) if with_asr_metrics else None,
        ser=(100.0 * sentences_wrong / n) if with_asr_metrics else None,
        icer=icer,
        int_acc=100.0 - icer,
        semer=slot_counts.rate,
        slu_f1=tallies.value,
        word_edits={"sub": edits.sub, "ins": edits.ins, "del": edits.dele,
                    "ref_words": ref_len},
        slot_errors={"sub": slot_counts.sub, "ins": slot_counts.ins,
                     "del": slot_counts.dele, "ref_slots": slot_counts.ref_slots},
        f1_tallies={"tp_w": tallies.tp_w, "fp_w": tallies.fp_w, "fn_w": tallies.fn_w,
                    "tp_c": tallies.tp_c, "fp_c": tallies.fp_c, "fn_c": tallies.fn_c},
        utterances=n,
    )
