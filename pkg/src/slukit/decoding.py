"""Decoded-hypothesis containers shared by the transducer and attention ASR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["DecodeError", "VocabularyError", "Hypothesis", "NBest"]


class DecodeError(RuntimeError):
    """Decoding called with unusable inputs (e.g. empty audio)."""


class VocabularyError(ValueError):
    """A token id falls outside the model vocabulary (or is reserved)."""


@dataclass
class Hypothesis:
    """One decoded token sequence plus everything the interfaces consume.

    ``token_posteriors[u]`` is the full output distribution at the step that
    emitted token u. For the transducer, ``lattice_transitions[u, t]`` is the
    label transition probability P(w_{u+1} | t, u) for every frame t, and
    ``selected_frames[u]`` is the frame of the best alignment that emitted
    token u+1. For the attention decoder, ``decoder_states`` holds the
    per-step hidden rows.
    """

    tokens: tuple[int, ...]
    log_prob: float
    token_posteriors: np.ndarray  # (U, V)
    lattice_transitions: np.ndarray | None = None  # (U, T), transducer only
    selected_frames: tuple[int, ...] | None = None  # length U, transducer only
    decoder_states: np.ndarray | None = None  # (U, D), attention decoder only

    def __len__(self):
        return len(self.tokens)


@dataclass
class NBest:
    """Hypotheses in descending log-prob order, ties broken lexicographically."""

    hypotheses: list[Hypothesis]
    beam_width: int

    def __post_init__(self):
        if len(self.hypotheses) > self.beam_width:
            raise ValueError(
                f"{len(self.hypotheses)} hypotheses exceed beam width {self.beam_width}"
            )

    @property
    def one_best(self) -> Hypothesis:
        return self.hypotheses[0]

    def __len__(self):
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)
