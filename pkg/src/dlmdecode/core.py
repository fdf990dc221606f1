"""Core state types and probability helpers for iterative unmasking.

Everything downstream (exit policies, schedulers, metrics) works in terms of
the types here. Probability math is done in float64 regardless of what dtype
the model side hands us; logits arriving as float32 get upcast once at the
boundary.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

TokenId = int

MIN_VOCAB = 2  # need a mask token plus at least one real token


class InvalidLogits(ValueError):
    """Logit vector contains NaN/inf or has a bad shape."""


class VocabTooSmall(ValueError):
    """Operation needs more distinct tokens than the vocabulary has."""


@dataclass(frozen=True)
class Vocab:
    size: int
    mask_id: TokenId

    def __post_init__(self):
        if self.size < MIN_VOCAB:
            raise ValueError(f"vocab size must be >= {MIN_VOCAB}, got {self.size}")
        if not (0 <= self.mask_id < self.size):
            raise ValueError(f"mask_id {self.mask_id} outside [0, {self.size})")


class CellKind(Enum):
    PROMPT = "prompt"
    MASKED = "masked"
    FINALIZED = "finalized"


@dataclass(frozen=True)
class Cell:
    """One sequence position: what token it holds and how it got there.

    step is the 1-based decode step at which the cell left the masked state;
    None while still masked and for prompt cells. Cells are immutable, state
    transitions replace the cell.
    """

    kind: CellKind
    token: TokenId
    step: int | None = None

    def __post_init__(self):
        if self.kind is CellKind.FINALIZED:
            if self.step is None or self.step < 1:
                raise ValueError("finalized cell needs the 1-based step it was committed at")
        elif self.step is not None:
            raise ValueError(f"{self.kind.value} cell must not carry a step")


@dataclass
class DecodeState:
    """Full sequence state at some point during decoding.

    cells covers prompt and generation region both; prompt_len marks the
    boundary. step is the index n of the last completed decode step (0 before
    any). The vocab rides along because everything that consumes a state
    (denoisers, policies) needs to know K and which id is the mask.
    """

    vocab: Vocab
    prompt_len: int
    cells: list[Cell] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be >= 0")
        if self.prompt_len > len(self.cells):
            raise ValueError("prompt_len exceeds sequence length")
        if self.step < 0:
            raise ValueError("step must be >= 0")
        for i, c in enumerate(self.cells):
            if (i < self.prompt_len) != (c.kind is CellKind.PROMPT):
                raise ValueError(f"cell {i}: prompt/generation region mismatch")
            if not (0 <= c.token < self.vocab.size):
                raise ValueError(f"cell {i}: token {c.token} outside vocab")
            if c.kind is CellKind.MASKED and c.token != self.vocab.mask_id:
                raise ValueError(f"cell {i}: masked cell must hold the mask token")

    @property
    def gen_len(self):
        return len(self.cells) - self.prompt_len

    def masked_positions(self):
        """Absolute indices of still-masked cells, ascending."""
        return [i for i, c in enumerate(self.cells) if c.kind is CellKind.MASKED]

    def unmasked_flags(self):
        """Boolean vector over the whole sequence, True where not masked."""
        return np.array([c.kind is not CellKind.MASKED for c in self.cells])

    def tokens(self):
        return [c.token for c in self.cells]

    def done(self):
        return not any(c.kind is CellKind.MASKED for c in self.cells)


def fresh_state(vocab, prompt_tokens, gen_len):
    """Initial state: prompt cells fixed, generation region fully masked."""
    if gen_len < 1:
        raise ValueError("gen_len must be >= 1")
    cells = [Cell(CellKind.PROMPT, t) for t in prompt_tokens]
    cells += [Cell(CellKind.MASKED, vocab.mask_id)] * gen_len
    return DecodeState(vocab=vocab, prompt_len=len(prompt_tokens), cells=cells)


@dataclass(frozen=True)
class LogitRow:
    """Raw model scores for one position. values is a 1-D float array."""

    values: np.ndarray


@dataclass(frozen=True)
class ProbRow:
    """Softmaxed scores for one position with the top-2 statistics cached.

    probs is float64 and sums to ~1; p1 >= p2 and probs[argmax] == p1 with the
    argmax taking the lowest index on ties.
    """

    probs: np.ndarray
    p1: float
    p2: float
    argmax: TokenId

    def validate(self):
        p = self.probs
        if p.ndim != 1 or p.dtype != np.float64:
            raise InvalidLogits("prob row must be 1-D float64")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvalidLogits("prob row must be finite and nonnegative")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise InvalidLogits("prob row must sum to 1")
        if not (self.p1 >= self.p2 >= 0) or self.probs[self.argmax] != self.p1:
            raise InvalidLogits("cached top-2 stats disagree with probs")


def prob_row(probs):
    """Bundle a probability vector with its top-2 statistics."""
    p1, p2, k1 = top2(probs)
    return ProbRow(probs=probs, p1=p1, p2=p2, argmax=k1)


def softmax(logits):
    """Numerically stable softmax in float64. No temperature.

    Raises InvalidLogits on NaN/inf inputs rather than propagating NaNs into
    downstream ratio math.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise InvalidLogits("softmax expects a 1-D nonempty vector")
    if not np.all(np.isfinite(x)):
        raise InvalidLogits("softmax input must be finite")
    x = x - x.max()  # shift-invariant, keeps exp in range
    e = np.exp(x)
    return e / e.sum()


def softmax_row(row):
    """Softmax a LogitRow into a ProbRow with cached top-2 stats."""
    return prob_row(softmax(row.values))


def softmax_rows(logit_mat):
    """Row-wise softmax for an (n, K) matrix, float64.

    Bit-identical to calling softmax per row (the per-element ops and the
    reduction order match); exists because one vectorized call per step beats
    n small ones.
    """
    x = np.asarray(logit_mat, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise InvalidLogits("softmax_rows expects a 2-D (n, K) matrix")
    if not np.all(np.isfinite(x)):
        raise InvalidLogits("softmax input must be finite")
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def top2(probs):
    """(p1, p2, argmax) with ties broken toward the lowest index.

    p2 is the largest value excluding the argmax slot itself, so duplicated
    maxima give p1 == p2.
    """
    p = np.asarray(probs)
    if p.ndim != 1 or p.size < MIN_VOCAB:
        raise VocabTooSmall("top2 needs at least two entries")
    k1 = int(np.argmax(p))  # np.argmax already takes the lowest index on ties
    p1 = float(p[k1])
    rest = p.copy()
    rest[k1] = -np.inf
    p2 = float(rest.max())
    return p1, p2, k1


def confidence_ratio(row, eps):
    """Top-1 to top-2 probability ratio, stabilised by eps in the denominator."""
    return ratio_from_pair(row.p1, row.p2, eps)


def ratio_from_pair(p1, p2, eps):
    if eps <= 0:
        raise ValueError("eps must be positive")
    return p1 / (p2 + eps)
