"""Early-exit decision rules.

Four interchangeable policies decide which masked positions to commit ahead
of the transfer schedule: confidence-ratio thresholding with a spatially
adaptive threshold, a global top-2-gap commit, per-position KL stability
tracking, and a no-op baseline. All of them see softmaxed rows for the
currently decidable masked positions and return the same decision shape.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import confidence_ratio
from .spatial import SpatialConfig


class PolicyKind(Enum):
    JOT = "jot"
    PROPHET = "prophet"
    KL_STABILITY = "kl-stability"
    NONE = "none"


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind = PolicyKind.JOT
    tau_max: float = 90.0
    tau_min: float = 1.0
    spatial: SpatialConfig | None = None  # absent = threshold-only, phi pinned to 0
    eps: float = 1e-10
    prophet_gap: float = 0.9
    kl_delta: float = 1e-3
    kl_window: int = 2

    def __post_init__(self):
        if self.tau_max <= 0 or self.tau_min <= 0:
            raise ValueError("thresholds must be positive")
        if self.tau_min > self.tau_max:
            raise ValueError(f"tau_min {self.tau_min} exceeds tau_max {self.tau_max}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.prophet_gap < 0:
            raise ValueError("prophet_gap must be >= 0")
        if self.kl_delta < 0:
            raise ValueError("kl_delta must be >= 0")
        if self.kl_window < 1:
            raise ValueError("kl_window must be >= 1")


@dataclass(frozen=True)
class ExitDecision:
    """Positions to commit this step, each with its argmax token.

    finalize is sorted by position. commit_all marks the global variant where
    the policy ends the whole remaining decode at once.
    """

    finalize: tuple = ()
    commit_all: bool = False


EMPTY_DECISION = ExitDecision()


@dataclass
class KlState:
    """Carry-over between steps for the KL-stability policy.

    prev keeps last step's probability vectors keyed by position (absent
    entries mean no history, divergence treated as 0). counts are consecutive
    stable-step counters, reset whenever a position's divergence exceeds the
    tolerance.
    """

    prev: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


def adaptive_threshold(phi, cfg):
    """Exit threshold interpolated from tau_max (phi=0) down to tau_min (phi=1).

    Endpoints are returned exactly, not via the interpolation formula, so a
    fully softened or fully unsoftened position compares against the
    configured bound bit-for-bit.
    """
    if not (0.0 <= phi <= 1.0):
        raise ValueError(f"phi must be in [0, 1], got {phi}")
    if phi == 0.0:
        return cfg.tau_max
    if phi == 1.0:
        return cfg.tau_min
    tau = cfg.tau_max - (cfg.tau_max - cfg.tau_min) * phi
    return min(max(tau, cfg.tau_min), cfg.tau_max)


def jot_decide(rows, spatial_field, cfg):
    """Per-position exits: finalize where the confidence ratio meets the threshold.

    rows maps masked position -> ProbRow. spatial_field may be None, treating
    phi as 0 everywhere (flat threshold at tau_max). Ties finalize: the
    comparison is >=.
    """
    out = []
    for pos in sorted(rows):
        row = rows[pos]
        phi = spatial_field.phi_at(pos) if spatial_field is not None else 0.0
        if confidence_ratio(row, cfg.eps) >= adaptive_threshold(phi, cfg):
            out.append((pos, row.argmax))
    return ExitDecision(finalize=tuple(out))


def prophet_decide(rows, cfg):
    """All-or-nothing commit once every position's top-2 gap clears prophet_gap."""
    if not rows:
        return EMPTY_DECISION
    min_gap = min(row.p1 - row.p2 for row in rows.values())
    if min_gap >= cfg.prophet_gap:
        out = tuple((pos, rows[pos].argmax) for pos in sorted(rows))
        return ExitDecision(finalize=out, commit_all=True)
    return EMPTY_DECISION


def kl_divergence(p, q):
    """D_KL(p || q) in nats. Terms with p == 0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    live = p > 0.0
    with np.errstate(divide="ignore"):
        # q == 0 against p > 0 gives +inf, which is the right answer
        terms = p[live] * (np.log(p[live]) - np.log(q[live]))
    return float(terms.sum())


def kl_decide(rows, kl, cfg):
    """Finalize positions whose distribution has been stable for kl_window steps.

    Stability at a step means divergence from the previous step's distribution
    is at most kl_delta; a position with no history counts as stable. Returns
    the decision plus the state to thread into the next step (current rows
    become prev; positions that left the masked set are dropped).
    """
    out = []
    counts = {}
    prev = {}
    for pos in sorted(rows):
        row = rows[pos]
        if pos in kl.prev:
            div = kl_divergence(kl.prev[pos], row.probs)
        else:
            div = 0.0
        c = kl.counts.get(pos, 0) + 1 if div <= cfg.kl_delta else 0
        if c >= cfg.kl_window:
            out.append((pos, row.argmax))
        else:
            counts[pos] = c
            prev[pos] = row.probs
    return ExitDecision(finalize=tuple(out)), KlState(prev=prev, counts=counts)


def decide(kind, rows, spatial_field, kl, cfg):
    """Dispatch one step's exit decision. Returns (decision, next KlState)."""
    if kind is PolicyKind.NONE:
        return EMPTY_DECISION, kl
    if kind is PolicyKind.JOT:
        return jot_decide(rows, spatial_field, cfg), kl
    if kind is PolicyKind.PROPHET:
        return prophet_decide(rows, cfg), kl
    if kind is PolicyKind.KL_STABILITY:
        return kl_decide(rows, kl, cfg)
    raise ValueError(f"unknown policy kind {kind}")
