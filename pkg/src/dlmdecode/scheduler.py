"""The decode loop: step iteration, early exits, transfer schedule, termination.

Each step asks the denoiser for logits over the masked set, lets the policy
finalize what it is sure about, then unmasks enough of the highest-confidence
remainder to stay on schedule. The per-step transfer quota is recomputed from
what is still masked, so every early exit shrinks the remaining work and the
loop ends as soon as nothing is masked; that recomputation is the entire
mechanism by which exits turn into fewer steps.

Two scheduling shapes: whole-sequence (no block_size) spreads the quota over
all remaining steps; block mode walks contiguous blocks left to right, gives
each block an equal share of the step budget, and rolls unused steps forward.
Exits and transfers in block mode stay inside the active block.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .core import Cell, CellKind, DecodeState, ProbRow, softmax_rows
from .denoiser import DenoiserFailure, DenoiserRequest
from .metrics import DecodeTrace, StepRecord
from .policy import KlState, PolicyKind, decide
from .spatial import field_for_state

# flat StepRecord doubles as the per-step outcome structure
StepOutcome = StepRecord


class ScheduleExhausted(RuntimeError):
    """Masked cells remained after the configured step budget.

    Unreachable under the built-in ceiling quota; kept as a guard for
    custom quota rules.
    """


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    gen_len: int
    block_size: int | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.gen_len < 1:
            raise ValueError("gen_len must be >= 1")
        if self.block_size is not None:
            if self.block_size < 1:
                raise ValueError("block_size must be >= 1")
            if self.total_steps < self.num_blocks:
                raise ValueError(
                    f"total_steps {self.total_steps} cannot cover "
                    f"{self.num_blocks} blocks (need >= 1 step per block)"
                )

    @property
    def num_blocks(self):
        if self.block_size is None:
            return 1
        return math.ceil(self.gen_len / self.block_size)


def step_quota(sched, remaining_masked, remaining_steps):
    """ceil(remaining/steps): enough unmasking per step to finish on time."""
    if remaining_steps < 1:
        raise ValueError("remaining_steps must be >= 1")
    if remaining_masked == 0:
        return 0
    return -(-remaining_masked // remaining_steps)


def block_budgets(sched):
    """Per-block step allowances: an even split of T, remainder to the front."""
    nb = sched.num_blocks
    base, extra = divmod(sched.total_steps, nb)
    return [base + (1 if i < extra else 0) for i in range(nb)]


def block_view(state, sched):
    """(low, high) bounds of the lowest-indexed block still holding masked cells,
    or None when everything is decoded. Bounds are absolute positions."""
    if sched.block_size is None:
        raise ValueError("block_view requires block scheduling")
    for b in range(sched.num_blocks):
        lo = state.prompt_len + b * sched.block_size
        hi = min(lo + sched.block_size, state.prompt_len + sched.gen_len)
        if any(c.kind is CellKind.MASKED for c in state.cells[lo:hi]):
            return lo, hi
    return None


def transfer_select(rows, quota):
    """The quota positions with the largest top-1 probability, lowest index on
    ties. Returns an ascending tuple."""
    if quota < 1:
        raise ValueError("quota must be >= 1")
    ranked = sorted(rows, key=lambda pos: (-rows[pos].p1, pos))
    return tuple(sorted(ranked[: min(quota, len(ranked))]))


def _active_block_index(state, sched):
    for b in range(sched.num_blocks):
        lo = state.prompt_len + b * sched.block_size
        hi = min(lo + sched.block_size, state.prompt_len + sched.gen_len)
        if any(c.kind is CellKind.MASKED for c in state.cells[lo:hi]):
            return b, lo, hi
    return None


def _rows_from_response(resp, masked, eps):
    """Softmax the response batch; returns ({pos: ProbRow}, mean confidence ratio)."""
    mat = np.stack([np.asarray(resp.rows[p].values) for p in masked])
    probs = softmax_rows(mat)
    m = probs.shape[0]
    idx = np.arange(m)
    k1 = np.argmax(probs, axis=1)
    p1 = probs[idx, k1]
    rest = probs.copy()
    rest[idx, k1] = -np.inf
    p2 = rest.max(axis=1)
    rows = {
        pos: ProbRow(probs=probs[i], p1=float(p1[i]), p2=float(p2[i]), argmax=int(k1[i]))
        for i, pos in enumerate(masked)
    }
    mean_r = float(np.mean(p1 / (p2 + eps)))
    return rows, mean_r


def decode(denoiser, state, policy, sched):
    """Run the full denoising loop. Returns (final state, trace).

    state must be freshly initialized (all generation cells masked). The
    input state is not mutated; decoding happens on a copy.
    """
    if sched.gen_len != state.gen_len:
        raise ValueError("schedule gen_len disagrees with the state")
    if state.step != 0 or len(state.masked_positions()) != state.gen_len:
        raise ValueError("decode needs a freshly initialized state")

    work = DecodeState(
        vocab=state.vocab,
        prompt_len=state.prompt_len,
        cells=list(state.cells),
        step=0,
    )
    total = sched.total_steps
    block_mode = sched.block_size is not None
    budgets = block_budgets(sched) if block_mode else None
    cur_block = -1
    block_steps_left = 0
    kl = KlState()
    records = []

    t0 = time.perf_counter_ns()
    for n in range(1, total + 1):
        masked = work.masked_positions()
        if not masked:
            break
        work.step = n
        resp = denoiser(DenoiserRequest(state=work, step=n))
        if set(resp.rows) != set(masked):
            raise DenoiserFailure(
                "denoiser response keys disagree with the masked set"
            )
        rows, mean_r = _rows_from_response(resp, masked, policy.eps)

        if block_mode:
            b, lo, hi = _active_block_index(work, sched)
            if b != cur_block:
                # entering a new block: unspent steps roll forward
                block_steps_left += sum(budgets[cur_block + 1 : b + 1])
                cur_block = b
            active = {p: rows[p] for p in masked if lo <= p < hi}
            steps_left = block_steps_left
        else:
            active = rows
            steps_left = total - n + 1

        spatial_field = None
        if policy.kind is PolicyKind.JOT and policy.spatial is not None:
            spatial_field = field_for_state(work, policy.spatial)
        decision, kl = decide(policy.kind, active, spatial_field, kl, policy)
        for pos, tok in decision.finalize:
            work.cells[pos] = Cell(CellKind.FINALIZED, tok, step=n)

        leftover = [p for p in active if work.cells[p].kind is CellKind.MASKED]
        transferred = ()
        if leftover:
            quota = step_quota(sched, len(leftover), steps_left)
            chosen = transfer_select({p: rows[p] for p in leftover}, quota)
            transferred = tuple((p, rows[p].argmax) for p in chosen)
            for pos, tok in transferred:
                work.cells[pos] = Cell(CellKind.FINALIZED, tok, step=n)

        if block_mode:
            block_steps_left -= 1
        records.append(
            StepRecord(
                step=n,
                masked_before=len(masked),
                early_exited=decision.finalize,
                transferred=transferred,
                remaining_masked=len(masked) - len(decision.finalize) - len(transferred),
                mean_conf_ratio=mean_r,
            )
        )
    wall = time.perf_counter_ns() - t0

    if not work.done():
        raise ScheduleExhausted(
            f"{len(work.masked_positions())} cells still masked after {total} steps"
        )
    trace = DecodeTrace(
        records=tuple(records),
        configured_steps=total,
        gen_len=sched.gen_len,
        wallclock_ns=wall,
    )
    trace.validate()
    return work, trace
