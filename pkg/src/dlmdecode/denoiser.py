"""Denoiser backends: the pluggable model side of the decode loop.

A denoiser is any callable taking a DenoiserRequest and returning a
DenoiserResponse with one logit row per currently masked position. Three
reference backends live here: a convergence oracle whose per-position
confidence jumps at a configured step, a context-coupled synthetic whose
confidence grows with unmasked neighbors (so early commits feed back into the
dynamics), and a replay backend serving logits recorded to a trace file.

The synthetic backends emit two-hot rows: the target logit at log(ratio), a
runner-up at 0, everything else at a -30 floor, making the top-2 probability
ratio analytically equal to the requested ratio.
"""

from dataclasses import dataclass

import numpy as np

from .core import LogitRow
from .tracefmt import TraceMismatch, read_trace_file

_M64 = (1 << 64) - 1
_FLOOR = -30.0


class DenoiserFailure(RuntimeError):
    """A backend violated the denoiser contract or could not serve a request."""


class SpecIncomplete(DenoiserFailure):
    """Synthetic spec lacks an entry for a position the state contains."""


@dataclass(frozen=True)
class DenoiserRequest:
    state: object  # DecodeState, read-only by convention
    step: int  # 1-based decode step


@dataclass(frozen=True)
class DenoiserResponse:
    rows: dict  # masked position -> LogitRow


def _splitmix(x):
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def counter_rand(seed, *counters):
    """Deterministic uniform in [0, 1) from a seed plus integer counters.

    Counter-based rather than sequential so results never depend on call
    order or iteration order.
    """
    z = seed & _M64
    for c in counters:
        z = _splitmix(z ^ (c & _M64))
    return z / 2.0**64


def pick_runner(target, vocab_size, mask_id):
    """Index that carries the runner-up logit.

    Prefers the lowest non-mask index above the target so that at ratio 1
    (an exact tie) the lowest-index argmax still lands on the target. Falls
    back to the mask slot or a lower index when the target sits at the top of
    the vocabulary.
    """
    for j in range(target + 1, vocab_size):
        if j != mask_id:
            return j
    if mask_id > target:
        return mask_id
    for j in range(target - 1, -1, -1):
        if j != mask_id:
            return j
    return mask_id


def _two_hot(vocab_size, mask_id, target, ratio, jitter, seed, pos, step):
    vals = np.full(vocab_size, _FLOOR)
    if jitter > 0.0:
        # perturb only the floor; the top-2 slots are overwritten below
        for j in range(vocab_size):
            vals[j] += jitter * (counter_rand(seed, pos, step, j) - 0.5)
    runner = pick_runner(target, vocab_size, mask_id)
    vals[runner] = 0.0
    vals[target] = float(np.log(ratio))
    return LogitRow(vals)


@dataclass(frozen=True)
class OracleSpec:
    """Per-position convergence script for the oracle backend.

    Position i emits top-2 ratio pre_ratio while step < stabilize_step[i] and
    post_ratio from that step on. targets/stabilize_step are keyed by
    absolute sequence position.
    """

    targets: dict
    stabilize_step: dict
    pre_ratio: float = 1.0
    post_ratio: float = 1000.0
    seed: int = 0
    jitter: float = 0.0

    def __post_init__(self):
        if self.pre_ratio < 1.0:
            raise ValueError("pre_ratio must be >= 1")
        if self.post_ratio <= self.pre_ratio:
            raise ValueError("post_ratio must exceed pre_ratio")
        if any(s < 1 for s in self.stabilize_step.values()):
            raise ValueError("stabilize steps are 1-based and must be >= 1")
        if self.jitter < 0.0:
            raise ValueError("jitter must be >= 0")


def oracle_denoise(spec, req):
    state = req.state
    k, mask_id = state.vocab.size, state.vocab.mask_id
    rows = {}
    for pos in state.masked_positions():
        if pos not in spec.targets or pos not in spec.stabilize_step:
            raise SpecIncomplete(f"no oracle entry for position {pos}")
        ratio = spec.pre_ratio if req.step < spec.stabilize_step[pos] else spec.post_ratio
        rows[pos] = _two_hot(
            k, mask_id, spec.targets[pos], ratio, spec.jitter, spec.seed, pos, req.step
        )
    return DenoiserResponse(rows=rows)


@dataclass(frozen=True)
class CoupledSpec:
    """Context-coupled synthetic: confidence rises with unmasked neighbors.

    Position i emits top-2 ratio base_ratio * (1 + gain * c_i) where c_i is
    the fraction of in-bounds cells within coupling_window of i that are
    already unmasked (prompt cells count). Early commits therefore raise
    neighbors' ratios on the next step.
    """

    targets: dict
    base_ratio: float = 50.0
    gain: float = 2.0
    coupling_window: int = 4
    seed: int = 0
    jitter: float = 0.0

    def __post_init__(self):
        if self.base_ratio < 1.0:
            raise ValueError("base_ratio must be >= 1")
        if self.gain < 0.0:
            raise ValueError("gain must be >= 0")
        if self.coupling_window < 1:
            raise ValueError("coupling_window must be >= 1")
        if self.jitter < 0.0:
            raise ValueError("jitter must be >= 0")


def context_fractions(state, window):
    """c_i per absolute position: unmasked share of the in-bounds neighborhood."""
    flags = state.unmasked_flags().astype(np.float64)
    n = flags.shape[0]
    prefix = np.concatenate([[0.0], np.cumsum(flags)])
    out = np.zeros(n)
    for i in range(n):
        lo = max(0, i - window)
        hi = min(n - 1, i + window)
        total = hi - lo  # neighborhood size excluding i itself
        if total <= 0:
            continue
        count = prefix[hi + 1] - prefix[lo] - flags[i]
        out[i] = count / total
    return out


def coupled_denoise(spec, req):
    state = req.state
    k, mask_id = state.vocab.size, state.vocab.mask_id
    c = context_fractions(state, spec.coupling_window)
    rows = {}
    for pos in state.masked_positions():
        if pos not in spec.targets:
            raise SpecIncomplete(f"no target for position {pos}")
        ratio = spec.base_ratio * (1.0 + spec.gain * c[pos])
        rows[pos] = _two_hot(
            k, mask_id, spec.targets[pos], ratio, spec.jitter, spec.seed, pos, req.step
        )
    return DenoiserResponse(rows=rows)


class TraceReplay:
    """Serves recorded logits back to the decode loop.

    Open-loop by construction: the file holds the logits the recorder's own
    baseline decode produced, so replayed steps reflect that path, not any
    decisions made in this process. Requests beyond the recorded range get
    the last recorded step (clamp).
    """

    def __init__(self, path):
        self.header, blocks = read_trace_file(path)
        if self.header.recorded_steps < 1:
            raise TraceMismatch("trace has no recorded steps")
        self._by_step = {}
        for b in blocks:
            index = {int(p): i for i, p in enumerate(b.positions)}
            self._by_step[b.step_index] = (index, b.logits)

    def __call__(self, req):
        return replay_denoise(self, req)


def replay_denoise(trace, req):
    state = req.state
    h = trace.header
    if h.vocab_size != state.vocab.size:
        raise TraceMismatch(
            f"trace vocab {h.vocab_size} != state vocab {state.vocab.size}"
        )
    if h.prompt_len != state.prompt_len or h.gen_len != state.gen_len:
        raise TraceMismatch(
            f"trace geometry ({h.prompt_len}+{h.gen_len}) != state "
            f"({state.prompt_len}+{state.gen_len})"
        )
    step = min(req.step, h.recorded_steps)
    index, logits = trace._by_step[step]
    rows = {}
    for pos in state.masked_positions():
        i = index.get(pos)
        if i is None:
            raise TraceMismatch(f"position {pos} not recorded at step {step}")
        rows[pos] = LogitRow(logits[i])
    return DenoiserResponse(rows=rows)


def make_oracle(spec):
    return lambda req: oracle_denoise(spec, req)


def make_coupled(spec):
    return lambda req: coupled_denoise(spec, req)
