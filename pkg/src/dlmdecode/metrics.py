"""Decode transcripts, speedup accounting, and tabular exports.

A DecodeTrace is the complete per-step record of one decode; everything
reported downstream (speedups, dynamics curves, sweep tables) is derived from
collections of them. CSV output uses fixed 17-significant-digit formatting so
files diff cleanly across platforms.
"""

import json
from dataclasses import dataclass


@dataclass(frozen=True)
class StepRecord:
    """What one decode step did. Doubles as the step outcome structure.

    early_exited and transferred are (position, token) pairs sorted by
    position; mean_conf_ratio averages the confidence ratio over the step's
    full starting masked set, before any commits.
    """

    step: int
    masked_before: int
    early_exited: tuple
    transferred: tuple
    remaining_masked: int
    mean_conf_ratio: float


@dataclass(frozen=True)
class DecodeTrace:
    records: tuple  # StepRecord per executed step, in order
    configured_steps: int
    gen_len: int
    wallclock_ns: int

    @property
    def actual_steps(self):
        return len(self.records)

    def validate(self):
        if self.actual_steps > self.configured_steps:
            raise ValueError("ran more steps than configured")
        moved = sum(len(r.early_exited) + len(r.transferred) for r in self.records)
        if moved != self.gen_len:
            raise ValueError(
                f"exits+transfers = {moved} but generation region holds {self.gen_len}"
            )


def transcript(trace):
    """Everything that must be bit-identical between equivalent runs.

    Excludes wallclock_ns, which is measurement noise by nature.
    """
    return (trace.configured_steps, trace.gen_len, trace.records)


@dataclass(frozen=True)
class RunSummary:
    policy_id: str
    config: dict  # resolved config snapshot, JSON-compatible
    traces: tuple  # DecodeTrace per seed
    step_speedup: float
    wallclock_speedup: float | None = None
    score_proxy: float | None = None


def step_speedup(summary):
    """Configured steps divided by the mean of actual step counts."""
    return _speedup(summary.traces)


def _speedup(traces):
    if not traces:
        raise ValueError("need at least one completed decode")
    configured = {t.configured_steps for t in traces}
    if len(configured) != 1:
        raise ValueError("traces disagree on configured step count")
    mean_actual = sum(t.actual_steps for t in traces) / len(traces)
    return configured.pop() / mean_actual


def make_summary(policy_id, config, traces, wallclock_speedup=None, score_proxy=None):
    traces = tuple(traces)
    for t in traces:
        t.validate()
    return RunSummary(
        policy_id=policy_id,
        config=config,
        traces=traces,
        step_speedup=_speedup(traces),
        wallclock_speedup=wallclock_speedup,
        score_proxy=score_proxy,
    )


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def dynamics_csv(trace_sets):
    """Per-step dynamics table, one column group per labeled trace set.

    trace_sets maps label -> sequence of DecodeTrace (a bare sequence gets the
    label "run"). Row s aggregates over the traces still running at step s:
    the mean of their logged mean confidence ratios plus total exit and
    transfer counts. Cells go blank once every trace in a set has finished.
    Row count is the max actual step count over all sets.
    """
    if not isinstance(trace_sets, dict):
        trace_sets = {"run": list(trace_sets)}
    if not trace_sets or any(len(ts) == 0 for ts in trace_sets.values()):
        raise ValueError("need at least one trace per set")
    max_steps = max(t.actual_steps for ts in trace_sets.values() for t in ts)
    cols = ["step"]
    for label in trace_sets:
        safe = str(label).replace(",", "_")
        cols += [f"{safe}_mean_conf_ratio", f"{safe}_exits", f"{safe}_transfers"]
    lines = [",".join(cols)]
    for s in range(1, max_steps + 1):
        cells = [str(s)]
        for ts in trace_sets.values():
            live = [t.records[s - 1] for t in ts if t.actual_steps >= s]
            if live:
                mean_r = sum(r.mean_conf_ratio for r in live) / len(live)
                exits = sum(len(r.early_exited) for r in live)
                transfers = sum(len(r.transferred) for r in live)
                cells += [_fmt(mean_r), str(exits), str(transfers)]
            else:
                cells += ["", "", ""]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = json.dumps(v) if isinstance(v, list) else v
    return out


def sweep_table(summaries, axes=None):
    """One row per summary: grid-axis values, policy, speedups, score proxy.

    All summaries must share a denoiser spec (rows are only comparable when
    the workload is fixed). axes lists dotted config paths for the leading
    columns; when omitted, every flattened config key whose value varies
    across summaries becomes an axis, sorted by name.
    """
    summaries = list(summaries)
    if not summaries:
        raise ValueError("empty summary set")
    denoisers = [s.config.get("denoiser") for s in summaries]
    if any(d != denoisers[0] for d in denoisers):
        raise ValueError("summaries do not share a denoiser spec")
    flat = [_flatten(s.config) for s in summaries]
    if axes is None:
        keys = sorted({k for f in flat for k in f})
        axes = [
            k
            for k in keys
            if len({json.dumps(f.get(k), sort_keys=True) for f in flat}) > 1
        ]
    lines = [",".join(list(axes) + ["policy", "step_speedup", "wallclock_speedup", "score_proxy"])]
    for s, f in zip(summaries, flat):
        cells = [_fmt(f.get(a)) for a in axes]
        cells += [
            s.policy_id,
            _fmt(s.step_speedup),
            _fmt(s.wallclock_speedup),
            _fmt(s.score_proxy),
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def trace_csv(trace):
    """Per-step CSV for one decode: counts only, no wallclock, so identical
    runs serialize to identical bytes."""
    lines = ["step,masked_before,early_exits,transfers,mean_conf_ratio"]
    for r in trace.records:
        lines.append(
            f"{r.step},{r.masked_before},{len(r.early_exited)},"
            f"{len(r.transferred)},{_fmt(r.mean_conf_ratio)}"
        )
    return "\n".join(lines) + "\n"
