"""Command-line front door: single runs, sweeps, dynamics exports, replay checks.

Experiments are described by a JSON config (archivable, unlike a pile of
flags); the sweep command layers axis overrides on top of it. Outputs are
plain files under the config's output prefix:

    {output}_summary.json   resolved config + speedups + per-seed tokens
    {output}_trace_{seed}.csv  per-step decode records
    {output}_dynamics.csv   baseline vs policy confidence dynamics
    {output}_sweep.csv      one row per grid point

Exit codes: 0 success, 1 config error (message names the offending field),
2 denoiser or trace error, 3 replay-verify token mismatch.
"""

import argparse
import copy
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .core import InvalidLogits, Vocab, fresh_state
from .denoiser import (
    CoupledSpec,
    DenoiserFailure,
    OracleSpec,
    TraceReplay,
    counter_rand,
    make_coupled,
    make_oracle,
)
from .metrics import dynamics_csv, make_summary, sweep_table, trace_csv
from .policy import PolicyConfig, PolicyKind
from .scheduler import ScheduleConfig, decode
from .spatial import SpatialConfig
from .tracefmt import TraceError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_MISMATCH = 3

_POLICY_KINDS = {k.value: k for k in PolicyKind}
_DENOISER_KINDS = ("oracle", "coupled", "replay")

# lanes keep the counter-based streams for different purposes disjoint
_LANE_PROMPT = 7
_LANE_TARGET = 101
_LANE_STABILIZE = 202


class ConfigError(ValueError):
    """Invalid or missing configuration; the message names the field."""


def _want(section, raw, field, types, default=None, required=False):
    path = f"{section}.{field}" if section else field
    if field not in raw:
        if required:
            raise ConfigError(f"{path}: required field missing")
        return default
    val = raw[field]
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{path}: expected {types}, got a boolean")
    if not isinstance(val, types):
        raise ConfigError(f"{path}: expected {getattr(types, '__name__', types)}, got {type(val).__name__}")
    return val


def _reject_unknown(section, raw, known):
    for k in raw:
        if k not in known:
            where = f"{section}.{k}" if section else k
            raise ConfigError(f"{where}: unknown field")


@dataclass
class Resolved:
    """A fully validated run description plus its JSON-compatible snapshot."""

    config: dict
    policy: PolicyConfig
    sched: ScheduleConfig
    vocab: Vocab
    prompt_len: int
    seeds: tuple
    output: str


def _resolve_spatial(raw_policy):
    if "spatial" not in raw_policy:
        spec = {"gamma": 0.5, "window": 8}
    else:
        spec = raw_policy["spatial"]
    if spec is None:
        return None, None
    if not isinstance(spec, dict):
        raise ConfigError("policy.spatial: expected an object or null")
    _reject_unknown("policy.spatial", spec, {"gamma", "window"})
    gamma = _want("policy.spatial", spec, "gamma", (int, float), default=0.5)
    window = _want("policy.spatial", spec, "window", int, default=8)
    try:
        cfg = SpatialConfig(gamma=float(gamma), window=window)
    except ValueError as e:
        raise ConfigError(f"policy.spatial: {e}") from None
    return cfg, {"gamma": float(gamma), "window": window}


def _resolve_policy(raw):
    raw = dict(raw or {})
    _reject_unknown(
        "policy",
        raw,
        {"kind", "tau_max", "tau_min", "eps", "spatial", "prophet_gap", "kl_delta", "kl_window"},
    )
    kind_s = _want("policy", raw, "kind", str, default="jot")
    if kind_s not in _POLICY_KINDS:
        raise ConfigError(
            f"policy.kind: unknown policy {kind_s!r}, expected one of {sorted(_POLICY_KINDS)}"
        )
    spatial_cfg, spatial_snap = _resolve_spatial(raw)
    fields = dict(
        tau_max=float(_want("policy", raw, "tau_max", (int, float), default=90.0)),
        tau_min=float(_want("policy", raw, "tau_min", (int, float), default=1.0)),
        eps=float(_want("policy", raw, "eps", (int, float), default=1e-10)),
        prophet_gap=float(_want("policy", raw, "prophet_gap", (int, float), default=0.9)),
        kl_delta=float(_want("policy", raw, "kl_delta", (int, float), default=1e-3)),
        kl_window=_want("policy", raw, "kl_window", int, default=2),
    )
    try:
        policy = PolicyConfig(kind=_POLICY_KINDS[kind_s], spatial=spatial_cfg, **fields)
    except ValueError as e:
        raise ConfigError(f"policy: {e}") from None
    snap = {"kind": kind_s, "spatial": spatial_snap, **fields}
    return policy, snap


def _resolve_schedule(raw):
    raw = dict(raw or {})
    _reject_unknown("schedule", raw, {"total_steps", "gen_len", "block_size"})
    total = _want("schedule", raw, "total_steps", int, required=True)
    gen_len = _want("schedule", raw, "gen_len", int, required=True)
    block = raw.get("block_size")
    if block is not None and not isinstance(block, int):
        raise ConfigError("schedule.block_size: expected an integer or null")
    try:
        sched = ScheduleConfig(total_steps=total, gen_len=gen_len, block_size=block)
    except ValueError as e:
        raise ConfigError(f"schedule: {e}") from None
    return sched, {"total_steps": total, "gen_len": gen_len, "block_size": block}


def _resolve_vocab(raw):
    raw = dict(raw or {})
    _reject_unknown("vocab", raw, {"size", "mask_id"})
    size = _want("vocab", raw, "size", int, default=32)
    mask_id = _want("vocab", raw, "mask_id", int, default=size - 1)
    try:
        vocab = Vocab(size=size, mask_id=mask_id)
    except ValueError as e:
        raise ConfigError(f"vocab: {e}") from None
    return vocab, {"size": size, "mask_id": mask_id}


def _check_targets(raw_targets, vocab, gen_len):
    if raw_targets is None:
        return None
    if not isinstance(raw_targets, list) or len(raw_targets) != gen_len:
        raise ConfigError(
            f"denoiser.targets: expected null or a list of {gen_len} token ids"
        )
    for t in raw_targets:
        if not isinstance(t, int) or not (0 <= t < vocab.size) or t == vocab.mask_id:
            raise ConfigError(
                f"denoiser.targets: {t!r} is not a non-mask token id in [0, {vocab.size})"
            )
    return list(raw_targets)


def _check_stabilize(val, gen_len, total_steps):
    if isinstance(val, bool):
        raise ConfigError("denoiser.stabilize: expected int, list, or distribution object")
    if isinstance(val, int):
        if val < 1:
            raise ConfigError("denoiser.stabilize: steps are 1-based, must be >= 1")
        return val
    if isinstance(val, list):
        if len(val) != gen_len or any(not isinstance(s, int) or s < 1 for s in val):
            raise ConfigError(
                f"denoiser.stabilize: list must hold {gen_len} integers >= 1"
            )
        return list(val)
    if isinstance(val, dict) and len(val) == 1:
        (mode, bounds), = val.items()
        if mode in ("uniform", "staircase"):
            if (
                not isinstance(bounds, list)
                or len(bounds) != 2
                or any(not isinstance(b, int) for b in bounds)
                or not (1 <= bounds[0] <= bounds[1])
            ):
                raise ConfigError(
                    f"denoiser.stabilize.{mode}: expected [lo, hi] with 1 <= lo <= hi"
                )
            return {mode: list(bounds)}
    raise ConfigError("denoiser.stabilize: expected int, list, or {uniform|staircase: [lo, hi]}")


def _resolve_denoiser(raw, vocab, sched):
    raw = dict(raw or {})
    kind = _want("denoiser", raw, "kind", str, required=True)
    if kind not in _DENOISER_KINDS:
        raise ConfigError(
            f"denoiser.kind: unknown backend {kind!r}, expected one of {_DENOISER_KINDS}"
        )
    if kind == "replay":
        _reject_unknown("denoiser", raw, {"kind", "path"})
        path = _want("denoiser", raw, "path", str, required=True)
        return {"kind": kind, "path": path}
    common = {"kind", "targets", "jitter"}
    snap = {
        "kind": kind,
        "targets": _check_targets(raw.get("targets"), vocab, sched.gen_len),
        "jitter": float(_want("denoiser", raw, "jitter", (int, float), default=0.0)),
    }
    if snap["jitter"] < 0:
        raise ConfigError("denoiser.jitter: must be >= 0")
    if kind == "oracle":
        _reject_unknown("denoiser", raw, common | {"pre_ratio", "post_ratio", "stabilize"})
        snap["pre_ratio"] = float(_want("denoiser", raw, "pre_ratio", (int, float), default=1.0))
        snap["post_ratio"] = float(_want("denoiser", raw, "post_ratio", (int, float), default=1000.0))
        if snap["pre_ratio"] < 1.0:
            raise ConfigError("denoiser.pre_ratio: must be >= 1")
        if snap["post_ratio"] <= snap["pre_ratio"]:
            raise ConfigError("denoiser.post_ratio: must exceed pre_ratio")
        snap["stabilize"] = _check_stabilize(
            raw.get("stabilize", 1), sched.gen_len, sched.total_steps
        )
    else:
        _reject_unknown("denoiser", raw, common | {"base_ratio", "gain", "coupling_window"})
        snap["base_ratio"] = float(_want("denoiser", raw, "base_ratio", (int, float), default=50.0))
        snap["gain"] = float(_want("denoiser", raw, "gain", (int, float), default=2.0))
        snap["coupling_window"] = _want("denoiser", raw, "coupling_window", int, default=4)
        if snap["base_ratio"] < 1.0:
            raise ConfigError("denoiser.base_ratio: must be >= 1")
        if snap["gain"] < 0:
            raise ConfigError("denoiser.gain: must be >= 0")
        if snap["coupling_window"] < 1:
            raise ConfigError("denoiser.coupling_window: must be >= 1")
    return snap


def resolve_config(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    _reject_unknown(
        "", raw, {"denoiser", "policy", "schedule", "vocab", "prompt_len", "seeds", "output"}
    )
    sched, sched_snap = _resolve_schedule(
        _want("", raw, "schedule", dict, required=True)
    )
    vocab, vocab_snap = _resolve_vocab(_want("", raw, "vocab", dict, default={}))
    policy, policy_snap = _resolve_policy(_want("", raw, "policy", dict, default={}))
    den_snap = _resolve_denoiser(
        _want("", raw, "denoiser", dict, required=True), vocab, sched
    )
    prompt_len = _want("", raw, "prompt_len", int, default=0)
    if prompt_len < 0:
        raise ConfigError("prompt_len: must be >= 0")
    seeds = _want("", raw, "seeds", list, default=[0])
    if not seeds or any(not isinstance(s, int) or isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of integers")
    output = _want("", raw, "output", str, required=True)
    if not output:
        raise ConfigError("output: must be a nonempty path prefix")
    config = {
        "denoiser": den_snap,
        "policy": policy_snap,
        "schedule": sched_snap,
        "vocab": vocab_snap,
        "prompt_len": prompt_len,
        "seeds": list(seeds),
        "output": output,
    }
    return Resolved(
        config=config,
        policy=policy,
        sched=sched,
        vocab=vocab,
        prompt_len=prompt_len,
        seeds=tuple(seeds),
        output=output,
    )


def load_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"config: cannot read {path} ({e})") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: {path} is not valid JSON ({e})") from None
    return resolve_config(raw)


def _pick(seed, lane, pos, n_choices):
    return int(counter_rand(seed, lane, pos) * n_choices)


def synth_prompt(vocab, prompt_len, seed):
    """Deterministic filler prompt; the synthetic backends never look at it."""
    choices = [t for t in range(vocab.size) if t != vocab.mask_id]
    return [choices[_pick(seed, _LANE_PROMPT, p, len(choices))] for p in range(prompt_len)]


def _synth_targets(snap, vocab, lo, hi, seed):
    if snap["targets"] is not None:
        return {lo + i: t for i, t in enumerate(snap["targets"])}
    choices = [t for t in range(vocab.size) if t != vocab.mask_id]
    return {p: choices[_pick(seed, _LANE_TARGET, p, len(choices))] for p in range(lo, hi)}


def _synth_stabilize(spec, lo, hi, seed):
    if isinstance(spec, int):
        return {p: spec for p in range(lo, hi)}
    if isinstance(spec, list):
        return {lo + i: s for i, s in enumerate(spec)}
    (mode, (a, b)), = spec.items()
    if mode == "uniform":
        return {p: a + _pick(seed, _LANE_STABILIZE, p, b - a + 1) for p in range(lo, hi)}
    # staircase: an even ramp from a to b across the region
    span = max(hi - lo - 1, 1)
    return {p: a + (p - lo) * (b - a) // span for p in range(lo, hi)}


def build_denoiser(res, seed):
    """Denoiser callable plus the per-position targets (None for replay)."""
    snap = res.config["denoiser"]
    lo = res.prompt_len
    hi = lo + res.sched.gen_len
    if snap["kind"] == "replay":
        return TraceReplay(snap["path"]), None
    targets = _synth_targets(snap, res.vocab, lo, hi, seed)
    if snap["kind"] == "oracle":
        spec = OracleSpec(
            targets=targets,
            stabilize_step=_synth_stabilize(snap["stabilize"], lo, hi, seed),
            pre_ratio=snap["pre_ratio"],
            post_ratio=snap["post_ratio"],
            seed=seed,
            jitter=snap["jitter"],
        )
        return make_oracle(spec), targets
    spec = CoupledSpec(
        targets=targets,
        base_ratio=snap["base_ratio"],
        gain=snap["gain"],
        coupling_window=snap["coupling_window"],
        seed=seed,
        jitter=snap["jitter"],
    )
    return make_coupled(spec), targets


def _decode_seed(res, seed, policy):
    denoiser, targets = build_denoiser(res, seed)
    state = fresh_state(res.vocab, synth_prompt(res.vocab, res.prompt_len, seed), res.sched.gen_len)
    final, trace = decode(denoiser, state, policy, res.sched)
    return final, trace, targets


def execute_run(res):
    """Decode every seed; returns (summary, per-seed final states)."""
    finals, traces, matches, total = [], [], 0, 0
    have_targets = res.config["denoiser"]["kind"] != "replay"
    for seed in res.seeds:
        final, trace, targets = _decode_seed(res, seed, res.policy)
        finals.append(final)
        traces.append(trace)
        if have_targets:
            for pos, want in targets.items():
                total += 1
                matches += final.cells[pos].token == want
    wallclock_speedup = 1.0
    if res.policy.kind is not PolicyKind.NONE:
        baseline = PolicyConfig(kind=PolicyKind.NONE, eps=res.policy.eps)
        base_wall = sum(
            _decode_seed(res, seed, baseline)[1].wallclock_ns for seed in res.seeds
        )
        mine_wall = sum(t.wallclock_ns for t in traces)
        wallclock_speedup = base_wall / mine_wall if mine_wall else None
    summary = make_summary(
        policy_id=res.config["policy"]["kind"],
        config=res.config,
        traces=traces,
        wallclock_speedup=wallclock_speedup,
        score_proxy=(matches / total) if have_targets and total else None,
    )
    return summary, finals


def _write(path, text):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _summary_json(summary, finals, res):
    runs = [
        {
            "seed": seed,
            "actual_steps": trace.actual_steps,
            "tokens": final.tokens()[res.prompt_len :],
        }
        for seed, trace, final in zip(res.seeds, summary.traces, finals)
    ]
    return json.dumps(
        {
            "policy": summary.policy_id,
            "config": summary.config,
            "step_speedup": summary.step_speedup,
            "wallclock_speedup": summary.wallclock_speedup,
            "score_proxy": summary.score_proxy,
            "runs": runs,
        },
        indent=2,
    )


def cmd_run(config_path):
    res = load_config(config_path)
    summary, finals = execute_run(res)
    _write(f"{res.output}_summary.json", _summary_json(summary, finals, res))
    for seed, trace in zip(res.seeds, summary.traces):
        _write(f"{res.output}_trace_{seed}.csv", trace_csv(trace))
    return EXIT_OK


def _parse_axes(axis_args):
    axes = []
    for spec in axis_args:
        if "=" not in spec:
            raise ConfigError(f"--axis {spec!r}: expected path=v1,v2,...")
        path, _, tail = spec.partition("=")
        path = path.strip()
        if not path:
            raise ConfigError(f"--axis {spec!r}: empty axis path")
        if path.split(".")[0] == "denoiser":
            raise ConfigError(
                f"--axis {path}: sweep rows must share a denoiser spec; sweep policy/schedule fields instead"
            )
        values = []
        for piece in tail.split(","):
            piece = piece.strip()
            if piece == "":
                continue
            try:
                values.append(json.loads(piece))
            except json.JSONDecodeError:
                values.append(piece)
        if not values:
            raise ConfigError(f"--axis {path}: no values given")
        axes.append((path, values))
    if not axes:
        raise ConfigError("--axis: at least one sweep axis required")
    axes.sort(key=lambda av: av[0])
    return axes


def _set_path(config, dotted, value):
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"--axis {dotted}: {k} is not a config section")
        node = nxt
    node[keys[-1]] = value


def _thread_cap():
    raw = os.environ.get("DLMDECODE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DLMDECODE_THREADS: expected an integer, got {raw!r}") from None
    return max(1, n)


def cmd_sweep(config_path, axis_args):
    res = load_config(config_path)
    axes = _parse_axes(axis_args)
    paths = [p for p, _ in axes]
    grid = list(itertools.product(*(vals for _, vals in axes)))

    def run_point(combo):
        cfg = copy.deepcopy(res.config)
        for path, value in zip(paths, combo):
            _set_path(cfg, path, value)
        point = resolve_config(cfg)
        summary, _ = execute_run(point)
        return summary

    workers = _thread_cap()
    if workers == 1:
        summaries = [run_point(c) for c in grid]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(run_point, grid))
    _write(f"{res.output}_sweep.csv", sweep_table(summaries, axes=paths))
    return EXIT_OK


def cmd_dynamics(config_path):
    res = load_config(config_path)
    baseline = PolicyConfig(kind=PolicyKind.NONE, eps=res.policy.eps)
    base_traces = [_decode_seed(res, s, baseline)[1] for s in res.seeds]
    mine_traces = [_decode_seed(res, s, res.policy)[1] for s in res.seeds]
    label = res.config["policy"]["kind"]
    csv = dynamics_csv({"baseline": base_traces, label: mine_traces})
    _write(f"{res.output}_dynamics.csv", csv)
    return EXIT_OK


def cmd_replay_verify(trace_path, tokens_path):
    try:
        with open(tokens_path) as f:
            side = json.load(f)
    except OSError as e:
        raise ConfigError(f"tokens: cannot read {tokens_path} ({e})") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"tokens: {tokens_path} is not valid JSON ({e})") from None
    for fld in ("vocab_size", "mask_id", "prompt_len", "gen_len", "steps", "prompt_tokens", "tokens"):
        if fld not in side:
            raise ConfigError(f"tokens.{fld}: required field missing")
    replay = TraceReplay(trace_path)
    try:
        vocab = Vocab(size=side["vocab_size"], mask_id=side["mask_id"])
        sched = ScheduleConfig(
            total_steps=side["steps"],
            gen_len=side["gen_len"],
            block_size=side.get("block_size"),
        )
        state = fresh_state(vocab, side["prompt_tokens"], side["gen_len"])
    except (ValueError, TypeError) as e:
        raise ConfigError(f"tokens: {e}") from None
    policy = PolicyConfig(kind=PolicyKind.NONE)
    final, trace = decode(replay, state, policy, sched)
    got = final.tokens()[side["prompt_len"] :]
    want = list(side["tokens"])
    if got != want:
        bad = [i for i, (g, w) in enumerate(zip(got, want)) if g != w]
        print(
            f"replay mismatch: {len(bad)} of {len(want)} generated tokens differ "
            f"(first at offset {bad[0] if bad else len(got)})",
            file=sys.stderr,
        )
        return EXIT_MISMATCH
    print(f"replay ok: {len(want)} tokens reproduced in {trace.actual_steps} steps")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="dlmdecode",
        description="Masked-diffusion decode engine with per-token early exits",
    )
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="decode each seed and write summary + traces")
    run.add_argument("config", help="JSON config path")
    sweep = sub.add_parser("sweep", help="run a config grid and write a sweep table")
    sweep.add_argument("config", help="JSON config path")
    sweep.add_argument(
        "--axis",
        action="append",
        default=[],
        metavar="PATH=V1,V2",
        help="sweep axis as dotted.path=comma,separated,values (repeatable)",
    )
    dyn = sub.add_parser("dynamics", help="baseline-vs-policy confidence dynamics CSV")
    dyn.add_argument("config", help="JSON config path")
    rv = sub.add_parser("replay-verify", help="check a recorded trace reproduces its tokens")
    rv.add_argument("trace", help="binary trace path")
    rv.add_argument("--tokens", required=True, help="token sidecar JSON from the recorder")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.axis)
        if args.command == "dynamics":
            return cmd_dynamics(args.config)
        return cmd_replay_verify(args.trace, args.tokens)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DenoiserFailure, TraceError, InvalidLogits) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
