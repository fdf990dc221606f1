"""Golden traces recorded by the companion recorder, checked in as bytes.

These fixtures keep the cross-component contract testable from this side
alone: the reader must accept recorder-produced files, and replaying them
with policy None must land on exactly the tokens the recorder committed.
The quota-parity fixture pins the shared selection rule (rank by top-1
probability, lowest position on ties, first index on argmax ties) that the
round trip depends on.
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from dlmdecode.core import ProbRow, Vocab, fresh_state, softmax_rows
from dlmdecode.denoiser import TraceReplay
from dlmdecode.policy import PolicyConfig, PolicyKind
from dlmdecode.scheduler import ScheduleConfig, decode, transfer_select
from dlmdecode.tracefmt import read_trace_file

FIXTURES = Path(__file__).parent / "fixtures"
GOLDENS = ["golden_tiny.trace", "golden_tiny_allpos.trace"]


def load_sidecar(name):
    return json.loads((FIXTURES / f"{name}.tokens.json").read_text())


def replay_tokens(name, side):
    replay = TraceReplay(str(FIXTURES / name))
    vocab = Vocab(size=side["vocab_size"], mask_id=side["mask_id"])
    sched = ScheduleConfig(
        total_steps=side["steps"],
        gen_len=side["gen_len"],
        block_size=side.get("block_size"),
    )
    state = fresh_state(vocab, side["prompt_tokens"], side["gen_len"])
    policy = PolicyConfig(kind=PolicyKind.NONE)
    final, trace = decode(replay, state, policy, sched)
    return final.tokens()[side["prompt_len"] :], trace


def test_golden_traces_parse():
    for name in GOLDENS:
        side = load_sidecar(name)
        header, blocks = read_trace_file(str(FIXTURES / name))
        assert header.vocab_size == side["vocab_size"]
        assert header.prompt_len == side["prompt_len"]
        assert header.gen_len == side["gen_len"]
        assert header.recorded_steps == len(blocks)


def test_masked_only_golden_flag_and_shrinkage():
    header, blocks = read_trace_file(str(FIXTURES / "golden_tiny.trace"))
    assert header.masked_only
    assert len(blocks[0].positions) == header.gen_len
    for prev, cur in zip(blocks, blocks[1:]):
        assert set(cur.positions) < set(prev.positions)


def test_all_positions_golden_covers_region():
    header, blocks = read_trace_file(str(FIXTURES / "golden_tiny_allpos.trace"))
    assert not header.masked_only
    assert all(len(b.positions) == header.gen_len for b in blocks)


def test_golden_replay_reproduces_recorded_tokens():
    for name in GOLDENS:
        side = load_sidecar(name)
        tokens, trace = replay_tokens(name, side)
        assert tokens == side["tokens"], name
        assert trace.actual_steps == read_trace_file(str(FIXTURES / name))[0].recorded_steps


def test_golden_replay_verify_cli():
    for name in GOLDENS:
        r = subprocess.run(
            [
                sys.executable,
                "-m",
                "dlmdecode",
                "replay-verify",
                str(FIXTURES / name),
                "--tokens",
                str(FIXTURES / f"{name}.tokens.json"),
            ],
            capture_output=True,
            text=True,
        )
        assert r.returncode == 0, r.stderr
        assert "replay ok" in r.stdout


def test_quota_parity_fixture():
    fix = json.loads((FIXTURES / "quota_parity.json").read_text())
    positions = sorted(int(p) for p in fix["rows"])
    mat = np.asarray([fix["rows"][str(p)] for p in positions], dtype=np.float32)
    probs = softmax_rows(mat)
    rows = {}
    for i, pos in enumerate(positions):
        row = probs[i]
        k1 = int(np.argmax(row))
        rest = row.copy()
        rest[k1] = -np.inf
        rows[pos] = ProbRow(
            probs=row, p1=float(row[k1]), p2=float(rest.max()), argmax=k1
        )
    for case in fix["cases"]:
        assert list(transfer_select(rows, case["quota"])) == case["expect_select"]
    for pos in positions:
        assert rows[pos].argmax == fix["expect_argmax"][str(pos)]
