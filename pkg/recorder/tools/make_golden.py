"""Regenerates the golden trace fixtures checked into the engine's test tree.

Run from anywhere:

    python3 recorder/tools/make_golden.py

Two runs of the built-in stand-in model, frozen so the engine's suite can
exercise recorder-produced bytes without the recorder installed: a
masked-only block-mode run (covers budget rollover) and an all-positions
whole-sequence run. Float math in the stand-in avoids BLAS and libm in the
logit path, but the files are still pinned artifacts: if they are ever
regenerated on an environment that disagrees in the last ulp, the paired
.tokens.json sidecars regenerate with them and the round trip stays closed.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dlmrecorder.record import RecorderConfig, record  # noqa: E402

FIXTURES = os.path.normpath(
    os.path.join(os.path.dirname(__file__), "..", "..", "tests", "fixtures")
)

RUNS = [
    RecorderConfig(
        model="tiny:7",
        prompt="the quick brown fox",
        gen_len=12,
        steps=10,
        block_size=6,
        record_mode="masked-only",
        output=os.path.join(FIXTURES, "golden_tiny.trace"),
    ),
    RecorderConfig(
        model="tiny:7",
        prompt="the quick brown fox",
        gen_len=8,
        steps=5,
        block_size=None,
        record_mode="all-positions",
        output=os.path.join(FIXTURES, "golden_tiny_allpos.trace"),
    ),
]


def main():
    for config in RUNS:
        info = record(config)
        print(
            f"{info['trace']}: {info['recorded_steps']} steps, "
            f"{info['bytes']} bytes, tokens {info['generated']}"
        )


if __name__ == "__main__":
    main()
