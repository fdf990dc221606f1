"""Command line front end; flags map one-to-one onto RecorderConfig."""

import argparse
import sys

from .model import ModelLoadError
from .record import RECORD_MODES, RecordError, RecorderConfig, record
from .tracefile import TraceWriteError


def build_parser():
    p = argparse.ArgumentParser(
        prog="dlmrecord",
        description="Record per-step masked-LM logits into a replayable trace",
    )
    p.add_argument(
        "--model",
        required=True,
        help="'tiny', 'tiny:SEED', 'tiny:SEED:VOCAB', or a hub checkpoint name",
    )
    p.add_argument("--prompt", default="", help="prompt text, may be empty")
    p.add_argument("--gen-len", type=int, required=True, help="generated positions")
    p.add_argument("--steps", type=int, required=True, help="decode step budget")
    p.add_argument(
        "--block-size",
        type=int,
        default=None,
        help="semi-autoregressive block width (default: whole sequence)",
    )
    p.add_argument("--record-mode", choices=RECORD_MODES, default="masked-only")
    p.add_argument(
        "--output",
        required=True,
        help="trace path; the token sidecar lands at OUTPUT.tokens.json",
    )
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = RecorderConfig(
            model=args.model,
            prompt=args.prompt,
            gen_len=args.gen_len,
            steps=args.steps,
            output=args.output,
            block_size=args.block_size,
            record_mode=args.record_mode,
        )
        info = record(config)
    except (ValueError, ModelLoadError, RecordError, TraceWriteError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(
        f"recorded {info['recorded_steps']} steps "
        f"({len(info['generated'])} tokens, {info['bytes']} bytes) "
        f"to {info['trace']}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
