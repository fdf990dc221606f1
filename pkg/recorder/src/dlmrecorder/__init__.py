"""Trace recorder: runs a masked LM under baseline decoding and captures the
per-step logits in the binary container the decode engine replays.

The recorder never applies an early-exit policy. Traces are policy-neutral
inputs; one recorded run serves every policy comparison on the engine side.
"""

from .model import ModelLoadError, TinyMaskedLM, load_model
from .record import RecordError, RecorderConfig, baseline_decode, record
from .tracefile import TraceWriteError, write_trace_file

__all__ = [
    "ModelLoadError",
    "TinyMaskedLM",
    "load_model",
    "RecordError",
    "RecorderConfig",
    "baseline_decode",
    "record",
    "TraceWriteError",
    "write_trace_file",
]
