"""Binary container for per-step logits recorded from an external model run.

Layout, all little-endian, no padding:

    header   "DLMTRACE" u16 version  u32 vocab_size  u32 prompt_len
             u32 gen_len  u32 recorded_steps  u32 flags          (30 bytes)
    block    u32 step_index  u32 n_positions
             n_positions * u32 positions (absolute, ascending)
             n_positions * vocab_size * f32 logits
             u32 crc32 over everything above in the block

flags bit 0 set means each block carries only the positions still masked at
that step (they shrink over time); clear means every block carries the whole
generation region. All other flag bits are reserved and must be zero.

Version 1 readers validate aggressively: step indices must be the 1-based
block ordinals, positions must stay inside the generation region, masked-only
blocks must start at the full region and only ever shrink, and the stream
must end exactly after the declared number of blocks. The strictness is what
makes single-byte corruption in the unchecksummed header detectable.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"DLMTRACE"
VERSION = 1
FLAG_MASKED_ONLY = 0x1
_HEADER = struct.Struct("<8sHIIIII")
HEADER_SIZE = _HEADER.size  # 30
_U32 = struct.Struct("<I")
_BLOCK_HEAD = struct.Struct("<II")


class TraceError(Exception):
    """Base for everything raised by this module."""


class TraceCorrupt(TraceError):
    """Stream is structurally invalid or fails a checksum."""


class TraceMismatch(TraceError):
    """Trace is well-formed but disagrees with the consumer's expectations."""


class UnsupportedVersion(TraceError):
    """Magic matched but the version field is unknown."""


class TraceBuildError(TraceError):
    """Writer got blocks inconsistent with the header."""


@dataclass(frozen=True)
class TraceHeader:
    vocab_size: int
    prompt_len: int
    gen_len: int
    recorded_steps: int
    flags: int = FLAG_MASKED_ONLY

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.gen_len < 1:
            raise ValueError("gen_len must be >= 1")
        if self.prompt_len < 0 or self.recorded_steps < 0:
            raise ValueError("counts must be nonnegative")
        if self.flags & ~FLAG_MASKED_ONLY:
            raise ValueError("reserved flag bits set")

    @property
    def masked_only(self):
        return bool(self.flags & FLAG_MASKED_ONLY)

    @property
    def gen_range(self):
        return self.prompt_len, self.prompt_len + self.gen_len

    def pack(self):
        return _HEADER.pack(
            MAGIC,
            VERSION,
            self.vocab_size,
            self.prompt_len,
            self.gen_len,
            self.recorded_steps,
            self.flags,
        )


@dataclass(frozen=True)
class StepBlockRecord:
    step_index: int
    positions: np.ndarray  # ascending, absolute sequence indices
    logits: np.ndarray  # (n_positions, vocab_size) f32

    @property
    def n_positions(self):
        return len(self.positions)


def _check_block(header, block, ordinal, prev_positions, exc):
    """Structural rules shared by reader and writer; raises exc on violation.

    prev_positions is the previous block's position array, None at block 1.
    """
    pos = np.asarray(block.positions)
    lo, hi = header.gen_range
    if block.step_index != ordinal:
        raise exc(f"block {ordinal}: step_index {block.step_index} out of order")
    if len(pos) < 1:
        raise exc(f"block {ordinal}: empty position list")
    if np.any(pos[1:] <= pos[:-1]):
        raise exc(f"block {ordinal}: positions not strictly increasing")
    if pos[0] < lo or pos[-1] >= hi:
        raise exc(f"block {ordinal}: positions outside generation region [{lo}, {hi})")
    if block.logits.shape != (len(pos), header.vocab_size):
        raise exc(f"block {ordinal}: logits shape {block.logits.shape} mismatch")
    if not np.all(np.isfinite(block.logits)):
        raise exc(f"block {ordinal}: non-finite logits")
    if header.masked_only:
        if ordinal == 1:
            # decoding starts fully masked, so the first block covers everything
            if len(pos) != header.gen_len:
                raise exc("block 1: masked-only trace must start with the full region")
        elif not np.all(np.isin(pos, prev_positions)):
            raise exc(f"block {ordinal}: masked set grew between steps")
    elif len(pos) != header.gen_len:
        raise exc(f"block {ordinal}: all-positions trace requires the full region")


def write_trace(header, blocks, sink):
    """Serialize header + blocks to a binary sink. Returns the byte count."""
    blocks = list(blocks)
    if len(blocks) != header.recorded_steps:
        raise TraceBuildError(
            f"{len(blocks)} blocks but header declares {header.recorded_steps}"
        )
    buf = header.pack()
    sink.write(buf)
    written = len(buf)
    prev = None
    for ordinal, block in enumerate(blocks, start=1):
        _check_block(header, block, ordinal, prev, TraceBuildError)
        pos = np.ascontiguousarray(block.positions, dtype="<u4")
        logits = np.ascontiguousarray(block.logits, dtype="<f4")
        payload = (
            _BLOCK_HEAD.pack(block.step_index, len(pos))
            + pos.tobytes()
            + logits.tobytes()
        )
        sink.write(payload)
        sink.write(_U32.pack(zlib.crc32(payload)))
        written += len(payload) + 4
        prev = pos
    return written


def _read_exact(source, n, what):
    buf = source.read(n)
    if len(buf) != n:
        raise TraceCorrupt(f"truncated stream while reading {what}")
    return buf


def read_header(source):
    raw = source.read(HEADER_SIZE)
    if len(raw) != HEADER_SIZE:
        raise TraceCorrupt("stream shorter than a trace header")
    magic, version, vocab_size, prompt_len, gen_len, steps, flags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise TraceCorrupt("bad magic")
    if version != VERSION:
        raise UnsupportedVersion(f"trace version {version}, reader supports {VERSION}")
    try:
        return TraceHeader(vocab_size, prompt_len, gen_len, steps, flags)
    except ValueError as e:
        raise TraceCorrupt(str(e)) from None


def read_trace(source):
    """Parse a trace stream. Returns (header, lazy block iterator).

    Blocks are validated (crc, ordering, position rules) as they are pulled;
    the iterator raises TraceCorrupt at the first inconsistency and checks for
    exact end-of-stream after the declared block count.
    """
    header = read_header(source)

    def blocks():
        prev = None
        for ordinal in range(1, header.recorded_steps + 1):
            head = _read_exact(source, _BLOCK_HEAD.size, f"block {ordinal} header")
            step_index, n_positions = _BLOCK_HEAD.unpack(head)
            if n_positions < 1 or n_positions > header.gen_len:
                raise TraceCorrupt(
                    f"block {ordinal}: implausible n_positions {n_positions}"
                )
            pos_raw = _read_exact(source, 4 * n_positions, f"block {ordinal} positions")
            logit_raw = _read_exact(
                source, 4 * n_positions * header.vocab_size, f"block {ordinal} logits"
            )
            (crc_stored,) = _U32.unpack(_read_exact(source, 4, f"block {ordinal} crc"))
            if zlib.crc32(head + pos_raw + logit_raw) != crc_stored:
                raise TraceCorrupt(f"block {ordinal}: checksum mismatch")
            positions = np.frombuffer(pos_raw, dtype="<u4").astype(np.int64)
            logits = np.frombuffer(logit_raw, dtype="<f4").reshape(
                n_positions, header.vocab_size
            )
            block = StepBlockRecord(step_index, positions, logits)
            _check_block(header, block, ordinal, prev, TraceCorrupt)
            prev = positions
            yield block
        if source.read(1) != b"":
            raise TraceCorrupt("trailing bytes after the last declared block")

    return header, blocks()


def read_trace_file(path):
    """Eagerly read and validate a whole trace file."""
    with open(path, "rb") as f:
        header, blocks = read_trace(f)
        return header, list(blocks)
