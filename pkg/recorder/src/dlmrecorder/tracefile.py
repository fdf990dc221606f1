"""Writer for the step-logits trace container.

Layout, all little-endian, no padding:

    header   "DLMTRACE" u16 version  u32 vocab_size  u32 prompt_len
             u32 gen_len  u32 recorded_steps  u32 flags          (30 bytes)
    block    u32 step_index  u32 n_positions
             n_positions * u32 positions (absolute, ascending)
             n_positions * vocab_size * f32 logits
             u32 crc32 over everything above in the block

flags bit 0 set means each block carries only the positions still masked at
that step; clear means every block spans the whole generation region. All
other bits are reserved and stay zero.

This module only writes. The decode engine owns reading, but its reader
enforces the same structural rules checked here (1-based consecutive step
indices, ascending in-region positions, masked-only shrinkage from the full
region, finite logits), so a malformed run fails at record time instead of
at replay time on the other side.
"""

import struct
import zlib

import numpy as np

MAGIC = b"DLMTRACE"
VERSION = 1
FLAG_MASKED_ONLY = 0x1
_HEADER = struct.Struct("<8sHIIIII")
HEADER_SIZE = _HEADER.size  # 30
_BLOCK_HEAD = struct.Struct("<II")
_U32 = struct.Struct("<I")


class TraceWriteError(Exception):
    """Blocks handed to the writer break the container's rules."""


def pack_header(vocab_size, prompt_len, gen_len, recorded_steps, masked_only):
    if vocab_size < 1 or gen_len < 1:
        raise TraceWriteError("vocab_size and gen_len must be >= 1")
    if prompt_len < 0 or recorded_steps < 0:
        raise TraceWriteError("counts must be nonnegative")
    flags = FLAG_MASKED_ONLY if masked_only else 0
    return _HEADER.pack(
        MAGIC, VERSION, vocab_size, prompt_len, gen_len, recorded_steps, flags
    )


def _check_block(ordinal, pos, mat, vocab_size, lo, hi, gen_len, masked_only, prev):
    if len(pos) < 1:
        raise TraceWriteError(f"block {ordinal}: empty position list")
    if np.any(pos[1:] <= pos[:-1]):
        raise TraceWriteError(f"block {ordinal}: positions not strictly increasing")
    if pos[0] < lo or pos[-1] >= hi:
        raise TraceWriteError(
            f"block {ordinal}: positions outside generation region [{lo}, {hi})"
        )
    if mat.shape != (len(pos), vocab_size):
        raise TraceWriteError(f"block {ordinal}: logits shape {mat.shape} mismatch")
    if not np.all(np.isfinite(mat)):
        raise TraceWriteError(f"block {ordinal}: non-finite logits")
    if masked_only:
        if ordinal == 1:
            # decoding starts fully masked, so block 1 covers the whole region
            if len(pos) != gen_len:
                raise TraceWriteError(
                    "block 1: masked-only trace must start with the full region"
                )
        elif not np.all(np.isin(pos, prev)):
            raise TraceWriteError(f"block {ordinal}: masked set grew between steps")
    elif len(pos) != gen_len:
        raise TraceWriteError(
            f"block {ordinal}: all-positions trace requires the full region"
        )


def pack_block(step_index, positions, logits, vocab_size):
    """One framed block: head + positions + f32 logits + crc32 trailer."""
    pos = np.ascontiguousarray(positions, dtype="<u4")
    mat = np.ascontiguousarray(logits, dtype="<f4")
    payload = _BLOCK_HEAD.pack(step_index, len(pos)) + pos.tobytes() + mat.tobytes()
    return payload + _U32.pack(zlib.crc32(payload))


def write_trace_file(path, vocab_size, prompt_len, gen_len, blocks, masked_only=True):
    """Serialize (step_index, positions, logits) triples to path.

    Returns the byte count. Blocks must arrive in step order with 1-based
    indices; every structural rule is checked before anything is written so
    a failure never leaves a half-valid file behind.
    """
    blocks = list(blocks)
    lo, hi = prompt_len, prompt_len + gen_len
    packed = [pack_header(vocab_size, prompt_len, gen_len, len(blocks), masked_only)]
    prev = None
    for ordinal, (step_index, positions, logits) in enumerate(blocks, start=1):
        if step_index != ordinal:
            raise TraceWriteError(
                f"block {ordinal}: step_index {step_index} out of order"
            )
        pos = np.ascontiguousarray(positions, dtype="<u4")
        mat = np.ascontiguousarray(logits, dtype="<f4")
        _check_block(ordinal, pos, mat, vocab_size, lo, hi, gen_len, masked_only, prev)
        packed.append(pack_block(step_index, pos, mat, vocab_size))
        prev = pos
    with open(path, "wb") as f:
        for chunk in packed:
            f.write(chunk)
    return sum(len(c) for c in packed)
