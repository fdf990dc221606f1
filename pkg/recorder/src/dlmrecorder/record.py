"""Baseline decoding with per-step logit capture.

The recorder runs the plain transfer schedule, no early exits: each step it
softmaxes the masked rows, commits the step quota of highest-confidence
positions to their argmax, and logs the step's logits. Replay on the engine
side re-derives the same transfer choices from the file alone, which pins
down two rules here:

* Decisions are made from the f32 values that land in the file, never from
  the model's wider compute dtype. f32 rounding reorders near-ties; deciding
  before rounding would fork the replay path.
* The schedule arithmetic matches the engine's: per-step quota is
  ceil(remaining / steps_left), block mode splits the step budget evenly
  with the remainder on the leading blocks and rolls unspent steps forward,
  selection ranks by top-1 probability with the lower position winning ties.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .model import load_model
from .tracefile import write_trace_file

RECORD_MODES = ("masked-only", "all-positions")


class RecordError(Exception):
    """The model's output did not fit the run (shape, finiteness, schedule)."""


@dataclass(frozen=True)
class RecorderConfig:
    model: str
    prompt: str
    gen_len: int
    steps: int
    output: str
    block_size: int | None = None
    record_mode: str = "masked-only"

    def __post_init__(self):
        if self.gen_len < 1:
            raise ValueError("gen_len must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.record_mode not in RECORD_MODES:
            raise ValueError(f"record_mode must be one of {RECORD_MODES}")
        if self.block_size is not None:
            if self.block_size < 1:
                raise ValueError("block_size must be >= 1")
            nb = math.ceil(self.gen_len / self.block_size)
            if self.steps < nb:
                raise ValueError(
                    f"steps {self.steps} cannot cover {nb} blocks"
                )


def top1_probs(rows):
    """Row-wise (p1, argmax) from raw logits, softmaxed in float64.

    Ties on the max logit resolve to the lowest index, matching the replay
    side exactly.
    """
    x = np.asarray(rows, dtype=np.float64)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    probs = e / e.sum(axis=1, keepdims=True)
    k1 = np.argmax(probs, axis=1)
    return probs[np.arange(len(rows)), k1], k1


def select_positions(p1_by_pos, quota):
    """The quota positions with the largest top-1 probability, lowest
    position on ties. Returns an ascending tuple."""
    if quota < 1:
        raise ValueError("quota must be >= 1")
    ranked = sorted(p1_by_pos, key=lambda pos: (-p1_by_pos[pos], pos))
    return tuple(sorted(ranked[: min(quota, len(ranked))]))


def _block_budgets(total_steps, num_blocks):
    base, extra = divmod(total_steps, num_blocks)
    return [base + (1 if i < extra else 0) for i in range(num_blocks)]


def baseline_decode(model, prompt_ids, gen_len, steps, block_size=None,
                    record_mode="masked-only"):
    """Run the transfer schedule, capturing one logit block per step.

    Returns (blocks, tokens): blocks is a list of (step_index, positions,
    f32 logits) triples ready for the trace writer, tokens the final full
    sequence including the prompt.
    """
    vocab_size = model.vocab_size
    mask_id = model.mask_id
    prompt_len = len(prompt_ids)
    lo_gen, hi_gen = prompt_len, prompt_len + gen_len
    tokens = list(prompt_ids) + [mask_id] * gen_len
    # masked-ness is positional state, not token value: a committed cell may
    # legally hold the mask id (the model arg-maxed to it), and replay treats
    # it as decoded all the same
    is_masked = [False] * prompt_len + [True] * gen_len
    all_gen = np.arange(lo_gen, hi_gen, dtype=np.int64)

    nb = math.ceil(gen_len / block_size) if block_size is not None else 1
    budgets = _block_budgets(steps, nb) if block_size is not None else None
    cur_block = -1
    block_steps_left = 0

    blocks = []
    for n in range(1, steps + 1):
        masked = [p for p in range(lo_gen, hi_gen) if is_masked[p]]
        if not masked:
            break
        full = np.asarray(model(tokens))
        if full.shape != (len(tokens), vocab_size):
            raise RecordError(
                f"model returned logits shaped {full.shape}, "
                f"expected ({len(tokens)}, {vocab_size})"
            )
        if not np.all(np.isfinite(full)):
            raise RecordError(f"step {n}: model produced non-finite logits")
        # quantize first: every decision below must see the file's dtype
        full = full.astype(np.float32)

        if record_mode == "masked-only":
            rec_pos = np.asarray(masked, dtype=np.int64)
        else:
            rec_pos = all_gen
        blocks.append((n, rec_pos.copy(), full[rec_pos].copy()))

        if block_size is not None:
            b = (masked[0] - lo_gen) // block_size
            if b != cur_block:
                # entering a new block: unspent steps roll forward
                block_steps_left += sum(budgets[cur_block + 1 : b + 1])
                cur_block = b
            lo = lo_gen + b * block_size
            hi = min(lo + block_size, hi_gen)
            active = [p for p in masked if lo <= p < hi]
            steps_left = block_steps_left
        else:
            active = masked
            steps_left = steps - n + 1

        p1, k1 = top1_probs(full[active])
        by_pos = {pos: float(p1[i]) for i, pos in enumerate(active)}
        arg = {pos: int(k1[i]) for i, pos in enumerate(active)}
        quota = -(-len(active) // steps_left)
        for pos in select_positions(by_pos, quota):
            tokens[pos] = arg[pos]
            is_masked[pos] = False

        if block_size is not None:
            block_steps_left -= 1

    if any(is_masked[lo_gen:hi_gen]):
        raise RecordError(f"cells still masked after {steps} steps")
    return blocks, tokens


def record(config):
    """Load the model, decode, and write the trace plus its token sidecar.

    The sidecar at OUTPUT.tokens.json carries everything a replay needs to
    rebuild the run: geometry, the configured step budget, the prompt ids,
    and the generated tokens to verify against.
    """
    model = load_model(config.model)
    prompt_ids = model.encode(config.prompt)
    blocks, tokens = baseline_decode(
        model,
        prompt_ids,
        config.gen_len,
        config.steps,
        block_size=config.block_size,
        record_mode=config.record_mode,
    )
    out_dir = os.path.dirname(config.output)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    nbytes = write_trace_file(
        config.output,
        vocab_size=model.vocab_size,
        prompt_len=len(prompt_ids),
        gen_len=config.gen_len,
        blocks=blocks,
        masked_only=config.record_mode == "masked-only",
    )
    sidecar = {
        "model": config.model,
        "vocab_size": model.vocab_size,
        "mask_id": model.mask_id,
        "prompt_len": len(prompt_ids),
        "gen_len": config.gen_len,
        "steps": config.steps,
        "block_size": config.block_size,
        "prompt_tokens": list(prompt_ids),
        "tokens": tokens[len(prompt_ids) :],
    }
    tokens_path = config.output + ".tokens.json"
    with open(tokens_path, "w") as f:
        json.dump(sidecar, f, indent=1)
        f.write("\n")
    return {
        "trace": config.output,
        "tokens": tokens_path,
        "recorded_steps": len(blocks),
        "bytes": nbytes,
        "generated": sidecar["tokens"],
    }
