"""Models the recorder can drive.

Two families behind one tiny interface (vocab_size, mask_id, encode(text),
call with a full token sequence, get back an (S, vocab) f32 logit matrix):

* "tiny", "tiny:SEED", "tiny:SEED:VOCAB": a built-in stand-in made of a
  fixed random embedding table with geometric-decay context mixing. Small
  enough to run anywhere, deterministic across runs, and state-sensitive:
  committing a token changes its neighbours' logits on the next step, which
  is exactly the structure the traces exist to capture.
* anything else is treated as a model-hub checkpoint name and needs the
  optional transformers + torch stack installed.
"""

import numpy as np

TINY_VOCAB = 64
TINY_HIDDEN = 16
TINY_WINDOW = 4
TINY_DECAY = 0.5

# Knuth multiplicative hash constant, maps characters onto the vocab
_CHAR_MIX = 2654435761


class ModelLoadError(Exception):
    """The requested model identifier cannot be turned into a usable model."""


def _uniform_rows(rng, shape):
    # exact dyadic rationals in [-1, 1): integer draw + scaling only, so the
    # table never depends on libm transcendentals
    bits = rng.integers(0, 1 << 53, size=shape, dtype=np.int64)
    return bits.astype(np.float64) * 2.0**-52 - 1.0


class TinyMaskedLM:
    """Deterministic numpy masked LM used when no checkpoint is wanted.

    Hidden states are token embedding plus positional row; each position then
    absorbs its neighbours within a fixed window at geometrically decaying
    weight, and logits score the mixed state against an untied output table.
    Untied matters: scoring against the input embeddings lets every masked
    slot's own mask component dominate (x dot x beats x dot y) and the model
    degenerates to predicting the mask token everywhere. Masked slots carry
    the mask embedding, so every commit shifts what nearby positions see next
    step. The output-side reduction is an explicit elementwise sum rather
    than a matmul: no BLAS dispatch, one summation order, reproducible bytes.
    """

    def __init__(self, seed=0, vocab_size=TINY_VOCAB, hidden=TINY_HIDDEN):
        if vocab_size < 2:
            raise ModelLoadError("tiny model needs vocab_size >= 2")
        self.seed = seed
        self.vocab_size = vocab_size
        self.mask_id = vocab_size - 1
        rng = np.random.default_rng(seed)
        self._emb = _uniform_rows(rng, (vocab_size, hidden))
        self._out = _uniform_rows(rng, (vocab_size, hidden))
        self._pos_cache = np.zeros((0, hidden))

    def _pos_rows(self, n):
        if len(self._pos_cache) < n:
            # regenerate from scratch so the table is a pure function of
            # (seed, n) and never of the call history
            rng = np.random.default_rng((self.seed + 1) * 0x9E3779B9)
            self._pos_cache = _uniform_rows(rng, (n, self._emb.shape[1]))
        return self._pos_cache[:n]

    def encode(self, text):
        """Stable char-level tokenizer; ids stay clear of the mask id."""
        return [(ord(ch) * _CHAR_MIX) % (self.vocab_size - 1) for ch in text]

    def __call__(self, tokens):
        t = np.asarray(list(tokens), dtype=np.int64)
        if t.ndim != 1 or len(t) < 1:
            raise ValueError("tokens must be a nonempty 1-D sequence")
        if t.min() < 0 or t.max() >= self.vocab_size:
            raise ValueError("token id outside the vocabulary")
        h = self._emb[t] + self._pos_rows(len(t))
        mixed = h.copy()
        for d in range(1, TINY_WINDOW + 1):
            w = TINY_DECAY**d
            mixed[d:] += w * h[:-d]
            mixed[:-d] += w * h[d:]
        logits = (mixed[:, None, :] * self._out[None, :, :]).sum(axis=2)
        return logits.astype(np.float32)


class HubMaskedLM:
    """Adapter for masked-LM checkpoints loaded by name.

    Import of the heavy stack is deferred and guarded: a missing install or
    an unreachable checkpoint surfaces as ModelLoadError, never a bare
    traceback from deep inside a third-party loader.
    """

    def __init__(self, identifier):
        try:
            import torch
            from transformers import AutoModelForMaskedLM, AutoTokenizer
        except Exception as e:
            raise ModelLoadError(
                f"loading {identifier!r} needs the optional transformers+torch stack: {e}"
            ) from None
        try:
            self._tok = AutoTokenizer.from_pretrained(identifier)
            self._net = AutoModelForMaskedLM.from_pretrained(identifier)
        except Exception as e:
            raise ModelLoadError(f"cannot load model {identifier!r}: {e}") from None
        if self._tok.mask_token_id is None:
            raise ModelLoadError(f"{identifier!r} defines no mask token")
        self._net.eval()
        self._torch = torch
        self.vocab_size = int(self._net.config.vocab_size)
        self.mask_id = int(self._tok.mask_token_id)

    def encode(self, text):
        return list(self._tok(text, add_special_tokens=False)["input_ids"])

    def __call__(self, tokens):
        with self._torch.no_grad():
            ids = self._torch.tensor([list(tokens)], dtype=self._torch.long)
            out = self._net(input_ids=ids).logits[0]
        return out.to(self._torch.float32).cpu().numpy()


def load_model(identifier):
    """Resolve a model identifier; raises ModelLoadError on any failure."""
    if identifier == "tiny" or identifier.startswith("tiny:"):
        parts = identifier.split(":")
        try:
            seed = int(parts[1]) if len(parts) > 1 else 0
            vocab = int(parts[2]) if len(parts) > 2 else TINY_VOCAB
            if len(parts) > 3:
                raise ValueError("too many fields")
        except ValueError as e:
            raise ModelLoadError(
                f"bad tiny spec {identifier!r} (want tiny[:SEED[:VOCAB]]): {e}"
            ) from None
        return TinyMaskedLM(seed=seed, vocab_size=vocab)
    return HubMaskedLM(identifier)
