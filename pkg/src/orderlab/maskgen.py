"""Attention visibility matrices for the five generation paradigms.

A mask is an L x L boolean matrix: entry (u, v) is True iff the query at
position u may attend to the key at position v. Construction is a pure
function of (L, prompt_len, S) and bit-identical across calls.

Conventions shared by every non-causal paradigm:
  * response rows always see every prompt column,
  * prompt rows see all prompt columns (bidirectional prompt) and no
    response columns, so the prompt acts as a fixed prefix,
  * the diagonal is always visible.
The pure causal mask (autoregressive paradigm) is lower-triangular
everywhere, prompt included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seqcore import make_partition


class MaskError(ValueError):
    pass


class EmptyMaskError(MaskError):
    pass


@dataclass(frozen=True)
class AttentionMask:
    """Immutable L x L visibility matrix."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise MaskError(f"mask must be square, got shape {bits.shape}")
        if bits.shape[0] == 0:
            raise EmptyMaskError("mask must have size >= 1")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def size(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.bits, other.bits)

    def visible(self, u: int) -> list[int]:
        """Key positions visible to query position u."""
        return [int(v) for v in np.flatnonzero(self.bits[u])]

    def dump(self) -> str:
        """Text grid of '1'/'0'; rows are query positions."""
        return "\n".join("".join("1" if b else "0" for b in row) for row in self.bits)


def parse_mask(text: str) -> AttentionMask:
    rows = [line for line in text.strip().splitlines()]
    bits = np.array([[c == "1" for c in row] for row in rows], dtype=bool)
    return AttentionMask(bits)


def causal_mask(L: int) -> AttentionMask:
    """Strict left-to-right visibility: (u, v) visible iff v <= u."""
    if L < 1:
        raise EmptyMaskError(f"mask size must be >= 1, got {L}")
    return AttentionMask(np.tril(np.ones((L, L), dtype=bool)))


def bidirectional_mask(L: int) -> AttentionMask:
    """Full visibility: every position attends to every position."""
    if L < 1:
        raise EmptyMaskError(f"mask size must be >= 1, got {L}")
    return AttentionMask(np.ones((L, L), dtype=bool))


def _prefix_template(L: int, prompt_len: int) -> np.ndarray:
    """Common prefix rules: prompt rows see the whole prompt and nothing
    else; response rows see the whole prompt. Response-internal visibility
    is left all-False for the caller to fill in."""
    bits = np.zeros((L, L), dtype=bool)
    bits[:prompt_len, :prompt_len] = True
    bits[prompt_len:, :prompt_len] = True
    return bits


def block_causal_mask(L: int, prompt_len: int, S: int) -> AttentionMask:
    """Blockwise-sequential visibility: a response position sees the prompt,
    every earlier block, and its own block bidirectionally."""
    if L < 1:
        raise EmptyMaskError(f"mask size must be >= 1, got {L}")
    part = make_partition(L, prompt_len, S)
    bits = _prefix_template(L, prompt_len)
    for u in range(part.response_len):
        gu = prompt_len + u
        end_own = prompt_len + (part.block_of(u) + 1) * S
        bits[gu, prompt_len:end_own] = True
    return AttentionMask(bits)


def scatter_mask(L: int, prompt_len: int, S: int) -> AttentionMask:
    """Synchronized-offset visibility: response u sees response v iff v's
    intra-block offset is strictly earlier, or v is u itself. Same-offset
    positions in other blocks stay mutually invisible so the offset level
    can be generated in parallel."""
    if L < 1:
        raise EmptyMaskError(f"mask size must be >= 1, got {L}")
    part = make_partition(L, prompt_len, S)
    bits = _prefix_template(L, prompt_len)
    for u in range(part.response_len):
        ju = part.offset_of(u)
        for v in range(part.response_len):
            jv = part.offset_of(v)
            if jv < ju or (jv == ju and part.block_of(v) == part.block_of(u)):
                bits[prompt_len + u, prompt_len + v] = True
    return AttentionMask(bits)


def jigsaw_train_mask(L: int, prompt_len: int, S: int) -> AttentionMask:
    """Random-independence visibility: response blocks see the prompt and
    their own intra-block causal prefix, and nothing in other blocks."""
    if L < 1:
        raise EmptyMaskError(f"mask size must be >= 1, got {L}")
    part = make_partition(L, prompt_len, S)
    bits = _prefix_template(L, prompt_len)
    for u in range(part.response_len):
        gu = prompt_len + u
        start_own = prompt_len + part.block_of(u) * S
        bits[gu, start_own : gu + 1] = True
    return AttentionMask(bits)


def jigsaw_solve_mask(
    L: int, prompt_len: int, S: int, committed_blocks, target_block: int
) -> AttentionMask:
    """Inference-time visibility while decoding `target_block`: committed
    blocks have joined the context, so context rows see all context and
    target rows see context plus their intra-block causal prefix."""
    if L < 1:
        raise EmptyMaskError(f"mask size must be >= 1, got {L}")
    part = make_partition(L, prompt_len, S)
    committed = set(committed_blocks)
    if target_block in committed or not (0 <= target_block < part.num_blocks):
        raise MaskError(f"invalid target block {target_block}")
    ctx = np.zeros(L, dtype=bool)
    ctx[:prompt_len] = True
    for k in committed:
        for g in part.block_positions(k):
            ctx[g] = True
    bits = np.zeros((L, L), dtype=bool)
    bits[np.ix_(ctx, ctx)] = True
    for g in part.block_positions(target_block):
        bits[g, ctx] = True
        start_own = prompt_len + part.block_of(g - prompt_len) * S
        bits[g, start_own : g + 1] = True
    np.fill_diagonal(bits, True)
    return AttentionMask(bits)


def mask_popcount(m: AttentionMask) -> int:
    """Number of visible (query, key) entries."""
    return int(m.bits.sum())


def paradigm_train_mask(paradigm: str, L: int, prompt_len: int, S: int) -> AttentionMask:
    """Training-time mask for a paradigm name."""
    if paradigm == "ar":
        return causal_mask(L)
    if paradigm == "mdm":
        return bidirectional_mask(L)
    if paradigm == "block":
        return block_causal_mask(L, prompt_len, S)
    if paradigm == "scatter":
        return scatter_mask(L, prompt_len, S)
    if paradigm == "jigsaw":
        return jigsaw_train_mask(L, prompt_len, S)
    raise MaskError(f"unknown paradigm {paradigm!r}")
