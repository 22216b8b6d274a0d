"""Shared sequence-domain types: vocabularies, prompt/response sequences,
block partitions, and mixed continuous/discrete sequences.

All types here are immutable value objects and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class SeqError(ValueError):
    """Base class for sequence-domain violations."""


class PartitionError(SeqError):
    pass


class OffsetError(SeqError):
    pass


# Cell roles for hybrid (continuous/discrete) sequences.
CONTEXT_X = "ContextX"
CONTEXT_Y = "ContextY"
QUERY_X = "QueryX"
TARGET_Y = "TargetY"
_ROLES = (CONTEXT_X, CONTEXT_Y, QUERY_X, TARGET_Y)


@dataclass(frozen=True)
class Vocab:
    """Closed token vocabulary with a reserved mask symbol.

    `mask_id` is the absorbing corruption symbol; it lives inside the
    embedding table (mask_id < size) but never appears in clean data.
    """

    size: int
    mask_id: int
    pad_id: int | None = None
    specials: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.size < 2:
            raise SeqError(f"vocab size must be >= 2, got {self.size}")
        if not (0 <= self.mask_id < self.size):
            raise SeqError(f"mask_id {self.mask_id} out of range for size {self.size}")
        if self.pad_id is not None and not (0 <= self.pad_id < self.size):
            raise SeqError(f"pad_id {self.pad_id} out of range")
        if self.pad_id == self.mask_id:
            raise SeqError("pad_id must differ from mask_id")
        for name, tid in self.specials.items():
            if not (0 <= tid < self.size):
                raise SeqError(f"special {name!r} id {tid} out of range")
            if tid == self.mask_id:
                raise SeqError(f"special {name!r} collides with mask_id")


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with a prompt/response split: [0, prompt_len) is the clean
    conditioning prefix, the rest is the supervised response."""

    tokens: tuple[int, ...]
    prompt_len: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not (0 <= self.prompt_len <= len(self.tokens)):
            raise SeqError(
                f"prompt_len {self.prompt_len} out of range for length {len(self.tokens)}"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def response_len(self) -> int:
        return len(self.tokens) - self.prompt_len

    @property
    def response(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len :]

    def validate_clean(self, vocab: Vocab) -> None:
        """Clean data: ids in range, no mask symbol anywhere."""
        for t in self.tokens:
            if not (0 <= t < vocab.size):
                raise SeqError(f"token id {t} out of range for vocab size {vocab.size}")
            if t == vocab.mask_id:
                raise SeqError("clean sequence contains the mask symbol")


@dataclass(frozen=True)
class BlockPartition:
    """Partition of the response into num_blocks contiguous blocks of
    block_size positions. Global response index u maps to block u // S and
    offset u % S; the map is a bijection onto [0, K) x [0, S)."""

    block_size: int
    num_blocks: int
    response_start: int

    def __post_init__(self):
        if self.block_size < 1:
            raise PartitionError(f"block_size must be >= 1, got {self.block_size}")
        if self.num_blocks < 0:
            raise PartitionError(f"num_blocks must be >= 0, got {self.num_blocks}")
        if self.response_start < 0:
            raise PartitionError("response_start must be >= 0")

    @property
    def response_len(self) -> int:
        return self.block_size * self.num_blocks

    @property
    def length(self) -> int:
        return self.response_start + self.response_len

    def block_of(self, u: int) -> int:
        """Block index of response-local position u."""
        self._check_local(u)
        return u // self.block_size

    def offset_of(self, u: int) -> int:
        """Intra-block offset of response-local position u."""
        self._check_local(u)
        return u % self.block_size

    def block_positions(self, k: int) -> list[int]:
        """Global positions of block k."""
        if not (0 <= k < self.num_blocks):
            raise PartitionError(f"block index {k} out of range for K={self.num_blocks}")
        base = self.response_start + k * self.block_size
        return list(range(base, base + self.block_size))

    def _check_local(self, u: int) -> None:
        if not (0 <= u < self.response_len):
            raise PartitionError(f"response index {u} out of range")


def make_partition(length: int, prompt_len: int, block_size: int) -> BlockPartition:
    """Partition the response region of a length-`length` sequence."""
    if block_size < 1:
        raise PartitionError(f"block_size must be >= 1, got {block_size}")
    if not (0 <= prompt_len <= length):
        raise PartitionError(f"prompt_len {prompt_len} out of range for length {length}")
    response_len = length - prompt_len
    if response_len % block_size != 0:
        raise PartitionError(
            f"response length {response_len} not divisible by block size {block_size}; "
            "pad the dataset to a block multiple first"
        )
    return BlockPartition(
        block_size=block_size,
        num_blocks=response_len // block_size,
        response_start=prompt_len,
    )


def partition_response(seq, block_size: int) -> BlockPartition:
    """Partition a sequence's response into blocks of `block_size`.

    Works for both TokenSequence and HybridSequence (anything exposing
    __len__ and prompt_len). Raises PartitionError if the response length is
    not a block multiple.
    """
    return make_partition(len(seq), seq.prompt_len, block_size)


def indices_at_offset(part: BlockPartition, j: int) -> list[int]:
    """Global indices sharing intra-block offset j: {start + k*S + j}.

    These are the positions generated together at macro-step j of the
    synchronized (scatter) order.
    """
    if not (0 <= j < part.block_size):
        raise OffsetError(f"offset {j} out of range for block size {part.block_size}")
    return [
        part.response_start + k * part.block_size + j for k in range(part.num_blocks)
    ]


def pad_response(seq: TokenSequence, block_size: int, pad_id: int) -> TokenSequence:
    """Pad the response with pad_id up to the next block multiple.

    Padded positions are excluded from losses and metrics downstream.
    """
    rem = seq.response_len % block_size
    if rem == 0:
        return seq
    extra = block_size - rem
    return TokenSequence(seq.tokens + (pad_id,) * extra, seq.prompt_len)


@dataclass(frozen=True)
class HybridSequence:
    """Alternating (x, y) cell pairs: P context pairs with observable y,
    then R query pairs whose y is the prediction target.

    x cells are d-dimensional vectors, y cells are scalars.
    """

    cells: tuple
    roles: tuple[str, ...]
    d: int

    def __post_init__(self):
        cells = tuple(
            np.asarray(c, dtype=np.float64) if r in (CONTEXT_X, QUERY_X) else float(c)
            for c, r in zip(self.cells, self.roles, strict=True)
        )
        object.__setattr__(self, "cells", cells)
        for r in self.roles:
            if r not in _ROLES:
                raise SeqError(f"unknown cell role {r!r}")
        if len(self.roles) % 2 != 0:
            raise SeqError("hybrid sequences hold whole (x, y) pairs")
        for i in range(0, len(self.roles), 2):
            rx, ry = self.roles[i], self.roles[i + 1]
            if (rx, ry) not in ((CONTEXT_X, CONTEXT_Y), (QUERY_X, TARGET_Y)):
                raise SeqError(f"cell pair {i} has roles ({rx}, {ry})")
        for c, r in zip(cells, self.roles, strict=True):
            if r in (CONTEXT_X, QUERY_X) and c.shape != (self.d,):
                raise SeqError(f"x cell has shape {c.shape}, expected ({self.d},)")
        # context pairs must precede query pairs
        seen_query = False
        for r in self.roles[::2]:
            if r == QUERY_X:
                seen_query = True
            elif seen_query:
                raise SeqError("context pair found after a query pair")

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def num_context_pairs(self) -> int:
        return sum(1 for r in self.roles if r == CONTEXT_Y)

    @property
    def num_query_pairs(self) -> int:
        return sum(1 for r in self.roles if r == TARGET_Y)

    @property
    def prompt_len(self) -> int:
        """Context region length in cells (prompt/response boundary)."""
        return 2 * self.num_context_pairs

    @property
    def response_len(self) -> int:
        return len(self.cells) - self.prompt_len

    def target_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == TARGET_Y]

    def y_values(self) -> np.ndarray:
        """All y values (context and target) by pair order."""
        return np.array(
            [c for c, r in zip(self.cells, self.roles) if r in (CONTEXT_Y, TARGET_Y)]
        )


# ---------------------------------------------------------------------------
# Dataset file format: one JSON record per line.
#   token tasks:  {"tokens": [...], "prompt_len": N}
#   hybrid tasks: {"cells": [...], "roles": [...], "d": d}
# ---------------------------------------------------------------------------


def token_record(seq: TokenSequence) -> str:
    return json.dumps({"tokens": list(seq.tokens), "prompt_len": seq.prompt_len})


def hybrid_record(seq: HybridSequence, extra: dict | None = None) -> str:
    cells = [
        c.tolist() if isinstance(c, np.ndarray) else c
        for c in seq.cells
    ]
    rec = {"cells": cells, "roles": list(seq.roles), "d": seq.d}
    if extra:
        rec.update(extra)
    return json.dumps(rec)


def parse_record(line: str):
    """Parse one dataset line into a TokenSequence or HybridSequence."""
    rec = json.loads(line)
    if "tokens" in rec:
        return TokenSequence(tuple(rec["tokens"]), rec["prompt_len"])
    if "cells" in rec:
        return HybridSequence(tuple(rec["cells"]), tuple(rec["roles"]), rec["d"])
    raise SeqError("record is neither a token nor a hybrid sequence")


def read_dataset(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return [parse_record(line) for line in fh if line.strip()]


def write_dataset(path, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
