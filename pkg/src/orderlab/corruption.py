"""Forward masking process and masking-level schedules.

Corruption replaces response tokens with the vocabulary's mask symbol;
prompt positions are never touched. All draws come from an explicit
numpy Generator so corruption is pure given the RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seqcore import BlockPartition, TokenSequence, Vocab

UNIFORM = "Uniform"
REVERSE_BIAS = "ReverseBias"
FORWARD_BIAS = "ForwardBias"
_KINDS = (UNIFORM, REVERSE_BIAS, FORWARD_BIAS)

# Training masking levels are clamped away from the endpoints so the 1/tau
# loss reweighting stays bounded.
DEFAULT_TAU_RANGE = (0.1, 0.9)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSchedule:
    """Masking-position distribution plus the tau sampling range."""

    kind: str = UNIFORM
    tau_min: float = DEFAULT_TAU_RANGE[0]
    tau_max: float = DEFAULT_TAU_RANGE[1]

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.tau_min <= self.tau_max < 1.0):
            raise ScheduleError(
                f"tau clamp must satisfy 0 < min <= max < 1, got "
                f"[{self.tau_min}, {self.tau_max}]"
            )

    def weights(self, response_len: int) -> np.ndarray:
        """Unnormalized masking weights over response-local positions.

        ReverseBias masks earlier tokens more often (weight L - i + 1 for
        1-based i), ForwardBias masks later tokens more often (weight i).
        """
        i = np.arange(1, response_len + 1, dtype=np.float64)
        if self.kind == REVERSE_BIAS:
            return response_len - i + 1
        if self.kind == FORWARD_BIAS:
            return i.copy()
        return np.ones(response_len, dtype=np.float64)


@dataclass(frozen=True)
class CorruptionState:
    """A corrupted sequence, its masking level, and the masked indicator."""

    corrupted: TokenSequence
    tau: float
    masked_flags: tuple[bool, ...]

    def __post_init__(self):
        if len(self.masked_flags) != len(self.corrupted):
            raise ScheduleError("masked_flags length mismatch")

    @property
    def masked_positions(self) -> list[int]:
        return [i for i, f in enumerate(self.masked_flags) if f]

    @property
    def masked_count(self) -> int:
        return sum(self.masked_flags)


def _apply(seq: TokenSequence, mask_positions, tau: float, vocab: Vocab) -> CorruptionState:
    flags = [False] * len(seq)
    tokens = list(seq.tokens)
    for g in mask_positions:
        if g < seq.prompt_len:
            raise ScheduleError("attempted to corrupt a prompt position")
        flags[g] = True
        tokens[g] = vocab.mask_id
    return CorruptionState(
        corrupted=TokenSequence(tuple(tokens), seq.prompt_len),
        tau=float(tau),
        masked_flags=tuple(flags),
    )


def corrupt_iid(
    seq: TokenSequence, tau: float, rng: np.random.Generator, vocab: Vocab
) -> CorruptionState:
    """Independently mask each response token with probability tau."""
    if not (0.0 <= tau <= 1.0):
        raise ScheduleError(f"tau must lie in [0, 1], got {tau}")
    n = seq.response_len
    hits = rng.random(n) < tau
    positions = [seq.prompt_len + i for i in range(n) if hits[i]]
    return _apply(seq, positions, tau, vocab)


def corrupt_weighted(
    seq: TokenSequence,
    k: int,
    schedule: MaskSchedule,
    rng: np.random.Generator,
    vocab: Vocab,
    tau: float | None = None,
) -> CorruptionState:
    """Mask exactly k response positions, drawn without replacement with the
    schedule's position weights (sequential draw-remove-renormalize).

    `tau` is recorded on the state for loss reweighting; it defaults to the
    realized masking fraction k / response_len.
    """
    n = seq.response_len
    if not (0 <= k <= n):
        raise ScheduleError(f"k={k} out of range for response length {n}")
    weights = schedule.weights(n)
    chosen: list[int] = []
    remaining = list(range(n))
    w = weights.copy()
    for _ in range(k):
        p = w / w.sum()
        idx = int(rng.choice(len(remaining), p=p))
        chosen.append(remaining.pop(idx))
        w = np.delete(w, idx)
    if tau is None:
        tau = k / n if n else 0.0
    positions = [seq.prompt_len + i for i in chosen]
    return _apply(seq, positions, tau, vocab)


def corrupt_block(
    seq: TokenSequence,
    part: BlockPartition,
    k_block: int,
    tau: float,
    rng: np.random.Generator,
    vocab: Vocab,
) -> CorruptionState:
    """Mask i.i.d. with probability tau, restricted to block k_block; every
    other position stays clean."""
    if not (0.0 <= tau <= 1.0):
        raise ScheduleError(f"tau must lie in [0, 1], got {tau}")
    positions = part.block_positions(k_block)  # raises PartitionError if bad
    hits = rng.random(len(positions)) < tau
    return _apply(seq, [g for g, h in zip(positions, hits) if h], tau, vocab)


def sample_tau(schedule: MaskSchedule, rng: np.random.Generator) -> float:
    """Draw a masking level uniformly from the schedule's clamp range."""
    return float(rng.uniform(schedule.tau_min, schedule.tau_max))
