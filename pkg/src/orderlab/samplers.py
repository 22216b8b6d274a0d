"""Inference procedures for the five paradigms with exact NFE accounting.

Every decode routine records a SampleTrace: the ordered commits (step
index, positions written, tokens written) and the number of model forward
passes. Decoding is deterministic at temperature 0; stochastic sampling is
available behind an explicit RNG.

All routines operate on a batch of prompts sharing one (prompt_len,
response_len) shape and return one trace per row; the single-sequence spec
operations are thin wrappers over the batch path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .backbone import Backbone, CoordinateIds, ShapeError
from .maskgen import (
    AttentionMask,
    bidirectional_mask,
    block_causal_mask,
    causal_mask,
    jigsaw_solve_mask,
    scatter_mask,
)
from .seqcore import PartitionError, TokenSequence, Vocab, indices_at_offset, make_partition


class ParadigmError(ValueError):
    pass


class LengthError(ValueError):
    pass


PARADIGMS = ("ar", "mdm", "block", "scatter", "jigsaw")

LOW_CONFIDENCE = "LowConfidenceRemask"
TOPK_PER_STEP = "TopKPerStep"


@dataclass(frozen=True)
class DecodeConfig:
    paradigm: str
    steps_T: int = 10
    block_size: int = 4
    unmask_rule: str = LOW_CONFIDENCE
    temperature: float = 0.0
    jigsaw_solve: str = "ar"

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ParadigmError(f"unknown paradigm {self.paradigm!r}")
        if self.steps_T < 1:
            raise ParadigmError("steps_T must be >= 1")
        if self.temperature < 0:
            raise ParadigmError("temperature must be >= 0")
        if self.unmask_rule not in (LOW_CONFIDENCE, TOPK_PER_STEP):
            raise ParadigmError(f"unknown unmask rule {self.unmask_rule!r}")
        if self.jigsaw_solve != "ar":
            raise ParadigmError("only the autoregressive solve phase is implemented")


@dataclass
class TraceStep:
    index: int
    positions: list[int]
    tokens: list[int]


@dataclass
class SampleTrace:
    steps: list[TraceStep] = field(default_factory=list)
    nfe: int = 0
    final: TokenSequence | None = None

    def committed_order(self) -> list[int]:
        out = []
        for s in self.steps:
            out.extend(s.positions)
        return out

    def dump(self) -> str:
        """Line-oriented trace for qualitative inspection of decode order."""
        lines = []
        for s in self.steps:
            pos = ",".join(str(p) for p in s.positions)
            tok = ",".join(str(t) for t in s.tokens)
            lines.append(f"step={s.index} pos=[{pos}] tok=[{tok}]")
        lines.append(f"nfe={self.nfe}")
        return "\n".join(lines)


def nfe_closed_form(paradigm: str, L_resp: int, S: int, T: int) -> int:
    """Forward passes needed by each paradigm at the configured budgets.

    A unit of n maskable positions can absorb at most n denoising steps
    (each step commits at least one position), so per-unit budgets are
    clamped at the unit size; with T at or below the unit size this reduces
    to the familiar AR=L, MDM=T, Block=K*T, Scatter=S*T, Jigsaw=K*(1+S).
    """
    if paradigm not in PARADIGMS:
        raise ParadigmError(f"unknown paradigm {paradigm!r}")
    if paradigm == "ar":
        return L_resp
    if paradigm == "mdm":
        return min(T, L_resp)
    if L_resp % S != 0:
        raise PartitionError(f"response length {L_resp} not divisible by S={S}")
    K = L_resp // S
    if paradigm == "block":
        return K * min(T, S)
    if paradigm == "scatter":
        return S * min(T, K)
    return K * (1 + S)  # jigsaw


def block_entropy(output, part, k: int) -> float:
    """Average Shannon entropy (nats) of block k's token distributions."""
    ent = output.entropies()
    if ent.dim() == 2 and ent.shape[0] == 1:
        ent = ent.squeeze(0)
    positions = part.block_positions(k)
    return float(ent[torch.as_tensor(positions)].mean())


# ---------------------------------------------------------------------------
# Shared machinery
# ---------------------------------------------------------------------------


def _forward_logits(model: Backbone, tokens: np.ndarray, mask, coords) -> torch.Tensor:
    with torch.no_grad():
        out = model.forward(
            tokens=torch.from_numpy(np.ascontiguousarray(tokens)),
            mask=mask if isinstance(mask, AttentionMask) else None,
            mask_bits=None if isinstance(mask, AttentionMask) else mask,
            coords=coords,
        )
    return out.logits


def _pick_tokens(probs_row: torch.Tensor, temperature: float, rng) -> tuple:
    """Token choice and its confidence for one [n, V] probability block."""
    if temperature == 0.0 or rng is None:
        conf, tok = probs_row.max(dim=-1)
        return tok.numpy(), conf.numpy()
    p = probs_row.numpy().astype(np.float64)
    p = p ** (1.0 / max(temperature, 1e-8))
    p /= p.sum(axis=-1, keepdims=True)
    toks = np.array([rng.choice(p.shape[-1], p=row) for row in p])
    conf = p[np.arange(len(toks)), toks]
    return toks, conf


def _quota(remaining: int, steps_left: int, total: int, budget: int, rule: str) -> int:
    if rule == TOPK_PER_STEP:
        return min(remaining, math.ceil(total / budget))
    return math.ceil(remaining / steps_left)


def _denoise_unit(
    model: Backbone,
    current: np.ndarray,
    positions: list[int],
    mask,
    budget: int,
    vocab: Vocab,
    cfg: DecodeConfig,
    coords,
    traces: list[SampleTrace],
    rng,
) -> None:
    """Iteratively unmask `positions` (shared across rows) in-place.

    Each step runs one forward pass, commits the quota of most confident
    predictions per row, and keeps the rest masked (low-confidence
    remasking). Committed positions never change again.
    """
    B = current.shape[0]
    for g in positions:
        current[:, g] = vocab.mask_id
    remaining = [list(positions) for _ in range(B)]
    total = len(positions)
    steps_left = budget
    while steps_left > 0 and total and remaining[0]:
        logits = _forward_logits(model, current, mask, coords)
        probs = torch.softmax(logits, dim=-1)
        n_rem = len(remaining[0])
        q = _quota(n_rem, steps_left, total, budget, cfg.unmask_rule)
        q = min(q, n_rem)
        for b in range(B):
            pos = torch.as_tensor(remaining[b])
            toks, conf = _pick_tokens(probs[b, pos], cfg.temperature, rng)
            order = np.argsort(-conf, kind="stable")[:q]
            written_pos, written_tok = [], []
            for o in sorted(order.tolist()):
                g = remaining[b][o]
                current[b, g] = int(toks[o])
                written_pos.append(g)
                written_tok.append(int(toks[o]))
            for o in sorted(order.tolist(), reverse=True):
                remaining[b].pop(o)
            traces[b].nfe += 1
            traces[b].steps.append(
                TraceStep(len(traces[b].steps), written_pos, written_tok)
            )
        steps_left -= 1


def _start_tokens(prompts: np.ndarray, response_len: int, vocab: Vocab) -> np.ndarray:
    B, P = prompts.shape
    tokens = np.full((B, P + response_len), vocab.mask_id, dtype=np.int64)
    tokens[:, :P] = prompts
    return tokens


def _finalize(traces, tokens: np.ndarray, prompt_len: int) -> list[SampleTrace]:
    for b, tr in enumerate(traces):
        tr.final = TokenSequence(tuple(int(t) for t in tokens[b]), prompt_len)
    return traces


def _check_len(model: Backbone, L: int) -> None:
    if L > model.config.max_len:
        raise LengthError(f"sequence length {L} exceeds model max_len {model.config.max_len}")


# ---------------------------------------------------------------------------
# Paradigm decoders (batched core)
# ---------------------------------------------------------------------------


def batch_decode_ar(model, prompts: np.ndarray, response_len: int, vocab, cfg, coords=None, rng=None):
    """Left-to-right decoding: one forward per response position."""
    B, P = prompts.shape
    if P == 0 and response_len > 0:
        raise LengthError("autoregressive decoding needs a non-empty prompt")
    L = P + response_len
    _check_len(model, L)
    mask = causal_mask(L) if L else None
    inputs = _start_tokens(prompts, response_len, vocab)  # shifted layout
    committed = np.zeros((B, response_len), dtype=np.int64)
    traces = [SampleTrace() for _ in range(B)]
    for s in range(response_len):
        logits = _forward_logits(model, inputs, mask, coords)
        probs = torch.softmax(logits[:, P + s], dim=-1)
        toks, _ = _pick_tokens(probs, cfg.temperature, rng)
        for b in range(B):
            committed[b, s] = int(toks[b])
            traces[b].nfe += 1
            traces[b].steps.append(TraceStep(s, [P + s], [int(toks[b])]))
        if s + 1 < response_len:
            inputs[:, P + s + 1] = committed[:, s]
    final = np.concatenate([prompts, committed], axis=1)
    return _finalize(traces, final, P)


def batch_decode_mdm(
    model, prompts, response_len, vocab, cfg, coords=None, rng=None, mask_override=None
):
    """Iterative denoising from the all-masked response with low-confidence
    remasking; runs at most steps_T forwards."""
    B, P = prompts.shape
    L = P + response_len
    _check_len(model, L)
    tokens = _start_tokens(prompts, response_len, vocab)
    traces = [SampleTrace() for _ in range(B)]
    mask = mask_override if mask_override is not None else bidirectional_mask(L)
    _denoise_unit(
        model, tokens, list(range(P, L)), mask, cfg.steps_T, vocab, cfg, coords, traces, rng
    )
    return _finalize(traces, tokens, P)


def batch_decode_block(model, prompts, response_len, vocab, cfg, coords=None, rng=None):
    """Blockwise-sequential decoding: denoise each block in order with a
    per-block budget of steps_T."""
    B, P = prompts.shape
    L = P + response_len
    _check_len(model, L)
    part = make_partition(L, P, cfg.block_size)
    mask = block_causal_mask(L, P, cfg.block_size)
    tokens = _start_tokens(prompts, response_len, vocab)
    traces = [SampleTrace() for _ in range(B)]
    for k in range(part.num_blocks):
        _denoise_unit(
            model, tokens, part.block_positions(k), mask, cfg.steps_T, vocab, cfg, coords, traces, rng
        )
    return _finalize(traces, tokens, P)


def batch_decode_scatter(model, prompts, response_len, vocab, cfg, coords=None, rng=None):
    """Synchronized decoding: macro-step j denoises the offset-j position of
    every block in parallel under the scatter mask, budget steps_T per
    offset."""
    B, P = prompts.shape
    L = P + response_len
    _check_len(model, L)
    part = make_partition(L, P, cfg.block_size)
    mask = scatter_mask(L, P, cfg.block_size)
    tokens = _start_tokens(prompts, response_len, vocab)
    traces = [SampleTrace() for _ in range(B)]
    for j in range(part.block_size):
        _denoise_unit(
            model, tokens, indices_at_offset(part, j), mask, cfg.steps_T, vocab, cfg, coords, traces, rng
        )
    return _finalize(traces, tokens, P)


def batch_decode_jigsaw(model, prompts, response_len, vocab, cfg, coords=None, rng=None):
    """Entropy-planned decoding. Each iteration runs one probe pass with
    global bidirectional visibility over the committed context plus fully
    masked remaining blocks, picks the minimum-entropy block (ties to the
    lowest index), then decodes it left-to-right with one forward per token,
    conditioned on the committed context. NFE is exactly K * (1 + S)."""
    B, P = prompts.shape
    L = P + response_len
    _check_len(model, L)
    S = cfg.block_size
    part = make_partition(L, P, S)
    K = part.num_blocks
    tokens = _start_tokens(prompts, response_len, vocab)  # committed state
    traces = [SampleTrace() for _ in range(B)]
    probe_mask = bidirectional_mask(L) if L else None
    committed: list[list[int]] = [[] for _ in range(B)]
    block_pos = [part.block_positions(k) for k in range(K)]

    for _ in range(K):
        # Probe: estimate block uncertainty over the remaining blocks.
        logits = _forward_logits(model, tokens, probe_mask, coords)
        logp = torch.log_softmax(logits, dim=-1)
        ent = -(logp.exp() * logp).sum(dim=-1)  # [B, L]
        targets = np.empty(B, dtype=np.int64)
        for b in range(B):
            traces[b].nfe += 1
            best_k, best_h = -1, math.inf
            for k in range(K):
                if k in committed[b]:
                    continue
                h = float(ent[b, torch.as_tensor(block_pos[k])].mean())
                if h < best_h:
                    best_k, best_h = k, h
            targets[b] = best_k

        # Solve: intra-block autoregression under the grown-context mask,
        # with the block's input in the shifted training layout.
        solve_bits = np.stack(
            [jigsaw_solve_mask(L, P, S, committed[b], int(targets[b])).bits for b in range(B)]
        )
        inputs = tokens.copy()
        decoded = np.zeros((B, S), dtype=np.int64)
        for s in range(S):
            step_logits = _forward_logits(model, inputs, solve_bits, coords)
            sites = torch.as_tensor([block_pos[targets[b]][s] for b in range(B)])
            probs = torch.softmax(step_logits[torch.arange(B), sites], dim=-1)
            toks, _ = _pick_tokens(probs, cfg.temperature, rng)
            for b in range(B):
                g = block_pos[targets[b]][s]
                decoded[b, s] = int(toks[b])
                traces[b].nfe += 1
                traces[b].steps.append(TraceStep(len(traces[b].steps), [g], [int(toks[b])]))
                if s + 1 < S:
                    inputs[b, block_pos[targets[b]][s + 1]] = decoded[b, s]
        for b in range(B):
            tokens[b, block_pos[targets[b]]] = decoded[b]
            committed[b].append(int(targets[b]))
    return _finalize(traces, tokens, P)


_DECODERS = {
    "ar": batch_decode_ar,
    "mdm": batch_decode_mdm,
    "block": batch_decode_block,
    "scatter": batch_decode_scatter,
    "jigsaw": batch_decode_jigsaw,
}


def batch_decode(model, prompts, response_len, vocab, cfg: DecodeConfig, coords=None, rng=None):
    return _DECODERS[cfg.paradigm](model, prompts, response_len, vocab, cfg, coords=coords, rng=rng)


# ---------------------------------------------------------------------------
# Single-sequence spec operations
# ---------------------------------------------------------------------------


def _one(prompt: TokenSequence) -> np.ndarray:
    return np.asarray([prompt.tokens], dtype=np.int64)


def decode_ar(model, prompt, response_len, vocab, cfg=None, coords=None, rng=None) -> SampleTrace:
    cfg = replace(cfg, paradigm="ar") if cfg else DecodeConfig(paradigm="ar")
    return batch_decode_ar(model, _one(prompt), response_len, vocab, cfg, coords, rng)[0]


def decode_mdm(model, prompt, response_len, vocab, cfg, coords=None, rng=None, mask_override=None) -> SampleTrace:
    return batch_decode_mdm(
        model, _one(prompt), response_len, vocab, cfg, coords, rng, mask_override=mask_override
    )[0]


def decode_block(model, prompt, response_len, vocab, cfg, coords=None, rng=None) -> SampleTrace:
    return batch_decode_block(model, _one(prompt), response_len, vocab, cfg, coords, rng)[0]


def decode_scatter(model, prompt, response_len, vocab, cfg, coords=None, rng=None) -> SampleTrace:
    return batch_decode_scatter(model, _one(prompt), response_len, vocab, cfg, coords, rng)[0]


def decode_jigsaw(model, prompt, response_len, vocab, cfg, coords=None, rng=None) -> SampleTrace:
    return batch_decode_jigsaw(model, _one(prompt), response_len, vocab, cfg, coords, rng)[0]
