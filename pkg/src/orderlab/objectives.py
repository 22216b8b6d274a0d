"""Per-paradigm training losses.

All paradigms share one prediction convention: the distribution at position
i is a prediction of the clean token at position i. What differs is the
input the model saw (mask-corrupted for the denoising paradigms, blockwise
right-shifted for the strictly ordered ones) and the attention mask.

Input preparation for the ordered paradigms lives here too:

  * autoregressive input: the response is shifted right by one, a mask
    token fills the first response slot, so position i holds token i-1 and
    the model predicts token i from its strict prefix;
  * jigsaw input: the same shift applied independently inside every block,
    so each block's first prediction is conditioned on the prompt alone and
    interior predictions on the intra-block prefix.

Losses return a LossReport whose `total` keeps the autograd graph; a report
with total=None is the skip-sample signal (nothing was supervised).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ForwardOutput
from .corruption import CorruptionState
from .seqcore import BlockPartition, HybridSequence, TokenSequence, Vocab


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    total: torch.Tensor | None
    masked_count: int
    tau: float | None = None
    per_position: torch.Tensor | None = None

    @property
    def skipped(self) -> bool:
        return self.total is None

    def value(self) -> float:
        if self.total is None:
            raise LossError("loss was skipped (no supervised positions)")
        return float(self.total)


# ---------------------------------------------------------------------------
# Input preparation for the ordered paradigms.
# ---------------------------------------------------------------------------


def ar_input_tokens(seq: TokenSequence, vocab: Vocab) -> np.ndarray:
    """Blockwise shift with a single block spanning the whole response."""
    part = BlockPartition(
        block_size=max(seq.response_len, 1),
        num_blocks=1 if seq.response_len else 0,
        response_start=seq.prompt_len,
    )
    return jigsaw_input_tokens(seq, part, vocab)


def jigsaw_input_tokens(seq: TokenSequence, part: BlockPartition, vocab: Vocab) -> np.ndarray:
    """Shift each response block right by one; block heads get the mask id."""
    if part.response_start != seq.prompt_len or part.response_len != seq.response_len:
        raise LossError("partition does not match the sequence")
    tokens = np.array(seq.tokens, dtype=np.int64)
    for k in range(part.num_blocks):
        pos = part.block_positions(k)
        tokens[pos[1:]] = tokens[pos[:-1]].copy()
        tokens[pos[0]] = vocab.mask_id
    return tokens


# ---------------------------------------------------------------------------
# Core reductions (shared by the per-sequence ops and the batched trainer).
# ---------------------------------------------------------------------------


def _logits2d(output: ForwardOutput) -> torch.Tensor:
    if output.logits is None:
        raise LossError("output carries no token logits")
    logits = output.logits
    if logits.dim() == 3 and logits.shape[0] == 1:
        logits = logits.squeeze(0)
    if logits.dim() != 2:
        raise LossError(f"expected per-sequence logits, got shape {tuple(logits.shape)}")
    return logits


def nll_at(logits: torch.Tensor, targets, positions) -> torch.Tensor:
    """Per-position -log p(target) at the given positions; [n] tensor."""
    idx = torch.as_tensor(list(positions), dtype=torch.long)
    tgt = torch.as_tensor([targets[int(i)] for i in idx], dtype=torch.long)
    logp = F.log_softmax(logits.index_select(0, idx), dim=-1)
    return -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)


def loss_ar(output: ForwardOutput, seq: TokenSequence) -> LossReport:
    """Mean next-token NLL over response positions (prompt excluded)."""
    if seq.response_len == 0:
        raise LossError("autoregressive loss needs a non-empty response")
    positions = range(seq.prompt_len, len(seq))
    nll = nll_at(_logits2d(output), seq.tokens, positions)
    return LossReport(total=nll.mean(), masked_count=seq.response_len, per_position=nll)


def loss_mdm(output: ForwardOutput, state: CorruptionState, clean: TokenSequence) -> LossReport:
    """Reweighted masked cross-entropy: (1/tau) * sum of masked-position NLL."""
    if state.tau <= 0:
        raise LossError("masked loss needs tau > 0")
    positions = state.masked_positions
    if not positions:
        return LossReport(total=None, masked_count=0, tau=state.tau)
    nll = nll_at(_logits2d(output), clean.tokens, positions)
    return LossReport(
        total=nll.sum() / state.tau,
        masked_count=len(positions),
        tau=state.tau,
        per_position=nll,
    )


def loss_block(
    output: ForwardOutput,
    state: CorruptionState,
    clean: TokenSequence,
    part: BlockPartition,
    k_block: int,
) -> LossReport:
    """Single-block conditional denoising loss; supervised positions are the
    masked positions inside block k_block."""
    block = set(part.block_positions(k_block))
    positions = [g for g in state.masked_positions if g in block]
    if set(state.masked_positions) - block:
        raise LossError("corruption leaked outside the target block")
    if not positions:
        return LossReport(total=None, masked_count=0, tau=state.tau)
    nll = nll_at(_logits2d(output), clean.tokens, positions)
    return LossReport(
        total=nll.sum() / state.tau,
        masked_count=len(positions),
        tau=state.tau,
        per_position=nll,
    )


def loss_scatter(
    output: ForwardOutput,
    state: CorruptionState,
    clean: TokenSequence,
    part: BlockPartition,
) -> LossReport:
    """Masked cross-entropy under the synchronized-offset attention mask;
    the supervision itself matches the plain masked objective."""
    if part.response_start != clean.prompt_len or part.response_len != clean.response_len:
        raise LossError("partition does not match the sequence")
    return loss_mdm(output, state, clean)


def loss_jigsaw(output: ForwardOutput, clean: TokenSequence, part: BlockPartition) -> LossReport:
    """Mean NLL over all response positions under the blockwise-shifted
    input convention: position u in block k is predicted from the prompt
    plus its intra-block prefix. With one block this is exactly the
    autoregressive loss restricted to the response."""
    if part.response_start != clean.prompt_len or part.response_len != clean.response_len:
        raise LossError("partition does not match the sequence")
    if clean.response_len == 0:
        raise LossError("jigsaw loss needs a non-empty response")
    positions = range(clean.prompt_len, len(clean))
    nll = nll_at(_logits2d(output), clean.tokens, positions)
    return LossReport(total=nll.mean(), masked_count=clean.response_len, per_position=nll)


def loss_regression(
    output: ForwardOutput, seq: HybridSequence, masked_flags
) -> LossReport:
    """Mean squared error over the masked / target y-cells."""
    if output.scalar_preds is None:
        raise LossError("output carries no scalar predictions")
    preds = output.scalar_preds
    if preds.dim() == 2 and preds.shape[0] == 1:
        preds = preds.squeeze(0)
    positions = [i for i, f in enumerate(masked_flags) if f]
    if not positions:
        raise LossError("no target cells to supervise")
    targets = []
    for i in positions:
        if seq.roles[i] not in ("ContextY", "TargetY"):
            raise LossError(f"cell {i} is not a y-cell")
        targets.append(float(seq.cells[i]))
    idx = torch.as_tensor(positions, dtype=torch.long)
    tgt = torch.as_tensor(targets, dtype=preds.dtype)
    err = (preds.index_select(0, idx) - tgt) ** 2
    return LossReport(total=err.mean(), masked_count=len(positions), per_position=err)


# ---------------------------------------------------------------------------
# Batched reductions used by the training loop. Shapes: logits [B, L, V],
# tokens/targets [B, L], boolean supervision masks [B, L].
# ---------------------------------------------------------------------------


def batch_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def batch_mean_nll(logits, targets, supervise: torch.Tensor) -> torch.Tensor:
    """Per-sequence mean NLL over supervised positions, averaged over the
    batch (used by the ordered paradigms)."""
    nll = batch_nll(logits, targets)
    counts = supervise.sum(dim=1).clamp(min=1)
    per_seq = (nll * supervise).sum(dim=1) / counts
    return per_seq.mean()


def batch_masked_nll(logits, targets, supervise: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """Per-sequence (1/tau) * masked NLL sum, averaged over sequences that
    supervised at least one position (skip-sample for the rest)."""
    nll = batch_nll(logits, targets)
    per_seq = (nll * supervise).sum(dim=1) / tau
    valid = supervise.any(dim=1)
    if not bool(valid.any()):
        return logits.sum() * 0.0
    return per_seq[valid].mean()


def batch_mse(preds: torch.Tensor, targets: torch.Tensor, supervise: torch.Tensor) -> torch.Tensor:
    """Per-sequence mean squared error over supervised cells, averaged over
    sequences with supervision."""
    err = (preds - targets) ** 2 * supervise
    counts = supervise.sum(dim=1)
    valid = counts > 0
    if not bool(valid.any()):
        return preds.sum() * 0.0
    per_seq = err.sum(dim=1)[valid] / counts[valid]
    return per_seq.mean()
