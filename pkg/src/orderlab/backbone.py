"""Shared trainable sequence model.

One transformer backbone serves every paradigm: pre-norm residual blocks
with RMS normalization, gated (SwiGLU-style) feed-forward, rotary position
encoding, and an arbitrary boolean attention mask injected at every layer.
Inputs are either token ids or mixed continuous/discrete cells; outputs are
token logits and/or a per-position scalar regression head.

Grid tasks can additionally enable tri-partite coordinate embeddings: the
embedding width is split in three and learned row / column / box embeddings
are concatenated and added to the input representation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .maskgen import AttentionMask

GRID_SIDE = 9


class ShapeError(ValueError):
    pass


class GridError(ValueError):
    pass


def _default_mlp_hidden(n_embd: int) -> int:
    # 2/3 * 4 * n_embd, rounded up to a multiple of 8 (LLaMA-style gated MLP)
    return ((8 * n_embd // 3) + 7) // 8 * 8


@dataclass(frozen=True)
class ModelConfig:
    n_embd: int
    n_layer: int
    n_head: int
    vocab_size: int | None = None
    max_len: int = 512
    use_coordinate_embeddings: bool = False
    continuous_input_dim: int | None = None
    head: str = "token"  # "token" | "scalar" | "both"
    mlp_hidden: int | None = None

    def __post_init__(self):
        if self.n_embd % self.n_head != 0:
            raise ShapeError("n_embd must be divisible by n_head")
        if (self.n_embd // self.n_head) % 2 != 0:
            raise ShapeError("head dimension must be even for rotary encoding")
        if self.use_coordinate_embeddings and self.n_embd % 3 != 0:
            raise ShapeError("coordinate embeddings need n_embd divisible by 3")
        if self.head not in ("token", "scalar", "both"):
            raise ShapeError(f"unknown head {self.head!r}")
        if self.head in ("token", "both") and self.vocab_size is None:
            raise ShapeError("token head requires vocab_size")
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", _default_mlp_hidden(self.n_embd))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def coord_ids(i: int) -> tuple[int, int, int]:
    """Row, column and 3x3-box indices of flattened grid index i."""
    if not (0 <= i < GRID_SIDE * GRID_SIDE):
        raise GridError(f"grid index {i} out of range")
    r, c = i // GRID_SIDE, i % GRID_SIDE
    return r, c, (r // 3) * 3 + (c // 3)


@dataclass(frozen=True)
class CoordinateIds:
    """Per-position (row, col, box) triples; -1 rows mark non-grid positions."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != 3:
            raise GridError(f"coordinate ids must have shape (L, 3), got {ids.shape}")
        grid = ids[ids[:, 0] >= 0]
        if grid.size and (grid.min() < 0 or grid.max() >= GRID_SIDE):
            raise GridError("coordinate values out of range")
        ids = ids.copy()
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @staticmethod
    def for_grid_positions(L: int, grid_index_of: dict[int, int]) -> "CoordinateIds":
        """Build ids for a length-L sequence given position -> grid index."""
        ids = -np.ones((L, 3), dtype=np.int64)
        for pos, gi in grid_index_of.items():
            ids[pos] = coord_ids(gi)
        return CoordinateIds(ids)


@dataclass
class ForwardOutput:
    """Per-position model outputs for one forward pass."""

    logits: torch.Tensor | None = None  # [..., L, V]
    scalar_preds: torch.Tensor | None = None  # [..., L]

    def probs(self) -> torch.Tensor:
        if self.logits is None:
            raise ShapeError("no token head on this output")
        return F.softmax(self.logits, dim=-1)

    def entropies(self) -> torch.Tensor:
        """Per-position Shannon entropy (nats) of the token distribution."""
        if self.logits is None:
            raise ShapeError("no token head on this output")
        logp = F.log_softmax(self.logits, dim=-1)
        return -(logp.exp() * logp).sum(dim=-1)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = x.pow(2).mean(dim=-1, keepdim=True).add(self.eps).rsqrt()
        return x * rms * self.weight


def rope_angles(L: int, head_dim: int, offset: int, dtype, device) -> tuple:
    """cos/sin tables for rotary encoding at positions offset..offset+L-1."""
    half = head_dim // 2
    inv_freq = 1.0 / (10000.0 ** (torch.arange(0, half, dtype=torch.float64) / half))
    pos = torch.arange(offset, offset + L, dtype=torch.float64)
    ang = torch.outer(pos, inv_freq)
    return ang.cos().to(dtype=dtype, device=device), ang.sin().to(dtype=dtype, device=device)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate the head dimension pairwise; x is [..., L, head_dim]."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x2 * cos + x1 * sin), dim=-1)


class Attention(nn.Module):
    def __init__(self, n_embd: int, n_head: int):
        super().__init__()
        self.n_head = n_head
        self.head_dim = n_embd // n_head
        self.qkv = nn.Linear(n_embd, 3 * n_embd, bias=False)
        self.out = nn.Linear(n_embd, n_embd, bias=False)

    def forward(self, x, visible, position_offset=0):
        B, L, E = x.shape
        q, k, v = self.qkv(x).split(E, dim=-1)
        q = q.view(B, L, self.n_head, self.head_dim).transpose(1, 2)
        k = k.view(B, L, self.n_head, self.head_dim).transpose(1, 2)
        v = v.view(B, L, self.n_head, self.head_dim).transpose(1, 2)
        cos, sin = rope_angles(L, self.head_dim, position_offset, x.dtype, x.device)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        scores = q @ k.transpose(-2, -1) / (self.head_dim ** 0.5)
        scores = scores.masked_fill(~visible, float("-inf"))
        att = F.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, E)
        return self.out(y)


class SwiGLU(nn.Module):
    def __init__(self, n_embd: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(n_embd, hidden, bias=False)
        self.up = nn.Linear(n_embd, hidden, bias=False)
        self.down = nn.Linear(hidden, n_embd, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.n_embd)
        self.attn = Attention(cfg.n_embd, cfg.n_head)
        self.norm2 = RMSNorm(cfg.n_embd)
        self.mlp = SwiGLU(cfg.n_embd, cfg.mlp_hidden)

    def forward(self, x, visible, position_offset=0):
        x = x + self.attn(self.norm1(x), visible, position_offset)
        x = x + self.mlp(self.norm2(x))
        return x


# Hybrid cell kinds for the continuous input path.
CELL_X = 0
CELL_Y = 1
CELL_Y_MASKED = 2


class Backbone(nn.Module):
    """The shared model. Token path: forward(tokens=[B, L]). Hybrid path:
    forward(kinds=[B, L], values=[B, L, d]). Either path takes an
    AttentionMask whose size equals the input length."""

    def __init__(self, config: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        E = config.n_embd
        if config.vocab_size is not None:
            self.tok_emb = nn.Embedding(config.vocab_size, E)
        if config.continuous_input_dim is not None:
            self.x_in = nn.Linear(config.continuous_input_dim, E, bias=False)
            self.y_in = nn.Linear(1, E, bias=False)
            self.y_mask_emb = nn.Parameter(torch.zeros(E))
        if config.use_coordinate_embeddings:
            third = E // 3
            self.coord_row = nn.Embedding(GRID_SIDE, third)
            self.coord_col = nn.Embedding(GRID_SIDE, third)
            self.coord_box = nn.Embedding(GRID_SIDE, third)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layer))
        self.final_norm = RMSNorm(E)
        if config.head in ("token", "both"):
            self.lm_head = nn.Linear(E, config.vocab_size, bias=False)
        if config.head in ("scalar", "both"):
            self.scalar_head = nn.Linear(E, 1, bias=False)
        self._init_weights(seed)

    def _init_weights(self, seed: int | None):
        g = torch.Generator()
        if seed is not None:
            g.manual_seed(seed)
        resid_scale = (2 * max(self.config.n_layer, 1)) ** -0.5
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() < 2 and "y_mask_emb" not in name:
                    continue  # keep norm weights at 1
                std = 0.02
                if name.endswith(("attn.out.weight", "mlp.down.weight")):
                    std *= resid_scale
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float32) * std)

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(tokens)

    def add_coordinate_embedding(
        self, hidden: torch.Tensor, coords: CoordinateIds
    ) -> torch.Tensor:
        """hidden + concat(row, col, box) embeddings; -1 rows unchanged."""
        ids = torch.from_numpy(np.ascontiguousarray(coords.ids))
        if ids.shape[0] != hidden.shape[-2]:
            raise ShapeError("coordinate ids length does not match input length")
        grid = ids[:, 0] >= 0
        safe = ids.clamp(min=0)
        add = torch.cat(
            (self.coord_row(safe[:, 0]), self.coord_col(safe[:, 1]), self.coord_box(safe[:, 2])),
            dim=-1,
        ).to(hidden.dtype)
        add = add * grid.unsqueeze(-1).to(hidden.dtype)
        return hidden + add

    def _visible(self, mask: AttentionMask, L: int, device) -> torch.Tensor:
        if mask.size != L:
            raise ShapeError(f"mask size {mask.size} does not match input length {L}")
        return torch.from_numpy(np.ascontiguousarray(mask.bits)).to(device)

    def forward(
        self,
        tokens: torch.Tensor | None = None,
        kinds: torch.Tensor | None = None,
        values: torch.Tensor | None = None,
        mask: AttentionMask | None = None,
        coords: CoordinateIds | None = None,
        position_offset: int = 0,
        token_embeds: torch.Tensor | None = None,
    ) -> ForwardOutput:
        if token_embeds is not None:
            h = token_embeds
        elif tokens is not None:
            if tokens.dim() == 1:
                tokens = tokens.unsqueeze(0)
            h = self.embed_tokens(tokens)
        elif kinds is not None:
            h = self._embed_hybrid(kinds, values)
        else:
            raise ShapeError("forward needs tokens, token_embeds, or hybrid cells")
        B, L, _ = h.shape
        if L > self.config.max_len:
            raise ShapeError(f"input length {L} exceeds max_len {self.config.max_len}")
        if mask is None:
            raise ShapeError("an attention mask is required")
        visible = self._visible(mask, L, h.device)
        if coords is not None:
            h = self.add_coordinate_embedding(h, coords)
        for block in self.blocks:
            h = block(h, visible, position_offset)
        h = self.final_norm(h)
        logits = self.lm_head(h) if hasattr(self, "lm_head") else None
        scalar = self.scalar_head(h).squeeze(-1) if hasattr(self, "scalar_head") else None
        return ForwardOutput(logits=logits, scalar_preds=scalar)

    def _embed_hybrid(self, kinds: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        if self.config.continuous_input_dim is None:
            raise ShapeError("model has no continuous input path")
        if kinds.dim() == 1:
            kinds, values = kinds.unsqueeze(0), values.unsqueeze(0)
        dtype = self.x_in.weight.dtype
        values = values.to(dtype)
        x_part = self.x_in(values)
        y_part = self.y_in(values[..., :1])
        m_part = self.y_mask_emb.expand_as(x_part)
        k = kinds.unsqueeze(-1)
        return torch.where(k == CELL_X, x_part, torch.where(k == CELL_Y, y_part, m_part))

    def run_sequence(
        self,
        tokens=None,
        kinds=None,
        values=None,
        mask: AttentionMask | None = None,
        coords: CoordinateIds | None = None,
    ) -> ForwardOutput:
        """Single-sequence convenience wrapper; squeezes the batch axis."""
        def prep(a, dt):
            return None if a is None else torch.as_tensor(a, dtype=dt)

        out = self.forward(
            tokens=prep(tokens, torch.long),
            kinds=prep(kinds, torch.long),
            values=prep(values, None),
            mask=mask,
            coords=coords,
        )
        return ForwardOutput(
            logits=None if out.logits is None else out.logits.squeeze(0),
            scalar_preds=None if out.scalar_preds is None else out.scalar_preds.squeeze(0),
        )


def param_count(config: ModelConfig) -> int:
    """Exact trainable-parameter count of the constructed model."""
    model = Backbone(config)
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoint container: magic, JSON header (config + tensor manifest + meta),
# then raw row-major little-endian float32 payloads in manifest order.
# Reloading on the same platform reproduces forward outputs bit-exactly.
# ---------------------------------------------------------------------------

_MAGIC = b"ORLBCKPT"


def save_checkpoint(
    path,
    model: Backbone,
    meta: dict | None = None,
    extra: dict[str, np.ndarray] | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in model.state_dict().items():
        tensors.append((name, p.detach().cpu().to(torch.float32).numpy()))
    for name, arr in (extra or {}).items():
        tensors.append(("extra/" + name, np.asarray(arr, dtype=np.float32)))
    header = {
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ShapeError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return ModelConfig.from_dict(header["config"]), tensors, header["meta"]


def load_model(path) -> tuple[Backbone, dict[str, np.ndarray], dict]:
    """Rebuild a Backbone from a checkpoint; returns (model, extras, meta)."""
    config, tensors, meta = load_checkpoint(path)
    model = Backbone(config)
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("extra/")}
    model.load_state_dict(state)
    extras = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return model, extras, meta
