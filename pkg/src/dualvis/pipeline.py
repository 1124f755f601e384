"""Dual-stream visual token pipeline and the toy decoder.

Per frame, each encoder's grid is bilinearly pooled, a learned row-end token
is appended after every row, and the result is flattened row-major. Each
stream goes through its own two-layer MLP projector into decoder space, and
the two streams are concatenated (flat first, then hierarchical) with
per-token provenance. Text follows the visual prefix in the decoder input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .budget import (
    TOY_FLAT_GEOMETRY,
    TOY_HIER_GEOMETRY,
    EncoderGeometry,
    TokenBudgetConfig,
    pooled_side,
)
from .encoders import (
    Block,
    FlatEncoder,
    GeometryError,
    HierEncoder,
    LayerNorm,
    init_params,
    leaf_seed,
    linear,
    preprocess,
)
from .sampler import FrameIndexPlan, plan_frames

FLAT, HIER, TEXT = 0, 1, 2
ENCODER_NAMES = {FLAT: "flat", HIER: "hier", TEXT: "text"}


class ShapeError(ValueError):
    pass


class VocabError(ValueError):
    pass


# ---------------------------------------------------------------------------
# byte tokenizer

BOS, EOS, PAD, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_text(ids) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# token streams


@dataclass
class Provenance:
    encoder: np.ndarray
    frame: np.ndarray
    row: np.ndarray
    col: np.ndarray
    is_row_token: np.ndarray

    @classmethod
    def empty(cls) -> "Provenance":
        z = np.zeros(0, dtype=np.int64)
        return cls(z.astype(np.int8), z, z, z, z.astype(bool))

    @classmethod
    def concat(cls, parts: list["Provenance"]) -> "Provenance":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))

    def __len__(self) -> int:
        return len(self.encoder)

    def count(self, encoder: int) -> int:
        return int(np.count_nonzero(self.encoder == encoder))

    def per_frame_counts(self) -> dict[tuple[str, int], int]:
        out: dict[tuple[str, int], int] = {}
        for e, f in zip(self.encoder.tolist(), self.frame.tolist()):
            key = (ENCODER_NAMES[e], f)
            out[key] = out.get(key, 0) + 1
        return out


@dataclass
class TokenStream:
    tokens: torch.Tensor  # (T, D)
    provenance: Provenance = field(default_factory=Provenance.empty)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be (T, D), got {tuple(self.tokens.shape)}")
        if len(self.provenance) != self.tokens.shape[0]:
            raise ShapeError("provenance length does not match token count")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def empty(cls, dim: int) -> "TokenStream":
        return cls(torch.zeros(0, dim, dtype=nx.DTYPE), Provenance.empty())


def pool_and_rowtokens(
    grid: torch.Tensor,
    s_pool: int,
    row_token: torch.Tensor,
    encoder: int = HIER,
    frame_index: int = 0,
) -> TokenStream:
    """Pool one ``(h, w, C)`` grid and append ``row_token`` after each row."""
    return pool_frames(grid[None], s_pool, row_token, encoder, [frame_index])


def pool_frames(
    grids: torch.Tensor,
    s_pool: int,
    row_token: torch.Tensor,
    encoder: int,
    frame_indices,
) -> TokenStream:
    """Batched :func:`pool_and_rowtokens` over ``(N, h, w, C)``; frames stay in order."""
    if s_pool < 1:
        raise ValueError("s_pool must be >= 1")
    n, h, w, c = grids.shape
    if row_token.shape != (c,):
        raise ShapeError(f"row token must have shape ({c},), got {tuple(row_token.shape)}")
    if len(frame_indices) != n:
        raise ShapeError("need one frame index per grid")
    ph, pw = pooled_side(h, s_pool), pooled_side(w, s_pool)
    if n == 0:
        return TokenStream(torch.zeros(0, c, dtype=grids.dtype), Provenance.empty())
    # Channels of all frames ride along the resize's channel axis.
    packed = grids.permute(1, 2, 0, 3).reshape(h, w, n * c)
    pooled = nx.bilinear_resize(packed, ph, pw).reshape(ph, pw, n, c).permute(2, 0, 1, 3)
    rows = torch.cat([pooled, row_token.expand(n, ph, 1, c)], dim=2)
    tokens = rows.reshape(n * ph * (pw + 1), c)

    per = ph * (pw + 1)
    r = np.repeat(np.arange(ph), pw + 1)
    col = np.tile(np.arange(pw + 1), ph)
    prov = Provenance(
        encoder=np.full(n * per, encoder, dtype=np.int8),
        frame=np.repeat(np.asarray(frame_indices, dtype=np.int64), per),
        row=np.tile(r, n),
        col=np.tile(col, n),
        is_row_token=np.tile(col == pw, n),
    )
    return TokenStream(tokens, prov)


class Projector(nn.Module):
    """fc1 -> GELU -> fc2, Xavier-initialized, applied token-wise."""

    def __init__(self, c_in: int, d_hidden: int, d_model: int, seed: int = 0, name: str = "projector"):
        super().__init__()
        self.fc1 = linear(c_in, d_hidden)
        self.fc2 = linear(d_hidden, d_model)
        init_params(self, seed, name + ".")

    @property
    def in_dim(self) -> int:
        return self.fc1.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


def project(stream: TokenStream, projector: Projector) -> TokenStream:
    if stream.dim != projector.in_dim:
        raise ShapeError(f"stream width {stream.dim} != projector input {projector.in_dim}")
    return TokenStream(projector(stream.tokens), stream.provenance)


def fuse(flat_stream: TokenStream, hier_stream: TokenStream) -> TokenStream:
    """Parameter-free concatenation along the sequence axis, flat tokens first."""
    if flat_stream.dim != hier_stream.dim:
        raise ShapeError(f"stream widths differ: {flat_stream.dim} vs {hier_stream.dim}")
    return TokenStream(
        torch.cat([flat_stream.tokens, hier_stream.tokens], dim=0),
        Provenance.concat([flat_stream.provenance, hier_stream.provenance]),
    )


# ---------------------------------------------------------------------------
# decoder


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=nx.DTYPE)[:, None]
    i = torch.arange(0, dim, 2, dtype=nx.DTYPE)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(n, dim, dtype=nx.DTYPE)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe


class DecoderStub(nn.Module):
    """Tiny causal decoder over a ``(T, d_model)`` embedding sequence."""

    def __init__(self, vocab_size: int = VOCAB_SIZE, d_model: int = 32, layers: int = 2, heads: int = 2, seed: int = 0, logit_scale: float = 1.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.logit_scale = logit_scale
        self.tok_emb = nn.Parameter(torch.zeros(vocab_size, d_model, dtype=nx.DTYPE))
        self.blocks = nn.ModuleList(Block(d_model, heads) for _ in range(layers))
        self.norm = LayerNorm(d_model)
        init_params(self, seed, "decoder.")

    def embed(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long).reshape(-1)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            bad = [int(i) for i in ids if not 0 <= int(i) < self.vocab_size]
            raise VocabError(f"token ids outside vocab of {self.vocab_size}: {bad[:5]}")
        return nx.embedding(self.tok_emb, ids)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits ``(T, vocab)`` for input embeddings ``(T, d_model)``."""
        x = x + sinusoidal_positions(x.shape[0], self.d_model)
        for blk in self.blocks:
            x = blk(x, causal=True)
        # output head tied to the token embedding
        return nx.matmul(self.norm(x), self.tok_emb.T) * self.logit_scale


def _sequence(decoder: DecoderStub, fused: TokenStream, text_ids) -> torch.Tensor:
    if fused.dim != decoder.d_model:
        raise ShapeError(f"visual stream width {fused.dim} != decoder width {decoder.d_model}")
    return torch.cat([fused.tokens, decoder.embed(text_ids)], dim=0)


def decode_loss(decoder: DecoderStub, fused: TokenStream, text_ids, n_prompt: int = 0) -> torch.Tensor:
    """Mean next-token cross-entropy over text targets.

    Text token ``j`` is a target when ``j >= n_prompt`` and some position
    precedes it; visual positions are context only.
    """
    text_ids = list(text_ids)
    if not text_ids:
        raise ValueError("text must be non-empty")
    v = len(fused)
    logits = decoder(_sequence(decoder, fused, text_ids))
    first = max(n_prompt, 0 if v > 0 else 1)
    if first >= len(text_ids):
        raise ValueError("no text position has a predecessor to predict it from")
    targets = torch.tensor(text_ids[first:], dtype=torch.long)
    pred = logits[v + first - 1 : v + len(text_ids) - 1]
    logp = pred - torch.logsumexp(pred, dim=-1, keepdim=True)
    return -logp.gather(1, targets[:, None]).mean()


@dataclass
class Generation:
    ids: list[int]
    truncated: bool


MAX_GENERATION = 4096


def argmax_lowest(row: torch.Tensor) -> int:
    """Index of the max logit; ties go to the lowest id."""
    return int(torch.nonzero(row == row.max())[0, 0])


@torch.no_grad()
def generate_greedy(
    decoder: DecoderStub,
    fused: TokenStream,
    prompt_ids,
    max_len: int = MAX_GENERATION,
    eos_id: int = EOS,
) -> Generation:
    """Greedy decoding (no sampling, temperature 0)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = list(prompt_ids)
    if not ids and len(fused) == 0:
        raise ValueError("nothing to condition on")
    out: list[int] = []
    for _ in range(max_len):
        logits = decoder(_sequence(decoder, fused, ids))
        nxt = argmax_lowest(logits[-1])
        out.append(nxt)
        if nxt == eos_id:
            return Generation(out, truncated=False)
        ids.append(nxt)
    return Generation(out, truncated=True)


# ---------------------------------------------------------------------------
# assembled model


@dataclass(frozen=True)
class ModelConfig:
    geom_flat: EncoderGeometry = TOY_FLAT_GEOMETRY
    geom_hier: EncoderGeometry = TOY_HIER_GEOMETRY
    flat_dim: int = 16
    flat_depth: int = 2
    flat_heads: int = 2
    d_model: int = 32
    d_hidden: int | None = None  # defaults to 4 * d_model
    vocab_size: int = VOCAB_SIZE
    layers: int = 2
    heads: int = 2
    seed: int = 0


class DualEncoderModel(nn.Module):
    """Both encoders, their row tokens and projectors, and the decoder.

    The hierarchical projector's input width depends on the tapped stage, so
    a model is built for one ``s_stage``.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), s_stage: int = 4):
        super().__init__()
        self.cfg = cfg
        self.s_stage = s_stage
        d_hidden = cfg.d_hidden or 4 * cfg.d_model
        self.flat_encoder = FlatEncoder(cfg.geom_flat, cfg.flat_dim, cfg.flat_depth, cfg.flat_heads, seed=cfg.seed)
        self.hier_encoder = HierEncoder(cfg.geom_hier, seed=cfg.seed)
        if not 1 <= s_stage <= self.hier_encoder.num_stages:
            raise GeometryError(f"s_stage {s_stage} outside 1..{self.hier_encoder.num_stages}")
        c_hier = self.hier_encoder.stage_channels[s_stage - 1]
        self.flat_row_token = nn.Parameter(torch.zeros(cfg.flat_dim, dtype=nx.DTYPE))
        self.hier_row_token = nn.Parameter(torch.zeros(c_hier, dtype=nx.DTYPE))
        with torch.no_grad():
            self.flat_row_token.copy_(nx.normal_init((cfg.flat_dim,), leaf_seed(cfg.seed, "flat_row_token"), 1.0))
            self.hier_row_token.copy_(nx.normal_init((c_hier,), leaf_seed(cfg.seed, "hier_row_token"), 1.0))
        self.flat_projector = Projector(cfg.flat_dim, d_hidden, cfg.d_model, cfg.seed, "flat_projector")
        self.hier_projector = Projector(c_hier, d_hidden, cfg.d_model, cfg.seed, "hier_projector")
        self.decoder = DecoderStub(cfg.vocab_size, cfg.d_model, cfg.layers, cfg.heads, cfg.seed)

    def check_budget_config(self, bcfg: TokenBudgetConfig) -> None:
        if bcfg.geom_flat != self.cfg.geom_flat or bcfg.geom_hier != self.cfg.geom_hier:
            raise GeometryError("budget geometries differ from the model's encoders")
        if bcfg.s_stage != self.s_stage:
            raise GeometryError(f"model taps stage {self.s_stage}, config asks for {bcfg.s_stage}")

    def flat_grids(self, frames: torch.Tensor) -> torch.Tensor:
        return self.flat_encoder(preprocess(frames, self.cfg.geom_flat.input_size))

    def flat_stream(self, frames: torch.Tensor, frame_indices, flat_pool: int) -> TokenStream:
        return self.flat_stream_from_grids(self.flat_grids(frames), frame_indices, flat_pool)

    def flat_stream_from_grids(self, grids: torch.Tensor, frame_indices, flat_pool: int) -> TokenStream:
        pooled = pool_frames(grids, flat_pool, self.flat_row_token, FLAT, list(frame_indices))
        return project(pooled, self.flat_projector)

    def hier_grids(self, frames: torch.Tensor) -> torch.Tensor:
        x = preprocess(frames, self.cfg.geom_hier.input_size)
        return self.hier_encoder(x, self.s_stage)

    def hier_stream(self, grids: torch.Tensor, frame_indices, s_pool: int) -> TokenStream:
        """Pool, add row tokens and project encoder grids ``(N, g, g, C)``."""
        if grids.shape[0] == 0:
            return TokenStream.empty(self.cfg.d_model)
        pooled = pool_frames(grids, s_pool, self.hier_row_token, HIER, list(frame_indices))
        return project(pooled, self.hier_projector)

    def visual_stream(self, video: torch.Tensor, bcfg: TokenBudgetConfig) -> tuple[TokenStream, FrameIndexPlan]:
        """Sample, encode, pool, project and fuse one ``(F, H, W, C)`` video."""
        self.check_budget_config(bcfg)
        plan = plan_frames(video.shape[0], bcfg.n_total, bcfg.n_hiera)
        flat = self.flat_stream(video[list(plan.flat_indices)], plan.flat_indices, bcfg.flat_pool)
        grids = self.hier_grids(video[list(plan.hier_indices)])
        hier = self.hier_stream(grids, plan.hier_indices, bcfg.s_pool)
        return fuse(flat, hier), plan
