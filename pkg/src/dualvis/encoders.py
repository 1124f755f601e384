"""Toy vision encoders.

``FlatEncoder`` is a patchify + pre-norm transformer (the semantic stream).
``HierEncoder`` is a strided-conv pyramid whose grid shrinks and channel width
grows stage by stage (the spatial stream). Both are seeded-random and tiny;
what matters is that their output grids obey the same arithmetic as
:mod:`dualvis.budget`.

Frames are channels-last ``(N, H, W, C)`` float64 tensors throughout.
"""

from __future__ import annotations

import hashlib

import torch
import torch.nn as nn

from . import numerics as nx
from .budget import EncoderGeometry, InvalidStageError, grid_side


class GeometryError(ValueError):
    pass


def leaf_seed(seed: int, path: str) -> int:
    digest = hashlib.sha256(f"{seed}:{path}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def init_params(module: nn.Module, seed: int, prefix: str = "") -> None:
    """Deterministic re-initialization of every leaf under ``module``.

    Matrices and conv kernels get Xavier-uniform values, biases zero, norm
    gains one. Leaves named ``*emb*``/``*token*`` get N(0, 1). Each leaf's
    stream is keyed on its dotted path, so adding a module elsewhere never
    shifts existing values.
    """
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if p.is_meta:
                continue
            path = prefix + name
            s = leaf_seed(seed, path)
            leafname = name.rsplit(".", 1)[-1]
            if "emb" in leafname or "token" in leafname:
                p.copy_(nx.normal_init(p.shape, s, 1.0))
            elif leafname == "bias":
                p.zero_()
            elif leafname == "gain":
                p.fill_(1.0)
            elif p.ndim >= 2:
                fan_out = p.shape[0]
                fan_in = p.numel() // fan_out
                w = nx.xavier_init((fan_in, fan_out), s)
                p.copy_(w.T.reshape(p.shape))
            else:
                p.copy_(nx.normal_init(p.shape, s, 0.02))


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=nx.DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=nx.DTYPE))

    def forward(self, x):
        return nx.layernorm(x, self.gain, self.bias)


def linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    return nn.Linear(d_in, d_out, bias=bias, dtype=nx.DTYPE)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = linear(dim, 3 * dim)
        self.out = linear(dim, dim)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        # x: (..., T, D)
        *lead, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)

        def heads(z):
            return z.reshape(*lead, t, self.heads, hd).transpose(-3, -2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = nx.matmul(q, k.transpose(-1, -2)) / hd**0.5
        if causal:
            mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        att = nx.softmax(scores, dim=-1)
        y = nx.matmul(att, v).transpose(-3, -2).reshape(*lead, t, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = linear(dim, mlp_ratio * dim)
        self.fc2 = linear(mlp_ratio * dim, dim)

    def forward(self, x, causal: bool = False):
        x = x + self.attn(self.norm1(x), causal=causal)
        return x + self.fc2(nx.gelu(self.fc1(self.norm2(x))))


def preprocess(frames: torch.Tensor, size: int) -> torch.Tensor:
    """Rescale frames to ``size x size`` and standardize each channel per frame."""
    if frames.ndim != 4:
        raise GeometryError(f"frames must be (N, H, W, C), got {tuple(frames.shape)}")
    n, h, w, c = frames.shape
    if n == 0:
        return frames.new_zeros((0, size, size, c))
    if (h, w) != (size, size):
        packed = frames.permute(1, 2, 0, 3).reshape(h, w, n * c)
        frames = nx.bilinear_resize(packed, size, size).reshape(size, size, n, c).permute(2, 0, 1, 3)
    mu = frames.mean(dim=(1, 2), keepdim=True)
    sd = frames.std(dim=(1, 2), keepdim=True)
    return (frames - mu) / (sd + 1e-6)


class FlatEncoder(nn.Module):
    def __init__(
        self,
        geom: EncoderGeometry,
        embed_dim: int = 16,
        depth: int = 2,
        heads: int = 2,
        in_chans: int = 3,
        seed: int = 0,
    ):
        super().__init__()
        if geom.num_stages != 1:
            raise GeometryError("flat encoder geometry must have a single stage")
        self.geom = geom
        self.patch_size = geom.patch_or_stem_stride
        self.embed_dim = embed_dim
        self.grid = grid_side(geom, 1)
        self.patch = linear(in_chans * self.patch_size**2, embed_dim)
        self.pos_emb = nn.Parameter(torch.zeros(self.grid * self.grid, embed_dim, dtype=nx.DTYPE))
        self.blocks = nn.ModuleList(Block(embed_dim, heads) for _ in range(depth))
        self.norm = LayerNorm(embed_dim)
        init_params(self, seed, "flat_encoder.")

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``(N, H, W, C)`` -> ``(N, g, g, embed_dim)``."""
        n, h, w, c = frames.shape
        size = self.geom.input_size
        if (h, w) != (size, size):
            raise GeometryError(f"flat encoder expects {size}x{size} frames, got {h}x{w}")
        g, p = self.grid, self.patch_size
        x = frames[:, : g * p, : g * p]
        x = x.reshape(n, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5).reshape(n, g * g, p * p * c)
        x = self.patch(x) + self.pos_emb
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).reshape(n, g, g, self.embed_dim)


class HierEncoder(nn.Module):
    """Stem conv followed by one strided conv + GELU per stage.

    A stride-1 stage uses a 3x3 same-padded conv; a stride-s stage uses an
    s x s kernel with stride s, so each grid is ``floor(prev / s)``.
    """

    def __init__(
        self,
        geom: EncoderGeometry,
        stage_channels: tuple[int, ...] | None = None,
        in_chans: int = 3,
        seed: int = 0,
    ):
        super().__init__()
        chans = tuple(stage_channels or geom.channels_per_stage)
        if len(chans) != geom.num_stages:
            raise GeometryError("need one channel width per stage")
        if any(b <= a for a, b in zip(chans, chans[1:])):
            raise GeometryError(f"stage channels must strictly increase, got {chans}")
        self.geom = geom
        self.stage_channels = chans
        st = geom.patch_or_stem_stride
        self.stem = nn.Conv2d(in_chans, chans[0], st, stride=st, dtype=nx.DTYPE)
        stages = []
        prev = chans[0]
        for s, c in zip(geom.stage_strides, chans):
            if s == 1:
                stages.append(nn.Conv2d(prev, c, 3, stride=1, padding=1, dtype=nx.DTYPE))
            else:
                stages.append(nn.Conv2d(prev, c, s, stride=s, dtype=nx.DTYPE))
            prev = c
        self.stages = nn.ModuleList(stages)
        init_params(self, seed, "hier_encoder.")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def forward(self, frames: torch.Tensor, s_stage: int) -> torch.Tensor:
        """``(N, H, W, C)`` -> ``(N, g_s, g_s, C_s)`` tapped after stage ``s_stage``."""
        if not 1 <= s_stage <= self.num_stages:
            raise InvalidStageError(f"s_stage {s_stage} outside 1..{self.num_stages}")
        size = self.geom.input_size
        if tuple(frames.shape[1:3]) != (size, size):
            raise GeometryError(
                f"hierarchical encoder expects {size}x{size} frames, got {tuple(frames.shape[1:3])}"
            )
        x = frames.permute(0, 3, 1, 2)
        x = self.stem(x)
        for conv in self.stages[:s_stage]:
            x = nx.gelu(conv(x))
        return x.permute(0, 2, 3, 1)


def dry_run_shapes(
    geom_flat: EncoderGeometry,
    geom_hier: EncoderGeometry,
    n_total: int,
    n_hiera: int,
    s_stage: int,
    flat_dim: int | None = None,
    heads: int = 1,
) -> dict[str, tuple[int, ...]]:
    """Encoder output shapes at any scale, computed on the meta device.

    No weights or activations are materialized, so full-size geometries
    (384px / 1024px inputs, 64 frames) cost nothing.
    """
    flat_dim = flat_dim or (geom_flat.channels_per_stage[-1] if geom_flat.channels_per_stage else 16)
    with torch.device("meta"):
        fe = FlatEncoder(geom_flat, embed_dim=flat_dim, depth=1, heads=heads)
        he = HierEncoder(geom_hier)
        sf, sh = geom_flat.input_size, geom_hier.input_size
        out_flat = fe(torch.empty(n_total, sf, sf, 3, dtype=nx.DTYPE))
        out_hier = he(torch.empty(n_hiera, sh, sh, 3, dtype=nx.DTYPE), s_stage)
    return {"flat": tuple(out_flat.shape), "hier": tuple(out_hier.shape)}
