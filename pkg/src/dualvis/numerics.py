"""Numeric kernel shared by the pipeline.

Thin float64 wrappers over torch for the standard ops, plus the pieces whose
exact convention matters here: the half-pixel bilinear resize, Xavier init,
a named parameter store with trainable flags, a central finite-difference
gradient checker, and a flat binary tensor format for checkpoints.

Binary tensor record (all little-endian)::

    b"DVT1" | ndim: u32 | shape: ndim x u64 | data: prod(shape) x f64, row-major

Checkpoint file::

    b"DVCK" | count: u32 | count x (name_len: u32 | name: utf-8 | tensor record)

Entries are written in lexicographic name order.
"""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path
from typing import BinaryIO, Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

DTYPE = torch.float64


class UnsupportedShapeError(ValueError):
    pass


class FrozenLeafError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


class SerializationError(ValueError):
    pass


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


# ---------------------------------------------------------------------------
# initialization


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape, seed: int) -> torch.Tensor:
    """Uniform Xavier/Glorot init for a ``(fan_in, fan_out)`` matrix."""
    shape = tuple(shape)
    if len(shape) != 2:
        raise UnsupportedShapeError(f"xavier_init needs a 2-D shape, got {shape}")
    a = xavier_bound(*shape)
    u = torch.rand(shape, generator=generator(seed), dtype=DTYPE)
    return (2.0 * u - 1.0) * a


def normal_init(shape, seed: int, std: float) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=generator(seed), dtype=DTYPE) * std


# ---------------------------------------------------------------------------
# standard kernels


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a @ b


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=dim, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def layernorm(x, weight=None, bias=None, eps: float = 1e-12):
    """Normalize over the last axis. ``eps`` is tiny since everything is float64."""
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def embedding(table: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"id outside table of size {table.shape[0]}")
    return table[ids]


def concat(parts: Iterable[torch.Tensor], dim: int = 0) -> torch.Tensor:
    return torch.cat(list(parts), dim=dim)


# ---------------------------------------------------------------------------
# bilinear resize


def _axis_taps(n_in: int, n_out: int):
    d = torch.arange(n_out, dtype=DTYPE)
    s = (d + 0.5) * (n_in / n_out) - 0.5
    s = s.clamp(0.0, n_in - 1)
    i0 = torch.floor(s).long()
    i1 = torch.clamp(i0 + 1, max=n_in - 1)
    w = s - i0.to(DTYPE)
    return i0, i1, w


def bilinear_resize(src: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize an ``(H, W, C)`` grid with half-pixel-center sampling.

    Each axis is interpolated as ``a + w * (b - a)`` so equal neighbours are
    reproduced exactly and same-size resizing is a bitwise identity.
    """
    if src.ndim != 3:
        raise UnsupportedShapeError(f"expected (H, W, C), got {tuple(src.shape)}")
    h, w, _ = src.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError("resize extents must be >= 1")
    y0, y1, wy = _axis_taps(h, out_h)
    a, b = src[y0], src[y1]
    rows = a + wy[:, None, None] * (b - a)
    x0, x1, wx = _axis_taps(w, out_w)
    a, b = rows[:, x0], rows[:, x1]
    return a + wx[None, :, None] * (b - a)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Dotted-path view of a module's leaves with per-leaf trainable flags.

    The flag is ``requires_grad`` on the underlying parameter, so frozen
    leaves are also cut out of the autograd graph.
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self._leaves = dict(sorted(module.named_parameters()))

    def paths(self) -> list[str]:
        return list(self._leaves)

    def __getitem__(self, path: str) -> nn.Parameter:
        try:
            return self._leaves[path]
        except KeyError:
            raise KeyError(f"no parameter leaf named {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._leaves

    def __iter__(self):
        return iter(self._leaves.items())

    def __len__(self) -> int:
        return len(self._leaves)

    def is_trainable(self, path: str) -> bool:
        return self[path].requires_grad

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for path, p in self._leaves.items():
            p.requires_grad_(bool(predicate(path)))

    def trainable_paths(self) -> list[str]:
        return [k for k, p in self._leaves.items() if p.requires_grad]

    def under(self, prefix: str) -> list[str]:
        return [k for k in self._leaves if path_matches(k, prefix)]

    def num_params(self, paths: Iterable[str] | None = None) -> int:
        paths = self.paths() if paths is None else paths
        return sum(self[k].numel() for k in paths)

    def digest(self, paths: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for k in (self.paths() if paths is None else sorted(paths)):
            h.update(k.encode())
            h.update(tensor_bytes(self[k].detach()))
        return h.hexdigest()

    def leaf_digests(self) -> dict[str, str]:
        return {k: hashlib.sha256(tensor_bytes(p.detach())).hexdigest() for k, p in self}

    def state(self) -> dict[str, torch.Tensor]:
        return {k: p.detach().clone() for k, p in self}

    def load_state(self, state: dict[str, torch.Tensor]) -> None:
        missing = set(self._leaves) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on leaves: {sorted(missing)}")
        with torch.no_grad():
            for k, p in self._leaves.items():
                p.copy_(state[k])


def path_matches(path: str, prefix: str) -> bool:
    return path == prefix or path.startswith(prefix + ".")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], torch.Tensor],
    store: ParamStore,
    leaf: str,
    epsilon: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` recomputes a scalar loss from the current parameter values. Only
    trainable leaves can be checked; ``indices`` restricts the probe to a
    subset of flat element positions.
    """
    p = store[leaf]
    if not p.requires_grad:
        raise FrozenLeafError(f"{leaf} is frozen; its gradient is undefined")
    loss = f()
    if not torch.isfinite(loss):
        raise EvaluationError(f"non-finite loss {loss.item()}")
    (g_ad,) = torch.autograd.grad(loss, p, allow_unused=True)
    if g_ad is None:
        g_ad = torch.zeros_like(p)
    g_ad = g_ad.detach().reshape(-1)

    flat = p.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + epsilon
            up = f().item()
            flat[i] = orig - epsilon
            down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise EvaluationError(f"non-finite loss while probing element {i}")
            g_fd = (up - down) / (2.0 * epsilon)
            ad = g_ad[i].item()
            err = abs(g_fd - ad) / (abs(g_fd) + abs(ad) + 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization

_TENSOR_MAGIC = b"DVT1"
_CKPT_MAGIC = b"DVCK"


def tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8").tobytes()


def write_tensor(fh: BinaryIO, t: torch.Tensor) -> None:
    shape = tuple(t.shape)
    fh.write(_TENSOR_MAGIC)
    fh.write(struct.pack("<I", len(shape)))
    fh.write(struct.pack(f"<{len(shape)}Q", *shape))
    fh.write(tensor_bytes(t))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise SerializationError("truncated tensor data")
    return b


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    if _read_exact(fh, 4) != _TENSOR_MAGIC:
        raise SerializationError("bad tensor magic")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = math.prod(shape)
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return torch.from_numpy(data.astype(np.float64).reshape(shape))


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, tensors[name])


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    out = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _CKPT_MAGIC:
            raise SerializationError(f"{path} is not a checkpoint")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_tensor(fh)
        if fh.read(1):
            raise SerializationError("trailing bytes after last entry")
    return out
