"""Token-budget arithmetic for the dual-encoder visual stream.

Everything here is integer arithmetic over encoder geometries and the
``(n_hiera, s_stage, s_pool)`` control triplet. No tensors are touched, so
the planner can describe full-size configurations instantly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import yaml


class InvalidStageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderGeometry:
    """Spatial resolution ladder of one encoder.

    A flat (ViT-style) encoder is a single stage with factor 1. A hierarchical
    encoder lists the extra downsample factor applied on entry to each stage.
    """

    input_size: int
    patch_or_stem_stride: int
    stage_strides: tuple[int, ...] = (1,)
    channels_per_stage: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        if self.input_size < 1 or self.patch_or_stem_stride < 1:
            raise ConfigError("input_size and patch_or_stem_stride must be >= 1")
        if self.input_size // self.patch_or_stem_stride < 1:
            raise ConfigError(
                f"stride {self.patch_or_stem_stride} larger than input {self.input_size}"
            )
        if not self.stage_strides:
            raise ConfigError("stage_strides must be non-empty")
        if any(s < 1 for s in self.stage_strides):
            raise ConfigError(f"stage strides must be >= 1, got {self.stage_strides}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_strides)


# SigLIP-so400m-patch14-384 analog.
FULL_FLAT_GEOMETRY = EncoderGeometry(384, 14, (1,), (1152,))
# Hiera-B+ analog; resolution derived from the 8,704-token total (see README).
FULL_HIER_GEOMETRY = EncoderGeometry(1024, 4, (1, 2, 2, 2), (112, 224, 448, 896))

# Desk-scale pair; like the full-size pair, the hierarchical side sees the
# frames at a higher resolution than the flat side.
TOY_FLAT_GEOMETRY = EncoderGeometry(32, 4, (1,), (16,))
TOY_HIER_GEOMETRY = EncoderGeometry(64, 8, (1, 2, 2, 2), (8, 16, 32, 64))


@dataclass(frozen=True)
class TokenBudgetConfig:
    n_total: int = 64
    n_hiera: int = 32
    s_stage: int = 4
    s_pool: int = 2
    geom_flat: EncoderGeometry = FULL_FLAT_GEOMETRY
    geom_hier: EncoderGeometry = FULL_HIER_GEOMETRY
    # Pool stride of the flat stream; not part of the control triplet.
    flat_pool: int = 2

    def validate(self) -> None:
        # n_hiera == 0 is the flat-only baseline; the planner never proposes it.
        if self.n_total < 1 or not 0 <= self.n_hiera <= self.n_total:
            raise ConfigError(f"need 0 <= n_hiera <= n_total, got {self.n_hiera}, {self.n_total}")
        if not 1 <= self.s_stage <= self.geom_hier.num_stages:
            raise InvalidStageError(
                f"s_stage {self.s_stage} outside 1..{self.geom_hier.num_stages}"
            )
        if self.s_pool < 1 or self.flat_pool < 1:
            raise ConfigError("pool strides must be >= 1")

    @property
    def triplet(self) -> tuple[int, int, int]:
        return (self.n_hiera, self.s_stage, self.s_pool)


@dataclass(frozen=True)
class TokenBudgetReport:
    grid_flat: int
    grid_hier: int
    pooled_flat: int
    pooled_hier: int
    per_frame_flat: int
    per_frame_hier: int
    t_siglip: int
    t_hiera: int
    ratio: float
    precision: int = field(default=2, compare=False)

    @property
    def total(self) -> int:
        return self.t_siglip + self.t_hiera

    @property
    def ratio_display(self) -> str:
        return f"{self.ratio:.{self.precision}f}"


def grid_side(geom: EncoderGeometry, stage: int) -> int:
    """Side length of the feature grid emitted by ``stage`` (1-based)."""
    if not 1 <= stage <= geom.num_stages:
        raise InvalidStageError(f"stage {stage} outside 1..{geom.num_stages}")
    g = geom.input_size // geom.patch_or_stem_stride
    for s in geom.stage_strides[:stage]:
        g //= s
    if g < 1:
        raise InvalidStageError(f"stage {stage} collapses the grid to zero")
    return g


def pooled_side(grid: int, s_pool: int) -> int:
    if grid < 1 or s_pool < 1:
        raise ValueError(f"grid and s_pool must be >= 1, got {grid}, {s_pool}")
    return -(-grid // s_pool)


def tokens_per_frame(pooled_h: int, pooled_w: int) -> int:
    """Content tokens plus one row-end token per row."""
    if pooled_h < 1 or pooled_w < 1:
        raise ValueError("pooled grid must be at least 1x1")
    return pooled_h * (pooled_w + 1)


def compute_budget(cfg: TokenBudgetConfig, precision: int = 2) -> TokenBudgetReport:
    cfg.validate()
    grid_flat = grid_side(cfg.geom_flat, cfg.geom_flat.num_stages)
    grid_hier = grid_side(cfg.geom_hier, cfg.s_stage)
    pooled_flat = pooled_side(grid_flat, cfg.flat_pool)
    pooled_hier = pooled_side(grid_hier, cfg.s_pool)
    per_flat = tokens_per_frame(pooled_flat, pooled_flat)
    per_hier = tokens_per_frame(pooled_hier, pooled_hier)
    t_siglip = cfg.n_total * per_flat
    t_hiera = cfg.n_hiera * per_hier
    return TokenBudgetReport(
        grid_flat=grid_flat,
        grid_hier=grid_hier,
        pooled_flat=pooled_flat,
        pooled_hier=pooled_hier,
        per_frame_flat=per_flat,
        per_frame_hier=per_hier,
        t_siglip=t_siglip,
        t_hiera=t_hiera,
        ratio=t_siglip / t_hiera if t_hiera else math.inf,
        precision=precision,
    )


def enumerate_configs(
    budget_max_tokens: int,
    geom_flat: EncoderGeometry = FULL_FLAT_GEOMETRY,
    geom_hier: EncoderGeometry = FULL_HIER_GEOMETRY,
    n_total: int = 64,
    flat_pool: int = 2,
) -> list[tuple[TokenBudgetConfig, TokenBudgetReport]]:
    """All triplets whose fused stream fits in ``budget_max_tokens``.

    Ordered by descending hierarchical token count, then ascending total,
    then ascending triplet.
    """
    side = pooled_side(grid_side(geom_flat, geom_flat.num_stages), flat_pool)
    per_flat = tokens_per_frame(side, side)
    if budget_max_tokens < per_flat:
        raise ValueError(
            f"budget {budget_max_tokens} smaller than one flat frame ({per_flat} tokens)"
        )
    base = TokenBudgetConfig(
        n_total=n_total, geom_flat=geom_flat, geom_hier=geom_hier, flat_pool=flat_pool
    )
    found = []
    for s_stage in range(1, geom_hier.num_stages + 1):
        g = grid_side(geom_hier, s_stage)
        for s_pool in range(1, g + 1):
            for n_hiera in range(1, n_total + 1):
                cfg = replace(base, n_hiera=n_hiera, s_stage=s_stage, s_pool=s_pool)
                rep = compute_budget(cfg)
                if rep.total <= budget_max_tokens:
                    found.append((cfg, rep))
    found.sort(key=lambda cr: (-cr[1].t_hiera, cr[1].total, cr[0].triplet))
    return found


# ---------------------------------------------------------------------------
# config documents and report rendering


def _geometry_from_mapping(m: dict, default: EncoderGeometry) -> EncoderGeometry:
    known = {"input_size", "patch_or_stem_stride", "stage_strides", "channels_per_stage"}
    extra = set(m) - known
    if extra:
        raise ConfigError(f"unknown geometry keys: {sorted(extra)}")
    merged = {**asdict(default), **m}
    return EncoderGeometry(**merged)


def config_from_mapping(m: dict | None, base: TokenBudgetConfig | None = None) -> TokenBudgetConfig:
    base = base or TokenBudgetConfig()
    if not m:
        return base
    if not isinstance(m, dict):
        raise ConfigError("config document must be a mapping")
    updates = {}
    for key, value in m.items():
        if key in ("geom_flat", "geom_hier"):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a mapping")
            updates[key] = _geometry_from_mapping(value, getattr(base, key))
        elif key in ("n_total", "n_hiera", "s_stage", "s_pool", "flat_pool"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            updates[key] = value
        else:
            raise ConfigError(f"unknown config key: {key}")
    cfg = replace(base, **updates)
    cfg.validate()
    return cfg


def load_config(path: str | Path, base: TokenBudgetConfig | None = None) -> TokenBudgetConfig:
    """Read a ``key: value`` document. Unlisted fields keep ``base`` values.

    Budget keys may sit at the top level or under a ``budget:`` section, so
    one document can also carry sections for other subcommands.
    """
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if isinstance(doc, dict) and "budget" in doc:
        doc = doc["budget"]
    elif isinstance(doc, dict):
        doc = {k: v for k, v in doc.items() if k not in _OTHER_SECTIONS}
    return config_from_mapping(doc, base)


_OTHER_SECTIONS = {"model", "train", "eval", "judge"}

REPORT_FIELDS = (
    "n_total", "n_hiera", "s_stage", "s_pool",
    "grid_flat", "grid_hier", "pooled_flat", "pooled_hier",
    "per_frame_flat", "per_frame_hier", "t_siglip", "t_hiera", "total", "ratio",
)


def report_row(cfg: TokenBudgetConfig, rep: TokenBudgetReport) -> dict:
    row = {
        "n_total": cfg.n_total, "n_hiera": cfg.n_hiera,
        "s_stage": cfg.s_stage, "s_pool": cfg.s_pool,
    }
    row.update({k: getattr(rep, k) for k in REPORT_FIELDS if k not in row})
    return row


def render_table(cfg: TokenBudgetConfig, rep: TokenBudgetReport) -> str:
    rows = [
        ("triplet (n_hiera, s_stage, s_pool)", str(cfg.triplet)),
        ("n_total", str(cfg.n_total)),
        ("flat grid -> pooled", f"{rep.grid_flat} -> {rep.pooled_flat}"),
        ("hier grid -> pooled", f"{rep.grid_hier} -> {rep.pooled_hier}"),
        ("tokens/frame flat", str(rep.per_frame_flat)),
        ("tokens/frame hier", str(rep.per_frame_hier)),
        ("T_siglip", f"{rep.t_siglip:,}"),
        ("T_hiera", f"{rep.t_hiera:,}"),
        ("total", f"{rep.total:,}"),
        ("ratio", rep.ratio_display),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def to_csv(pairs: Iterable[tuple[TokenBudgetConfig, TokenBudgetReport]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for cfg, rep in pairs:
        row = report_row(cfg, rep)
        row["ratio"] = repr(rep.ratio)
        w.writerow(row)
    return buf.getvalue()

