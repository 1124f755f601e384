"""Deterministic frame selection for the two encoder streams."""

from __future__ import annotations

from dataclasses import dataclass


class InsufficientFramesError(ValueError):
    pass


class EmptySubsetError(ValueError):
    pass


@dataclass(frozen=True)
class FrameIndexPlan:
    source_frame_count: int
    flat_indices: tuple[int, ...]
    hier_indices: tuple[int, ...]


def sample_uniform(source_frame_count: int, n: int) -> list[int]:
    """Center-aligned uniform sampling: index i -> floor((i + 0.5) * F / n).

    Integer arithmetic keeps the result exact for any frame count.
    """
    if source_frame_count < 1:
        raise InsufficientFramesError("video has no frames")
    if n < 1:
        raise EmptySubsetError("must sample at least one frame")
    if n > source_frame_count:
        raise InsufficientFramesError(
            f"cannot sample {n} distinct frames from {source_frame_count}"
        )
    return [((2 * i + 1) * source_frame_count) // (2 * n) for i in range(n)]


def subsample(flat_indices: list[int], n_hiera: int) -> list[int]:
    """Pick ``n_hiera`` of the already-sampled frames, uniformly by position."""
    if n_hiera == 0:
        raise EmptySubsetError("hierarchical subset must be non-empty")
    positions = sample_uniform(len(flat_indices), n_hiera)
    return [flat_indices[p] for p in positions]


def plan_frames(source_frame_count: int, n_total: int, n_hiera: int) -> FrameIndexPlan:
    """Flat-stream frames, and the hierarchical subset drawn from them.

    ``n_hiera == 0`` yields a flat-only plan.
    """
    flat = sample_uniform(source_frame_count, n_total)
    hier = subsample(flat, n_hiera) if n_hiera else []
    return FrameIndexPlan(source_frame_count, tuple(flat), tuple(hier))
