"""Staged training at toy scale.

The schedule mirrors the four-stage recipe: stage 1 updates only the
hierarchical projector at lr 1e-3; later stages update everything except the
hierarchical encoder at lr 1e-5. Synthetic scene videos stand in for the real
corpora.
"""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from . import numerics as nx
from .budget import TOY_FLAT_GEOMETRY, TOY_HIER_GEOMETRY, TokenBudgetConfig
from .numerics import ParamStore, path_matches
from .pipeline import BOS, EOS, SEP, DualEncoderModel, ModelConfig, TokenStream, decode_loss, encode_text, fuse
from .sampler import plan_frames

log = logging.getLogger(__name__)

MODEL_PREFIXES = (
    "decoder",
    "flat_encoder",
    "flat_projector",
    "flat_row_token",
    "hier_encoder",
    "hier_projector",
    "hier_row_token",
)
HIER_ENCODER = "hier_encoder"
HIER_PROJECTOR = "hier_projector"

TASK_KINDS = ("alignment", "captioning", "spatial_qa", "thinking")

# Token budget used for toy training: two flat frames, one hierarchical frame
# tapped after stage 1. Keeps a step around 30 ms on one CPU thread.
TRAINING_BUDGET = TokenBudgetConfig(
    n_total=2,
    n_hiera=1,
    s_stage=1,
    s_pool=2,
    geom_flat=TOY_FLAT_GEOMETRY,
    geom_hier=TOY_HIER_GEOMETRY,
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class StageSpec:
    name: str
    trainable: frozenset[str]
    frozen: frozenset[str]
    learning_rate: float
    epochs: int
    task: str
    optional: bool = False

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise ValueError(f"{self.name}: prefixes both trainable and frozen: {self.trainable & self.frozen}")
        if HIER_ENCODER not in self.frozen:
            raise ValueError(f"{self.name}: the hierarchical encoder must stay frozen")

    def is_trainable(self, path: str) -> bool:
        if any(path_matches(path, p) for p in self.frozen):
            return False
        return any(path_matches(path, p) for p in self.trainable)


def build_stage_schedule() -> list[StageSpec]:
    everything_but_hier = frozenset(p for p in MODEL_PREFIXES if p != HIER_ENCODER)
    stage1_trainable = frozenset({HIER_PROJECTOR})
    return [
        StageSpec(
            "stage-1",
            stage1_trainable,
            frozenset(MODEL_PREFIXES) - stage1_trainable,
            1e-3,
            1,
            "alignment",
        ),
        StageSpec("stage-2", everything_but_hier, frozenset({HIER_ENCODER}), 1e-5, 1, "captioning"),
        StageSpec("stage-3", everything_but_hier, frozenset({HIER_ENCODER}), 1e-5, 1, "spatial_qa"),
        StageSpec("thinking", everything_but_hier, frozenset({HIER_ENCODER}), 1e-5, 1, "thinking", optional=True),
    ]


def stage_by_name(name: str) -> StageSpec:
    for spec in build_stage_schedule():
        if spec.name == name:
            return spec
    raise KeyError(f"unknown stage {name!r}")


# ---------------------------------------------------------------------------
# synthetic data

COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.2),
    "blue": (0.15, 0.2, 1.0),
    "yellow": (0.95, 0.9, 0.1),
}
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five")


@dataclass
class Scene:
    color: str
    count: int
    centers: list[tuple[float, float]]
    radius: float


@dataclass
class Example:
    video: torch.Tensor  # (F, H, W, 3)
    prompt_ids: list[int]
    target_ids: list[int]
    answer: str
    scene: Scene = field(repr=False)
    # every valid wording of the target; ``target_ids`` is the first
    alternatives: tuple[list[int], ...] = ()

    def __post_init__(self):
        if not self.alternatives:
            self.alternatives = (self.target_ids,)

    @property
    def text_ids(self) -> list[int]:
        return self.prompt_ids + self.target_ids

    def draw_text_ids(self, rng: random.Random) -> list[int]:
        """Prompt plus one wording picked uniformly, fresh on every call."""
        return self.prompt_ids + self.alternatives[rng.randrange(len(self.alternatives))]


def render_scene(scene: Scene, frames: int, size: int, drift: float) -> torch.Tensor:
    """Dark background with ``count`` coloured discs drifting left to right."""
    yy, xx = torch.meshgrid(
        torch.arange(size, dtype=nx.DTYPE), torch.arange(size, dtype=nx.DTYPE), indexing="ij"
    )
    color = torch.tensor(COLORS[scene.color], dtype=nx.DTYPE)
    video = torch.full((frames, size, size, 3), 0.05, dtype=nx.DTYPE)
    for f in range(frames):
        shift = drift * f
        for cy, cx in scene.centers:
            inside = (yy - cy) ** 2 + (xx - cx - shift) ** 2 <= scene.radius**2
            video[f][inside] = color
    return video


def _random_scene(rng: random.Random, size: int, max_count: int = 5) -> Scene:
    count = rng.randint(1, max_count)
    radius = size / 10
    centers = []
    # rejection-sample non-overlapping discs
    while len(centers) < count:
        c = (rng.uniform(radius, size - radius), rng.uniform(radius, size * 0.7))
        if all((c[0] - a) ** 2 + (c[1] - b) ** 2 > (2.2 * radius) ** 2 for a, b in centers):
            centers.append(c)
    return Scene(rng.choice(sorted(COLORS)), count, centers, radius)


CAPTION_VERBS = ("drift", "move", "slide")
CAPTION_TAILS = ("right", "to the right")


def _texts(kind: str, scene: Scene) -> tuple[str, list[str], str]:
    """(prompt, valid target wordings, gold answer).

    Alignment targets are short fixed labels. Captions admit several wordings
    per video, as real caption corpora do, so captioning keeps a loss floor
    that memorization cannot go below.
    """
    n, c = scene.count, scene.color
    plural = "s" if n != 1 else ""
    if kind == "alignment":
        return "caption:", [f"{c} dots"], c
    if kind == "captioning":
        return (
            "describe:",
            [f"{NUMBER_WORDS[n]} {c} dot{plural} {v} {t}" for v in CAPTION_VERBS for t in CAPTION_TAILS],
            c,
        )
    if kind == "spatial_qa":
        return "how many dots?", [str(n)], str(n)
    if kind == "thinking":
        return "how many dots?", [f"i see {c} dots; count {n}. answer: {n}"], str(n)
    raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")


def make_example(kind: str, scene: Scene, frames: int = 8, size: int = 64) -> Example:
    video = render_scene(scene, frames, size, drift=size / (4 * frames))
    prompt, targets, answer = _texts(kind, scene)
    alts = tuple(encode_text(t) + [EOS] for t in targets)
    return Example(
        video=video,
        prompt_ids=[BOS] + encode_text(prompt) + [SEP],
        target_ids=alts[0],
        answer=answer,
        scene=scene,
        alternatives=alts,
    )


def synthetic_task(
    kind: str,
    seed: int,
    n_examples: int = 64,
    frames: int = 8,
    size: int = 64,
) -> list[Example]:
    """Deterministic scene-video dataset for one task kind.

    ``spatial_qa`` answers are the number of planted discs, so predictions can
    be scored by exact match.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    rng = random.Random(f"{kind}:{seed}")
    return [make_example(kind, _random_scene(rng, size), frames, size) for _ in range(n_examples)]


# ---------------------------------------------------------------------------
# loop


@dataclass
class LossLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    stage: str = ""

    def append(self, step: int, loss: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("steps must be strictly increasing")
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        self.steps.append(step)
        self.losses.append(loss)

    def window(self, n: int | None = None) -> int:
        return n or max(1, len(self.losses) // 10)

    def initial_mean(self, n: int | None = None) -> float:
        w = self.window(n)
        return sum(self.losses[:w]) / w

    def final_mean(self, n: int | None = None) -> float:
        w = self.window(n)
        return sum(self.losses[-w:]) / w

    def summary(self, n: int | None = None) -> dict:
        return {
            "stage": self.stage,
            "steps": len(self.steps),
            "initial_window_mean": self.initial_mean(n),
            "final_window_mean": self.final_mean(n),
        }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for s, l in zip(self.steps, self.losses):
                w.writerow([s, repr(l)])


def apply_stage_mask(store: ParamStore, spec: StageSpec) -> list[str]:
    store.set_trainable(spec.is_trainable)
    paths = store.trainable_paths()
    if not paths:
        raise ValueError(f"{spec.name} leaves no trainable parameters")
    return paths


class FrozenFeatures:
    """Per-example memo of stream pieces that depend only on frozen leaves.

    The hierarchical encoder is frozen in every stage, so its grids are always
    memoized; flat-encoder grids are memoized when that encoder is frozen, and
    the whole projected flat stream when nothing on the flat path trains.
    Memoized values come from the same code as the uncached path.
    """

    FLAT_PATH = ("flat_encoder", "flat_row_token", "flat_projector")

    def __init__(self, model: DualEncoderModel, bcfg: TokenBudgetConfig):
        model.check_budget_config(bcfg)
        store = ParamStore(model)

        def frozen(prefix):
            return not any(store.is_trainable(p) for p in store.under(prefix))

        if not frozen(HIER_ENCODER):
            raise ValueError("hierarchical encoder must be frozen to memoize its features")
        self.flat_encoder_frozen = frozen("flat_encoder")
        self.flat_frozen = all(frozen(p) for p in self.FLAT_PATH)
        self.model = model
        self.bcfg = bcfg
        self._memo: dict[int, dict] = {}

    def _entry(self, key: int, video: torch.Tensor) -> dict:
        if key in self._memo:
            return self._memo[key]
        m, b = self.model, self.bcfg
        plan = plan_frames(video.shape[0], b.n_total, b.n_hiera)
        entry = {"plan": plan, "flat_frames": video[list(plan.flat_indices)]}
        with torch.no_grad():
            entry["hier_grids"] = m.hier_grids(video[list(plan.hier_indices)])
            if self.flat_frozen:
                entry["flat"] = m.flat_stream(entry["flat_frames"], plan.flat_indices, b.flat_pool)
            elif self.flat_encoder_frozen:
                entry["flat_grids"] = m.flat_grids(entry["flat_frames"])
        self._memo[key] = entry
        return entry

    def fused(self, key: int, video: torch.Tensor) -> TokenStream:
        m, b = self.model, self.bcfg
        e = self._entry(key, video)
        plan = e["plan"]
        if "flat" in e:
            flat = e["flat"]
        elif "flat_grids" in e:
            flat = m.flat_stream_from_grids(e["flat_grids"], plan.flat_indices, b.flat_pool)
        else:
            flat = m.flat_stream(e["flat_frames"], plan.flat_indices, b.flat_pool)
        return fuse(flat, m.hier_stream(e["hier_grids"], plan.hier_indices, b.s_pool))


def example_loss(model: DualEncoderModel, ex: Example, bcfg: TokenBudgetConfig) -> torch.Tensor:
    fused, _ = model.visual_stream(ex.video, bcfg)
    return decode_loss(model.decoder, fused, ex.text_ids, n_prompt=len(ex.prompt_ids))


def _train_loop(
    spec: StageSpec,
    model: DualEncoderModel,
    steps: int,
    bcfgs: list[TokenBudgetConfig],
    dataset: list[Example],
    seed: int,
    batch_size: int,
    learning_rate: float | None,
    log_every: int,
) -> LossLog:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not dataset:
        raise ValueError("empty dataset")
    store = ParamStore(model)
    paths = apply_stage_mask(store, spec)
    lr = spec.learning_rate if learning_rate is None else learning_rate
    opt = torch.optim.AdamW(
        [store[p] for p in paths], lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0
    )
    feats = [FrozenFeatures(model, b) for b in bcfgs]
    rng = random.Random(f"batches:{spec.name}:{seed}")
    lossl = LossLog(stage=spec.name)
    log.info("%s: %d trainable leaves (%d params), lr=%g", spec.name, len(paths), store.num_params(paths), lr)
    for step in range(1, steps + 1):
        opt.zero_grad(set_to_none=True)
        loss = 0.0
        for _ in range(batch_size):
            i = rng.randrange(len(dataset))
            ff = feats[rng.randrange(len(feats))] if len(feats) > 1 else feats[0]
            ex = dataset[i]
            fused = ff.fused(i, ex.video)
            ids = ex.draw_text_ids(rng)
            loss = loss + decode_loss(model.decoder, fused, ids, n_prompt=len(ex.prompt_ids))
        loss = loss / batch_size
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        loss.backward()
        opt.step()
        lossl.append(step, value)
        if step % log_every == 0 or step == steps:
            log.info("%s step %d loss %.4f", spec.name, step, value)
    return lossl


def run_stage(
    spec: StageSpec,
    model: DualEncoderModel,
    steps: int,
    bcfg: TokenBudgetConfig,
    dataset: list[Example],
    seed: int = 0,
    batch_size: int = 4,
    learning_rate: float | None = None,
    log_every: int = 50,
) -> LossLog:
    """Run ``steps`` AdamW updates restricted to the stage's trainable leaves.

    Leaves outside the mask have ``requires_grad`` cleared, so autograd never
    routes gradient into them and the optimizer never sees them.
    """
    return _train_loop(spec, model, steps, [bcfg], dataset, seed, batch_size, learning_rate, log_every)


BASE_SPEC = StageSpec(
    "base",
    frozenset({"decoder", "flat_projector", "flat_row_token"}),
    frozenset({"flat_encoder", HIER_ENCODER, HIER_PROJECTOR, "hier_row_token"}),
    3e-3,
    1,
    "captioning",
)


def fit_base_checkpoint(
    model: DualEncoderModel,
    bcfg: TokenBudgetConfig,
    dataset: list[Example],
    steps: int = 400,
    seed: int = 0,
    learning_rate: float | None = None,
    log_every: int = 100,
) -> LossLog:
    """Fit a flat-only video-language model to start the schedule from.

    Stands in for the pretrained single-encoder checkpoint the recipe builds
    on: the decoder, flat projector, and flat row token learn the data with
    ``bcfg.n_total`` flat frames and no hierarchical tokens. The flat encoder
    stays frozen, as a pretrained vision tower would be. Adding the
    hierarchical stream afterwards both inserts unaligned tokens and shifts
    the text positions, which is what stage 1 then has to absorb.
    """
    base = replace(bcfg, n_hiera=0)
    return _train_loop(BASE_SPEC, model, steps, [base], dataset, seed, 4, learning_rate, log_every)


@dataclass
class TrainabilityResult:
    base: LossLog
    stage1: LossLog
    refit: LossLog
    rerun: LossLog

    @property
    def stage1_ratio(self) -> float:
        return self.stage1.final_mean() / self.stage1.initial_mean()

    @property
    def rerun_reduction(self) -> float:
        """Fractional drop of the window means across the re-run."""
        return 1.0 - self.rerun.final_mean() / self.rerun.initial_mean()


def trainability_run(
    seed: int = 0,
    base_steps: int = 400,
    stage1_steps: int = 300,
    refit_steps: int = 400,
    rerun_steps: int = 200,
    refit_lr: float = 3e-4,
    n_examples: int = 64,
) -> TrainabilityResult:
    """Base fit, stage 1, then a stage-2 re-run on an already-fitted task.

    "Already fitted" is made literal: captioning is first fit under the
    stage-2 mask at ``refit_lr``, then stage 2 runs again on the same data at
    its own lr with fresh optimizer state and batch order.
    """
    bcfg = TRAINING_BUDGET
    model = DualEncoderModel(ModelConfig(seed=seed), s_stage=bcfg.s_stage)
    data = {k: synthetic_task(k, seed, n_examples) for k in ("alignment", "captioning")}
    base = fit_base_checkpoint(model, bcfg, data["captioning"] + data["alignment"], base_steps, seed)
    stage1, stage2 = build_stage_schedule()[:2]
    s1 = run_stage(stage1, model, stage1_steps, bcfg, data["alignment"], seed=seed)
    refit = run_stage(stage2, model, refit_steps, bcfg, data["captioning"], seed=seed, learning_rate=refit_lr)
    rerun = run_stage(stage2, model, rerun_steps, bcfg, data["captioning"], seed=seed + 1)
    return TrainabilityResult(base, s1, refit, rerun)
