import math
import random

import pytest
import torch

from dualvis.numerics import ParamStore
from dualvis.pipeline import BOS, EOS, SEP, DualEncoderModel, ModelConfig, decode_loss, decode_text
from dualvis.training import (
    HIER_ENCODER,
    HIER_PROJECTOR,
    MODEL_PREFIXES,
    TASK_KINDS,
    TRAINING_BUDGET,
    DivergenceError,
    FrozenFeatures,
    LossLog,
    StageSpec,
    apply_stage_mask,
    build_stage_schedule,
    example_loss,
    run_stage,
    stage_by_name,
    synthetic_task,
)


def toy_model(seed=0):
    b = TRAINING_BUDGET
    return DualEncoderModel(ModelConfig(geom_flat=b.geom_flat, geom_hier=b.geom_hier, seed=seed), s_stage=b.s_stage)


def digest_under(store, prefixes):
    return store.digest([p for pre in prefixes for p in store.under(pre)])


def test_schedule_shape():
    sched = build_stage_schedule()
    assert [s.name for s in sched] == ["stage-1", "stage-2", "stage-3", "thinking"]
    assert [s.optional for s in sched] == [False, False, False, True]
    assert sched[0].trainable == {HIER_PROJECTOR}
    assert sched[0].learning_rate == 1e-3
    for s in sched:
        assert HIER_ENCODER in s.frozen
        assert s.trainable | s.frozen == set(MODEL_PREFIXES)
    for s in sched[1:]:
        assert s.learning_rate == 1e-5
        assert s.trainable == set(MODEL_PREFIXES) - {HIER_ENCODER}


def test_stage_spec_validation():
    with pytest.raises(ValueError):
        StageSpec("x", frozenset({"decoder"}), frozenset({"decoder", HIER_ENCODER}), 1e-3, 1, "alignment")
    with pytest.raises(ValueError):
        StageSpec("x", frozenset({HIER_ENCODER}), frozenset(), 1e-3, 1, "alignment")
    with pytest.raises(KeyError):
        stage_by_name("stage-9")


def test_mask_sets_requires_grad():
    model = toy_model()
    store = ParamStore(model)
    paths = apply_stage_mask(store, stage_by_name("stage-1"))
    assert paths and all(p.startswith("hier_projector.") for p in paths)
    assert all(not store[p].requires_grad for p in store.paths() if p not in paths)
    spec = StageSpec("none", frozenset(), frozenset({HIER_ENCODER}), 1e-3, 1, "alignment")
    with pytest.raises(ValueError):
        apply_stage_mask(store, spec)


@pytest.mark.parametrize(
    "stage,changed,unchanged",
    [
        ("stage-1", [HIER_PROJECTOR], [p for p in MODEL_PREFIXES if p != HIER_PROJECTOR]),
        ("stage-3", ["decoder", "flat_encoder", HIER_PROJECTOR], [HIER_ENCODER]),
    ],
)
def test_stage_updates_only_its_mask(stage, changed, unchanged):
    model = toy_model()
    store = ParamStore(model)
    before = {p: store.digest(store.under(p)) for p in MODEL_PREFIXES}
    data = synthetic_task(stage_by_name(stage).task, 0, n_examples=4, frames=4)
    run_stage(stage_by_name(stage), model, 3, TRAINING_BUDGET, data, learning_rate=1e-2)
    for p in unchanged:
        assert store.digest(store.under(p)) == before[p], p
    for p in changed:
        assert store.digest(store.under(p)) != before[p], p


def test_run_stage_is_deterministic():
    data = synthetic_task("alignment", 1, n_examples=4, frames=4)
    logs, digests = [], []
    for _ in range(2):
        m = toy_model(3)
        logs.append(run_stage(stage_by_name("stage-1"), m, 4, TRAINING_BUDGET, data, seed=2).losses)
        digests.append(ParamStore(m).digest())
    assert logs[0] == logs[1] and digests[0] == digests[1]


def test_run_stage_errors():
    m = toy_model()
    data = synthetic_task("alignment", 0, n_examples=2, frames=4)
    with pytest.raises(ValueError):
        run_stage(stage_by_name("stage-1"), m, 0, TRAINING_BUDGET, data)
    with pytest.raises(ValueError):
        run_stage(stage_by_name("stage-1"), m, 1, TRAINING_BUDGET, [])
    with torch.no_grad():
        m.hier_projector.fc1.weight.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        run_stage(stage_by_name("stage-1"), m, 2, TRAINING_BUDGET, data)


@pytest.mark.parametrize("stage", ["stage-1", "stage-2"])
def test_frozen_features_match_uncached_stream(stage):
    m = toy_model(1)
    apply_stage_mask(ParamStore(m), stage_by_name(stage))
    ff = FrozenFeatures(m, TRAINING_BUDGET)
    for i, ex in enumerate(synthetic_task("captioning", 0, n_examples=3, frames=6)):
        for _ in range(2):  # second call hits the memo
            cached = ff.fused(i, ex.video)
            direct, _ = m.visual_stream(ex.video, TRAINING_BUDGET)
            assert torch.allclose(cached.tokens, direct.tokens, rtol=0, atol=1e-12)
            assert cached.provenance.frame.tolist() == direct.provenance.frame.tolist()
        ids = ex.text_ids
        a = decode_loss(m.decoder, cached, ids, len(ex.prompt_ids))
        assert a.item() == pytest.approx(example_loss(m, ex, TRAINING_BUDGET).item(), abs=1e-12)


def test_frozen_features_require_frozen_hier_encoder():
    m = toy_model()
    ParamStore(m).set_trainable(lambda p: True)
    with pytest.raises(ValueError):
        FrozenFeatures(m, TRAINING_BUDGET)


def test_loss_log():
    log = LossLog(stage="s")
    for i, v in enumerate([4.0, 3.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5], start=1):
        log.append(i, v)
    assert log.window() == 1
    assert log.initial_mean() == 4.0 and log.final_mean() == 0.5
    assert log.initial_mean(2) == 3.5
    with pytest.raises(ValueError):
        log.append(10, 1.0)
    with pytest.raises(DivergenceError):
        log.append(11, math.inf)


def test_loss_log_csv(tmp_path):
    log = LossLog()
    log.append(1, 0.1)
    log.append(2, 1 / 3)
    log.to_csv(tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and float(lines[2].split(",")[1]) == 1 / 3


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_synthetic_task_determinism_and_format(kind):
    a = synthetic_task(kind, 4, n_examples=5, frames=3, size=32)
    b = synthetic_task(kind, 4, n_examples=5, frames=3, size=32)
    c = synthetic_task(kind, 5, n_examples=5, frames=3, size=32)
    assert all(torch.equal(x.video, y.video) and x.text_ids == y.text_ids for x, y in zip(a, b))
    assert any(not torch.equal(x.video, y.video) for x, y in zip(a, c))
    for ex in a:
        assert ex.video.shape == (3, 32, 32, 3)
        assert ex.prompt_ids[0] == BOS and ex.prompt_ids[-1] == SEP
        assert all(alt[-1] == EOS for alt in ex.alternatives)
        assert ex.alternatives[0] == ex.target_ids
    with pytest.raises(ValueError):
        synthetic_task("poetry", 0)


def test_spatial_answers_are_disc_counts():
    for ex in synthetic_task("spatial_qa", 0, n_examples=10, frames=2, size=32):
        assert ex.answer == str(ex.scene.count) == decode_text(ex.target_ids)


def test_caption_alternatives_are_drawn():
    ex = synthetic_task("captioning", 0, n_examples=1, frames=2, size=32)[0]
    assert len(ex.alternatives) == 6
    rng = random.Random(0)
    drawn = {tuple(ex.draw_text_ids(rng)) for _ in range(200)}
    assert drawn == {tuple(ex.prompt_ids + alt) for alt in ex.alternatives}
    align = synthetic_task("alignment", 0, n_examples=1, frames=2, size=32)[0]
    assert len(align.alternatives) == 1
