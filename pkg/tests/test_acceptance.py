"""Acceptance criteria 1-10, one test each.

Each test records a PASS/FAIL line with the measured value and tolerance; the
lines are printed together at the end of the pytest run. Run alone with
``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import contextlib
import hashlib
import json
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, random_toy_config, write_judge_corpus
from dualvis import cli
from dualvis import numerics as nx
from dualvis.budget import TOY_FLAT_GEOMETRY, TOY_HIER_GEOMETRY, TokenBudgetConfig, compute_budget
from dualvis.evalkit import (
    JudgeClient,
    JudgeRequest,
    PredictionRecord,
    ScoreReport,
    aggregate_judge_scores,
    build_judge_prompt,
    judge_many,
    load_descriptions,
    parse_judge_scores,
    score_mcq,
    score_mra,
)
from dualvis.pipeline import FLAT, HIER, DecoderStub, DualEncoderModel, ModelConfig, decode_loss, fuse, pool_and_rowtokens
from dualvis.sampler import plan_frames
from dualvis.training import (
    HIER_ENCODER,
    HIER_PROJECTOR,
    TRAINING_BUDGET,
    run_stage,
    stage_by_name,
    synthetic_task,
    trainability_run,
)
from test_evalkit import GOLDEN_DESCRIPTIONS, REFERENCE_TASK_SCORES
from test_numerics import naive_bilinear
from test_pipeline import causality_probe

pytestmark = pytest.mark.acceptance


class Outcome:
    def __init__(self):
        self.ok = None
        self.detail = ""

    def check(self, ok: bool, detail: str):
        self.ok = bool(ok) if self.ok is None else self.ok and bool(ok)
        self.detail = f"{self.detail}; {detail}" if self.detail else detail


@contextlib.contextmanager
def criterion(n: int, title: str):
    out = Outcome()
    try:
        yield out
    except Exception as e:
        ACCEPTANCE_LINES[n] = f"FAIL criterion {n:>2} {title}: raised {type(e).__name__}: {e}"
        raise
    ACCEPTANCE_LINES[n] = f"{'PASS' if out.ok else 'FAIL'} criterion {n:>2} {title}: {out.detail}"
    assert out.ok, ACCEPTANCE_LINES[n]


def test_criterion_01_token_arithmetic():
    with criterion(1, "token arithmetic, full-size geometries, triplet (32, 4, 2)") as c:
        t0 = time.perf_counter()
        rep = compute_budget(TokenBudgetConfig(n_total=64, n_hiera=32, s_stage=4, s_pool=2))
        elapsed = time.perf_counter() - t0
        c.check(rep.t_siglip == 13440, f"T_siglip={rep.t_siglip} (want 13440 exact)")
        c.check(rep.t_hiera == 8704, f"T_hiera={rep.t_hiera} (want 8704 exact)")
        c.check(f"{rep.ratio:.2f}" == "1.54" and rep.ratio_display == "1.54", f"ratio={rep.ratio_display} (want 1.54)")
        c.check(elapsed < 1.0, f"{elapsed * 1e3:.2f} ms (< 1 s)")


def test_criterion_02_pipeline_matches_plan():
    with criterion(2, "pipeline vs planner on random toy configs") as c:
        rng = random.Random(2024)
        models = {}
        n, bad = 240, []
        t0 = time.perf_counter()
        for i in range(n):
            cfg = random_toy_config(rng, allow_empty_hier=True)
            if cfg.s_stage not in models:
                models[cfg.s_stage] = DualEncoderModel(ModelConfig(seed=cfg.s_stage), s_stage=cfg.s_stage)
            frames = cfg.n_total + rng.randint(0, 3)
            video = torch.rand(frames, 64, 64, 3, dtype=torch.float64, generator=nx.generator(i))
            with torch.no_grad():
                fused, plan = models[cfg.s_stage].visual_stream(video, cfg)
            rep = compute_budget(cfg)
            prov = fused.provenance
            counts = prov.per_frame_counts()
            ok = (
                len(fused) == rep.total
                and prov.count(FLAT) == rep.t_siglip
                and prov.count(HIER) == rep.t_hiera
                and sorted(f for e, f in counts if e == "flat") == list(plan.flat_indices)
                and sorted(f for e, f in counts if e == "hier") == list(plan.hier_indices)
                and all(v == (rep.per_frame_flat if e == "flat" else rep.per_frame_hier) for (e, _), v in counts.items())
            )
            if not ok:
                bad.append(cfg)
        elapsed = time.perf_counter() - t0
        c.check(not bad, f"{n - len(bad)}/{n} configs exact")
        c.check(elapsed < 60.0, f"{elapsed:.1f} s (< 60 s)")


def test_criterion_03_bilinear_oracle():
    with criterion(3, "pooling vs naive bilinear oracle") as c:
        rng = np.random.default_rng(3)
        worst = 0.0
        for i in range(100):
            g = int(rng.integers(1, 20))
            s = int(rng.integers(1, 5))
            ch = int(rng.integers(1, 5))
            grid = torch.from_numpy(rng.standard_normal((g, g, ch)))
            out = pool_and_rowtokens(grid, s, torch.zeros(ch, dtype=torch.float64))
            p = -(-g // s)
            pooled = out.tokens.reshape(p, p + 1, ch)[:, :p].numpy()
            worst = max(worst, float(np.abs(pooled - naive_bilinear(grid.numpy(), p, p)).max()))
        c.check(worst <= 1e-12, f"max abs error {worst:.2e} over 100 grids (<= 1e-12)")
        ident = all(
            torch.equal(nx.bilinear_resize(t, t.shape[0], t.shape[1]), t)
            for t in (torch.from_numpy(rng.standard_normal((k, k + 1, 3))) for k in range(1, 12))
        )
        c.check(ident, "stride-1 resize bitwise identity")
        const = torch.full((13, 13, 2), 0.1, dtype=torch.float64)
        c.check(torch.equal(nx.bilinear_resize(const, 5, 7), torch.full((5, 7, 2), 0.1, dtype=torch.float64)),
                "constant field preserved exactly")


def projector_path_grad_error(seed: int) -> float:
    """Worst relative error over every hier-projector and hier row-token element.

    The loss runs hierarchical pooling and row tokens, the projector, fusion
    with a fixed flat stream, and the decoder's caption loss.
    """
    bcfg = TokenBudgetConfig(n_total=2, n_hiera=2, s_stage=1, s_pool=2, geom_flat=TOY_FLAT_GEOMETRY, geom_hier=TOY_HIER_GEOMETRY)
    model = DualEncoderModel(ModelConfig(d_hidden=32, seed=seed), s_stage=1)
    ex = synthetic_task("captioning", seed, n_examples=1, frames=2)[0]
    store = nx.ParamStore(model)
    store.set_trainable(lambda p: nx.path_matches(p, HIER_PROJECTOR) or p == "hier_row_token")
    plan = plan_frames(2, bcfg.n_total, bcfg.n_hiera)
    with torch.no_grad():
        flat = model.flat_stream(ex.video[list(plan.flat_indices)], plan.flat_indices, bcfg.flat_pool)
        grids = model.hier_grids(ex.video[list(plan.hier_indices)])

    def loss():
        hier = model.hier_stream(grids, plan.hier_indices, bcfg.s_pool)
        return decode_loss(model.decoder, fuse(flat, hier), ex.text_ids, len(ex.prompt_ids))

    return max(nx.grad_check(loss, store, p, epsilon=1e-5) for p in store.trainable_paths())


def test_criterion_04_gradient_checks():
    with criterion(4, "reverse-mode vs central differences, projector path") as c:
        errs = [projector_path_grad_error(seed) for seed in range(3)]
        c.check(max(errs) < 1e-4, "max rel error per seed " + ", ".join(f"{e:.2e}" for e in errs) + " (< 1e-4, eps 1e-5, float64)")


def test_criterion_05_stage_masks():
    with criterion(5, "stage-mask hash contract") as c:
        model = DualEncoderModel(ModelConfig(seed=5), s_stage=TRAINING_BUDGET.s_stage)
        store = nx.ParamStore(model)
        before = store.leaf_digests()
        run_stage(stage_by_name("stage-1"), model, 100, TRAINING_BUDGET, synthetic_task("alignment", 5, 16))
        after = store.leaf_digests()
        outside = [p for p in before if not nx.path_matches(p, HIER_PROJECTOR)]
        changed = [p for p in outside if before[p] != after[p]]
        moved = [p for p in before if nx.path_matches(p, HIER_PROJECTOR) and before[p] != after[p]]
        c.check(not changed, f"stage-1 x100: {len(outside) - len(changed)}/{len(outside)} non-projector leaves unchanged")
        c.check(bool(moved), f"{len(moved)} projector leaves updated")
        enc_before = store.digest(store.under(HIER_ENCODER))
        rest_before = store.digest([p for p in store.paths() if not nx.path_matches(p, HIER_ENCODER)])
        run_stage(stage_by_name("stage-3"), model, 20, TRAINING_BUDGET, synthetic_task("spatial_qa", 5, 16))
        c.check(store.digest(store.under(HIER_ENCODER)) == enc_before, "stage-3 x20: hier-encoder subtree hash unchanged")
        c.check(store.digest([p for p in store.paths() if not nx.path_matches(p, HIER_ENCODER)]) != rest_before,
                "other subtrees updated")


def test_criterion_06_trainability():
    with criterion(6, "trainability on synthetic tasks") as c:
        res = trainability_run(seed=0)
        s1 = res.stage1
        c.check(len(s1.steps) <= 500 and res.stage1_ratio < 0.5,
                f"stage-1 final/initial window mean {s1.final_mean():.3f}/{s1.initial_mean():.3f} = {res.stage1_ratio:.3f} "
                f"in {len(s1.steps)} steps (< 0.5)")
        c.check(res.rerun_reduction < 0.10,
                f"stage-2 re-run reduction {res.rerun_reduction * 100:.1f}% "
                f"({res.rerun.initial_mean():.3f} -> {res.rerun.final_mean():.3f}, < 10%)")


def test_criterion_07_causality():
    with criterion(7, "decoder causality probes") as c:
        rng = random.Random(7)
        dec = DecoderStub(seed=7)
        ok = sum(causality_probe(dec, rng) for _ in range(50))
        c.check(ok == 50, f"{ok}/50 probes: earlier logits bitwise equal, later logits changed")


def test_criterion_08_scorers():
    with criterion(8, "scorer oracles") as c:
        mra = score_mra([PredictionRecord("obj_count", "q", "numeric", 9.0, 10.0)])
        c.check(mra == 80.0, f"MRA(9, 10) = {mra!r} (want 80.0 exact)")
        recs = [PredictionRecord("rel_dir", str(i), "multiple_choice", p, g)
                for i, (p, g) in enumerate([("A", "A"), ("b", "B"), ("C", "D"), ("D", "D")])]
        mcq = score_mcq(recs)
        c.check(mcq == 75.0 and score_mcq(recs[2:3]) == 0.0, f"MCQ 3/4 = {mcq!r} (want 75.0 exact)")
        avg = ScoreReport.from_task_scores(REFERENCE_TASK_SCORES).average
        c.check(abs(avg - 56.8) <= 0.05, f"reference average {avg:.4f} (56.8 +- 0.05)")


def test_criterion_09_judge(tmp_path):
    with criterion(9, "judge workflow") as c:
        golden = (Path(__file__).parent / "fixtures" / "judge_prompt_golden.txt").read_bytes()
        c.check(build_judge_prompt(GOLDEN_DESCRIPTIONS).encode() == golden, "prompt equals golden file byte for byte")
        desc, resp, scores = write_judge_corpus(tmp_path, 288)
        parsed = {f.stem: parse_judge_scores(f.read_text()).scores for f in sorted(resp.iterdir())}
        roundtrip = all(parsed[f"video_{v:03d}"] == {k: scores[k][v] for k in "ABCD"} for v in range(288))
        c.check(roundtrip, "288 fixture responses parse back to their scores")
        client = JudgeClient(offline=True, fixtures_dir=resp)
        reqs = [JudgeRequest(v, build_judge_prompt(d)) for v, d in load_descriptions(desc)]
        means = aggregate_judge_scores([s for _, s in judge_many(client, reqs)])
        oracle = {k: sum(scores[k]) / 288 for k in "ABCD"}
        worst = max(abs(means[k] - oracle[k]) for k in "ABCD")
        c.check(len(reqs) == 288 and worst <= 1e-9, f"offline means vs hand oracle max diff {worst:.1e} (<= 1e-9)")


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "CLI re-runs are byte-identical") as c:
        preds = tmp_path / "p.jsonl"
        preds.write_text(json.dumps({"task": "obj_count", "question_id": 1, "predicted": 9, "gold": 10}) + "\n")
        write_judge_corpus(tmp_path, 8)
        commands = {
            "plan": ["plan", "--budget", 16000],
            "run": ["run", "--n-total", 3, "--n-hiera", 2, "--s-stage", 2, "--seed", 3, "--loss"],
            "train": ["train", "--stage", "stage-1", "--steps", 5, "--examples", 8, "--seed", 3],
            "score": ["score", preds],
            "judge": ["judge", tmp_path / "descriptions", "--offline", "--fixtures", tmp_path / "responses"],
        }
        same = []
        for name, argv in commands.items():
            hashes = []
            for rep in ("a", "b"):
                d = tmp_path / f"{name}-{rep}"
                assert cli.main([str(a) for a in argv] + ["--out", str(d)]) == 0
                hashes.append(hashlib.sha256((d / "manifest.json").read_bytes()).hexdigest())
            if hashes[0] == hashes[1]:
                same.append(name)
        c.check(len(same) == len(commands), f"manifest hashes equal for {len(same)}/{len(commands)} commands ({', '.join(same)})")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
