import random

import pytest

from dualvis.budget import TOY_FLAT_GEOMETRY, TOY_HIER_GEOMETRY, TokenBudgetConfig


def random_toy_config(rng: random.Random, allow_empty_hier: bool = False) -> TokenBudgetConfig:
    n_total = rng.randint(1, 4)
    lo = 0 if allow_empty_hier else 1
    return TokenBudgetConfig(
        n_total=n_total,
        n_hiera=rng.randint(lo, n_total),
        s_stage=rng.randint(1, 4),
        s_pool=rng.randint(1, 4),
        flat_pool=rng.randint(1, 3),
        geom_flat=TOY_FLAT_GEOMETRY,
        geom_hier=TOY_HIER_GEOMETRY,
    )


@pytest.fixture
def rng():
    return random.Random(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


# judge responses come in the shapes seen from chat models: fenced, bare, or
# with an earlier brace-delimited aside that must not be picked up
RESPONSE_SHAPES = (
    "Model A is thorough.\n\n```json\n{{\"A\": {A}, \"B\": {B}, \"C\": {C}, \"D\": {D}}}\n```\n",
    "Scores follow.\n{{\"A\": {A}, \"B\": {B}, \"C\": {C}, \"D\": {D}}}",
    "Draft {{\"A\": 0}} discarded.\n```\n{{\n  \"D\": {D},\n  \"C\": {C},\n  \"B\": {B},\n  \"A\": {A}\n}}\n```",
)


def write_judge_corpus(root, n_videos: int = 288, seed: int = 0):
    """Description folders plus offline responses; returns the per-model score lists."""
    rng = random.Random(seed)
    desc, resp = root / "descriptions", root / "responses"
    resp.mkdir(parents=True)
    scores = {k: [] for k in "ABCD"}
    for v in range(n_videos):
        vid = f"video_{v:03d}"
        (desc / vid).mkdir(parents=True)
        drawn = {}
        for k in "ABCD":
            (desc / vid / f"{k}.txt").write_text(f"Video {v}, description by model {k}.")
            drawn[k] = rng.randint(0, 10)
            scores[k].append(drawn[k])
        shape = RESPONSE_SHAPES[v % len(RESPONSE_SHAPES)]
        (resp / f"{vid}.txt").write_text(shape.format(**drawn))
    return desc, resp, scores
