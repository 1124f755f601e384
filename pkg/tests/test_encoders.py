import pytest
import torch
import torch.nn as nn

from dualvis import numerics as nx
from dualvis.budget import (
    FULL_FLAT_GEOMETRY,
    FULL_HIER_GEOMETRY,
    TOY_FLAT_GEOMETRY,
    TOY_HIER_GEOMETRY,
    EncoderGeometry,
    InvalidStageError,
    grid_side,
)
from dualvis.encoders import (
    FlatEncoder,
    GeometryError,
    HierEncoder,
    dry_run_shapes,
    init_params,
    leaf_seed,
    preprocess,
)


def frames(n, size, seed=0):
    return torch.rand(n, size, size, 3, dtype=torch.float64, generator=nx.generator(seed))


def test_flat_encoder_shape():
    enc = FlatEncoder(TOY_FLAT_GEOMETRY, embed_dim=16, seed=0)
    out = enc(frames(3, 32))
    g = grid_side(TOY_FLAT_GEOMETRY, 1)
    assert out.shape == (3, g, g, 16) and out.dtype == torch.float64
    with pytest.raises(GeometryError):
        enc(frames(1, 30))


def test_flat_encoder_needs_single_stage():
    with pytest.raises(GeometryError):
        FlatEncoder(TOY_HIER_GEOMETRY)


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_hier_encoder_stage_shapes(stage):
    enc = HierEncoder(TOY_HIER_GEOMETRY, seed=1)
    out = enc(frames(2, 64), stage)
    g = grid_side(TOY_HIER_GEOMETRY, stage)
    assert out.shape == (2, g, g, TOY_HIER_GEOMETRY.channels_per_stage[stage - 1])


def test_hier_encoder_errors():
    enc = HierEncoder(TOY_HIER_GEOMETRY)
    for bad in (0, 5):
        with pytest.raises(InvalidStageError):
            enc(frames(1, 64), bad)
    with pytest.raises(GeometryError):
        enc(frames(1, 32), 1)
    with pytest.raises(GeometryError):
        HierEncoder(TOY_HIER_GEOMETRY, stage_channels=(8, 8, 16, 32))
    with pytest.raises(GeometryError):
        HierEncoder(TOY_HIER_GEOMETRY, stage_channels=(8, 16))


def test_odd_grids_follow_floor():
    geom = EncoderGeometry(44, 4, (1, 2, 2), (4, 8, 12))
    enc = HierEncoder(geom)
    assert [enc(frames(1, 44), s).shape[1] for s in (1, 2, 3)] == [11, 5, 2] == [
        grid_side(geom, s) for s in (1, 2, 3)
    ]


def test_init_is_deterministic_and_path_keyed():
    a = HierEncoder(TOY_HIER_GEOMETRY, seed=5)
    b = HierEncoder(TOY_HIER_GEOMETRY, seed=5)
    c = HierEncoder(TOY_HIER_GEOMETRY, seed=6)
    assert nx.ParamStore(a).digest() == nx.ParamStore(b).digest() != nx.ParamStore(c).digest()
    assert leaf_seed(0, "x.weight") != leaf_seed(0, "y.weight")

    # adding a sibling module does not move existing values
    m1 = nn.Module()
    m1.enc = nn.Linear(4, 3, dtype=torch.float64)
    m2 = nn.Module()
    m2.aaa = nn.Linear(2, 2, dtype=torch.float64)
    m2.enc = nn.Linear(4, 3, dtype=torch.float64)
    init_params(m1, 0)
    init_params(m2, 0)
    assert torch.equal(m1.enc.weight, m2.enc.weight)


def test_init_rules():
    m = nn.Module()
    m.lin = nn.Linear(8, 4, dtype=torch.float64)
    m.tok_emb = nn.Parameter(torch.zeros(50, 6, dtype=torch.float64))
    init_params(m, 3)
    bound = nx.xavier_bound(8, 4)
    assert float(m.lin.weight.detach().abs().max()) <= bound
    assert torch.equal(m.lin.bias, torch.zeros(4, dtype=torch.float64))
    assert 0.7 < float(m.tok_emb.detach().std()) < 1.3


def test_preprocess_resizes_and_standardizes():
    x = frames(2, 48) * 10 + 3
    y = preprocess(x, 32)
    assert y.shape == (2, 32, 32, 3)
    assert float(y.mean(dim=(1, 2)).abs().max()) < 1e-9
    assert preprocess(x[:0], 32).shape == (0, 32, 32, 3)
    with pytest.raises(GeometryError):
        preprocess(x[0], 32)


def test_full_size_dry_run():
    shapes = dry_run_shapes(FULL_FLAT_GEOMETRY, FULL_HIER_GEOMETRY, 64, 32, 4)
    assert shapes == {"flat": (64, 27, 27, 1152), "hier": (32, 32, 32, 896)}
