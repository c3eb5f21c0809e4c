import numpy as np
import pytest

from geounify.errors import DimensionError
from geounify.index import IndexEntry, RetrievalIndex
from geounify.representation import (
    GEM_P_RANGE,
    AggregatorParams,
    ProjectorParams,
    attention_enhance,
    avg_pool,
    check_schedule,
    gem_pool,
    global_descriptor,
    project_all,
    project_ground,
)
from geounify.tensor import Tensor, l2_normalize, precision


# ---------------- global descriptor ----------------
def test_global_descriptor_is_unit_norm(rng):
    agg = AggregatorParams.init(8, rng)
    v = global_descriptor(Tensor(np.abs(rng.normal(size=(4, 6, 8)))), agg)
    assert v.shape == (8,)
    assert np.linalg.norm(v.data) == pytest.approx(1.0, abs=1e-5)


def test_gem_with_p_one_is_the_mean(rng):
    x = np.abs(rng.normal(size=(3, 3, 4))) + 0.1
    with precision(np.float64):
        g = gem_pool(Tensor(x), 1.0).data
    assert np.allclose(g, x.reshape(-1, 4).mean(axis=0), rtol=1e-10)


def test_gem_approaches_max_for_large_p(rng):
    x = np.abs(rng.normal(size=(3, 3, 4))) + 0.1
    with precision(np.float64):
        g = gem_pool(Tensor(x), 10.0).data
    mx = x.reshape(-1, 4).max(axis=0)
    assert (g <= mx + 1e-12).all()
    assert (g >= x.reshape(-1, 4).mean(axis=0)).all()


def test_gem_p_is_clamped(rng):
    agg = AggregatorParams.init(4, rng, p0=3.0)
    agg.p.assign(np.array(25.0))
    agg.clamp()
    assert float(agg.p.value) == GEM_P_RANGE[1]
    agg.p.assign(np.array(0.1))
    agg.clamp()
    assert float(agg.p.value) == GEM_P_RANGE[0]


def test_avg_mode_is_normalized_mean(rng):
    agg = AggregatorParams.init(4, rng, mode="avg")
    G = np.abs(rng.normal(size=(2, 5, 4)))
    v = global_descriptor(Tensor(G), agg).data
    m = G.reshape(-1, 4).mean(axis=0)
    assert np.allclose(v, m / np.linalg.norm(m), atol=1e-6)
    assert np.allclose(avg_pool(Tensor(G)).data, m, atol=1e-6)


def test_attention_channel_mismatch(rng):
    agg = AggregatorParams.init(4, rng)
    with pytest.raises(DimensionError):
        global_descriptor(Tensor(rng.normal(size=(2, 2, 6))), agg)


def test_zero_value_projection_leaves_the_map_unchanged(rng):
    agg = AggregatorParams.init(8, rng)
    agg.W_v.assign(np.zeros_like(agg.W_v.value))
    G = rng.normal(size=(3, 4, 8))
    with precision(np.float64):
        phi = attention_enhance(Tensor(G), agg).data
    assert np.allclose(phi, G, rtol=0, atol=1e-12)


def test_zero_query_key_attends_uniformly(rng):
    agg = AggregatorParams.init(8, rng)
    agg.W_q.assign(np.zeros_like(agg.W_q.value))
    agg.W_k.assign(np.zeros_like(agg.W_k.value))
    G = rng.normal(size=(3, 4, 8))
    with precision(np.float64):
        phi = attention_enhance(Tensor(G), agg).data
        W_v, W_r = agg.W_v.value.astype(np.float64), agg.W_restore.value.astype(np.float64)
    X = G.reshape(12, 8)
    want = X + (X.mean(axis=0) @ W_v @ W_r)[None, :]
    assert np.allclose(phi.reshape(12, 8), want, atol=1e-6)


def test_gem_of_a_constant_map_is_the_constant():
    with precision(np.float64):
        g = gem_pool(Tensor(np.full((3, 3, 4), 2.5)), 3.0).data
    assert np.allclose(g, 2.5, rtol=1e-12)


def test_gem_at_large_p_is_near_the_max(rng):
    x = np.abs(rng.normal(size=(3, 3, 4))) + 0.1
    with precision(np.float64):
        g = gem_pool(Tensor(x), 100.0).data
    mx = x.reshape(-1, 4).max(axis=0)
    assert (g <= mx + 1e-12).all()
    assert (g >= 0.97 * mx).all()


def test_cell_order_does_not_change_the_descriptor(rng):
    agg = AggregatorParams.init(8, rng)
    G = np.abs(rng.normal(size=(4, 6, 8)))
    shuffled = G.reshape(24, 8)[rng.permutation(24)].reshape(4, 6, 8)
    with precision(np.float64):
        a = global_descriptor(Tensor(G), agg).data
        b = global_descriptor(Tensor(shuffled), agg).data
    assert np.allclose(a, b, atol=1e-10)


def test_positive_rescaling_keeps_the_ranking(rng):
    rows = rng.normal(size=(12, 8))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    idx = RetrievalIndex.build([IndexEntry(f"t{j:02d}", r) for j, r in enumerate(rows)])
    raw = rng.normal(size=8)
    with precision(np.float64):
        base = idx.knn_query(l2_normalize(Tensor(raw)).data, 12).ids()
        for c in (1e-3, 0.5, 40.0):
            assert idx.knn_query(l2_normalize(Tensor(c * raw)).data, 12).ids() == base


# ---------------- ground projection ----------------
def test_project_ground_dims_follow_the_schedule(rng):
    proj = ProjectorParams.init((2, 4), 8, [8, 6, 3], 2, rng)
    descs = project_all(Tensor(rng.normal(size=(2, 4, 8))), proj)
    assert [d.dim for d in descs] == [8, 6, 3]
    assert [d.level for d in descs] == [0, 1, 2]
    for d in descs:
        assert np.linalg.norm(d.vec.data) == pytest.approx(1.0, abs=1e-5)
        assert not d.degenerate


def test_zero_ground_map_is_flagged_degenerate(rng):
    proj = ProjectorParams.init((2, 4), 8, [8], 2, rng)
    d = project_ground(Tensor(np.zeros((2, 4, 8))), 0, proj)
    assert d.degenerate
    assert np.isfinite(d.vec.data).all()


def test_project_ground_rejects_wrong_map(rng):
    proj = ProjectorParams.init((2, 4), 8, [8], 2, rng)
    with pytest.raises(DimensionError):
        project_ground(Tensor(rng.normal(size=(2, 5, 8))), 0, proj)
    with pytest.raises(DimensionError):
        project_ground(Tensor(rng.normal(size=(2, 4, 8))), 1, proj)


def test_schedule_mismatch_is_a_dimension_error(rng):
    proj = ProjectorParams.init((2, 4), 8, [8, 6], 2, rng)
    check_schedule(proj, [8, 6])
    with pytest.raises(DimensionError):
        check_schedule(proj, [8, 4])
