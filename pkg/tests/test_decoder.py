"""Matching decoder: distribution invariants, planted decode, re-ranking arithmetic."""

import itertools

import numpy as np
import pytest

from geounify.config import preset_config
from geounify.decoder import (
    AerialPyramid,
    DecoderParams,
    decode,
    decode_descriptors,
    match_level,
    rerank,
    to_distribution,
)
from geounify.errors import DimensionError, QueryError
from geounify.fixtures import planted_case
from geounify.index import Candidate, CandidateSet, IndexEntry
from geounify.representation import ProjectorParams
from geounify.tensor import Tensor, no_grad, precision


def _pyramid(rng, channels=(6, 4, 3), base=2):
    return AerialPyramid([Tensor(rng.normal(size=(base * 2 ** l, base * 2 ** l, c))) for l, c in enumerate(channels)])


def _descs(rng, channels=(6, 4, 3)):
    out = []
    for c in channels:
        v = rng.normal(size=c)
        out.append(Tensor(v / np.linalg.norm(v)))
    return out


def _cosines(f, F):
    """Reference cosine map in float64: LayerNorm(eps 1e-5) then L2 per cell."""
    h, w, c = F.shape
    X = F.reshape(h * w, c)
    X = (X - X.mean(axis=1, keepdims=True)) / np.sqrt(X.var(axis=1, keepdims=True) + 1e-5)
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    return (X @ f).reshape(h, w)


# ---------------- distribution ----------------
def test_decoded_distribution_invariants(rng):
    with precision(np.float64):
        for _ in range(5):
            params = DecoderParams.init([6, 4, 3], 2, rng)
            dist = decode_descriptors(_descs(rng), _pyramid(rng), params, 24)
            D = dist.D.data
            assert D.shape == (24, 24)
            assert (D >= 0).all()
            assert D.sum() == pytest.approx(1.0, abs=1e-9)
            x, y = dist.pixel
            assert D[y, x] == D.max()
            assert dist.logits.data[y, x] == dist.logits.data.max()
            assert [m.shape for m in dist.m_levels] == [(2, 2), (4, 4), (8, 8)]


def test_to_distribution_upsamples_nearest():
    scores = Tensor(np.array([[0.0, 0.0], [0.0, 5.0]]))
    dist = to_distribution(scores, 8)
    assert dist.pixel == (4, 4)
    assert np.allclose(dist.D.data[4:, 4:], dist.D.data[7, 7])


def test_deconv_kernel_four_decodes_too(rng):
    params = DecoderParams.init([6, 4, 3], 4, rng)
    dist = decode_descriptors(_descs(rng), _pyramid(rng), params, 16)
    assert dist.D.shape == (16, 16)


def test_match_level_is_cosine_after_layer_norm(rng):
    with precision(np.float64):
        F = rng.normal(size=(3, 4, 5))
        f = rng.normal(size=5)
        f /= np.linalg.norm(f)
        got = match_level(Tensor(f), Tensor(F)).data
    assert np.allclose(got, _cosines(f, F), atol=1e-10)
    assert (np.abs(got) <= 1.0 + 1e-12).all()


def test_level_count_mismatch(rng):
    params = DecoderParams.init([6, 4, 3], 2, rng)
    with pytest.raises(DimensionError):
        decode_descriptors(_descs(rng)[:2], _pyramid(rng), params, 16)


def test_pyramid_levels_must_double(rng):
    with pytest.raises(DimensionError):
        AerialPyramid([Tensor(rng.normal(size=(2, 2, 3))), Tensor(rng.normal(size=(6, 6, 3)))])


def test_decode_checks_projector_schedule(rng):
    proj = ProjectorParams.init((2, 4), 6, [6, 4, 2], 2, rng)
    params = DecoderParams.init([6, 4, 3], 2, rng)
    with pytest.raises(DimensionError):
        decode(Tensor(rng.normal(size=(2, 4, 6))), _pyramid(rng), proj, params, 16)


# ---------------- planted features ----------------
@pytest.mark.parametrize("gt", [(8, 8), (14, 22), (22, 10), (16, 16)])
def test_planted_features_decode_onto_the_gt_pixel(gt):
    cfg = preset_config("tiny")
    rng = np.random.default_rng(sum(gt))
    params = DecoderParams.skip_identity(cfg.model.level_channels, cfg.model.deconv_kernel)
    with no_grad():
        pyr, descs = planted_case(rng, gt, cfg)
        dist = decode_descriptors(descs, pyr, params, cfg.tile_size)
    assert dist.pixel == gt


# ---------------- re-ranking ----------------
def _candidates(scores):
    return CandidateSet([Candidate(IndexEntry(f"t{i}", np.zeros(2, dtype=np.float32)), s)
                         for i, s in enumerate(scores)])


def test_rerank_matches_direct_argmax_over_all_assignments(rng):
    with precision(np.float64):
        for k in range(1, 6):
            s = sorted(rng.uniform(0.0, 1.0, size=k).tolist(), reverse=True)
            maps = [Tensor(rng.normal(size=(3, 3, 4))) for _ in range(k)]
            f = rng.normal(size=4)
            f /= np.linalg.norm(f)
            for perm in itertools.permutations(range(k)):
                cands = _candidates(s)
                pyrs = {f"t{i}": AerialPyramid([maps[perm[i]]]) for i in range(k)}
                rr = rerank(cands, Tensor(f), pyrs)
                combined = [s[i] + _cosines(f, maps[perm[i]].data).max() for i in range(k)]
                assert rr.winner_rank == int(np.argmax(combined))
                assert rr.winner.entry.image_id == f"t{rr.winner_rank}"


def test_rerank_trace_and_reused_map(rng):
    cands = _candidates([0.9, 0.5, 0.1])
    pyrs = {f"t{i}": _pyramid(rng) for i in range(3)}
    f = _descs(rng)[0]
    rr = rerank(cands, f, pyrs, workers=3)
    assert [t["candidate_id"] for t in rr.trace] == ["t0", "t1", "t2"]
    for t in rr.trace:
        assert t["combined"] == t["s_t"] + t["max_m0"]
        assert t["max_m0"] == float(np.max(rr.m0[t["candidate_id"]].data))
    best = max(rr.trace, key=lambda t: t["combined"])
    assert rr.winner.entry.image_id == best["candidate_id"]


def test_rerank_ties_keep_retrieval_order():
    F = Tensor(np.tile(np.array([1.0, -1.0, 0.5, 0.0]), (2, 2, 1)))
    cands = _candidates([0.5, 0.5])
    pyrs = {"t0": AerialPyramid([F]), "t1": AerialPyramid([F])}
    rr = rerank(cands, Tensor(np.array([1.0, 0.0, 0.0, 0.0])), pyrs)
    assert rr.winner_rank == 0


def test_single_candidate_rerank_is_identity(rng):
    rr = rerank(_candidates([0.3]), _descs(rng)[0], {"t0": _pyramid(rng)})
    assert rr.winner_rank == 0
    assert len(rr.trace) == 1


def test_rerank_needs_features_for_every_candidate(rng):
    with pytest.raises(QueryError):
        rerank(_candidates([0.9, 0.1]), _descs(rng)[0], {"t0": _pyramid(rng)})


def test_reused_m0_decodes_identically(rng):
    params = DecoderParams.init([6, 4, 3], 2, rng)
    pyr, descs = _pyramid(rng), _descs(rng)
    m0 = match_level(descs[0], pyr.levels[0])
    a = decode_descriptors(descs, pyr, params, 16)
    b = decode_descriptors(descs, pyr, params, 16, m0=m0)
    assert a.pixel == b.pixel
    assert np.array_equal(a.D.data, b.D.data)
