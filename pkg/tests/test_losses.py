import math

import numpy as np
import pytest

from geounify.errors import DimensionError, NumericalError
from geounify.losses import (
    LossWeights,
    Temperature,
    breakdown,
    gaussian_target,
    gt_cell,
    info_nce,
    level_weights,
    localization_loss,
    matching_loss,
    rerank_loss,
    retrieval_loss,
    total_loss,
)
from geounify.tensor import Tensor, precision


def _unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------- retrieval ----------------
def test_info_nce_of_orthogonal_refs_is_log_n():
    with precision(np.float64):
        q = Tensor(np.array([0.0, 0.0, 0.0, 1.0]))
        refs = Tensor(np.eye(4)[:3])
        loss = info_nce(q, refs, 1, 1.0)
    assert float(loss.data) == pytest.approx(math.log(3))


def test_info_nce_prefers_the_aligned_positive(rng):
    q = _unit(rng, 8)
    others = _unit(rng, 3, 8)
    aligned = info_nce(Tensor(q), Tensor(np.vstack([q, others])), 0, 0.1)
    misaligned = info_nce(Tensor(q), Tensor(np.vstack([-q, others])), 0, 0.1)
    assert float(aligned.data) < float(misaligned.data)


def test_info_nce_checks_positive_index(rng):
    with pytest.raises(DimensionError):
        info_nce(Tensor(_unit(rng, 4)), Tensor(_unit(rng, 3, 4)), 3, 0.1)


def test_retrieval_loss_is_symmetric(rng):
    with precision(np.float64):
        G, A = Tensor(_unit(rng, 4, 6)), Tensor(_unit(rng, 4, 6))
        a = float(retrieval_loss(G, A, 0.2, 0.1).data)
        b = float(retrieval_loss(A, G, 0.2, 0.1).data)
    assert a == pytest.approx(b, rel=1e-12)


def test_retrieval_loss_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        retrieval_loss(Tensor(_unit(rng, 3, 6)), Tensor(_unit(rng, 4, 6)), 0.1)


def test_temperature_is_positive_and_learnable():
    t = Temperature(0.07)
    assert t.value == pytest.approx(0.07, rel=1e-6)
    assert t.parameters()[0].requires_grad
    with pytest.raises(DimensionError):
        Temperature(0.0)


def _log_softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def test_info_nce_with_one_reference_is_zero(rng):
    loss = info_nce(Tensor(_unit(rng, 4)), Tensor(_unit(rng, 1, 4)), 0, 0.1, label_smoothing=0.1)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-7)


def test_retrieval_loss_matches_numpy_reference(rng):
    G, A = _unit(rng, 5, 8), _unit(rng, 5, 8)
    tau, eps = 0.1, 0.1
    S = G @ A.T / tau
    t = np.full((5, 5), eps / 5) + (1 - eps) * np.eye(5)
    want = 0.5 * (-(_log_softmax(S, 1) * t).sum() / 5 - (_log_softmax(S, 0) * t).sum() / 5)
    with precision(np.float64):
        got = float(retrieval_loss(Tensor(G), Tensor(A), tau, label_smoothing=eps).data)
    assert got == pytest.approx(want, abs=1e-6)


# ---------------- localization ----------------
def test_gaussian_target_peaks_at_gt():
    D = gaussian_target(32, (5, 20), 1.3)
    assert D.sum() == pytest.approx(1.0)
    assert np.unravel_index(np.argmax(D), D.shape) == (20, 5)


def test_gaussian_target_rejects_outside_pixel():
    with pytest.raises(DimensionError):
        gaussian_target(32, (32, 0), 1.0)


def test_level_weights_sum_to_one():
    w = level_weights(gaussian_target(32, (10, 12), 1.3), 8)
    assert w.shape == (8, 8)
    assert w.sum() == pytest.approx(1.0)
    assert np.unravel_index(np.argmax(w), w.shape) == (3, 2)


def test_localization_loss_is_cross_entropy():
    with precision(np.float64):
        D_gt = gaussian_target(8, (3, 4), 1.0)
        D = np.full((8, 8), 1.0 / 64)
        loss = float(localization_loss(Tensor(D), D_gt).data)
        best = float(localization_loss(Tensor(D_gt), D_gt).data)
    assert loss == pytest.approx(math.log(64))
    entropy = -np.sum(D_gt * np.log(D_gt))
    assert best == pytest.approx(entropy)
    assert best < loss


def test_localization_loss_requires_distributions():
    with pytest.raises(DimensionError):
        localization_loss(Tensor(np.full((4, 4), 0.1)), gaussian_target(4, (1, 1), 1.0))


def test_matching_loss_lower_when_gt_cell_scores_high(rng):
    D_gt = gaussian_target(16, (6, 10), 1.0)
    flat = [Tensor(np.zeros((2, 2))), Tensor(np.zeros((4, 4)))]
    peaked = [Tensor(np.zeros((2, 2))), Tensor(np.zeros((4, 4)))]
    peaked[0].data[1, 0] = 0.2
    peaked[1].data[2, 1] = 0.2
    a = float(matching_loss(flat, D_gt, 0.1).data)
    b = float(matching_loss(peaked, D_gt, 0.1).data)
    assert b < a


def test_gt_cell_floor_mapping():
    assert gt_cell((95, 0), 96, 12) == (0, 11)
    assert gt_cell((0, 48), 96, 12) == (6, 0)


def test_rerank_loss_small_when_descriptor_matches_gt_cell(rng):
    maps = [rng.normal(size=(2, 2, 16)) for _ in range(2)]
    pixels = [(2, 6), (7, 1)]
    descs = []
    for F, (x, y) in zip(maps, pixels):
        r, c = gt_cell((x, y), 8, 2)
        v = F[r, c] - F[r, c].mean()
        descs.append(Tensor(v / np.linalg.norm(v)))
    loss = rerank_loss(descs, [Tensor(F) for F in maps], pixels, 8, 0.01)
    assert float(loss.data) < 0.05


def test_rerank_loss_label_count_mismatch(rng):
    with pytest.raises(DimensionError):
        rerank_loss([Tensor(_unit(rng, 4))], [Tensor(rng.normal(size=(2, 2, 4)))] * 2, [(0, 0)], 8, 0.1)


def test_matching_loss_of_a_single_cell_is_zero():
    D_gt = gaussian_target(8, (3, 3), 1.0)
    assert float(matching_loss([Tensor(np.array([[2.5]]))], D_gt, 0.1).data) == pytest.approx(0.0, abs=1e-7)


def test_matching_loss_of_a_uniform_map_is_log_cells():
    D_gt = gaussian_target(16, (5, 9), 2.0)
    with precision(np.float64):
        loss = float(matching_loss([Tensor(np.zeros((4, 4)))], D_gt, 0.1).data)
    assert loss == pytest.approx(math.log(16), rel=1e-9)


def test_single_map_rerank_is_info_nce_over_its_cells(rng):
    with precision(np.float64):
        F = rng.normal(size=(4, 4, 6))
        q = _unit(rng, 6)
        got = float(rerank_loss([Tensor(q)], [Tensor(F)], [(5, 9)], 16, 0.07).data)
        x = F.reshape(16, 6)
        xc = x - x.mean(axis=1, keepdims=True)
        cells = xc / np.sqrt((xc ** 2).mean(axis=1, keepdims=True) + 1e-5)
        cells /= np.linalg.norm(cells, axis=1, keepdims=True)
        r, c = gt_cell((5, 9), 16, 4)
        want = float(info_nce(Tensor(q), Tensor(cells), r * 4 + c, 0.07).data)
    assert (r, c) == (2, 1)
    assert got == pytest.approx(want, abs=1e-6)


def test_batch_order_does_not_change_batch_losses(rng):
    G, A = _unit(rng, 6, 8), _unit(rng, 6, 8)
    maps = [rng.normal(size=(4, 4, 8)) for _ in range(6)]
    pixels = [(int(x), int(y)) for x, y in rng.integers(0, 16, size=(6, 2))]
    perm = rng.permutation(6)
    with precision(np.float64):
        r0 = float(retrieval_loss(Tensor(G), Tensor(A), 0.1).data)
        r1 = float(retrieval_loss(Tensor(G[perm]), Tensor(A[perm]), 0.1).data)
        k0 = float(rerank_loss([Tensor(g) for g in G], [Tensor(m) for m in maps], pixels, 16, 0.1).data)
        k1 = float(rerank_loss([Tensor(G[i]) for i in perm], [Tensor(maps[i]) for i in perm],
                               [pixels[i] for i in perm], 16, 0.1).data)
    assert r1 == pytest.approx(r0, abs=1e-10)
    assert k1 == pytest.approx(k0, abs=1e-10)


# ---------------- composite ----------------
def test_total_loss_applies_weights():
    parts = {k: Tensor(1.0) for k in ("L_D", "L_G", "L_M", "L_R")}
    total = total_loss(parts, LossWeights(100.0, 10.0, 1.0))
    assert float(total.data) == pytest.approx(112.0)
    assert breakdown(parts) == {"L_D": 1.0, "L_G": 1.0, "L_M": 1.0, "L_R": 1.0}


def test_total_loss_skips_missing_and_zero_weighted_parts():
    total = total_loss({"L_D": Tensor(2.0), "L_R": Tensor(5.0)}, LossWeights(1.0, 1.0, 0.0))
    assert float(total.data) == pytest.approx(2.0)


def test_total_loss_names_the_non_finite_component():
    with pytest.raises(NumericalError, match="L_G"):
        total_loss({"L_D": Tensor(1.0), "L_G": float("nan")})


def test_negative_weight_rejected():
    with pytest.raises(DimensionError):
        LossWeights(alpha=-1.0)
