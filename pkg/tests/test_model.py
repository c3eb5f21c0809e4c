"""Toy encoder and the assembled model: shapes, branch isolation, gradient flow, persistence."""

import numpy as np
import pytest

from geounify.encoder import ToyEncoderParams, toy_encode
from geounify.errors import DatasetError, DimensionError, FormatError
from geounify.model import GeoUnifyModel, parameter_groups
from geounify.tensor import backward
from geounify.train import Sample, sample_losses


def _images(cfg, rng):
    fx, L = cfg.fixture, cfg.tile_size
    return rng.normal(size=(fx.ground_height, fx.ground_width, 3)), rng.normal(size=(L, L, 3))


def test_toy_encoder_stage_shapes(rng):
    params = ToyEncoderParams.init(3, [4, 6, 8], 5, rng)
    enc = toy_encode(rng.normal(size=(32, 32, 3)), params, "aerial")
    assert [s.shape for s in enc.stages] == [(16, 16, 4), (8, 8, 6), (4, 4, 8)]
    assert enc.F0.shape == enc.G.shape == (4, 4, 5)
    assert (enc.G.data >= 0).all()


def test_toy_encoder_rejects_bad_input(rng):
    params = ToyEncoderParams.init(3, [4], 5, rng)
    with pytest.raises(DimensionError):
        toy_encode(rng.normal(size=(8, 8, 4)), params, "aerial")
    with pytest.raises(DimensionError):
        toy_encode(rng.normal(size=(8, 8, 3)), params, "sideways")
    with pytest.raises(DimensionError):
        toy_encode(rng.normal(size=(9, 8, 3)), params, "ground")


def test_model_feature_shapes(tiny_cfg, tiny_model, rng):
    ground, aerial = _images(tiny_cfg, rng)
    pyr, G_a = tiny_model.encode_aerial(aerial)
    assert [t.shape for t in pyr.levels] == [(4, 4, 8), (8, 8, 8), (16, 16, 8)]
    F_g0, G_g = tiny_model.encode_ground(ground)
    assert F_g0.shape == G_g.shape == (2, 4, 8)
    assert tiny_model.ground_descriptor(G_g).shape == tiny_model.aerial_descriptor(G_a).shape == (8,)


def test_branches_do_not_share_weights(tiny_cfg, tiny_model, rng):
    _, aerial = _images(tiny_cfg, rng)
    before = tiny_model.encode_aerial(aerial)[0].levels[0].data.copy()
    for p in tiny_model.ground_enc.parameters():
        p.assign(p.value * 3.0)
    after = tiny_model.encode_aerial(aerial)[0].levels[0].data
    assert np.array_equal(before, after)
    names = set(parameter_groups(tiny_model))
    assert {"ground_enc", "aerial_enc", "ground_agg", "aerial_agg", "proj", "dec", "tau"} == names


@pytest.mark.parametrize("mode", ["global_only", "detail_only"])
def test_shared_stages_receive_gradient_from_each_path(tiny_cfg, rng, mode):
    cfg = tiny_cfg.replace({"train.mode": mode})
    model = GeoUnifyModel(cfg, np.random.default_rng(1))
    samples = []
    for px in [(8, 12), (20, 16)]:
        ground, aerial = _images(cfg, rng)
        F_g0, G_g = model.encode_ground(ground)
        pyr, G_a = model.encode_aerial(aerial)
        samples.append(Sample(F_g0, G_g, pyr, G_a, px))
    parts = sample_losses(model, samples, cfg)
    assert ("L_G" in parts) == (mode == "global_only")
    assert ("L_D" in parts) == (mode == "detail_only")
    model.zero_grad()
    total = parts.get("L_G") or parts.get("L_D")
    backward(total)
    assert np.abs(model.aerial_enc.stages[0].grad).sum() > 0
    assert np.abs(model.ground_enc.stages[0].grad).sum() > 0
    if mode == "global_only":
        assert np.abs(model.aerial_enc.s_head.grad).sum() > 0
        assert np.abs(model.aerial_enc.f_head.grad).sum() == 0
    else:
        assert np.abs(model.aerial_enc.f_head.grad).sum() > 0
        assert np.abs(model.aerial_enc.s_head.grad).sum() == 0


def test_save_load_round_trip(tmp_path, tiny_cfg, tiny_model):
    path = tiny_model.save(tmp_path / "model.npz")
    back = GeoUnifyModel.load(path, tiny_cfg)
    a, b = tiny_model.state(), back.state()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_load_reports_missing_parameters(tmp_path, tiny_cfg, tiny_model):
    state = tiny_model.state()
    state.pop(next(iter(state)))
    path = tmp_path / "partial.npz"
    np.savez(path, **state)
    with pytest.raises(FormatError, match="lacks parameters"):
        GeoUnifyModel.load(path, tiny_cfg)
    with pytest.raises(DatasetError):
        GeoUnifyModel.load(tmp_path / "absent.npz", tiny_cfg)


def test_separate_temperatures(tiny_cfg):
    model = GeoUnifyModel(tiny_cfg.replace({"loss.shared_tau": False}), np.random.default_rng(0))
    assert model.tau("retrieval") is not model.tau("matching")
    shared = GeoUnifyModel(tiny_cfg, np.random.default_rng(0))
    assert shared.tau("retrieval") is shared.tau("rerank")
