"""Synthetic world generation, the planted-feature oracle, manifests and feature ingest."""

import json
from pathlib import Path

import numpy as np
import pytest

from geounify.dataset import MANIFEST, Dataset, export_features, ingest_features
from geounify.errors import DatasetError
from geounify.fixtures import FixtureSpec, block_permute, covering_tiles, generate_fixtures, oracle_check
from geounify.tensorio import sha256_file


def _digests(root: Path):
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------- generation ----------------
def test_generation_is_deterministic(tmp_path, tiny_cfg):
    spec = FixtureSpec.from_config(tiny_cfg)
    generate_fixtures(spec, tmp_path / "a")
    generate_fixtures(spec, tmp_path / "b")
    assert _digests(tmp_path / "a") == _digests(tmp_path / "b")


def test_refuses_non_empty_dir_without_force(tmp_path, tiny_cfg):
    spec = FixtureSpec.from_config(tiny_cfg)
    generate_fixtures(spec, tmp_path)
    with pytest.raises(DatasetError, match="--force"):
        generate_fixtures(spec, tmp_path)
    generate_fixtures(spec, tmp_path, force=True)


def test_labels_follow_the_world_layout(tiny_cfg, tiny_ds):
    spec = FixtureSpec.from_config(tiny_cfg)
    L = spec.tile_size_px
    assert len(tiny_ds.tiles) == spec.world_size_tiles
    assert len(tiny_ds.queries) == spec.world_size_tiles * spec.queries_per_tile
    for qid in tiny_ds.query_ids():
        q = tiny_ds.query(qid)
        x, y = q.gt_pixel
        assert L // 4 <= x < 3 * L // 4 and L // 4 <= y < 3 * L // 4
        assert x % spec.pixel_step == 0 and y % spec.pixel_step == 0
        assert q.positives == [q.gt_tile]
        assert len(q.semi_positives) <= 3
        gt_tag = tiny_ds.tile(q.gt_tile).geo_tag
        east, north = gt_tag.pixel_to_frame(x, y)
        for sid in q.semi_positives:
            assert tiny_ds.tile(sid).geo_tag.covers(east, north)


def test_one_test_query_per_tile(tiny_cfg, tiny_ds):
    assert len(tiny_ds.query_ids("test")) == tiny_cfg.fixture.world_size_tiles
    assert len(tiny_ds.query_ids("train")) == len(tiny_ds.queries) - len(tiny_ds.query_ids("test"))


def test_covering_tiles_include_the_owner():
    spec = FixtureSpec(world_size_tiles=9, tile_size_px=32, semi_positive_overlap=0.5)
    # stride 16: pixel (20, 20) of tile (0, 0) lies in tiles (0,0), (0,1), (1,0), (1,1)
    assert sorted(covering_tiles(spec, 20, 20)) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_adversarial_decoys(tmp_path, tiny_cfg):
    spec = FixtureSpec.from_config(tiny_cfg.replace({"fixture.adversarial": True}))
    generate_fixtures(spec, tmp_path)
    ds = Dataset.load(tmp_path)
    decoys = [t for t in ds.tiles.values() if t.decoy]
    assert len(decoys) == spec.world_size_tiles
    for d in decoys:
        src = ds.tile_array("t" + d.id[1:])
        img = ds.tile_array(d.id)
        assert np.allclose(np.sort(src, axis=None), np.sort(img, axis=None))
        assert not any(ds.tile(q.gt_tile).decoy for q in ds.queries.values())
        east, north = d.geo_tag.pixel_to_frame(16, 16)
        assert not any(t.geo_tag.covers(east, north) for t in ds.tiles.values() if not t.decoy)


def test_block_permute_keeps_pixels(rng):
    img = rng.normal(size=(16, 16, 3))
    out = block_permute(img, 8, np.random.default_rng(1))
    assert out.shape == img.shape
    assert np.allclose(np.sort(out, axis=None), np.sort(img, axis=None))


# ---------------- oracle ----------------
def test_oracle_decodes_every_gt_pixel(tiny_cfg, tiny_ds):
    assert oracle_check(tiny_ds, tiny_cfg) == []


# ---------------- manifest ----------------
def _copy_world(src: Path, dst: Path) -> Path:
    for p in src.rglob("*"):
        if p.is_file():
            t = dst / p.relative_to(src)
            t.parent.mkdir(parents=True, exist_ok=True)
            t.write_bytes(p.read_bytes())
    return dst


def test_checksum_mismatch_is_detected(tmp_path, tiny_root):
    root = _copy_world(tiny_root, tmp_path / "w")
    victim = next((root / "tiles").glob("*.gutn"))
    buf = bytearray(victim.read_bytes())
    buf[-1] ^= 0xFF
    victim.write_bytes(bytes(buf))
    with pytest.raises(DatasetError, match="checksum"):
        Dataset.load(root)
    Dataset.load(root, verify=False)


def test_absolute_and_relative_paths_mix(tmp_path, tiny_root):
    root = _copy_world(tiny_root, tmp_path / "w")
    doc = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    doc["tiles"][0]["image"] = str((root / doc["tiles"][0]["image"]).resolve())
    (root / MANIFEST).write_text(json.dumps(doc), encoding="utf-8")
    ds = Dataset.load(root)
    tid = doc["tiles"][0]["id"]
    assert ds.tile(tid).files["image"].is_absolute()
    assert ds.tile_array(tid).shape == (32, 32, 3)


def test_manifest_errors(tmp_path, tiny_root):
    with pytest.raises(DatasetError, match="no manifest"):
        Dataset.load(tmp_path)
    root = _copy_world(tiny_root, tmp_path / "w")
    doc = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    doc["queries"][0]["semi_positives"] = ["nowhere"]
    (root / MANIFEST).write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(DatasetError, match="unknown tile"):
        Dataset.load(root)


def test_unknown_ids(tiny_ds):
    with pytest.raises(DatasetError):
        tiny_ds.query("q_missing")
    with pytest.raises(DatasetError):
        tiny_ds.tile("t_missing")


# ---------------- features ----------------
def test_export_then_ingest(tmp_path, tiny_cfg, tiny_ds, tiny_model):
    path = export_features(tiny_ds, tiny_model, tmp_path / "feat")
    ds = ingest_features(path, tiny_cfg)
    assert ds.kind == "features"
    tid = ds.tile_ids()[0]
    pyr, _ = tiny_model.tile_features(ds, tid)
    direct, _ = tiny_model.encode_aerial(tiny_ds.tile_array(tid))
    assert np.array_equal(pyr.levels[2].data, direct.levels[2].data)


def test_ingest_names_the_mismatched_level(tmp_path, tiny_cfg, tiny_ds, tiny_model):
    path = export_features(tiny_ds, tiny_model, tmp_path / "feat")
    wider = tiny_cfg.replace({"model.level_channels": [16, 8, 8]})
    with pytest.raises(DatasetError, match="level 0"):
        ingest_features(path, wider)


def test_ingest_rejects_image_manifests(tiny_cfg, tiny_root):
    with pytest.raises(DatasetError, match="features manifest"):
        ingest_features(tiny_root, tiny_cfg)
