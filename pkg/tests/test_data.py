from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cscl import data
from cscl.config import GenConfig, ValidationError
from cscl.data import (STYLE_DIMS, TOPIC_DIMS, MediaPair, collate, generate_dataset, read_jsonl,
                       unmix, write_dataset, write_jsonl)
from cscl.heads import derive_patch_labels

SMALL = dict(grid=4, text_len=8, min_text_len=6, d_raw=24)


def small(**kw) -> GenConfig:
    return GenConfig(**{**SMALL, **kw})


def test_all_genuine():
    for p in generate_dataset(small(n_train=50, genuine_fraction=1.0)):
        assert p.is_fake == 0 and p.types == [] and p.face_box is None
        assert p.token_labels.sum() == 0 and p.patch_labels.sum() == 0


def test_same_seed_byte_identical_files(tmp_path):
    cfg = small(n_train=20, n_test=5)
    a = write_dataset(cfg, tmp_path / "a")
    b = write_dataset(cfg, tmp_path / "b")
    assert a == b
    for split in ("train", "test"):
        assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == (tmp_path / "b" / f"{split}.jsonl").read_bytes()
    c = write_dataset(small(n_train=20, n_test=5, seed=1), tmp_path / "c")
    assert c["files"]["train"]["sha256"] != a["files"]["train"]["sha256"]


def test_shards_compose():
    cfg = small(n_train=12)
    whole = generate_dataset(cfg)
    parts = generate_dataset(cfg, start=0, stop=5) + generate_dataset(cfg, start=5)
    assert [p.to_json() for p in whole] == [p.to_json() for p in parts]


def test_genuine_fraction_concentration():
    cfg = GenConfig(n_train=10000, genuine_fraction=0.34, grid=2, text_len=4, min_text_len=3, d_raw=20)
    pairs = generate_dataset(cfg)
    frac = np.mean([p.is_fake == 0 for p in pairs])
    assert abs(frac - 0.34) < 0.02


def test_jsonl_roundtrip_bit_exact(tmp_path):
    pairs = generate_dataset(small(n_train=15))
    write_jsonl(pairs, tmp_path / "x.jsonl")
    back = read_jsonl(tmp_path / "x.jsonl")
    for a, b in zip(pairs, back):
        assert a.patch_features.tobytes() == b.patch_features.tobytes()
        assert a.token_features.tobytes() == b.token_features.tobytes()
        assert a.to_json() == b.to_json()


def test_read_rejects_invalid_pair(tmp_path):
    pair = generate_dataset(small(n_train=1, genuine_fraction=0.0, type_weights=[1, 0, 0, 0]))[0]
    obj = json.loads(pair.to_json())
    obj["face_box"] = None
    (tmp_path / "bad.jsonl").write_text(json.dumps(obj) + "\n")
    with pytest.raises(ValidationError):
        read_jsonl(tmp_path / "bad.jsonl")


def test_config_validation():
    with pytest.raises(ValidationError):
        GenConfig(genuine_fraction=1.5).validate()
    with pytest.raises(ValidationError):
        GenConfig(d_raw=12).validate()
    with pytest.raises(ValidationError):
        GenConfig.from_dict({"n_train": 5, "bogus": 1})


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.floats(0, 1))
def test_every_pair_satisfies_invariants(seed, grid, both):
    cfg = GenConfig(n_train=8, grid=grid, text_len=6, min_text_len=2, d_raw=22, both_fraction=both, seed=seed)
    for p in generate_dataset(cfg):
        p.validate()
        assert p.patch_labels.tolist() == derive_patch_labels(p.face_box, grid).tolist()
        if p.face_box is not None:
            cx, cy, w, h = p.face_box
            assert w > 0 and h > 0
            assert 0 <= cx - w / 2 and cx + w / 2 <= 1 and 0 <= cy - h / 2 and cy + h / 2 <= 1
            assert p.patch_labels.sum() > 0
        assert not p.token_labels[~p.token_mask].any()
        assert not p.token_features[~p.token_mask].any()


def image_fakes(n=1000, **kw):
    cfg = GenConfig(n_train=n, genuine_fraction=0.0, type_weights=[0.5, 0.5, 0, 0], both_fraction=0.0,
                    grid=8, text_len=8, min_text_len=8, d_raw=32, **kw)
    return cfg, generate_dataset(cfg)


def test_face_box_patches_come_from_another_source():
    cfg, pairs = image_fakes()
    inside, outside = [], []
    for p in pairs:
        style = unmix(cfg, p.patch_features)[:, :STYLE_DIMS]
        lab = p.patch_labels.astype(bool)
        centre = style[~lab].mean(axis=0)
        dist = np.linalg.norm(style - centre, axis=1)
        inside.append(dist[lab].mean())
        outside.append(dist[~lab].mean())
    res = stats.ttest_ind(inside, outside, equal_var=False)
    assert res.statistic > 0 and res.pvalue < 1e-6


def test_text_swap_count_on_eight_tokens():
    cfg = GenConfig(n_train=400, genuine_fraction=0.0, type_weights=[0, 0, 1, 0], both_fraction=0.0,
                    grid=2, text_len=8, min_text_len=8, d_raw=20)
    counts = {int(p.token_labels.sum()) for p in generate_dataset(cfg)}
    assert counts <= {2, 3, 4, 5} and {2, 5} <= counts


@pytest.mark.parametrize("kind", ["TS", "TA"])
def test_text_labels_mark_exactly_the_rewritten_tokens(kind):
    cfg = small()
    world = data._world(cfg)
    for i in range(100):
        rng = np.random.default_rng([99, i])
        pair, latent = data._genuine(cfg, world, rng)
        before = pair.token_features.copy()
        data.plant_text_manipulation(cfg, world, pair, latent, kind, rng)
        changed = np.any(before != pair.token_features, axis=1)
        assert changed.tolist() == pair.token_labels.astype(bool).tolist()
        n = int(pair.token_mask.sum())
        assert 1 <= pair.token_labels.sum() <= n - 1


def test_plant_rejects_wrong_kind():
    cfg = small()
    world = data._world(cfg)
    rng = np.random.default_rng(0)
    pair, latent = data._genuine(cfg, world, rng)
    with pytest.raises(ValueError):
        data.plant_text_manipulation(cfg, world, pair, latent, "FS", rng)
    with pytest.raises(ValueError):
        data.plant_image_manipulation(cfg, world, pair, latent, "TA", rng)


def test_swapped_tokens_disagree_with_image_topic():
    cfg = GenConfig(n_train=1000, genuine_fraction=0.0, type_weights=[0, 0, 1, 0], both_fraction=0.0,
                    grid=4, text_len=12, min_text_len=8, d_raw=32)
    replaced, kept = [], []
    for p in generate_dataset(cfg):
        img_topic = unmix(cfg, p.patch_features)[:, STYLE_DIMS:STYLE_DIMS + TOPIC_DIMS].mean(axis=0)
        tok = unmix(cfg, p.token_features[p.token_mask])[:, STYLE_DIMS:STYLE_DIMS + TOPIC_DIMS]
        cos = tok @ img_topic / (np.linalg.norm(tok, axis=1) * np.linalg.norm(img_topic))
        lab = p.token_labels[p.token_mask].astype(bool)
        replaced.append(cos[lab].mean())
        kept.append(cos[~lab].mean())
    assert np.mean(replaced) < np.mean(kept) - 0.1


def test_collate_shapes():
    pairs = generate_dataset(small(n_train=5))
    b = collate(pairs)
    assert b.patches.shape == (5, 16, 24) and b.tokens.shape == (5, 8, 24)
    assert b.types.shape == (5, 4) and b.boxes.shape == (5, 4)
    assert len(b) == 5
