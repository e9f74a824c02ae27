import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adalign import command_labeler as cl
from adalign.numerics.rng import Rng
from adalign.scene_sim import (CATEGORIES, NoiseConfig, SceneConfig, SceneParseError, TokenSpec,
                               bev_cell, decode_motion, decode_track, generate_scene,
                               generate_scenes, load_scenes, mock_ad_inference, save_scenes)


def test_same_seed_same_scenes():
    a = generate_scenes(Rng(5), 20)
    b = generate_scenes(Rng(5), 20)
    assert a == b
    assert a != generate_scenes(Rng(6), 20)


def test_empty_scene_has_plan():
    s = generate_scene(Rng(0), SceneConfig(min_objects=0, max_objects=0))
    assert s.objects == []
    assert len(s.ego_plan) == 6
    tk = mock_ad_inference(s, Rng(1))
    assert tk.n_det == 0 and tk.track.shape == (0, 32) and tk.motion.shape == (0, 32)
    bev = tk.bev.copy()
    i, j = bev_cell((0.0, 0.0), TokenSpec())
    assert bev[i, j, 8] == 1.0
    bev[i, j, 8] = 0.0
    assert not bev.any()


def test_straight_plans_label_forward():
    scenes = generate_scenes(Rng(11), 1000, SceneConfig(scenario="straight"))
    assert all(cl.directional_command(s.trajectory()) == cl.FORWARD for s in scenes)


def test_zero_noise_prediction_is_ground_truth():
    for s in generate_scenes(Rng(2), 30):
        pred = mock_ad_inference(s, Rng(9), NoiseConfig.zero()).ad_pred
        assert pred.categories == [o.category for o in s.objects]
        assert np.array_equal(pred.positions, np.array([o.position for o in s.objects]).reshape(-1, 2))
        assert np.array_equal(pred.velocities, np.array([o.velocity for o in s.objects]).reshape(-1, 2))
        assert np.array_equal(pred.plan, s.plan_array())


def test_drop_noise_never_adds_objects():
    noise = NoiseConfig(p_drop=0.5)
    for s in generate_scenes(Rng(3), 50):
        assert mock_ad_inference(s, Rng(4), noise).n_det <= len(s.objects)


def test_tokens_decode_back_to_prediction():
    spec = TokenSpec()
    s = generate_scene(Rng(8), SceneConfig(min_objects=5))
    tk = mock_ad_inference(s, Rng(1))
    nc = len(CATEGORIES)
    for k in range(tk.n_det):
        vals = decode_track(tk.track[k], spec)
        assert np.abs(vals[nc:nc + 2] - tk.ad_pred.positions[k]).max() < 1e-6
        assert CATEGORIES[int(np.argmax(vals[:nc]))] == tk.ad_pred.categories[k]
        mv = decode_motion(tk.motion[k], spec)
        assert np.abs(mv[-2:] - tk.ad_pred.velocities[k]).max() < 1e-6


def test_roundtrip_bit_exact(tmp_path):
    scenes = generate_scenes(Rng(12), 100)
    p = tmp_path / "s.jsonl"
    save_scenes(p, scenes, meta={"seed": 12})
    back, meta = load_scenes(p, with_meta=True)
    assert back == scenes and meta == {"seed": 12}


def test_empty_file_roundtrip(tmp_path):
    p = tmp_path / "e.jsonl"
    save_scenes(p, [])
    assert p.read_text() == "" and load_scenes(p) == []


def test_truncated_line_names_line(tmp_path):
    p = tmp_path / "t.jsonl"
    save_scenes(p, generate_scenes(Rng(1), 3))
    text = p.read_text()
    p.write_text(text[:-20])
    with pytest.raises(SceneParseError, match=r"\.jsonl:3:") as info:
        load_scenes(p)
    assert info.value.lineno == 3


def test_bad_category_rejected(tmp_path):
    p = tmp_path / "c.jsonl"
    save_scenes(p, [generate_scene(Rng(0), SceneConfig(min_objects=1))])
    rec = json.loads(p.read_text())
    rec["objects"][0]["category"] = "tram"
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(SceneParseError, match="tram"):
        load_scenes(p)


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(min_objects=3, max_objects=2)
    with pytest.raises(ValueError):
        SceneConfig(t_plan=3)
    with pytest.raises(ValueError):
        SceneConfig(scenario="reverse")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generated_scenes_are_in_range(seed):
    cfg = SceneConfig()
    s = generate_scene(Rng(seed), cfg)
    assert cfg.min_objects <= len(s.objects) <= cfg.max_objects
    for o in s.objects:
        assert o.category in CATEGORIES
        assert cfg.x_range[0] <= o.position[0] <= cfg.x_range[1]
        assert cfg.y_range[0] <= o.position[1] <= cfg.y_range[1]
        assert len(o.past_track) == cfg.t_past and len(o.future_traj) == cfg.t_future
