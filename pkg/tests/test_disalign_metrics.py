import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adalign import align_tasks as at
from adalign import disalign_metrics as dm
from adalign.numerics.rng import Rng
from adalign.scene_sim import CATEGORIES, NoiseConfig, generate_scenes, mock_ad_inference


def test_parse_examples():
    assert dm.parse("position", "(x, y) = (12.3, -4.5)") == (12.3, -4.5)
    assert dm.parse("position", "  (x, y) = (0.0, 1.0)\n") == (0.0, 1.0)
    c = dm.parse("counting", "car: 3, pedestrian: 1, bus: 0, truck: 0, bicycle: 0, traffic_cone: 0")
    assert c.counts == (3, 1, 0, 0, 0, 0) and not c.flagged
    bad = dm.parse("position", "the scene is nice")
    assert isinstance(bad, dm.ParseFailure) and not bad and bad.text == "the scene is nice"


def test_parse_is_strict():
    for task, text in [("position", "(x, y) = (12.34, -4.5)"), ("position", "(vx, vy) = (1.0, 2.0)"),
                       ("motion", "(x, y) = (1.0, 2.0)"), ("planning", "(1.0, 2.0); (3.0, 4.0)"),
                       ("planning", "(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0)"),
                       ("counting", "car: 1, car: 2"), ("counting", "tram: 1"), ("counting", "")]:
        assert isinstance(dm.parse(task, text), dm.ParseFailure), text


def test_missing_category_counts_zero_and_flags():
    c = dm.parse("counting", "car: 2, bus: 1")
    assert c.counts == (2, 0, 1, 0, 0, 0) and c.missing == ("pedestrian", "truck", "bicycle", "traffic_cone")


def test_counting_oracles():
    assert dm.counting_disalignment([3, 1], [1, 1]) == pytest.approx(math.sqrt(2), abs=1e-9)
    assert dm.counting_disalignment([0] * 6, [1] * 6) == 1.0
    assert dm.counting_disalignment([2, 5], [2, 5]) == 0.0
    with pytest.raises(ValueError):
        dm.counting_disalignment([1, 2], [1])


def test_distance_oracles():
    assert dm.position_disalignment((0, 0), (3, 4)) == 5.0
    assert dm.motion_disalignment((1, 1), (1, 1)) == 0.0
    s = at.AlignmentSample("position", "", "", (0.0, 0.0), 0)
    rep = dm.report_from([s, s], ["(x, y) = (0.0, 0.0)", "(x, y) = (3.0, 4.0)"])
    assert rep.pd == 2.5


def test_planning_uses_fourth_point_only():
    a = [(1, 0), (2, 0), (5, 0), (8, 0)]
    assert dm.planning_disalignment(a, [(1, 0), (2, 0), (5, 0), (8, 1)]) == 1.0
    assert dm.planning_disalignment(a, [(0, 9), (9, 9), (-3, 2), (8, 0)]) == 0.0
    with pytest.raises(ValueError):
        dm.planning_disalignment(a[:3], a)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50),
       st.floats(-20, 20), st.floats(-20, 20))
def test_distance_translation_invariant(ax, ay, bx, by, tx, ty):
    d = dm.position_disalignment((ax, ay), (bx, by))
    assert d >= 0
    assert dm.position_disalignment((ax + tx, ay + ty), (bx + tx, by + ty)) == pytest.approx(d, abs=1e-9)


@pytest.fixture(scope="module")
def eval_tokens():
    scenes = generate_scenes(Rng(10**6), 200)
    return [mock_ad_inference(s, Rng(3).child(i), NoiseConfig()) for i, s in enumerate(scenes)]


def test_perfect_oracle_is_within_quantization(eval_tokens):
    rep = dm.evaluate(dm.oracle_answers, eval_tokens, Rng(0))
    for k, v in rep.metrics().items():
        assert 0.0 <= v <= 0.05, k
    assert rep.cd == 0.0
    assert all(r == 0.0 for r in rep.parse_failure_rate.values())
    assert sum(rep.n_samples.values()) > 600


def test_all_zero_answers_brute_force_cd(eval_tokens):
    zeros = ", ".join(f"{c}: 0" for c in CATEGORIES)
    rep = dm.evaluate(lambda smp, tk: [zeros if s.task == "counting" else "" for s in smp],
                      eval_tokens, Rng(0))
    brute = np.mean([math.sqrt(np.mean(np.square(t.ad_pred.counts()))) for t in eval_tokens])
    assert rep.cd == pytest.approx(brute, abs=1e-12)
    assert rep.parse_failure_rate["position"] == 1.0 and math.isnan(rep.pd)


def test_report_is_reproducible(eval_tokens):
    a = dm.report_json(dm.evaluate(dm.oracle_answers, eval_tokens, Rng(0)))
    assert a == dm.report_json(dm.evaluate(dm.oracle_answers, eval_tokens, Rng(0)))


def test_parse_failures_are_excluded_from_means():
    s = at.AlignmentSample("motion", "", "", (1.0, 1.0), 0)
    rep = dm.report_from([s, s, s], ["(vx, vy) = (1.0, 2.0)", "???", "(vx, vy) = (1.0, 1.0)"])
    assert rep.md == 0.5 and rep.n_parsed["motion"] == 2
    assert rep.parse_failure_rate["motion"] == pytest.approx(1 / 3)
