import json

import pytest

from adalign.config import DEFAULTS, RunConfig
from adalign.numerics.tensor import ConfigError


def test_defaults_and_file(tiny_config):
    cfg = RunConfig.load(tiny_config, env={})
    assert cfg["train"]["stage1_steps"] == 6 and cfg["run"]["seed"] == DEFAULTS["run"]["seed"]
    assert isinstance(cfg["train"]["lr1"], float)


def test_env_overrides_file(tiny_config):
    env = {"HINT_TRAIN_STAGE2_STEPS": "9", "HINT_WARMUP_MIX_MOTION": "2.5", "PATH": "/bin"}
    cfg = RunConfig.load(tiny_config, env=env)
    assert cfg["train"]["stage2_steps"] == 9 and cfg["warmup_mix"]["motion"] == 2.5


@pytest.mark.parametrize("text,match", [
    ("[bogus]\nx = 1\n", "section"),
    ("[train]\nbogus = 1\n", "train.bogus"),
    ("[train]\nbatch = many\n", "train.batch"),
    ("not ini at all\n", "tiny.ini"),
])
def test_bad_files(tmp_path, text, match):
    p = tmp_path / "tiny.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        RunConfig.load(p, env={})


def test_bad_env_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(None, env={"HINT_NOPE_X": "1"})
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "missing.ini", env={})


def test_hash_tracks_values(tmp_path):
    a = RunConfig()
    b = RunConfig({"run": {"seed": 1}})
    assert a.hash != b.hash and len(a.hash) == 16
    assert json.loads(a.to_json()) == DEFAULTS
    p = tmp_path / "round.ini"
    p.write_text(b.to_ini())
    assert RunConfig.load(p, env={}).hash == b.hash
