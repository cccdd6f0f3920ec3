import pytest
from hypothesis import given, strategies as st

from obrg.config import Config, load_config, parse_config
from obrg.errors import ConfigError


def test_empty_config_is_all_defaults():
    cfg = parse_config("")
    assert cfg == Config()
    assert cfg.data.n_train == 4096 and cfg.data.n_test == 512


def test_file_values_and_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[bitransformer]\ncross_attn_layers = (1, 3)\ncausal = true\n\n[trainer]\nstage1_mode = lora\n")
    cfg = load_config(path, {"trainer.stage2_lr": "5e-4"})
    assert cfg.bitransformer.cross_attn_layers == (1, 3)
    assert cfg.bitransformer.causal is True
    assert cfg.trainer.stage1_mode == "lora"
    assert cfg.trainer.stage2_lr == 5e-4


@pytest.mark.parametrize("text,overrides", [
    ("[backbone]\nd_model = 4\n", None),
    ("[nonsense]\nx = 1\n", None),
    ("", {"trainer.steps": "3"}),
    ("", {"trainer": "3"}),
    ("", {"backbone.n_layers": "two"}),
    ("", {"backbone.n_layers": "2.5"}),
    ("", {"bitransformer.causal": "1"}),
    ("", {"trainer.stage1_mode": "half"}),
    ("", {"bitransformer.cross_attn_layers": "(9,)"}),
    ("", {"generation.objective": "v"}),
    ("[backbone\n", None),
])
def test_strict_parsing_rejects(text, overrides):
    with pytest.raises(ConfigError):
        parse_config(text, overrides)


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_dumps_round_trips():
    cfg = parse_config("", {"bitransformer.causal": "true", "trainer.lora_targets": "('a.*',)"})
    assert parse_config(cfg.dumps()) == cfg


@given(st.integers(1, 10_000), st.integers(0, 2**31))
def test_fingerprint_tracks_shape_and_seed_keys(steps, seed):
    base = parse_config("")
    # training length does not change what a checkpoint holds
    assert parse_config("", {"trainer.stage2_steps": str(steps)}).fingerprint() == base.fingerprint()
    other = parse_config("", {"seeds.root": str(seed)})
    assert (other.fingerprint() == base.fingerprint()) == (seed == base.seeds.root)
