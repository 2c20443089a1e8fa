import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmtlab import config as cfgmod
from vmtlab.config import ConfigError, ExperimentConfig


def test_roundtrip_default():
    cfg = ExperimentConfig()
    assert cfgmod.parse(cfgmod.serialize(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(
    lr=st.floats(1e-6, 1.0),
    lam=st.floats(0.0, 10.0),
    eps=st.floats(0.0, 3.0),
    iters=st.integers(0, 10_000),
    seed=st.integers(0, 2**31),
    terms=st.sampled_from(["", "Lc", "Lc,Lv", "Lc,Lm", "Lc,Lv,Lm"]),
    rot=st.floats(0.0, 359.0),
    xi=st.one_of(st.none(), st.floats(1e-9, 1e-3)),
)
def test_roundtrip_random(lr, lam, eps, iters, seed, terms, rot, xi):
    cfg = (ExperimentConfig()
           .update("optim", lr=lr)
           .update("loss", lambda_t=lam, epsilon=eps, xi=xi)
           .update("train", iterations=iters, seed=seed)
           .update("mask", terms=terms)
           .update("data", rotation=rot, translation=(0.5, -1.0)))
    assert cfgmod.parse(cfgmod.serialize(cfg)) == cfg


def test_partial_file_uses_defaults():
    cfg = cfgmod.parse("[loss]\nlambda_t = 0.5\n")
    assert cfg.loss.lambda_t == 0.5
    assert cfg.train == ExperimentConfig().train


def test_unknown_key_lists_accepted():
    with pytest.raises(ConfigError, match=r"loss\.lamda_t.*lambda_t"):
        cfgmod.parse("[loss]\nlamda_t = 0.5\n")


def test_unknown_section():
    with pytest.raises(ConfigError, match="optimiser"):
        cfgmod.parse("[optimiser]\nlr = 0.1\n")


def test_negative_weight_names_constraint():
    with pytest.raises(ConfigError, match="lambda_t must be >= 0"):
        cfgmod.parse("[loss]\nlambda_t = -1\n")


def test_bad_value():
    with pytest.raises(ConfigError, match="train.iterations"):
        cfgmod.parse("[train]\niterations = many\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.cfg"):
        cfgmod.load(tmp_path / "nope.cfg")


def test_hash_changes_with_content():
    a = ExperimentConfig()
    assert a.hash() == ExperimentConfig().hash()
    assert a.hash() != a.with_seed(1).hash()
