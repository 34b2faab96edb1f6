import pytest
from hypothesis import given, settings, strategies as st

from dualfair.config import ExperimentConfig, TrainConfig
from dualfair.errors import ParseError, SpecError


def test_text_roundtrip_default():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


@given(st.floats(1e-6, 1.0), st.floats(0, 1e3), st.integers(1, 64), st.booleans(),
       st.sampled_from(["layer-aware", "instance-aware", "combined"]), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_text_roundtrip_random(lr, alpha, k, flag, sharing, rho):
    cfg = ExperimentConfig()
    cfg.train.lr, cfg.train.alpha, cfg.train.prompt_len = lr, alpha, k
    cfg.train.use_hyper, cfg.train.sharing, cfg.data.rho = flag, sharing, rho
    cfg.out_dir = "runs/x y"
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_comments_and_types():
    cfg = ExperimentConfig.from_text("# hi\ntrain.epochs = 3  # three\ntrain.lr = 1\ndata.rho=0.5\n")
    assert cfg.train.epochs == 3 and cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)
    assert cfg.data.rho == 0.5


@pytest.mark.parametrize("text,line", [
    ("train.bogus = 1", 1),
    ("\n\ntrain.epochs = 1.5", 3),
    ("nonsense", 1),
    ("train.use_dis = 3", 1),
    ("model.x = 1", 1),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError, match=f"line {line}"):
        ExperimentConfig.from_text(text)


def test_env_seed_override(tmp_path, monkeypatch):
    p = tmp_path / "c.txt"
    p.write_text("train.seed = 3\n")
    assert ExperimentConfig.load(p).train.seed == 3
    monkeypatch.setenv("FAIRPROMPT_SEED", "11")
    assert ExperimentConfig.load(p).train.seed == 11


def test_validation():
    TrainConfig().validate()
    for bad in (dict(lr=0), dict(beta=1.5), dict(sharing="x"), dict(instance_layer=1),
                dict(instance_layer=9), dict(alpha=-1), dict(preset="huge")):
        with pytest.raises(SpecError):
            TrainConfig(**bad).validate()


def test_presets():
    assert TrainConfig().dims().d_v == 32
    p = TrainConfig(preset="paper").dims()
    assert (p.d_v, p.d_vl, p.n_vis_layers, p.idx_in, p.idx_dim, p.adapter_hidden) == (768, 512, 12, 128, 32, 24)
