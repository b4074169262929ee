from pathlib import Path

import pytest

from modroute.config import Config, load_config, parse_config, parse_override, render_config
from modroute.exceptions import ConfigError

DEFAULT_INI = Path(__file__).resolve().parent.parent / "configs" / "default.ini"


def test_defaults_follow_the_published_recipe():
    config = Config()
    assert config.optim.lr == 5e-5
    assert config.optim.weight_decay == 0.01
    assert config.model.soft_prompt_len == 10
    assert config.model.num_queries == 16
    assert config.schedule.lambda1 == 1.0
    assert config.schedule.lambda2 == 0.01
    assert config.router.temperature == 0.5
    assert config.router.strategy == "soft_merge"


def test_shipped_default_file_matches_builtin_defaults():
    assert load_config(DEFAULT_INI).to_dict() == Config().to_dict()


def test_render_and_parse_round_trip():
    config = Config().with_overrides(["optim.lr=1e-3", "router.strategy=hard_select"])
    assert parse_config(render_config(config)).to_dict() == config.to_dict()


def test_overrides_are_typed_and_last_wins():
    config = Config().with_overrides(
        ["optim.batch_size=8", "ablation.use_soft_prompt=no", "corpus.proportions=0.5,0.25,0.25", "optim.batch_size=4"]
    )
    assert config.optim.batch_size == 4
    assert config.ablation.use_soft_prompt is False
    assert config.corpus.proportions == (0.5, 0.25, 0.25)


@pytest.mark.parametrize("item", ["optim.lr", "lr=1", "a.b.c=1"])
def test_malformed_override(item):
    with pytest.raises(ConfigError):
        parse_override(item)


def test_unknown_key_reports_its_line():
    text = "[optim]\nlr = 1e-4\n\n# comment\nlearning_rate = 3\n"
    with pytest.raises(ConfigError, match="line 5") as info:
        parse_config(text)
    assert info.value.lineno == 5


def test_bad_value_reports_its_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("[model]\nseed = 1\nd_model = wide\n")


def test_unknown_section():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[trainer]\nsteps = 3\n")


def test_key_outside_section():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("lr = 3\n")


@pytest.mark.parametrize(
    "override",
    [
        "router.strategy=top_k",
        "router.temperature=0",
        "model.num_heads=3",
        "model.grid_tokens=7",
        "ablation.single_projector=3",
        "model.vocab_size=128",
        "corpus.proportions=0.5,0.5",
        "schedule.sharpness=0",
        "optim.router_lr=0",
        "optim.adapter_lr=-1e-4",
    ],
)
def test_validation_failures(override):
    with pytest.raises(ConfigError):
        Config().with_overrides([override]).validate()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.ini")


def test_ablation_switches_fold_into_the_loss_schedule():
    config = Config().with_overrides(["ablation.progressive_alignment=false", "ablation.use_load_balance=false"])
    schedule = config.loss_schedule()
    assert schedule.progressive is False
    assert schedule.lambda2 == 0.0
    assert Config().loss_schedule().lambda2 == 0.01


def test_dict_round_trip():
    config = Config().with_overrides(["corpus.noise=0.3", "eval.rolling_window=5"])
    assert Config.from_dict(config.to_dict()) == config
