import dataclasses
from pathlib import Path

import pytest

from fedsim.config import ConfigError, parse_config, parse_config_text, serialize_config, with_preset
from fedsim.models import ModelKind
from fedsim.orchestrator import AggregationMode, DataSource
from fedsim.selection import Policy


def test_defaults():
    cfg = parse_config_text("")
    assert cfg.selection.policy is Policy.RANDOM
    assert cfg.aggregation.mode is AggregationMode.FEDAVG
    assert cfg.selection.fraction == 0.2
    assert (cfg.selection.alpha, cfg.selection.beta) == (2, 0.7)
    assert cfg.train.batch_size == 20 and cfg.train.epochs == 1
    assert cfg.train.learning_rate == 0.01 and cfg.decay == 0.995
    assert cfg.aggregation.min_retained_fraction == 0.7
    assert cfg.aggregation.eval_batch_size == 128
    assert cfg.rounds == 200
    assert cfg.data.num_nodes == 50 and cfg.data.samples_per_node == 200
    assert cfg.model.kind is ModelKind.MLR


def test_empty_policy_section_is_random_fedavg():
    cfg = parse_config_text("[policy]\n")
    assert cfg.selection.policy is Policy.RANDOM
    assert cfg.aggregation.mode is AggregationMode.FEDAVG


def test_fedpns_implies_optimal_aggregation():
    cfg = parse_config_text("[policy]\nname = fedpns\n")
    assert cfg.aggregation.mode is AggregationMode.OPTIMAL
    with pytest.raises(ConfigError, match="optimal"):
        parse_config_text("[policy]\nname = fedpns\n[aggregation]\nmode = fedavg\n")


def test_values_are_applied():
    cfg = parse_config_text(
        "[data]\nsource = synthetic_skew\nnum_nodes = 20\nfeature_dim = 8\n"
        "[model]\nkind = mlp\nhidden_dim = 16\n"
        "[train]\nepochs = 3\ndecay = 0.99\n"
        "[experiment]\nrounds = 7\ndivergence = yes\ngrad_norms = off\n"
    )
    assert cfg.data.source is DataSource.SYNTHETIC_SKEW and cfg.data.num_nodes == 20
    assert cfg.model.input_dim == 8 and cfg.model.hidden_dim == 16
    assert cfg.train.epochs == 3 and cfg.decay == 0.99
    assert cfg.rounds == 7 and cfg.divergence and not cfg.track_grad_norms


def test_alpha_zero_rejected():
    with pytest.raises(ConfigError, match="alpha"):
        parse_config_text("[policy]\nalpha = 0\n")


def test_unknown_key_and_section():
    with pytest.raises(ConfigError, match="unknown key 'colour'"):
        parse_config_text("[train]\ncolour = red\n")
    with pytest.raises(ConfigError, match=r"unknown section \[extra\]"):
        parse_config_text("[extra]\na = 1\n")


def test_parse_error_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config_text("[train]\nepochs = 2\nthis line is not a key value pair\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("epochs = 2\n")
    with pytest.raises(ConfigError, match="line 3"):
        parse_config_text("[train]\nepochs = 1\nepochs = 2\n")


def test_invalid_value_names_field():
    with pytest.raises(ConfigError, match="epochs"):
        parse_config_text("[train]\nepochs = two\n")
    with pytest.raises(ConfigError, match="divergence"):
        parse_config_text("[experiment]\ndivergence = maybe\n")


def test_rounds_zero_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("[experiment]\nrounds = 0\n")


@pytest.mark.parametrize("text", [
    "",
    "[policy]\nname = fedpns\nalpha = 3\nbeta = 0.25\nprobability_floor = 0.001\n",
    "[data]\nsource = synthetic_skew\nlabels_per_node = 1\n[policy]\nname = bn2\n",
    "[train]\nlearning_rate = 0.1\n[experiment]\nseed = 4\ndivergence = true\n",
])
def test_round_trip(text, tmp_path):
    cfg = parse_config_text(text)
    path = tmp_path / "c.ini"
    path.write_text(serialize_config(cfg))
    again = parse_config(path)
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_presets():
    cfg = parse_config_text("")
    assert with_preset(cfg, "fedpns").aggregation.mode is AggregationMode.OPTIMAL
    assert with_preset(cfg, "bn2").selection.policy is Policy.BN2
    assert dataclasses.replace(with_preset(cfg, "fedavg")) == cfg
    with pytest.raises(ConfigError):
        with_preset(cfg, "nope")


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.ini")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = parse_config(path)
    assert cfg.rounds == 200
