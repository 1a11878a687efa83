"""Flat key=value config parsing and validation."""

import pytest

from fednorm.config import ConfigError, dump_config, parse_config, validate


def _write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_parse_defaults_and_overrides(tmp_path):
    cfg = parse_config(_write(tmp_path, """
        # a comment line
        dataset = synthetic
        norm = layer
        total_rounds = 42
        learning_rate = 0.05
    """))
    assert cfg.dataset == "synthetic"
    assert cfg.total_rounds == 42
    assert cfg.learning_rate == 0.05
    assert cfg.batch_size == 64  # untouched default


def test_unknown_key_rejected_with_suggestions(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(_write(tmp_path, "learning_rte = 0.1\n"))
    assert "learning_rte" in str(exc.value)
    assert "learning_rate" in str(exc.value)  # lists valid keys


def test_bad_norm_kind_rejected(tmp_path):
    with pytest.raises((ConfigError, ValueError)) as exc:
        cfg = parse_config(_write(tmp_path, "norm = batchnorm2\n"))
        validate(cfg)
    assert "batch" in str(exc.value)


def test_typed_coercion_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path, "total_rounds = soon\n"))


def test_dump_round_trips(tmp_path):
    cfg = parse_config(_write(tmp_path, "norm = group4\nseed = 17\nthreads = 2\n"))
    out = tmp_path / "resolved.cfg"
    dump_config(cfg, out)
    again = parse_config(out)
    assert again == cfg
