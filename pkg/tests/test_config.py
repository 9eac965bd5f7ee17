import pytest

from terraseg.config import ConfigError, RunConfig, parse_config, parse_text


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("", encoding="utf-8")
    cfg = parse_config(p)
    t = cfg.train_config()
    assert (t.batch_size, t.lr, t.momentum, t.weight_decay) == (4, 0.001, 0.9, 0.0001)
    assert cfg.threshold == 190


def test_flag_beats_file_beats_default(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlr = 0.01\n", encoding="utf-8")
    assert parse_config(p).train_config().lr == 0.01
    assert parse_config(p, {"train.lr": "0.02"}).train_config().lr == 0.02


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError) as exc:
        parse_text("# comment\nlr = 0.01\nbatchsize = 4\n")
    assert exc.value.key == "batchsize" and exc.value.line == 3
    assert "batchsize" in str(exc.value) and "line 3" in str(exc.value)


def test_unparsable_value():
    with pytest.raises(ConfigError) as exc:
        parse_text("[train]\nepochs = many\n")
    assert exc.value.key == "epochs" and exc.value.line == 2


def test_unknown_section():
    with pytest.raises(ConfigError):
        parse_text("[nope]\nx = 1\n")


def test_bare_key_resolves_to_unique_section():
    cfg = parse_text("lr = 0.5\nseed = 3\n")
    assert cfg.get("train.lr") == 0.5 and cfg.seed == 3


def test_ambiguous_bare_key():
    with pytest.raises(ConfigError, match="ambiguous"):
        parse_text("batch_size = 8\n")


def test_comments_and_sections():
    cfg = parse_text("[augment]  # crops\nrotation_range_deg = 10, 20  # deg\n[baseline]\nwidths = 8, 16\n")
    assert cfg.augment_spec().rotation_range_deg == (10.0, 20.0)
    assert cfg.get("baseline.widths") == (8, 16)


def test_frozen_snapshot_round_trips(tmp_path):
    cfg = parse_config(None, {"train.lr": "0.0125", "run.seed": "9", "augment.n_rotations": "3"}, command="train")
    path = cfg.freeze(tmp_path)
    again = parse_config(path)
    assert again.sections == cfg.sections and again.command == "train"
    assert again.dumps() == cfg.dumps()


def test_invalid_range_rejected():
    with pytest.raises(ValueError):
        parse_config(None, {"train.momentum": "1.5"})


def test_unknown_command():
    with pytest.raises(ConfigError):
        parse_config(None, command="fly")


def test_defaults_are_independent():
    a, b = RunConfig(), RunConfig()
    a.set("train.lr", "0.3")
    assert b.get("train.lr") == 0.001
