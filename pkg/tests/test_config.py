import json

import pytest

from cpl.config import SEED_ENV, ConfigError, default_seed, load_run_config, parse_run_config, write_effective_config


class TestParse:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        run = parse_run_config({})
        assert run.train.n_experts == 5 and run.train.k == 1 and run.train.m == 4
        assert run.train.seed == 0
        assert run.out_dir == "runs/default"

    def test_nested(self):
        run = parse_run_config({"backbone": {"base_channels": 8}, "ranges": {"noise": {"sigma": [25]}}, "alpha": 0, "seed": 3})
        assert run.train.backbone.base_channels == 8
        assert run.train.ranges == {"noise": {"sigma": [25]}}
        assert run.train.alpha == 0.0 and isinstance(run.train.alpha, float)

    @pytest.mark.parametrize(
        "data, where",
        [
            ({"learning_rate": 1e-3}, "learning_rate"),
            ({"backbone": {"width": 3}}, "backbone.width"),
            ({"ranges": {"fog": {}}}, "ranges.'fog'"),
            ({"ranges": {"noise": {"amount": [1]}}}, "ranges.noise.amount"),
        ],
    )
    def test_unknown_keys_named(self, data, where):
        with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
            parse_run_config(data)

    @pytest.mark.parametrize("data", [{"steps": "10"}, {"k": 1.5}, {"augment": 1}, {"tasks": "noise"}, {"out_dir": 3}])
    def test_wrong_types(self, data):
        with pytest.raises(ConfigError):
            parse_run_config(data)

    def test_invalid_values(self):
        with pytest.raises(ConfigError, match="m"):
            parse_run_config({"m": 5})
        with pytest.raises(ConfigError):
            parse_run_config({"eval_samples_per_task": 0})
        with pytest.raises(ConfigError):
            parse_run_config([])


class TestSeed:
    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "17")
        assert default_seed() == 17
        assert parse_run_config({}).train.seed == 17
        assert parse_run_config({"seed": 2}).train.seed == 2

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "abc")
        with pytest.raises(ConfigError):
            default_seed()


class TestFiles:
    def test_effective_config_round_trip(self, tmp_path):
        run = parse_run_config({"steps": 7, "seed": 1, "backbone": {"prompt_dim": 16}, "out_dir": "x"})
        p = write_effective_config(run, tmp_path / "sub" / "effective.json")
        again = load_run_config(p)
        assert again.train == run.train and again.out_dir == "x"
        # every default is spelled out
        assert "neg_stop_gradient" in json.loads(p.read_text())

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(ConfigError):
            load_run_config(p)
