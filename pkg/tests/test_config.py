import json

import pytest

from handfusion.config import ConfigError, RunConfig, from_dict, load_config, toy_config


def test_defaults_validate_and_roundtrip():
    cfg = RunConfig()
    assert cfg.lambda_ == 0.7 and cfg.mu_infer == 0.7
    back = from_dict(cfg.to_dict())
    assert back == cfg and back.digest() == cfg.digest()
    assert "lambda" in cfg.to_dict() and "lambda_" not in cfg.to_dict()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="lamda"):
        from_dict({"lamda": 0.5})
    with pytest.raises(ConfigError, match="stage2.rate"):
        from_dict({"stage2": {"rate": 1.0}})


@pytest.mark.parametrize("bad", [
    {"lambda": 1.5}, {"mu": -0.1}, {"stage2": {"epochs": -1}}, {"stage3": {"lr": 0}},
    {"backend": {"schedule": {"kind": "sigmoid"}}}, {"encoder": {"kind": "clip"}},
    {"eval": {"extractor": "inception"}}, {"train_size": 0}, {"stage2": "fast"},
])
def test_invalid_values_rejected(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_load_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lambda": 0.4, "stage3": {"epochs": 3}}))
    cfg = load_config(p, {"seed": 9, "stage3": {"lr": 1e-4}})
    assert (cfg.lambda_, cfg.seed, cfg.stage3.epochs, cfg.stage3.lr) == (0.4, 9, 3, 1e-4)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_digest_and_replace():
    a = toy_config()
    assert a.replace(lambda_=0.7).digest() == a.digest()
    assert a.replace(**{"lambda": 0.5}).lambda_ == 0.5
    assert a.replace(seed=1).digest() != a.digest()
    assert a.replace(mu=0.3).mu_infer == 0.3
