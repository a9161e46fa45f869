import pytest

from disentangle.config import ConfigError, RunConfig, load_config, parse_config, stage_seed


def test_defaults_round_trip():
    cfg = RunConfig()
    assert parse_config(cfg.to_text()) == cfg


def test_overrides_are_typed():
    cfg = parse_config(
        "[run]\nseed = 7\nsplit_mode = context\n[lm]\nlr = 1e-3\n[featurizer]\nlayers = 1, 3\nks = 2,4\n"
        "l1_on_logits = yes\n"
    )
    assert cfg.run.seed == 7 and cfg.run.split_mode == "context"
    assert cfg.lm.lr == 1e-3
    assert cfg.featurizer.layer_grid == [1, 3] and cfg.featurizer.k_grid == [2, 4]
    assert cfg.featurizer.l1_on_logits is True


@pytest.mark.parametrize(
    "text",
    [
        "[nope]\nx = 1\n",
        "[run]\nsede = 1\n",
        "[run]\nseed = one\n",
        "[run]\nsplit_mode = random\n",
        "[featurizer]\nl1_on_logits = maybe\n",
        "[lm]\nd_model = 30\nn_heads = 4\n",
        "not an ini file",
    ],
)
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(0, "gen-world") == stage_seed(0, "gen-world")
    seeds = {stage_seed(r, s) for r in range(3) for s in ("gen-world", "train-lm", "fit")}
    assert len(seeds) == 9
    assert all(0 <= s < 2**31 for s in seeds)
    cfg = parse_config("[run]\nseed = 5\n")
    assert cfg.world_spec().seed == stage_seed(5, "gen-world")
    assert cfg.lm_config().seed == stage_seed(5, "train-lm")


def test_load_config(tmp_path):
    assert load_config(None) == RunConfig()
    p = tmp_path / "c.ini"
    p.write_text("[world]\nn_entities = 12\n")
    assert load_config(p).world_spec().n_entities == 12
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.ini")


def test_attribute_file(tmp_path):
    spec = tmp_path / "attrs.json"
    spec.write_text('{"attributes": [{"name": "a", "n_values": 3}, {"name": "b", "n_values": 2}]}')
    cfg = parse_config(f"[world]\nspec_path = {spec}\n")
    assert [a.name for a in cfg.world_spec().attributes] == ["a", "b"]
    with pytest.raises(FileNotFoundError):
        parse_config(f"[world]\nspec_path = {tmp_path / 'x.json'}\n").world_spec()
