import pytest

from sacloc.config import (
    RunConfig,
    as_dict,
    build_run_config,
    known_keys,
    parse_assignment,
    parse_config_text,
)
from sacloc.errors import ConfigError


class TestParse:
    def test_comments_and_blanks(self):
        text = "# header\n\nsynth.seed = 7   # trailing\n train.epochs=3\n"
        assert parse_config_text(text) == {"synth.seed": "7", "train.epochs": "3"}

    @pytest.mark.parametrize("text", ["synth.seed 7", "= 3", "a=1\na=2"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_assignment(self):
        assert parse_assignment(" sinkhorn.epsilon = 0.01 ") == ("sinkhorn.epsilon", "0.01")
        with pytest.raises(ConfigError):
            parse_assignment("noequals")


class TestBuild:
    def test_defaults(self):
        cfg = build_run_config()
        assert cfg.sinkhorn.epsilon == 1e-3 and cfg.sinkhorn.iterations == 50
        assert cfg.synth.T == 64 and cfg.experiment.seeds == (0, 1, 2, 3, 4, 5)

    def test_typed_values(self):
        cfg = build_run_config({
            "synth.seed": "7", "sinkhorn.epsilon": "0.05", "sac.smooth_abs": "yes",
            "eval.iou_thresholds": "0.3, 0.5", "experiment.modes": "none,sac",
            "synth.modality_preference": "1:motion, 2:appearance, 3:motion, 4:appearance",
            "sinkhorn.tolerance": "1e-9",
        })
        assert cfg.synth.seed == 7
        assert cfg.sinkhorn.epsilon == 0.05
        assert cfg.sac.smooth_abs is True
        assert cfg.eval.iou_thresholds == (0.3, 0.5)
        assert cfg.experiment.modes == ("none", "sac")
        assert cfg.synth.modality_preference[1] == "motion"
        assert cfg.sinkhorn.tolerance == 1e-9

    def test_overrides_win(self):
        cfg = build_run_config({"train.epochs": "3"}, {"train.epochs": "5"})
        assert cfg.train.epochs == 5

    @pytest.mark.parametrize("key", ["synth.sede", "nosection", "train.sac", "bogus.seed"])
    def test_unknown_key(self, key):
        with pytest.raises(ConfigError, match="unknown"):
            build_run_config({key: "1"})

    @pytest.mark.parametrize("key,value", [("synth.seed", "x"), ("sac.smooth_abs", "maybe"),
                                           ("sinkhorn.epsilon", "-1"), ("train.attention_mode", "both")])
    def test_bad_value(self, key, value):
        with pytest.raises(ConfigError):
            build_run_config({key: value})

    def test_classes_resets_preference(self):
        cfg = build_run_config({"synth.classes": "6"})
        assert len(cfg.synth.modality_preference) == 6

    def test_text_roundtrip(self):
        cfg = build_run_config({"synth.seed": "3", "sinkhorn.epsilon": "0.02", "paths.out": "x/y",
                                "eval.ap_mode": "standard"})
        again = build_run_config(parse_config_text(cfg.to_text()))
        assert as_dict(again) == as_dict(cfg)
        assert again.sinkhorn == cfg.sinkhorn and again.sac == cfg.sac

    def test_known_keys_cover_text(self):
        keys = set(parse_config_text(RunConfig().to_text()))
        assert keys == set(known_keys())
        assert "sinkhorn.epsilon" in keys and "paths.data" in keys
