"""Run configuration: profiles, overrides, serialization, hashing."""

import json

import pytest

from lungpipe.config import (
    PipelineConfig,
    apply_override,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
)


class TestDefaults:
    def test_desk_profile_sizes(self):
        cfg = PipelineConfig()
        assert cfg.profile == "desk"
        assert (cfg.preprocess.side, cfg.preprocess.crop_size, cfg.preprocess.stride) == (64, 32, 16)
        assert cfg.detector.depth_variant == "desk"

    def test_full_profile_overrides(self):
        cfg = config_from_dict({"profile": "full"})
        assert (cfg.preprocess.side, cfg.preprocess.crop_size, cfg.preprocess.stride) == (512, 128, 64)
        assert cfg.detector.depth_variant == "full-101"
        assert cfg.detector.iterations == 100_000
        assert cfg.detector.batch_size == 24
        assert cfg.malignancy.phases == ((20_000, 0.01), (30_000, 0.001))
        assert cfg.classifier.iterations == 6000

    def test_full_profile_user_values_win(self):
        cfg = config_from_dict({"profile": "full", "detector": {"iterations": 5}})
        assert cfg.detector.iterations == 5
        assert cfg.detector.batch_size == 24  # other overrides intact

    def test_invalid_profile(self):
        with pytest.raises(ValueError):
            PipelineConfig(profile="napkin")

    def test_inconsistent_sizes_rejected(self):
        with pytest.raises(ValueError):
            config_from_dict({"preprocess": {"side": 64, "crop_size": 40}})


class TestSerialization:
    def test_round_trip(self):
        cfg = PipelineConfig(seed=17)
        cfg.classifier.w = 0.5
        again = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(again) == config_to_dict(cfg)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            config_from_dict({"detector": {"optimizer": "sgd"}})

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"seed": 9, "synth": {"patients": 10}}))
        cfg = load_config(p)
        assert cfg.seed == 9 and cfg.synth.patients == 10

    def test_load_none_gives_defaults(self):
        assert config_to_dict(load_config(None)) == config_to_dict(PipelineConfig())


class TestOverrides:
    def test_scalar_override(self):
        cfg = PipelineConfig()
        apply_override(cfg, "detector.iterations=5")
        assert cfg.detector.iterations == 5

    def test_float_and_string_values(self):
        cfg = PipelineConfig()
        apply_override(cfg, "classifier.w=0.85")
        apply_override(cfg, "classifier.strategy=patient-label")
        assert cfg.classifier.w == 0.85
        assert cfg.classifier.strategy == "patient-label"

    def test_tuple_value(self):
        cfg = PipelineConfig()
        apply_override(cfg, "malignancy.phases=[[10, 0.1], [20, 0.01]]")
        assert cfg.malignancy.phases == ((10, 0.1), (20, 0.01))

    def test_top_level_seed(self):
        cfg = PipelineConfig()
        apply_override(cfg, "seed=123")
        assert cfg.seed == 123

    def test_bad_assignments(self):
        cfg = PipelineConfig()
        with pytest.raises(ValueError):
            apply_override(cfg, "detector.iterations")  # no '='
        with pytest.raises(ValueError):
            apply_override(cfg, "detector.flux=1")
        with pytest.raises(ValueError):
            apply_override(cfg, "warp.speed=9")

    def test_override_keeps_validation(self):
        cfg = PipelineConfig()
        with pytest.raises(ValueError):
            apply_override(cfg, "preprocess.crop_size=40")


class TestHash:
    def test_stable_and_sensitive(self):
        a, b = PipelineConfig(), PipelineConfig()
        assert config_hash(a) == config_hash(b)
        b.seed = 1
        assert config_hash(a) != config_hash(b)

    def test_hash_format(self):
        h = config_hash(PipelineConfig())
        assert len(h) == 16 and all(c in "0123456789abcdef" for c in h)
