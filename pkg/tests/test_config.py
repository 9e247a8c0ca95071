"""Config parsing: strict keys, consistency checks, resolved archives."""

import json

import numpy as np
import pytest

from discodec.codec import LossWeights
from discodec.config import (ExperimentConfig, archive_config, from_dict,
                             load_config, resolved_dict)


class TestDefaults:
    def test_default_roundtrips_through_from_dict(self):
        assert from_dict({}) == ExperimentConfig.default()

    def test_empty_sections_are_defaults(self):
        cfg = from_dict({"corpus": {}, "codec": {}, "lm": {}, "eval": {}})
        assert cfg == ExperimentConfig.default()

    def test_default_is_consistent(self):
        cfg = ExperimentConfig.default()
        assert cfg.codec.d_in == cfg.corpus.feature_dim
        assert cfg.lm_model.num_books == cfg.codec.num_books
        assert cfg.lm_model.book_size == cfg.codec.book_size
        assert cfg.lm_model.alphabet == cfg.corpus.alphabet
        assert cfg.lm_model.ref_dim == cfg.corpus.feature_dim


class TestOverrides:
    def test_section_overrides_apply(self):
        cfg = from_dict({"corpus": {"speakers": 8, "utterances_per_speaker": 4,
                                    "train_speakers": 6},
                         "codec": {"steps": 10, "batch": 4},
                         "lm": {"model": {"layers": 1, "model_dim": 16,
                                          "ff_dim": 32, "heads": 2},
                                "schedule": {"warmup_steps": 2,
                                             "total_steps": 10},
                                "training": {"steps": 3, "mode_mix": 0.25}},
                         "eval": {"conversion_pairs": 5}})
        assert cfg.corpus.speakers == 8
        assert cfg.codec.steps == 10
        assert cfg.lm_model.layers == 1
        assert cfg.lm_schedule.warmup_steps == 2
        assert cfg.lm_training.mode_mix == 0.25
        assert cfg.eval.conversion_pairs == 5

    def test_loss_weights_route_through_codec_section(self):
        cfg = from_dict({"codec": {"l0": 2.0, "l1": 2.0, "l2": 2.0,
                                   "l3": 2.0}})
        total = (cfg.loss_weights.l0 + cfg.loss_weights.l1
                 + cfg.loss_weights.l2 + cfg.loss_weights.l3)
        assert total == pytest.approx(1.0)
        assert cfg.loss_weights.l0 == pytest.approx(0.25)
        assert cfg.loss_weights.renormalized

    def test_partial_weight_override_merges_defaults(self):
        base = LossWeights()
        cfg = from_dict({"codec": {"l2": base.l2}})
        # overriding with the default values leaves the sum at 4 untouched
        assert cfg.loss_weights.l2 == pytest.approx(base.l2)
        assert not cfg.loss_weights.renormalized

    def test_untouched_weights_are_not_marked_renormalized(self):
        assert not from_dict({}).loss_weights.renormalized


class TestRejection:
    def test_unknown_section(self):
        with pytest.raises(ValueError, match="unknown section 'codecs'"):
            from_dict({"codecs": {}})

    def test_unknown_codec_key_names_path(self):
        with pytest.raises(ValueError, match=r"unknown key codec\.bok_size"):
            from_dict({"codec": {"bok_size": 4}})

    def test_unknown_lm_subsection(self):
        with pytest.raises(ValueError, match=r"unknown key lm\.mode"):
            from_dict({"lm": {"mode": "text"}})

    def test_unknown_lm_model_key(self):
        with pytest.raises(ValueError, match=r"unknown key lm\.model\.depth"):
            from_dict({"lm": {"model": {"depth": 2}}})

    def test_unknown_eval_key(self):
        with pytest.raises(ValueError, match=r"unknown key eval\.pairs"):
            from_dict({"eval": {"pairs": 10}})

    def test_field_validation_still_runs(self):
        with pytest.raises(ValueError, match="mode_mix"):
            from_dict({"lm": {"training": {"mode_mix": 1.5}}})


class TestConsistency:
    def test_codec_d_in_must_match_features(self):
        with pytest.raises(ValueError, match="codec.d_in"):
            from_dict({"codec": {"d_in": 10}})

    def test_lm_books_must_match_codec(self):
        with pytest.raises(ValueError, match="codebook layout"):
            from_dict({"codec": {"num_books": 2}})

    def test_lm_alphabet_must_match_corpus(self):
        with pytest.raises(ValueError, match="alphabet"):
            from_dict({"lm": {"model": {"alphabet": 8}}})

    def test_ref_dim_must_match_features(self):
        with pytest.raises(ValueError, match="ref_dim"):
            from_dict({"lm": {"model": {"ref_dim": 10}}})

    def test_joint_override_passes(self):
        cfg = from_dict({"codec": {"num_books": 2, "book_size": 32},
                         "lm": {"model": {"num_books": 2, "book_size": 32}}})
        assert cfg.codec.num_books == cfg.lm_model.num_books == 2


class TestFiles:
    def test_load_config_reads_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"codec": {"steps": 7}}))
        assert load_config(str(path)).codec.steps == 7

    def test_load_config_rejects_bad_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="not valid JSON"):
            load_config(str(path))

    def test_load_config_rejects_non_object_root(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2]")
        with pytest.raises(ValueError, match="JSON object"):
            load_config(str(path))

    def test_resolved_dict_covers_every_section(self):
        resolved = resolved_dict(ExperimentConfig.default())
        assert set(resolved) == {"corpus", "codec", "lm", "eval"}
        assert {"l0", "l1", "l2", "l3"} <= set(resolved["codec"])
        assert resolved["codec"]["loss_weights_renormalized"] is False
        assert set(resolved["lm"]) == {"model", "schedule", "training"}

    def test_archive_is_valid_sorted_json(self, tmp_path):
        path = tmp_path / "resolved.json"
        archive_config(ExperimentConfig.default(), str(path))
        text = path.read_text()
        data = json.loads(text)
        assert text == json.dumps(data, indent=2, sort_keys=True) + "\n"

    def test_archive_reloads_to_the_same_config(self, tmp_path):
        cfg = from_dict({"codec": {"steps": 11, "l0": 0.5, "l1": 0.5,
                                   "l2": 0.5, "l3": 0.5}})
        path = tmp_path / "resolved.json"
        archive_config(cfg, str(path))
        data = json.loads(path.read_text())
        reload_data = {
            "corpus": data["corpus"],
            "codec": {k: v for k, v in data["codec"].items()
                      if k != "loss_weights_renormalized"},
            "lm": data["lm"],
            "eval": data["eval"],
        }
        back = from_dict(reload_data)
        assert back.codec == cfg.codec
        assert np.isclose(back.loss_weights.l0, cfg.loss_weights.l0)
        assert back.lm_model == cfg.lm_model
