import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wristfx.core import (PROFILES, ConfigError, Config, DataError, Label, LandmarkSet, PredictionRecord,
                          Radiograph, RngState, RunManifest, View, build_config, env_overrides, flatten_config,
                          load_config, parse_config_text, save_config, seed_all)


def _radiograph(**kw):
    base = dict(image=np.zeros((4, 5)), pixel_spacing_mm=0.2, view="PA", patient_id="p", image_id="i")
    base.update(kw)
    return Radiograph(**base)


class TestRadiograph:
    def test_enums_coerced_and_image_frozen(self):
        r = _radiograph(label="fracture", sex="F", stratum="hard")
        assert r.view is View.PA and r.label is Label.fracture and r.is_fracture == 1
        with pytest.raises(ValueError):
            r.image[0, 0] = 1.0

    @pytest.mark.parametrize("image", [np.zeros((1, 5)), np.zeros(5), np.full((3, 3), np.nan)])
    def test_bad_images(self, image):
        with pytest.raises(DataError):
            _radiograph(image=image)

    @pytest.mark.parametrize("spacing", [0.0, -1.0, None])
    def test_bad_spacing(self, spacing):
        with pytest.raises(DataError):
            _radiograph(pixel_spacing_mm=spacing)

    def test_missing_metadata_allowed(self):
        r = _radiograph()
        assert r.age is None and r.sex is None and r.is_fracture is None


class TestLandmarks:
    def test_needs_three_points(self):
        with pytest.raises(DataError):
            LandmarkSet(points=np.zeros((2, 2)), view="PA")
        with pytest.raises(DataError):
            LandmarkSet(points=[[0, 0], [1, 1], [np.inf, 0]], view="PA")

    def test_inside_check(self):
        lm = LandmarkSet(points=[[0, 0], [4, 3], [2, 2]], view="LAT")
        lm.check_inside((4, 5))
        with pytest.raises(DataError):
            lm.check_inside((4, 4))

    def test_json_round_trip(self):
        lm = LandmarkSet(points=[[1.5, 2], [3, 4], [5, 6.25]], view="LAT", source="prediction")
        back = LandmarkSet.from_json(json.loads(json.dumps(lm.to_json())))
        assert np.array_equal(back.points, lm.points) and back.view is View.LAT and back.source == "prediction"

    def test_scaled_uses_pixel_centres(self):
        lm = LandmarkSet(points=[[0, 0], [1, 1], [2, 2]], view="PA")
        assert np.allclose(lm.scaled(2.0).points[:, 0], [0.5, 2.5, 4.5])


class TestPredictionRecord:
    def _rec(self, **kw):
        d = dict(patient_id="p", probabilities={"PA": 0.8, "LAT": 0.6}, tta_probabilities={},
                 ensemble_probability=0.7, threshold=0.5, decision="fracture")
        d.update(kw)
        return PredictionRecord(**d)

    def test_mean_and_decision(self):
        assert self._rec().decision is Label.fracture
        with pytest.raises(ValueError):
            self._rec(ensemble_probability=0.75)
        with pytest.raises(ValueError):
            self._rec(decision="normal")
        # boundary: probability equal to the threshold is a fracture call
        assert self._rec(threshold=0.7).decision is Label.fracture

    def test_json_round_trip(self):
        r = self._rec(member_probabilities={"PA": [0.7, 0.9]}, missing_views=())
        back = PredictionRecord.from_json(json.loads(json.dumps(r.to_json())))
        assert back == r


class TestRunManifest:
    def test_round_trip(self, tmp_path):
        m = RunManifest(run_id="r", seed=3, config_digest="abc", fold_checkpoints=[(0, "fold0.pt"), (1, "fold1.pt")],
                        thresholds={"PA": 0.41}, temperature={"fold0": 1.5}, n_folds=2)
        m.save(tmp_path)
        back = RunManifest.load(tmp_path)
        assert back == m
        assert back.checkpoint_paths(tmp_path) == [tmp_path / "fold0.pt", tmp_path / "fold1.pt"]

    @pytest.mark.parametrize("kw", [dict(n_folds=3), dict(thresholds={"PA": 1.2}), dict(temperature={"m": 0.0})])
    def test_invariants(self, kw):
        with pytest.raises(ValueError):
            RunManifest(run_id="r", seed=0, config_digest="d", fold_checkpoints=[(0, "a"), (1, "b")], **kw)

    def test_unreadable(self, tmp_path):
        (tmp_path / "run_manifest.json").write_text("{not json")
        with pytest.raises(DataError):
            RunManifest.load(tmp_path)


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("")
        cfg = load_config(p)
        assert cfg.classifier.weight_decay == 1e-4
        assert (cfg.localizer.lr, cfg.localizer.batch_size) == (0.1, 24)
        assert (cfg.classifier.lr, cfg.classifier.batch_size) == (0.1, 32)
        assert cfg.localizer.weight_decay == 0.0 and cfg.localizer.momentum == 0.0
        assert cfg.classifier.epochs == 300 and cfg.classifier.drops == (150, 200, 250)
        assert cfg.localizer.mixup_alpha == 0.4 and cfg.classifier.mixup_alpha == 0.7
        assert cfg.classifier.head_only_epochs == 10 and cfg.classifier.dropout == 0.5

    def test_zero_epochs_rejected(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("classifier.epochs: 0\n")
        with pytest.raises(ConfigError) as e:
            load_config(p)
        assert e.value.key == "classifier.epochs"

    def test_momentum_override(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# grid point\nlocalizer.momentum: 0.5\n")
        assert load_config(p).localizer.momentum == 0.5

    def test_unknown_key_and_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as e:
            build_config({"classifier.learning_rate": 0.1})
        assert e.value.key == "classifier.learning_rate"
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.txt")

    @pytest.mark.parametrize("key,value", [("classifier.momentum", 1.0), ("classifier.lr", -1),
                                           ("localizer.drops", [200, 150]), ("classifier.batch_size", 2.5),
                                           ("localizer.mixup", "yes"), ("folds", 1)])
    def test_out_of_range(self, key, value):
        with pytest.raises(ConfigError) as e:
            build_config({key: value})
        assert e.value.key == key

    def test_duplicate_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("seed: 1\nseed: 2\n")

    def test_text_round_trip_and_digest(self, tmp_path):
        cfg = build_config({"profile": "desk", "seed": 4, "classifier.lr": 0.02})
        path = save_config(cfg, tmp_path / "c.txt")
        back = load_config(path)
        assert back == cfg and back.digest == cfg.digest
        assert build_config({"seed": 5}).digest != build_config({"seed": 4}).digest

    def test_env_overrides(self):
        env = {"WRISTFX_CLASSIFIER__LR": "0.01", "WRISTFX_FOLDS": "3", "HOME": "/x"}
        assert env_overrides(env) == {"classifier.lr": 0.01, "folds": 3}
        cfg = load_config(environ=env)
        assert cfg.classifier.lr == 0.01 and cfg.folds == 3

    def test_profiles_apply_first(self):
        cfg = build_config({"profile": "desk", "folds": 3})
        assert cfg.profile == "desk" and cfg.folds == 3
        assert cfg.classifier.epochs == PROFILES["desk"]["classifier.epochs"]
        with pytest.raises(ConfigError):
            build_config({"profile": "huge"})

    @settings(max_examples=30, deadline=None)
    @given(lr=st.floats(1e-5, 1.0), seed=st.integers(0, 2**31 - 1), alpha=st.floats(0.05, 5.0))
    def test_round_trip_property(self, lr, seed, alpha):
        cfg = build_config({"classifier.lr": lr, "seed": seed, "localizer.mixup_alpha": alpha})
        assert build_config(parse_config_text(cfg.to_text())) == cfg

    def test_flatten_covers_all_sections(self):
        keys = flatten_config(Config())
        assert {"localizer.lr", "classifier_augment.cutout_p", "synthetic.hard_contrast", "roi.pa_side_mm"} <= set(keys)


class TestRng:
    def test_named_streams(self):
        a, b = RngState(0), RngState(0)
        assert np.array_equal(a.generator("mixup", 1).random(5), b.generator("mixup", 1).random(5))
        assert not np.array_equal(a.generator("mixup", 1).random(5), a.generator("mixup", 2).random(5))
        assert a.int_seed("x") == b.int_seed("x") != RngState(1).int_seed("x")

    def test_seed_changes_mixup_lambdas(self):
        l0 = RngState(0).generator("mixup").beta(0.4, 0.4, 8)
        l1 = RngState(1).generator("mixup").beta(0.4, 0.4, 8)
        assert not np.allclose(l0, l1)

    def test_seed_all_reproducible(self):
        import torch

        seed_all(0)
        a = torch.rand(3), np.random.rand(3)
        seed_all(0)
        b = torch.rand(3), np.random.rand(3)
        assert torch.equal(a[0], b[0]) and np.array_equal(a[1], b[1])
