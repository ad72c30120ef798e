import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wristfx import training
from wristfx.core import DataError, RunManifest
from wristfx.models import HourglassLocalizer, SEResNetClassifier, load_checkpoint, parameter_digest
from wristfx.training import (FoldSplit, Schedule, TrainingDivergence, batch_loss, ensemble_threshold, f1_at,
                              holdout_split, landmark_l1, lr_at, make_folds, make_rois, select_threshold,
                              soft_cross_entropy, threshold_candidates, train_classifier, train_deep_ensemble,
                              train_localizer)

from conftest import tiny_config


class TestFolds:
    def test_exact_division(self):
        folds = make_folds([f"p{i}" for i in range(10)], 5, seed=0)
        assert [len(f.val_ids) for f in folds] == [2] * 5

    def test_grouping_and_coverage(self):
        items = [(f"p{i // 2}", i % 3 == 0) for i in range(22)]
        folds = make_folds(items, 4, seed=3)
        patients = {p for p, _ in items}
        seen = []
        for f in folds:
            assert not (f.train_ids & f.val_ids) and f.train_ids | f.val_ids == patients
            seen += sorted(f.val_ids)
            for pid, _ in items:
                # both images of a patient fall on the same side
                assert (pid in f.val_ids) != (pid in f.train_ids)
        assert sorted(seen) == sorted(patients)

    def test_deterministic_and_seeded(self):
        ids = [f"p{i}" for i in range(30)]
        assert make_folds(ids, 5, 1) == make_folds(ids, 5, 1)
        assert make_folds(ids, 5, 1) != make_folds(ids, 5, 2)

    def test_label_stratified(self):
        items = [(f"p{i}", int(i < 10)) for i in range(40)]
        for f in make_folds(items, 5, seed=0):
            assert sum(1 for p, y in items if y and p in f.val_ids) == 2

    def test_errors(self):
        with pytest.raises(ValueError):
            make_folds(["a", "b"], 3)
        with pytest.raises(ValueError):
            make_folds(["a", "b"], 1)
        with pytest.raises(ValueError):
            FoldSplit(0, frozenset({"a"}), frozenset({"a"}))

    def test_holdout(self):
        ids = [f"p{i}" for i in range(20)]
        s = holdout_split(ids, 0.2, seed=0)
        assert len(s.val_ids) == 4 and len(s.train_ids) == 16

    def test_radiographs(self, phantom_cases):
        folds = make_folds([c.radiograph for c in phantom_cases], 3, seed=0)
        for f in folds:
            for c in phantom_cases:
                assert (c.radiograph.patient_id in f.val_ids) != (c.radiograph.patient_id in f.train_ids)


class TestSchedule:
    def test_examples(self):
        s = Schedule()
        assert lr_at(s, 0) == 0.1
        assert lr_at(s, 150) == pytest.approx(0.01)
        assert lr_at(s, 250) == pytest.approx(1e-4) and lr_at(s, 299) == pytest.approx(1e-4)
        assert lr_at(s, 149) == 0.1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(Schedule(), 300)
        with pytest.raises(ValueError):
            lr_at(Schedule(), -1)

    def test_invariants(self):
        with pytest.raises(ValueError):
            Schedule(drops=(200, 150))
        with pytest.raises(ValueError):
            Schedule(epochs=100)
        with pytest.raises(ValueError):
            Schedule(drop_factor=1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 99), unique=True, max_size=5), st.floats(1.5, 100))
    def test_non_increasing(self, drops, factor):
        s = Schedule(epochs=100, drops=tuple(sorted(drops)), drop_factor=factor)
        lrs = [lr_at(s, e) for e in range(100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert len(set(lrs)) == len(drops) + 1

    def test_from_config(self):
        s = Schedule.from_block(tiny_config().classifier)
        assert (s.epochs, s.drops, s.head_only_epochs, s.batch) == (4, (3,), 2, 8)


def brute_force_threshold(probs, labels):
    cands = threshold_candidates(np.asarray(probs))
    scores = [f1_at(np.asarray(probs), np.asarray(labels), t) for t in cands]
    return max(scores)


class TestThreshold:
    def test_midpoint_example(self):
        assert select_threshold([(0.9, 1), (0.8, 1), (0.2, 0)]) == pytest.approx(0.5)

    def test_ensemble(self):
        assert ensemble_threshold([0.41, 0.58]) == pytest.approx(0.495)

    def test_all_equal(self):
        # every candidate classifies all as positive (t=0) or all as negative (t=1); F1 favours t=0
        assert select_threshold([(0.5, 1), (0.5, 0), (0.5, 0)]) == 0.0

    def test_single_class(self):
        with pytest.raises(ValueError):
            select_threshold([(0.1, 1), (0.7, 1)])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20).map(lambda v: v / 20), st.integers(0, 1)), min_size=2, max_size=30)
           .filter(lambda xs: len({y for _, y in xs}) == 2))
    def test_oracle(self, oof):
        probs, labels = np.array([p for p, _ in oof]), np.array([y for _, y in oof])
        t = select_threshold(oof)
        best = brute_force_threshold(probs, labels)
        assert f1_at(probs, labels, t) == best
        # smallest threshold among the maximisers
        assert all(f1_at(probs, labels, c) < best for c in threshold_candidates(probs) if c < t)


class TestLosses:
    def test_mixup_lambda_one_classifier(self):
        torch.manual_seed(0)
        m = SEResNetClassifier(input_size=32, blocks=(1,), bottleneck=False, width=8, se_reduction=4).eval()
        x = np.random.default_rng(0).random((6, 3, 32, 32)).astype(np.float32)
        y = np.eye(2)[[0, 1, 1, 0, 1, 0]]
        plain = batch_loss(m, x, y, soft_cross_entropy)
        mixed = batch_loss(m, x, y, soft_cross_entropy, alpha=0.7, rng=np.random.default_rng(1), lam=1.0)
        assert torch.allclose(plain, mixed, atol=0, rtol=0)

    def test_mixup_lambda_one_localizer(self):
        torch.manual_seed(0)
        m = HourglassLocalizer(input_size=32, channels=8, depth=2).eval()
        x = np.random.default_rng(0).random((4, 1, 32, 32)).astype(np.float32)
        y = np.random.default_rng(1).random((4, 3, 2)) * 31
        fn = lambda p, t: landmark_l1(p, t, 32)
        assert torch.equal(batch_loss(m, x, y, fn), batch_loss(m, x, y, fn, alpha=0.4, rng=np.random.default_rng(2),
                                                                lam=1.0))

    def test_losses(self):
        logits = torch.tensor([[2.0, 0.0], [0.0, 1.0]])
        hard = torch.nn.functional.cross_entropy(logits, torch.tensor([0, 1]))
        assert torch.allclose(soft_cross_entropy(logits, torch.eye(2)), hard)
        p = [torch.zeros(1, 3, 2), torch.ones(1, 3, 2)]
        assert landmark_l1(p, torch.ones(1, 3, 2), 10).item() == pytest.approx(0.1)


def _records(out):
    return [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]


class TestLocalizerTraining:
    def test_holdout_run(self, pa_pairs, tmp_path):
        cfg = tiny_config(**{"localizer.epochs": 6, "localizer.drops": [4]})
        fold = holdout_split([r for r, _ in pa_pairs], 0.25, seed=0)
        m = train_localizer(pa_pairs, cfg, tmp_path, "PA", folds=[fold])
        assert m.n_folds == 1 and m.checkpoint_paths(tmp_path)[0].is_file()
        recs = _records(tmp_path)
        assert len(recs) == 6 and {"epoch", "lr", "train_loss", "val_metric"} <= set(recs[0])
        best = [r["best_val"] for r in recs]
        assert all(a >= b for a, b in zip(best, best[1:]))
        model, meta = load_checkpoint(m.checkpoint_paths(tmp_path)[0])
        assert meta["val_loss"] == pytest.approx(best[-1]) and isinstance(model, HourglassLocalizer)
        assert RunManifest.load(tmp_path) == m and (tmp_path / "config.txt").is_file()

    def test_mixup_changes_digest(self, pa_pairs, tmp_path):
        cfg = tiny_config(**{"localizer.epochs": 1, "localizer.drops": []})
        fold = holdout_split([r for r, _ in pa_pairs], 0.25, seed=0)
        digests = []
        for flag in (False, True):
            out = tmp_path / str(flag)
            m = train_localizer(pa_pairs, cfg, out, "PA", folds=[fold], mixup_enabled=flag)
            digests.append(parameter_digest(load_checkpoint(m.checkpoint_paths(out)[0])[0].parameters()))
        assert digests[0] != digests[1]

    def test_five_folds(self, phantom_cases, tmp_path):
        pairs = [(c.radiograph, c.landmarks) for c in phantom_cases[:20] if c.radiograph.view.value == "LAT"]
        cfg = tiny_config(**{"folds": 5, "localizer.epochs": 1, "localizer.drops": []})
        m = train_localizer(pairs, cfg, tmp_path, "LAT")
        assert m.n_folds == 5 and len(m.checkpoint_paths(tmp_path)) == 5
        assert all(p.is_file() for p in m.checkpoint_paths(tmp_path))

    def test_errors(self, pa_pairs, tmp_path, monkeypatch):
        cfg = tiny_config(**{"localizer.epochs": 1, "localizer.drops": []})
        with pytest.raises(DataError):
            train_localizer([], cfg, tmp_path)
        with pytest.raises(DataError):
            train_localizer([(pa_pairs[0][0], None)] + pa_pairs[1:], cfg, tmp_path)
        monkeypatch.setattr(training, "landmark_l1", lambda p, t, s: p[-1].sum() * float("nan"))
        with pytest.raises(TrainingDivergence) as e:
            train_localizer(pa_pairs, cfg, tmp_path)
        assert e.value.epoch == 0


@pytest.fixture(scope="module")
def pa_rois(pa_pairs):
    return make_rois(pa_pairs, tiny_config())


class TestClassifierTraining:
    def test_head_only_epochs(self, pa_rois, tmp_path):
        cfg = tiny_config()
        fold = holdout_split(pa_rois, 0.25, seed=0)
        train_classifier(pa_rois, cfg, tmp_path, "PA", folds=[fold])
        d = json.loads((tmp_path / "digests.json").read_text())["0"]["digests"]
        torch.manual_seed(0)
        init = training._init_model(lambda: SEResNetClassifier.from_config(cfg.classifier),
                                    training.RngState(cfg.seed).int_seed("classifier-init", "PA", 0))
        assert d[0]["backbone"] == d[1]["backbone"] == parameter_digest(init.backbone_parameters())
        assert d[0]["head"] != parameter_digest(init.head_parameters()) and d[0]["head"] != d[1]["head"]
        assert d[2]["backbone"] != d[1]["backbone"]

    def test_deterministic_rerun(self, pa_rois, tmp_path):
        cfg = tiny_config(**{"classifier.epochs": 3, "classifier.drops": [2]})
        outs = []
        for name in ("a", "b"):
            m = train_classifier(pa_rois, cfg, tmp_path / name, "PA")
            outs.append((m, json.loads((tmp_path / name / "digests.json").read_text())))
        assert outs[0][1] == outs[1][1]
        assert outs[0][0].thresholds == outs[1][0].thresholds

    def test_outputs(self, pa_rois, tmp_path):
        cfg = tiny_config(**{"classifier.epochs": 2, "classifier.drops": [], "classifier.head_only_epochs": 1})
        m = train_classifier(pa_rois, cfg, tmp_path, "PA")
        oof = json.loads((tmp_path / "oof.json").read_text())
        assert sorted(p for p, _, _ in oof) == sorted({r.patient_id for r in pa_rois})
        assert 0 <= m.thresholds["PA"] <= 1 and m.n_folds == 2 and m.mode == "cv"
        assert m.temperature == {"fold0": 1.0, "fold1": 1.0}
        _, meta = load_checkpoint(m.checkpoint_paths(tmp_path)[0])
        best = max(r["val_metric"] for r in _records(tmp_path) if r["fold"] == 0)
        assert meta["val_balanced_accuracy"] == best

    def test_rois_at_tta_side(self, pa_rois):
        assert all(s.image.shape == (36, 36) for s in pa_rois)
        assert {s.label for s in pa_rois} == {0, 1}

    def test_deep_ensemble(self, pa_rois, tmp_path):
        cfg = tiny_config(**{"classifier.epochs": 2, "classifier.drops": [], "classifier.head_only_epochs": 1,
                             "classifier.val_fraction": 0.34})
        m = train_deep_ensemble(pa_rois, cfg, tmp_path, "PA", n_members=3)
        assert m.mode == "deep_ensemble" and len(m.fold_checkpoints) == 3
        assert set(m.temperature) == {"member0", "member1", "member2"} and all(t > 0 for t in m.temperature.values())
        digests = {parameter_digest(load_checkpoint(p)[0].parameters()) for p in m.checkpoint_paths(tmp_path)}
        assert len(digests) == 3
        # no head-only phase for ensemble members
        assert not any(r.get("head_only") for r in _records(tmp_path))
