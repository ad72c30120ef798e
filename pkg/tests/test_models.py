import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wristfx.core import DataError, LocalizerConfig, ClassifierConfig
from wristfx.models import (HourglassLocalizer, SEResNetClassifier, SoftArgmax2d, classifier_forward,
                            classifier_meta, grad_cam, grad_cam_from, load_checkpoint, load_pretrained,
                            localizer_forward, localizer_meta, save_checkpoint, soft_argmax, soft_argmax_grad)

heatmaps = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                  elements=st.floats(-20, 20, allow_nan=False))


def tiny_classifier(**kw):
    torch.manual_seed(0)
    return SEResNetClassifier(input_size=32, blocks=(1, 1), bottleneck=False, width=8, se_reduction=4, **kw)


class TestSoftArgmax:
    def test_peak(self):
        h = np.zeros((8, 7))
        h[5, 3] = 50.0
        assert soft_argmax(h) == pytest.approx((3.0, 5.0), abs=1e-6)

    def test_uniform(self):
        assert soft_argmax(np.zeros((5, 8))) == pytest.approx((3.5, 2.0))

    def test_two_peaks(self):
        h = np.full((3, 5), -np.inf)
        h[0, 0] = h[0, 4] = 0.0
        assert soft_argmax(h) == pytest.approx((2.0, 0.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            h = rng.normal(size=(8, 8))
            gx, gy = soft_argmax_grad(h)
            nx, ny = np.zeros_like(h), np.zeros_like(h)
            for idx in np.ndindex(h.shape):
                d = np.zeros_like(h)
                d[idx] = 1e-4
                xp, yp = soft_argmax(h + d)
                xm, ym = soft_argmax(h - d)
                nx[idx], ny[idx] = (xp - xm) / 2e-4, (yp - ym) / 2e-4
            assert np.linalg.norm(gx - nx) / np.linalg.norm(nx) < 1e-4
            assert np.linalg.norm(gy - ny) / np.linalg.norm(ny) < 1e-4

    def test_torch_layer_matches_numpy(self):
        h = np.random.default_rng(1).normal(size=(2, 3, 6, 9))
        out = SoftArgmax2d()(torch.from_numpy(h)).numpy()
        for b in range(2):
            for k in range(3):
                assert out[b, k] == pytest.approx(soft_argmax(h[b, k]), abs=1e-9)
        # autograd agrees with the analytic gradient
        t = torch.from_numpy(h[0, 0].copy()).requires_grad_()
        SoftArgmax2d()(t[None, None])[0, 0, 0].backward()
        assert np.allclose(t.grad.numpy(), soft_argmax_grad(h[0, 0])[0])

    @settings(max_examples=80, deadline=None)
    @given(heatmaps, st.floats(-100, 100))
    def test_hull_and_shift_invariance(self, h, c):
        x, y = soft_argmax(h)
        rows, cols = h.shape
        assert -1e-9 <= x <= cols - 1 + 1e-9 and -1e-9 <= y <= rows - 1 + 1e-9
        assert soft_argmax(h + c) == pytest.approx((x, y), abs=1e-9)

    def test_temperature(self):
        h = np.zeros((4, 4))
        h[1, 2] = 1.0
        sharp = soft_argmax(h, temperature=0.01)
        assert sharp == pytest.approx((2.0, 1.0), abs=1e-6)


class TestLocalizer:
    def test_deterministic_untrained(self):
        img = np.random.default_rng(0).random((40, 50))
        outs = []
        for _ in range(2):
            torch.manual_seed(3)
            m = HourglassLocalizer(input_size=32, channels=8, depth=2)
            outs.append(localizer_forward(m, img, "PA").points)
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(localizer_forward(m, img.copy(), "PA").points, outs[1])

    def test_shapes_and_strides(self):
        torch.manual_seed(0)
        small = HourglassLocalizer(input_size=32, channels=8, depth=2, stacks=2)
        out = small(torch.rand(2, 1, 32, 32))
        assert len(out) == 2 and out[-1].shape == (2, 3, 2) and small.stride == 2
        assert HourglassLocalizer(input_size=256, channels=8, depth=2).stride == 4
        assert small.heatmaps(torch.rand(1, 1, 32, 32))[0].shape == (1, 3, 16, 16)

    def test_wrong_input_size(self):
        m = HourglassLocalizer(input_size=32, channels=8, depth=2)
        with pytest.raises(ValueError):
            m(torch.rand(1, 1, 48, 48))

    def test_coordinates_in_input_pixels(self):
        m = HourglassLocalizer(input_size=32, channels=8, depth=2)
        with torch.no_grad():
            for head in m.heads:
                head.weight.zero_()
                head.bias.zero_()
        # uniform heatmaps: the soft-argmax sits at the grid centre, i.e. input centre 15.5
        assert np.allclose(m(torch.rand(1, 1, 32, 32))[-1].detach().numpy(), 15.5)
        lm = localizer_forward(m, np.zeros((64, 40)), "LAT")
        assert np.allclose(lm.points, 31.5) and lm.source == "prediction"


class TestClassifier:
    def test_eval_deterministic(self):
        m = tiny_classifier().eval()
        x = torch.rand(4, 3, 32, 32)
        assert torch.equal(m(x), m(x))

    def test_train_mode_dropout_reproducible(self):
        m = tiny_classifier().train()
        x = torch.rand(4, 3, 32, 32)
        torch.manual_seed(5)
        a = m(x)
        torch.manual_seed(5)
        b = m(x)
        assert torch.equal(a, b)

    def test_softmax_sums_to_one_and_features(self):
        m = tiny_classifier()
        outs = classifier_forward(m, np.random.default_rng(0).random((3, 3, 32, 32)))
        for o in outs:
            assert torch.softmax(o.logits, 0).sum().item() == pytest.approx(1.0, abs=1e-6)
            assert o.penultimate_features.shape == (16, 16, 16)

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            tiny_classifier()(torch.rand(1, 1, 32, 32))

    def test_full_depth_stem(self):
        m = SEResNetClassifier(input_size=224, blocks=(1, 1, 1, 1), width=8, se_reduction=4).eval()
        assert m.forward_with_features(torch.rand(1, 3, 224, 224)).penultimate_features.shape[-1] == 7

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_logits_finite(self, seed):
        m = tiny_classifier().eval()
        x = torch.from_numpy(np.random.default_rng(seed).random((2, 3, 32, 32)).astype(np.float32))
        assert torch.isfinite(m(x)).all()


class TestGradCam:
    def test_unit_gradient(self):
        a = np.random.default_rng(0).normal(size=(1, 4, 4))
        assert np.array_equal(grad_cam_from(a, np.ones_like(a)), np.maximum(a[0], 0))

    def test_zero_gradient(self):
        a = np.random.default_rng(0).normal(size=(3, 4, 4))
        assert np.all(grad_cam_from(a, np.zeros_like(a)) == 0)

    def test_weighting(self):
        a = np.stack([np.ones((2, 2)), np.eye(2)])
        g = np.stack([np.full((2, 2), 0.5), np.full((2, 2), -2.0)])
        assert np.allclose(grad_cam_from(a, g), np.maximum(0.5 - 2 * np.eye(2), 0))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 1))
    def test_model_map(self, seed, cls):
        m = tiny_classifier().train()
        x = np.random.default_rng(seed).random((3, 32, 32))
        cam = grad_cam(m, x, cls)
        assert cam.heat.shape == (16, 16) and np.all(cam.heat >= 0) and cam.target_class == cls
        assert m.training

    def test_frozen_model_errors(self):
        m = tiny_classifier()
        for p in m.parameters():
            p.requires_grad_(False)
        # no parameter requires grad, so the target logit is detached from the features
        with pytest.raises(RuntimeError):
            grad_cam(m, np.zeros((3, 32, 32)))


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        m = tiny_classifier().eval()
        cfg = ClassifierConfig(input_size=32, blocks=(1, 1), bottleneck=False, width=8, se_reduction=4)
        save_checkpoint(m, tmp_path / "c.pt", classifier_meta(cfg))
        back, meta = load_checkpoint(tmp_path / "c.pt")
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(back(x), m(x)) and meta["arch"] == "seresnet"
        assert (tmp_path / "c.json").is_file()

    def test_localizer_round_trip(self, tmp_path):
        cfg = LocalizerConfig(input_size=32, channels=8, depth=2)
        m = HourglassLocalizer.from_config(cfg).eval()
        save_checkpoint(m, tmp_path / "l.pt", localizer_meta(cfg))
        back, _ = load_checkpoint(tmp_path / "l.pt")
        x = torch.rand(1, 1, 32, 32)
        assert torch.equal(back(x)[-1], m(x)[-1])

    def test_corrupt_and_missing(self, tmp_path):
        (tmp_path / "bad.pt").write_bytes(b"nope")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad.pt")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "none.pt")

    def test_pretrained_skips_head(self, tmp_path):
        src = tiny_classifier()
        torch.save(src.state_dict(), tmp_path / "w.pt")
        torch.manual_seed(9)
        dst = SEResNetClassifier(input_size=32, blocks=(1, 1), bottleneck=False, width=8, se_reduction=4)
        loaded = load_pretrained(dst, tmp_path / "w.pt")
        assert loaded and not any(k.startswith("fc.") for k in loaded)
        assert torch.equal(dst.backbone[0].weight, src.backbone[0].weight)
        assert not torch.equal(dst.fc.weight, src.fc.weight)
