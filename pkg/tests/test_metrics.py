import itertools
import json

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, cohen_kappa_score, roc_auc_score

from wristfx.core import LandmarkSet, NumericalError
from wristfx.metrics import (auroc, auroc_labels, aupr, balanced_accuracy, bootstrap_ci, bootstrap_distribution,
                             confounder_regression, confusion_metrics, f1_score, landmark_recall, logistic_irls,
                             metric_report, quadratic_kappa, rater_table, wald_p_value, write_report_csv,
                             write_report_json)


def pairwise_auroc(pos, neg):
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg)) / (len(pos) * len(neg))


score_lists = st.lists(st.integers(0, 8).map(lambda v: v / 8), min_size=1, max_size=25)


class TestRanking:
    def test_examples(self):
        assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
        assert auroc([0.6], [0.6]) == 0.5
        assert auroc([0.8, 0.3], [0.5]) == 0.5
        assert aupr([0.9, 0.8], [0.1, 0.2]) == 1.0
        assert aupr([0.9], [0.95]) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            auroc([], [0.1])
        with pytest.raises(ValueError):
            aupr([], [0.1])

    @settings(max_examples=1000, deadline=None)
    @given(score_lists, score_lists)
    def test_auroc_matches_pairwise(self, pos, neg):
        assert auroc(pos, neg) == pytest.approx(pairwise_auroc(pos, neg), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(score_lists, score_lists)
    def test_aupr_matches_sklearn(self, pos, neg):
        y = [1] * len(pos) + [0] * len(neg)
        assert aupr(pos, neg) == pytest.approx(average_precision_score(y, pos + neg), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(score_lists, score_lists)
    def test_negation_symmetry(self, pos, neg):
        scores = np.array(pos + neg)
        labels = np.array([1] * len(pos) + [0] * len(neg))
        assert auroc_labels(-scores, 1 - labels) == pytest.approx(auroc_labels(scores, labels), abs=1e-12)
        assert auroc_labels(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_random_scorer_ap_is_prevalence(self):
        rng = np.random.default_rng(0)
        y = rng.random(10_000) < 0.3
        s = rng.random(10_000)
        assert abs(aupr(s[y], s[~y]) - y.mean()) < 0.02


class TestConfusion:
    def test_table_values(self):
        assert balanced_accuracy(0.60, 0.92) == pytest.approx(0.76)
        assert round(f1_score(0.66, 0.60), 2) == 0.63

    def test_counts(self):
        m = confusion_metrics([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
        assert m["sensitivity"] == pytest.approx(2 / 3) and m["specificity"] == 0.5
        assert m["precision"] == pytest.approx(2 / 3) and m["f1"] == pytest.approx(2 / 3)
        assert m["balanced_accuracy"] == pytest.approx((2 / 3 + 0.5) / 2)

    def test_all_correct(self):
        assert all(v == 1.0 for v in confusion_metrics([1, 0, 1], [1, 0, 1]).values())

    def test_undefined_is_absent(self):
        m = confusion_metrics([0, 0, 0], [1, 0, 1])
        assert m["precision"] is None and m["f1"] is None and m["sensitivity"] == 0.0
        assert confusion_metrics([1, 1], [1, 1])["specificity"] is None

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=2, max_size=40).filter(lambda y: 0 < sum(y) < len(y)),
           st.integers(0, 1))
    def test_constant_classifier_half(self, labels, c):
        assert confusion_metrics([c] * len(labels), labels)["balanced_accuracy"] == 0.5


class TestBootstrap:
    def test_constant_metric(self):
        acc = lambda p, y: float(np.mean((p >= 0.5) == y))
        assert bootstrap_ci(acc, [0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], n_iter=200, seed=1) == (1.0, 1.0)

    def test_seeded(self):
        rng = np.random.default_rng(0)
        p, y = rng.random(50), rng.integers(0, 2, 50)
        a = bootstrap_ci(auroc_labels, p, y, n_iter=300, seed=4)
        assert a == bootstrap_ci(auroc_labels, p, y, n_iter=300, seed=4)
        assert a != bootstrap_ci(auroc_labels, p, y, n_iter=300, seed=5)

    def test_stratified_counts(self):
        seen = []

        def record(p, y):
            seen.append(int(y.sum()))
            return 0.0
        bootstrap_ci(record, np.zeros(10), [1] * 3 + [0] * 7, n_iter=50)
        assert set(seen) == {3}

    def test_redraw_and_cap(self):
        calls = {"n": 0}

        def flaky(p, y):
            calls["n"] += 1
            return None if calls["n"] % 2 else 1.0
        r = bootstrap_distribution(flaky, np.zeros(4), [0, 1, 0, 1], n_iter=20)
        assert r.redraws == 20 and len(r.samples) == 20
        with pytest.raises(NumericalError):
            bootstrap_ci(lambda p, y: None, np.zeros(4), [0, 1, 0, 1], n_iter=5)
        with pytest.raises(ValueError):
            bootstrap_ci(auroc_labels, [0.1], [1], n_iter=0)

    def test_coverage(self):
        # binormal scores: AUROC = Phi(d / sqrt(2))
        from scipy.stats import norm
        d = 1.0
        truth = norm.cdf(d / np.sqrt(2))
        rng = np.random.default_rng(0)
        hits = 0
        for i in range(200):
            pos, neg = rng.normal(d, 1, 40), rng.normal(0, 1, 60)
            lo, hi = bootstrap_ci(auroc_labels, np.r_[pos, neg], np.r_[np.ones(40), np.zeros(60)], n_iter=400, seed=i)
            hits += lo <= truth <= hi
        assert hits / 200 >= 0.90

    def test_width_shrinks_with_n(self):
        rng = np.random.default_rng(1)
        widths = {}
        for n in (100, 1000):
            w = []
            for i in range(50):
                y = np.r_[np.ones(n // 2), np.zeros(n // 2)]
                p = np.r_[rng.normal(1, 1, n // 2), rng.normal(0, 1, n // 2)]
                lo, hi = bootstrap_ci(auroc_labels, p, y, n_iter=200, seed=i)
                w.append(hi - lo)
            widths[n] = np.median(w)
        assert widths[1000] < widths[100]


class TestKappa:
    def test_identical(self):
        assert quadratic_kappa(rater_table([0, 1, 2, 1, 0], [0, 1, 2, 1, 0], 3)) == 1.0

    def test_independent(self):
        row, col = np.array([2, 3]), np.array([4, 6])
        assert quadratic_kappa(np.outer(row, col)) == pytest.approx(0.0, abs=1e-12)

    def test_two_by_two(self):
        # binary quadratic kappa is Cohen's kappa: po = 0.85, pe = (40*35 + 60*65) / 100^2 = 0.53
        assert quadratic_kappa([[30, 10], [5, 55]]) == pytest.approx((0.85 - 0.53) / (1 - 0.53), abs=1e-12)

    def test_constant_raters(self):
        assert quadratic_kappa([[5, 0], [0, 0]]) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            quadratic_kappa([[0, 0], [0, 0]])
        with pytest.raises(ValueError):
            quadratic_kappa([[1, 2, 3]])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda k: st.tuples(st.just(k), st.lists(
        st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=2, max_size=40))))
    def test_matches_sklearn_and_reversal(self, args):
        k, pairs = args
        a, b = [p[0] for p in pairs], [p[1] for p in pairs]
        t = rater_table(a, b, k)
        kap = quadratic_kappa(t)
        assert quadratic_kappa(t[::-1, ::-1]) == pytest.approx(kap, abs=1e-12)
        if len(set(a) | set(b)) == k and len(set(a)) > 1 and len(set(b)) > 1:
            assert kap == pytest.approx(cohen_kappa_score(a, b, labels=list(range(k)), weights="quadratic"), abs=1e-9)


class TestLandmarkRecall:
    def _lm(self, pts):
        return LandmarkSet(points=pts, view="PA")

    def test_exact(self):
        a = [self._lm([[0, 0], [5, 5], [9, 9]])]
        assert landmark_recall(a, a, 0.5, [1, 3]) == {1.0: 1.0, 3.0: 1.0}

    def test_displaced(self):
        a = self._lm([[0, 0], [5, 5], [9, 9]])
        b = self._lm([[20, 0], [25, 5], [29, 9]])
        assert landmark_recall([a], [b], 0.5, [5])[5.0] == 0.0

    def test_counting_and_mismatch(self):
        a = self._lm([[0, 0], [0, 0], [0, 0]])
        b = self._lm([[1, 0], [10, 0], [0, 2]])
        # distances 1, 10, 2 mm at 1 mm/px
        assert landmark_recall([a], [b], 1.0, [3])[3.0] == pytest.approx(2 / 3)
        assert landmark_recall([a, a], [b, a], 1.0, [3])[3.0] == pytest.approx(5 / 6)
        with pytest.raises(ValueError):
            landmark_recall([a], [a, b], 1.0, [3])


def _logistic_data(rng, n, beta):
    x = np.c_[rng.random(n), rng.uniform(20, 80, n), rng.integers(0, 2, n)]
    eta = beta[0] + x @ np.asarray(beta[1:])
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(int)
    return x, y


class TestRegression:
    def test_matches_statsmodels(self):
        rng = np.random.default_rng(0)
        x, y = _logistic_data(rng, 300, [-1.0, 3.0, -0.01, 0.4])
        res = confounder_regression(x[:, 0], x[:, 1], ["M" if s else "F" for s in x[:, 2]], y)
        ref = sm.Logit(y, sm.add_constant(x)).fit(disp=0)
        est = [res.coefficients[k].estimate for k in ("intercept", "probability", "age", "sex")]
        se = [res.coefficients[k].std_error for k in ("intercept", "probability", "age", "sex")]
        assert np.allclose(est, ref.params, atol=1e-6) and np.allclose(se, ref.bse, atol=1e-6)
        assert np.allclose([res.coefficients[k].p_value for k in ("intercept", "probability", "age", "sex")],
                           ref.pvalues, atol=1e-8)

    def test_noise_covariate(self):
        rng = np.random.default_rng(1)
        insignificant = 0
        for _ in range(100):
            x, y = _logistic_data(rng, 500, [-1.0, 3.0, 0.0, 0.0])
            res = confounder_regression(x[:, 0], x[:, 1], x[:, 2], y)
            insignificant += res.coefficients["age"].p_value > 0.05
            assert abs(res.coefficients["age"].estimate) < 0.05
        assert insignificant >= 90

    def test_intercept_only(self):
        y = np.r_[np.ones(100), np.zeros(100)]
        beta, cov, _ = logistic_irls(np.ones((200, 1)), y)
        assert beta[0] == pytest.approx(0.0, abs=1e-12)
        # logit(0.5) = 0 with variance 1 / (n p (1 - p))
        assert cov[0, 0] == pytest.approx(1 / 50)

    def test_recovers_known_model(self):
        rng = np.random.default_rng(3)
        truth = {"intercept": -1.0, "probability": 3.0, "age": -0.01, "sex": 0.4}
        within = 0
        for _ in range(100):
            x, y = _logistic_data(rng, 400, list(truth.values()))
            res = confounder_regression(x[:, 0], x[:, 1], x[:, 2], y)
            within += all(abs(res.coefficients[k].estimate - v) <= 3 * res.coefficients[k].std_error
                          for k, v in truth.items())
        assert within >= 95

    def test_separation(self):
        rng = np.random.default_rng(4)
        y = np.r_[np.ones(30), np.zeros(30)].astype(int)
        with pytest.raises(NumericalError):
            confounder_regression(y.astype(float), rng.uniform(20, 80, 60), rng.integers(0, 2, 60), y)

    def test_missing_rows_dropped(self):
        rng = np.random.default_rng(5)
        x, y = _logistic_data(rng, 60, [0.0, 1.0, 0.0, 0.0])
        age = list(x[:, 1])
        age[0] = None
        sex = ["M" if s else "F" for s in x[:, 2]]
        sex[1] = None
        res = confounder_regression(x[:, 0], age, sex, y)
        assert res.n == 58 and res.n_excluded == 2
        with pytest.raises(ValueError):
            confounder_regression(x[:5, 0], x[:5, 1], x[:5, 2], y[:5])

    def test_wald(self):
        assert wald_p_value(1.959963984540054) == pytest.approx(0.05, abs=1e-12)
        assert wald_p_value(0.0) == 1.0


class TestReport:
    def test_report_contents(self, tmp_path):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 80)
        p = np.clip(0.3 * y + rng.random(80) * 0.7, 0, 1)
        rep = metric_report(p, y, 0.5, n_bootstrap=200, seed=3)
        for name, v in rep.metrics.items():
            assert 0 <= v.low <= v.high <= 1 and 0 <= v.point <= 1, name
            assert v.low <= v.point <= v.high or any(f.startswith(name) for f in rep.flags)
        assert rep.n_positive + rep.n_negative == 80
        js = json.loads(write_report_json({"pooled": rep}, tmp_path / "r.json").read_text())
        assert js["pooled"]["metrics"]["auroc"]["point"] == pytest.approx(auroc_labels(p, y))
        text = write_report_csv({("test1", "ensemble"): rep}, tmp_path / "r.csv").read_text().splitlines()
        assert text[0].startswith("dataset,model,auroc") and text[1].startswith("test1,ensemble,")

    def test_single_class_auroc_absent(self):
        rep = metric_report([0.2, 0.7, 0.9], [1, 1, 1], 0.5, n_bootstrap=50)
        assert rep.metrics["auroc"] is None and rep.metrics["specificity"] is None
        assert rep.value("sensitivity") == pytest.approx(2 / 3)
