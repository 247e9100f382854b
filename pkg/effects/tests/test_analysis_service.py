import math

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st
from scipy import optimize

from effects.exceptions import DataValidationError, EstimationError, SeparationError
from effects.services.analysis_service import (
    FitTheFitTree,
    IteVector,
    cochran_q,
    fit_the_fit,
    format_estimate,
    format_p,
    logistic_irls,
    stratified_cate,
    subgroup_summary,
    traditional_comparison,
    two_by_two_measures,
)
from effects.services.dataset_service import BINARY, ObservationalDataset, SyntheticSpec, TauRule, generate_synthetic


def _ites(values, method="grf", outcome_kind=BINARY):
    return IteVector(estimates=np.asarray(values, dtype=float), method=method, seed=0,
                     config_digest="abc", outcome_kind=outcome_kind)


class IteVectorTests(SimpleTestCase):
    def test_unknown_method(self):
        with self.assertRaises(DataValidationError):
            _ites([0.1], method="gbm")

    def test_binary_estimates_stay_in_range(self):
        with self.assertRaises(EstimationError):
            _ites([0.2, 1.2])

    def test_non_finite_rejected(self):
        with self.assertRaises(EstimationError):
            _ites([0.2, np.nan])

    def test_summary(self):
        summary = _ites(np.linspace(0.0, 0.4, 5)).summary()
        self.assertAlmostEqual(summary["mean"], 0.2)
        self.assertAlmostEqual(summary["median"], 0.2)
        self.assertEqual(summary["min"], 0.0)


class FitTheFitTests(SimpleTestCase):
    def test_constant_ites_give_a_root_only_tree(self):
        covariates = np.column_stack([np.tile([0.0, 1.0], 20), np.arange(40.0)])
        tree = fit_the_fit(_ites(np.full(40, 0.2)), covariates, ["x1", "x2"])
        self.assertEqual(len(tree.nodes), 1)
        self.assertEqual(tree.depth(), 0)
        self.assertAlmostEqual(tree.root.mean_ite, 0.2)
        self.assertEqual(tree.root.share, 100.0)

    def test_binary_modifier_is_found_first(self):
        rng = np.random.default_rng(0)
        x1 = np.tile([0.0, 1.0], 30)
        covariates = np.column_stack([x1, rng.random(60)])
        tree = fit_the_fit(_ites(0.1 + 0.2 * x1), covariates, ["x1", "x2"])
        root = tree.root
        self.assertEqual(root.feature, "x1")
        self.assertEqual(root.threshold, 0.5)
        self.assertEqual((root.left, root.right), (1, 2))
        self.assertAlmostEqual(tree.node(1).mean_ite, 0.1)
        self.assertAlmostEqual(tree.node(2).mean_ite, 0.3)
        self.assertAlmostEqual(tree.node(2).share, 50.0)
        self.assertEqual(tree.depth(), 1)

    def test_document_round_trip(self):
        x1 = np.tile([0.0, 1.0], 15)
        tree = fit_the_fit(_ites(0.1 + 0.2 * x1), x1, ["x1"], max_depth=2)
        self.assertEqual(FitTheFitTree.from_dict(tree.to_dict()).to_dict(), tree.to_dict())

    def test_needs_twenty_units(self):
        with self.assertRaises(DataValidationError):
            fit_the_fit(_ites(np.zeros(10)), np.zeros((10, 1)), ["x1"])


class SubgroupSummaryTests(SimpleTestCase):
    def test_level_means_and_plot_frame(self):
        grouping = np.repeat([0.0, 1.0], 10)
        summary = subgroup_summary(_ites(np.repeat([0.1, 0.3], 10)), grouping, "x1", bins=5)
        np.testing.assert_allclose([level.mean for level in summary.levels], [0.1, 0.3])
        np.testing.assert_allclose([level.sd for level in summary.levels], [0.0, 0.0], atol=1e-12)
        self.assertEqual([sum(level.counts) for level in summary.levels], [10, 10])
        frame = summary.plot_frame()
        self.assertEqual(list(frame.columns), ["level", "bin", "count"])
        self.assertEqual(len(frame), 10)

    def test_too_many_levels(self):
        with self.assertRaises(DataValidationError):
            subgroup_summary(_ites(np.zeros(11)), np.arange(11.0), "age")

    def test_single_level_is_flagged(self):
        summary = subgroup_summary(_ites([0.1, 0.2, 0.3]), np.ones(3), "x1")
        self.assertIn("single_level", summary.flags)


class LogisticTests(SimpleTestCase):
    def test_intercept_only(self):
        half = logistic_irls(np.zeros((10, 0)), np.array([1] * 5 + [0] * 5))
        self.assertAlmostEqual(half.coefficients[0], 0.0)
        self.assertTrue(half.converged)
        fifth = logistic_irls(np.zeros((10, 0)), np.array([1] * 2 + [0] * 8))
        self.assertAlmostEqual(fifth.coefficients[0], math.log(0.25), places=6)

    def test_matches_numerical_optimum(self):
        rng = np.random.default_rng(12)
        features = rng.normal(size=(200, 2))
        target = (rng.random(200) < 1.0 / (1.0 + np.exp(-(0.3 + features @ [1.0, -0.5])))).astype(float)
        design = np.column_stack([np.ones(200), features])

        def negative_loglik(beta):
            eta = design @ beta
            return -np.sum(target * eta - np.logaddexp(0.0, eta))

        oracle = optimize.minimize(negative_loglik, np.zeros(3), method="BFGS", options={"gtol": 1e-10})
        fit = logistic_irls(features, target)
        np.testing.assert_allclose(fit.coefficients, oracle.x, atol=1e-4)
        self.assertTrue(all(b >= a for a, b in zip(fit.log_likelihood, fit.log_likelihood[1:])))

    def test_small_sample_matches_score_root(self):
        features = np.linspace(-2.0, 2.0, 20)
        target = np.array([0, 0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1.0])
        design = np.column_stack([np.ones(20), features])

        def score(beta):
            return design.T @ (target - 1.0 / (1.0 + np.exp(-(design @ beta))))

        def jacobian(beta):
            prob = 1.0 / (1.0 + np.exp(-(design @ beta)))
            return -design.T @ (design * (prob * (1.0 - prob))[:, None])

        oracle = optimize.root(score, np.zeros(2), jac=jacobian, tol=1e-14)
        self.assertTrue(oracle.success)
        fit = logistic_irls(features, target)
        self.assertTrue(fit.converged)
        np.testing.assert_allclose(fit.coefficients, oracle.x, atol=1e-6)

    def test_complete_separation(self):
        x = np.array([0, 0, 0, 0, 1, 1, 1, 1.0])
        with self.assertRaises(SeparationError):
            logistic_irls(x, x)

    def test_large_but_convergent_coefficients_are_flagged(self):
        target = np.array([0, 0, 0, 0, 0, 1, 0, 1, 1, 1.0])
        unscaled = logistic_irls(np.arange(10.0), target)
        scaled = logistic_irls(np.arange(10.0) * 0.01, target)
        self.assertTrue(scaled.converged)
        self.assertGreater(abs(scaled.coefficients[1]), 30.0)
        self.assertIn("large_coefficients", scaled.flags)
        self.assertNotIn("large_coefficients", unscaled.flags)
        self.assertAlmostEqual(scaled.coefficients[0], unscaled.coefficients[0], places=6)
        np.testing.assert_allclose(scaled.coefficients[1], 100.0 * unscaled.coefficients[1], rtol=1e-6)

    def test_target_must_be_binary(self):
        with self.assertRaises(DataValidationError):
            logistic_irls(np.arange(5.0), np.array([0, 1, 2, 0, 1]))


class TwoByTwoTests(SimpleTestCase):
    def test_measures(self):
        table = two_by_two_measures(100, 30, 100, 20)
        self.assertAlmostEqual(table.risk_difference.estimate, 0.1)
        self.assertAlmostEqual(table.risk_difference.lower, -0.0192, places=4)
        self.assertAlmostEqual(table.risk_ratio.estimate, 1.5)
        self.assertAlmostEqual(table.odds_ratio.estimate, 1.7143, places=4)
        self.assertEqual(table.flags, ())

    def test_zero_cell(self):
        table = two_by_two_measures(10, 0, 10, 3)
        self.assertIn("zero_cell", table.flags)
        self.assertEqual((table.odds_ratio.lower, table.odds_ratio.upper), (0.0, math.inf))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 50), st.data())
    def test_interval_brackets_the_risk_difference(self, n1, n0, data):
        a = data.draw(st.integers(0, n1))
        c = data.draw(st.integers(0, n0))
        rd = two_by_two_measures(n1, a, n0, c).risk_difference
        self.assertLessEqual(rd.lower, rd.estimate)
        self.assertGreaterEqual(rd.upper, rd.estimate)


class CochranQTests(SimpleTestCase):
    def test_known_values(self):
        small = cochran_q([0.0, 1.0], [1.0, 1.0])
        self.assertAlmostEqual(small.q, 0.5)
        self.assertAlmostEqual(small.p_value, 0.4795, places=4)
        self.assertEqual(small.df, 1)
        large = cochran_q([0.0, 2.0], [1.0, 1.0])
        self.assertAlmostEqual(large.q, 2.0)
        self.assertAlmostEqual(large.p_value, 0.1573, places=4)

    def test_needs_two_estimates(self):
        with self.assertRaises(DataValidationError):
            cochran_q([1.0], [1.0])


class TraditionalComparisonTests(SimpleTestCase):
    def test_stratum_separation_names_the_stratum(self):
        data = ObservationalDataset(
            covariates=np.repeat([0.0, 1.0], 6).reshape(-1, 1),
            exposure=np.array([1, 1, 1, 0, 0, 0] * 2),
            outcome=np.array([1, 0, 1, 0, 1, 0, 1, 1, 1, 0, 0, 0]),
            covariate_names=("x1",),
            outcome_kind=BINARY,
        )
        with self.assertRaisesMessage(SeparationError, "stratum x1=1: complete separation detected"):
            stratified_cate(data, "x1", adjust=[])

    def test_full_sample_and_strata_columns(self):
        spec = SyntheticSpec(n=600, p=3, prevalences=(0.5,), baseline_risk=0.2,
                             tau_rule=TauRule.modifier(0, 0.05, 0.3), seed=21)
        data, _ = generate_synthetic(spec)
        report = traditional_comparison(data, "x1")
        self.assertEqual([c.label for c in report.columns], ["Full Sample", "x1=0", "x1=1"])
        self.assertEqual(report.heterogeneity.df, 1)
        table = report.table()
        self.assertEqual(len(table), 4)
        self.assertEqual(table.loc[3, "Full Sample"], "")
        self.assertEqual(sum(c.n for c in report.columns[1:]), 600)

    def test_continuous_outcome_rejected(self):
        data = ObservationalDataset(
            covariates=np.array([[0.0], [1.0], [0.0], [1.0]]),
            exposure=np.array([1, 0, 1, 0]),
            outcome=np.array([0.2, 1.5, 0.3, 0.1]),
            covariate_names=("x1",),
            outcome_kind="continuous",
        )
        with self.assertRaises(DataValidationError):
            traditional_comparison(data, "x1")


class FormattingTests(SimpleTestCase):
    def test_estimate(self):
        self.assertEqual(format_estimate(1.5, 0.9, math.inf), "1.500 (0.900, inf)")
        self.assertEqual(format_estimate(0.1, -0.02, 0.22, digits=2), "0.10 (-0.02, 0.22)")
        self.assertEqual(format_estimate(None, 0.9, 1.1), "NA (0.900, 1.100)")

    def test_p_value(self):
        self.assertEqual(format_p(0.0001), "< 0.001")
        self.assertEqual(format_p(0.25), "0.250")
