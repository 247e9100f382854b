from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from effects.exceptions import DataValidationError, EstimationError
from effects.services.forest_service import (
    DecisionTree,
    ForestConfig,
    _build_tree,
    default_mtry,
    forest_oob_predict,
    forest_weights,
    grow_gradient_tree,
    honest_partition,
    regression_forest_oob,
    split_gain,
)


def _stump(members):
    return DecisionTree(
        feature=np.array([-1]), threshold=np.array([0.0]), left=np.array([-1]), right=np.array([-1]),
        depth=np.array([1]), leaf_members={0: np.asarray(members, dtype=np.int64)},
        grow_indices=np.empty(0, dtype=np.int64), estimate_indices=np.asarray(members, dtype=np.int64), n_features=1,
    )


def _gradient_tree(features, y_tilde, z_tilde, config, seed=0):
    rng = np.random.default_rng(seed)
    part = honest_partition(np.arange(features.shape[0]), 0.5, rng)
    return grow_gradient_tree(features, y_tilde, z_tilde, part.grow_indices, part.estimate_indices, config, rng)


class SplitGainTests(SimpleTestCase):
    def test_balanced_split(self):
        rho = np.array([1.0, 1.0, -1.0, -1.0])
        self.assertAlmostEqual(split_gain(rho, [0, 1], [2, 3]), 1.0)

    def test_identical_children_have_zero_gain(self):
        rho = np.array([1.0, -1.0, 1.0, -1.0])
        self.assertEqual(split_gain(rho, [0, 1], [2, 3]), 0.0)

    def test_five_and_five_with_means_apart(self):
        rho = np.array([0.4] * 5 + [0.0] * 5)
        self.assertAlmostEqual(split_gain(rho, range(5), range(5, 10)), 0.04, places=12)

    def test_empty_child_rejected(self):
        with self.assertRaises(DataValidationError):
            split_gain(np.ones(3), [], [0, 1, 2])


class HonestPartitionTests(SimpleTestCase):
    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 200), st.integers(0, 1000))
    def test_sides_are_disjoint_and_cover(self, size, seed):
        part = honest_partition(np.arange(size), 0.5, np.random.default_rng(seed))
        self.assertEqual(part.grow_indices.size, size // 2)
        self.assertEqual(np.intersect1d(part.grow_indices, part.estimate_indices).size, 0)
        np.testing.assert_array_equal(
            np.sort(np.concatenate([part.grow_indices, part.estimate_indices])), np.arange(size)
        )

    def test_needs_two_units(self):
        with self.assertRaises(DataValidationError):
            honest_partition([3], 0.5, np.random.default_rng(0))


class BuildTreeTests(SimpleTestCase):
    def test_single_split_at_midpoint(self):
        features = np.column_stack([np.arange(20.0), np.ones(20)])
        target = (features[:, 0] >= 10).astype(float)
        idx = np.arange(20)
        tree = _build_tree(features, idx, idx, lambda m: target[m], min_leaf=2, max_depth=1,
                           mtry=None, rng=np.random.default_rng(0), honest=False)
        self.assertEqual(tree.split_counts_by_depth(), [(1, 0)])
        self.assertEqual(tree.threshold[0], 9.5)
        left, right = tree.left[0], tree.right[0]
        np.testing.assert_array_equal(tree.leaf_members[left], np.arange(10))
        np.testing.assert_array_equal(tree.leaf_members[right], np.arange(10, 20))

    def test_depth_zero_is_a_stump(self):
        features = np.arange(20.0).reshape(-1, 1)
        idx = np.arange(20)
        tree = _build_tree(features, idx, idx, lambda m: features[m, 0], min_leaf=2, max_depth=0,
                           mtry=None, rng=np.random.default_rng(0), honest=False)
        self.assertEqual(tree.leaves(), [0])

    def test_default_mtry(self):
        self.assertEqual(default_mtry(1), 1)
        self.assertEqual(default_mtry(10), 6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_root_split_ignores_row_order(self, seed):
        rng = np.random.default_rng(seed)
        features = rng.random((40, 3))
        target = features[:, 1] + 0.3 * rng.normal(size=40)
        perm = rng.permutation(40)
        idx = np.arange(40)
        trees = [
            _build_tree(x, idx, idx, lambda m, y=y: y[m], min_leaf=3, max_depth=1,
                        mtry=None, rng=np.random.default_rng(0), honest=False)
            for x, y in ((features, target), (features[perm], target[perm]))
        ]
        self.assertEqual(trees[0].feature[0], trees[1].feature[0])
        self.assertEqual(trees[0].threshold[0], trees[1].threshold[0])


class GradientForestTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.features = rng.random((60, 2))
        self.z_tilde = rng.normal(size=60)
        self.y_tilde = self.z_tilde * np.where(self.features[:, 0] > 0.5, 2.0, -2.0) + 0.1 * rng.normal(size=60)
        config = ForestConfig(num_trees=5, min_leaf_size=3)
        self.trees = []
        for b in range(5):
            tree_rng = np.random.default_rng(b)
            part = honest_partition(np.arange(60), 0.5, tree_rng)
            self.trees.append(grow_gradient_tree(
                self.features, self.y_tilde, self.z_tilde,
                part.grow_indices, part.estimate_indices, config, tree_rng,
            ))

    def test_leaves_hold_estimate_units_only(self):
        for tree in self.trees:
            members = np.concatenate(list(tree.leaf_members.values()))
            self.assertEqual(np.intersect1d(members, tree.grow_indices).size, 0)
            np.testing.assert_array_equal(np.sort(members), tree.estimate_indices)

    def test_kernel_weights_sum_to_one(self):
        for x in ([0.2, 0.5], [0.9, 0.1]):
            kernel = forest_weights(self.trees, np.array(x), 60)
            self.assertLessEqual(abs(kernel.weights.sum() - 1.0), 1e-12)
            self.assertTrue(np.all(kernel.weights >= 0))
            self.assertEqual(kernel.contributing_trees, 5)

    def test_kernel_weights_sum_to_one_over_random_forests(self):
        config = ForestConfig(num_trees=3, min_leaf_size=2)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            features = rng.random((30, 2))
            z_tilde = rng.normal(size=30)
            y_tilde = rng.normal(size=30)
            trees = [_gradient_tree(features, y_tilde, z_tilde, config, seed=seed * 3 + b) for b in range(3)]
            kernel = forest_weights(trees, rng.random(2), 30)
            self.assertLessEqual(abs(kernel.weights.sum() - 1.0), 1e-12)

    def test_two_tree_weights(self):
        kernel = forest_weights([_stump([0, 1]), _stump([0])], np.array([0.0]), 3)
        np.testing.assert_allclose(kernel.weights, [0.75, 0.25, 0.0])
        self.assertEqual(kernel.contributing_trees, 2)

    def test_proportional_residuals_give_a_stump(self):
        config = ForestConfig(min_leaf_size=3)
        tree = _gradient_tree(self.features, 2.0 * self.z_tilde, self.z_tilde, config)
        self.assertEqual(tree.leaves(), [0])

    def test_constant_covariate_is_never_split(self):
        features = np.column_stack([np.full(60, 0.5), self.features[:, 0]])
        config = ForestConfig(min_leaf_size=3, mtry=2)
        for seed in range(5):
            tree = _gradient_tree(features, self.y_tilde, self.z_tilde, config, seed=seed)
            self.assertTrue(all(feature == 1 for _, feature in tree.split_counts_by_depth()))
        alone = _gradient_tree(features[:, :1], self.y_tilde, self.z_tilde, config)
        self.assertEqual(alone.leaves(), [0])

    def test_leaf_size_of_whole_sample_gives_a_stump(self):
        tree = _gradient_tree(self.features, self.y_tilde, self.z_tilde, ForestConfig(min_leaf_size=60))
        self.assertEqual(tree.leaves(), [0])

    def test_masked_out_forest_has_no_weights(self):
        with self.assertRaises(EstimationError):
            forest_weights(self.trees, np.array([0.2, 0.5]), 60, tree_mask=np.zeros(5, dtype=bool))

    def test_wrong_dimension_rejected(self):
        with self.assertRaises(DataValidationError):
            forest_weights(self.trees, np.array([0.2]), 60)


class RegressionForestTests(SimpleTestCase):
    def test_oob_predictions_are_deterministic_and_clipped(self):
        rng = np.random.default_rng(5)
        features = rng.random((60, 2))
        target = (features[:, 0] > 0.5).astype(float)
        config = ForestConfig(num_trees=20, min_leaf_size=3)
        first = regression_forest_oob(features, target, config, np.random.default_rng(1), clip=(0.01, 0.99))
        second = regression_forest_oob(features, target, config, np.random.default_rng(1), clip=(0.01, 0.99))
        np.testing.assert_array_equal(first.oob_predictions, second.oob_predictions)
        self.assertTrue(np.all((first.oob_predictions >= 0.01) & (first.oob_predictions <= 0.99)))
        np.testing.assert_array_equal(first.inbag.sum(axis=1), np.full(20, 30))

    def test_constant_target_is_predicted_exactly(self):
        features = np.random.default_rng(2).random((40, 2))
        forest = regression_forest_oob(features, np.full(40, 0.3), ForestConfig(num_trees=10, min_leaf_size=3),
                                       np.random.default_rng(0))
        np.testing.assert_allclose(forest.oob_predictions, 0.3, atol=1e-12)
        self.assertTrue(all(tree.leaves() == [0] for tree in forest.trees))

    def test_smooth_target_has_small_oob_error(self):
        rng = np.random.default_rng(6)
        features = rng.random((400, 2))
        target = features[:, 0]
        forest = regression_forest_oob(features, target, ForestConfig(num_trees=50, min_leaf_size=5),
                                       np.random.default_rng(3))
        self.assertLess(np.mean(np.abs(forest.oob_predictions - target)), 0.1)

    def test_in_bag_trees_do_not_reach_a_unit(self):
        rng = np.random.default_rng(7)
        features = rng.random((60, 2))
        target = features[:, 0] + 0.1 * rng.normal(size=60)
        forest = regression_forest_oob(features, target, ForestConfig(num_trees=20, min_leaf_size=3),
                                       np.random.default_rng(2))
        before, fallback = forest_oob_predict(forest, features)
        self.assertEqual(fallback.size, 0)
        np.testing.assert_array_equal(before, forest.oob_predictions)
        for unit in (0, 17, 42):
            poisoned = [values + 1e6 if forest.inbag[b, unit] else values
                        for b, values in enumerate(forest.leaf_values)]
            after, _ = forest_oob_predict(replace(forest, leaf_values=poisoned), features)
            self.assertEqual(after[unit], before[unit])

    def test_too_few_units(self):
        with self.assertRaises(DataValidationError):
            regression_forest_oob(np.zeros((5, 1)), np.zeros(5), ForestConfig(num_trees=2), np.random.default_rng(0))
