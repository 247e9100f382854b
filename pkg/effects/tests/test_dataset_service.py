import csv
import math
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from effects.exceptions import DataValidationError
from effects.services.dataset_service import (
    BINARY,
    CONTINUOUS,
    ColumnSchema,
    ObservationalDataset,
    SyntheticSpec,
    TauRule,
    descriptive_summary,
    generate_synthetic,
    load_csv,
    write_csv,
)


VALID_ROWS = (
    ("1", "1", "0", "0.5"),
    ("0", "1", "1", "1.5"),
    ("1", "0", "1", "2.5"),
    ("0", "0", "0", "3.5"),
    ("1", "1", "1", "4.5"),
    ("0", "0", "1", "5.5"),
)


def _dataset(**overrides):
    fields = dict(
        covariates=np.array([[1, 1.0], [0, 2.0], [1, 3.0], [0, 4.0]]),
        exposure=np.array([1, 1, 0, 0]),
        outcome=np.array([1, 0, 0, 1]),
        covariate_names=("x1", "x2"),
        outcome_kind=BINARY,
    )
    fields.update(overrides)
    return ObservationalDataset(**fields)


class ObservationalDatasetTests(SimpleTestCase):
    def test_arrays_are_frozen_copies(self):
        source = np.array([1.0, 0.0, 0.0, 1.0])
        data = _dataset(outcome=source)
        source[0] = 0.0
        self.assertEqual(data.outcome[0], 1.0)
        with self.assertRaises(ValueError):
            data.outcome[0] = 5.0

    def test_rejects_non_binary_exposure(self):
        with self.assertRaisesMessage(DataValidationError, "exposure must be binary"):
            _dataset(exposure=np.array([1, 2, 0, 0]))

    def test_rejects_missing_values(self):
        covariates = np.array([[1, np.nan], [0, 2.0], [1, 3.0], [0, 4.0]])
        with self.assertRaisesMessage(DataValidationError, "covariates contain missing"):
            _dataset(covariates=covariates)

    def test_requires_both_exposure_arms(self):
        with self.assertRaisesMessage(DataValidationError, "one exposed and one unexposed"):
            _dataset(exposure=np.ones(4))

    def test_rejects_non_binary_outcome_for_binary_kind(self):
        with self.assertRaises(DataValidationError):
            _dataset(outcome=np.array([0.5, 0, 0, 1]))

    def test_column_lookup(self):
        data = _dataset()
        np.testing.assert_array_equal(data.column("x2"), [1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(data.column("z"), [1, 1, 0, 0])
        with self.assertRaisesMessage(DataValidationError, "unknown covariate: x9"):
            data.column("x9")


class LoadCsvTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _write(self, text):
        path = os.path.join(self.tmp.name, "data.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def test_loads_rows_in_order_and_infers_binary_outcome(self):
        path = self._write("y,z,x1,x2\n1,1,0,0.5\n0,0,1,1.5\n1,0,1,2.5\n")
        data = load_csv(path, ColumnSchema(outcome="y", exposure="z"))
        self.assertEqual(data.covariate_names, ("x1", "x2"))
        self.assertEqual(data.outcome_kind, BINARY)
        np.testing.assert_array_equal(data.covariates[:, 1], [0.5, 1.5, 2.5])

    def test_continuous_outcome_is_inferred(self):
        path = self._write("y,z,x1\n0.3,1,0\n1.7,0,1\n")
        data = load_csv(path, ColumnSchema(outcome="y", exposure="z"))
        self.assertEqual(data.outcome_kind, CONTINUOUS)

    def test_explicit_covariate_subset(self):
        path = self._write("y,z,x1,x2\n1,1,0,0.5\n0,0,1,1.5\n")
        data = load_csv(path, ColumnSchema(outcome="y", exposure="z", covariates=("x2",)))
        self.assertEqual(data.covariate_names, ("x2",))

    def test_missing_value_names_row_and_column(self):
        path = self._write("y,z,x1\n1,1,0\n0,0,\n")
        with self.assertRaisesMessage(DataValidationError, "missing value at row 2 (column 'x1')"):
            load_csv(path, ColumnSchema(outcome="y", exposure="z"))

    def test_non_numeric_cell(self):
        path = self._write("y,z,x1\n1,1,abc\n0,0,1\n")
        with self.assertRaisesMessage(DataValidationError, "non-numeric value 'abc' at row 1"):
            load_csv(path, ColumnSchema(outcome="y", exposure="z"))

    def test_numeric_first_row_is_not_a_header(self):
        path = self._write("1,1,0\n0,0,1\n")
        with self.assertRaisesMessage(DataValidationError, "missing header row"):
            load_csv(path, ColumnSchema(outcome="y", exposure="z"))

    def test_duplicate_header(self):
        path = self._write("y,z,x1,x1\n1,1,0,0\n0,0,1,1\n")
        with self.assertRaisesMessage(DataValidationError, "duplicate header: x1"):
            load_csv(path, ColumnSchema(outcome="y", exposure="z"))

    def test_unknown_outcome_column(self):
        path = self._write("y,z,x1\n1,1,0\n0,0,1\n")
        with self.assertRaisesMessage(DataValidationError, "outcome column not found: death"):
            load_csv(path, ColumnSchema(outcome="death", exposure="z"))

    def test_missing_file(self):
        with self.assertRaisesMessage(DataValidationError, "file not found"):
            load_csv(os.path.join(self.tmp.name, "nope.csv"), ColumnSchema(outcome="y", exposure="z"))

    @settings(max_examples=40, deadline=None)
    @given(
        st.sampled_from(["text", "blank", "extra_field", "duplicate_header", "exposure_value"]),
        st.integers(0, len(VALID_ROWS) - 1),
        st.integers(0, 3),
        st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8),
    )
    def test_malformed_files_are_rejected(self, corruption, row, column, token):
        header = ["y", "z", "x1", "x2"]
        rows = [list(r) for r in VALID_ROWS]
        if corruption == "text":
            rows[row][column] = token
        elif corruption == "blank":
            rows[row][column] = " "
        elif corruption == "extra_field":
            rows[row].append("1")
        elif corruption == "duplicate_header":
            header[column] = header[(column + 1) % 4]
        else:
            rows[row][1] = "2"
        text = "\n".join(",".join(r) for r in [header] + rows) + "\n"
        with self.assertRaises(DataValidationError):
            load_csv(self._write(text), ColumnSchema(outcome="y", exposure="z"))

    def test_written_dataset_loads_back_with_truth_sidecar(self):
        data = _dataset()
        path = os.path.join(self.tmp.name, "out", "synthetic.csv")
        write_csv(data, path, true_ites=np.array([0.1, 0.3, 0.1, 0.3]))
        loaded = load_csv(path, ColumnSchema(outcome="y", exposure="z"))
        np.testing.assert_array_equal(loaded.covariates, data.covariates)
        np.testing.assert_array_equal(loaded.outcome, data.outcome)
        self.assertTrue(os.path.exists(os.path.join(self.tmp.name, "out", "synthetic.truth.csv")))


class SyntheticTests(SimpleTestCase):
    spec = SyntheticSpec(
        n=300,
        p=3,
        prevalences=(0.5,),
        baseline_risk=0.2,
        tau_rule=TauRule.modifier(0, 0.1, 0.3),
        confounding_strength=0.5,
        seed=11,
    )

    def test_true_ites_follow_the_modifier(self):
        data, truth = generate_synthetic(self.spec)
        np.testing.assert_allclose(truth, 0.1 + 0.2 * data.covariates[:, 0])
        self.assertEqual(data.covariate_names, ("x1", "x2", "x3"))
        self.assertEqual(data.outcome_kind, BINARY)

    def test_same_seed_same_data(self):
        first, _ = generate_synthetic(self.spec)
        second, _ = generate_synthetic(self.spec)
        np.testing.assert_array_equal(first.covariates, second.covariates)
        np.testing.assert_array_equal(first.exposure, second.exposure)
        np.testing.assert_array_equal(first.outcome, second.outcome)

    def test_implied_risk_outside_unit_interval(self):
        spec = SyntheticSpec(n=50, p=1, prevalences=(0.5,), baseline_risk=0.9,
                             tau_rule=TauRule.constant(0.2))
        with self.assertRaisesMessage(DataValidationError, "implied risk outside [0, 1]"):
            generate_synthetic(spec)

    def test_prevalence_count_must_match(self):
        with self.assertRaises(DataValidationError):
            SyntheticSpec(n=50, p=3, prevalences=(0.5, 0.5), baseline_risk=0.2)

    def test_prevalence_at_large_n(self):
        spec = SyntheticSpec(n=10_000, p=3, prevalences=(0.5,), baseline_risk=0.2,
                             tau_rule=TauRule.constant(0.1), seed=21)
        data, _ = generate_synthetic(spec)
        for share in data.covariates.mean(axis=0):
            self.assertGreaterEqual(share, 0.48)
            self.assertLessEqual(share, 0.52)

    def test_exposure_rate_without_confounding(self):
        n, rate = 10_000, 0.3
        spec = SyntheticSpec(n=n, p=2, prevalences=(0.5,), baseline_risk=0.2, tau_rule=TauRule.constant(0.1),
                             exposure_rate=rate, seed=22)
        data, _ = generate_synthetic(spec)
        bound = 2.576 * math.sqrt(rate * (1.0 - rate) / n)
        self.assertLess(abs(data.exposure.mean() - rate), bound)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_binary_outcome_for_any_seed(self, seed):
        spec = SyntheticSpec(n=40, p=2, prevalences=(0.3, 0.6), baseline_risk=0.2,
                             tau_rule=TauRule.constant(0.1), seed=seed)
        data, truth = generate_synthetic(spec)
        self.assertTrue(set(np.unique(data.outcome)) <= {0.0, 1.0})
        np.testing.assert_allclose(truth, 0.1)


class DescriptiveSummaryTests(SimpleTestCase):
    def test_binary_outcome_table(self):
        table = descriptive_summary(_dataset())
        self.assertEqual(list(table.columns), ["Variable", "Overall", "Not event", "Event"])
        rows = table.set_index("Variable")
        self.assertEqual(rows.loc["n", "Overall"], "4")
        self.assertEqual(rows.loc["z", "Overall"], "2 (50%)")
        self.assertEqual(rows.loc["x1", "Not event"], "1 (50%)")
        self.assertEqual(rows.loc["x2", "Overall"], "2.5 (1.291)")

    def test_continuous_outcome_has_only_overall(self):
        data = _dataset(outcome=np.array([0.2, 1.1, 2.0, 0.4]), outcome_kind=CONTINUOUS)
        table = descriptive_summary(data)
        self.assertEqual(list(table.columns), ["Variable", "Overall"])

    def test_counts_agree_with_a_raw_scan_of_the_file(self):
        spec = SyntheticSpec(n=500, p=3, prevalences=(0.3, 0.5, 0.7), baseline_risk=0.2,
                             tau_rule=TauRule.modifier(0, 0.1, 0.3), seed=4)
        data, _ = generate_synthetic(spec)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_csv(data, os.path.join(tmp, "synthetic.csv"))
            with open(path, newline="", encoding="utf-8") as fh:
                records = list(csv.DictReader(fh))
            loaded = load_csv(path, ColumnSchema(outcome="y", exposure="z"))
        rows = descriptive_summary(loaded).set_index("Variable")

        def count(cell):
            return int(cell.split(" ")[0])

        strata = {"Overall": records, "Not event": [r for r in records if r["y"] == "0"],
                  "Event": [r for r in records if r["y"] == "1"]}
        for label, members in strata.items():
            self.assertEqual(int(rows.loc["n", label]), len(members))
            for name in ("z", "x1", "x2", "x3"):
                self.assertEqual(count(rows.loc[name, label]), sum(r[name] == "1" for r in members))
