import os
import tempfile
from io import StringIO

import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from effects.tests.test_pipeline_service import SMALL_RUN


class CommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.out = os.path.join(self.tmp.name, "out")
        self.config = os.path.join(self.tmp.name, "run.cfg")
        with open(self.config, "w", encoding="utf-8") as fh:
            fh.write(SMALL_RUN.format(methods="grf, traditional", out=self.out, draws="false"))

    def test_run_then_export(self):
        stdout = StringIO()
        call_command("run", "--config", self.config, "--format", "dot", stdout=stdout)
        self.assertIn("grf: done", stdout.getvalue())
        self.assertTrue(os.path.exists(os.path.join(self.out, "grf_fit_the_fit.dot")))
        self.assertFalse(os.path.exists(os.path.join(self.out, "grf_ites.csv")))

        exported = os.path.join(self.tmp.name, "exported")
        stdout = StringIO()
        call_command("export", "--report", os.path.join(self.out, "report.json"),
                     "--format", "plotdata", "--out", exported, stdout=stdout)
        self.assertTrue(os.path.exists(os.path.join(exported, "grf_subgroup_x1.csv")))
        self.assertIn("Exported", stdout.getvalue())

    def test_run_out_override(self):
        elsewhere = os.path.join(self.tmp.name, "elsewhere")
        call_command("run", "--config", self.config, "--out", elsewhere, "--seed", "5", stdout=StringIO())
        self.assertTrue(os.path.exists(os.path.join(elsewhere, "report.txt")))
        self.assertFalse(os.path.exists(self.out))

    def test_run_with_bad_config(self):
        with open(self.config, "a", encoding="utf-8") as fh:
            fh.write("grf.bogus = 1\n")
        with self.assertRaisesMessage(CommandError, "unknown config key(s): grf.bogus"):
            call_command("run", "--config", self.config, stdout=StringIO())

    def test_synth_writes_data_and_truth(self):
        path = os.path.join(self.tmp.name, "synthetic.csv")
        stdout = StringIO()
        call_command("synth", "--config", self.config, "--out", path, stdout=stdout)
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ["y", "z", "x1", "x2", "x3"])
        self.assertEqual(len(frame), 200)
        truth = pd.read_csv(os.path.join(self.tmp.name, "synthetic.truth.csv"))
        self.assertEqual(set(truth["true_ite"].round(6)), {0.05, 0.35})
        self.assertIn("Wrote 200 rows", stdout.getvalue())

    def test_summarize(self):
        stdout = StringIO()
        call_command("summarize", "--config", self.config, stdout=stdout)
        self.assertIn("Variable", stdout.getvalue())
        self.assertIn("Not event", stdout.getvalue())

    def test_export_missing_report(self):
        with self.assertRaisesMessage(CommandError, "report not found"):
            call_command("export", "--report", os.path.join(self.tmp.name, "nope.json"), stdout=StringIO())
