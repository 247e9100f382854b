import os
import tempfile

from django.conf import settings
from django.test import SimpleTestCase

from effects.exceptions import ConfigError
from effects.services.config_service import AUTO, load_config, parse_pairs

SYNTHETIC = """
# modifier world
methods = grf, bart
seed = 4
synthetic.n = 200
synthetic.p = 3
synthetic.prevalences = 0.3, 0.5, 0.7
synthetic.tau.kind = modifier
synthetic.tau.covariate = x2
synthetic.tau.base = 0.1
synthetic.tau.modified = 0.3
grf.num_trees = 50
bart.draws = 100
bart.max_depth = none
"""


class ParsePairsTests(SimpleTestCase):
    def test_comments_blank_lines_and_overrides(self):
        pairs = parse_pairs("a = 1  # trailing\n\n# full line\na = 2\nb=x, y\n")
        self.assertEqual(pairs, {"a": "2", "b": "x, y"})

    def test_line_without_equals(self):
        with self.assertRaisesMessage(ConfigError, "line 2"):
            parse_pairs("a = 1\nnonsense\n")


class LoadConfigTests(SimpleTestCase):
    def test_synthetic_sections(self):
        config = load_config(text=SYNTHETIC)
        self.assertEqual(config.methods, ("grf", "bart"))
        self.assertEqual(config.source, "synthetic")
        self.assertEqual(config.seed, 4)
        self.assertEqual(config.synthetic.prevalences, (0.3, 0.5, 0.7))
        self.assertEqual(config.synthetic.tau_rule.covariate, 1)
        self.assertEqual(config.synthetic.seed, 4)
        self.assertEqual(config.grf.num_trees, 50)
        self.assertEqual(config.bart.draws, 100)
        self.assertIsNone(config.bart.max_depth)
        self.assertEqual(config.analysis.projection_modifiers, AUTO)

    def test_overrides_win(self):
        config = load_config(text=SYNTHETIC, overrides={"seed": 9, "output_dir": "elsewhere", "parallel_methods": None})
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.output_dir, "elsewhere")
        self.assertFalse(config.parallel_methods)

    def test_csv_source(self):
        config = load_config(text="data.path = cohort.csv\ndata.outcome = death\ndata.exposure = dnr\n"
                                  "data.covariates = age, sex\nanalysis.stratify = sex\n"
                                  "analysis.projection_modifiers = age, sex\nmethods = traditional\n")
        self.assertEqual(config.source, "csv")
        self.assertEqual(config.schema.covariates, ("age", "sex"))
        self.assertEqual(config.analysis.projection_modifiers, ("age", "sex"))
        self.assertEqual(config.analysis.stratify, "sex")

    def test_unknown_method(self):
        with self.assertRaisesMessage(ConfigError, "unknown method(s): gbm"):
            load_config(text=SYNTHETIC.replace("grf, bart", "grf, gbm"))

    def test_unknown_key(self):
        with self.assertRaisesMessage(ConfigError, "unknown config key(s): grf.num_tree"):
            load_config(text=SYNTHETIC + "grf.num_tree = 10\n")

    def test_method_seeds_are_not_configurable(self):
        with self.assertRaisesMessage(ConfigError, "bart.seed"):
            load_config(text=SYNTHETIC + "bart.seed = 1\n")

    def test_uncoercible_value(self):
        with self.assertRaisesMessage(ConfigError, "grf.num_trees: cannot parse 'many'"):
            load_config(text=SYNTHETIC.replace("grf.num_trees = 50", "grf.num_trees = many"))

    def test_invalid_sampler_setting(self):
        with self.assertRaises(ConfigError):
            load_config(text=SYNTHETIC + "bart.alpha = 1.5\n")

    def test_synthetic_needs_size(self):
        with self.assertRaisesMessage(ConfigError, "synthetic.n"):
            load_config(text="methods = grf\nsynthetic.p = 3\n")

    def test_csv_needs_roles(self):
        with self.assertRaises(ConfigError):
            load_config(text="data.path = cohort.csv\ndata.outcome = death\n")

    def test_reads_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run.cfg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(SYNTHETIC)
            self.assertEqual(load_config(path).grf.num_trees, 50)
            with self.assertRaisesMessage(ConfigError, "config file not found"):
                load_config(os.path.join(tmp, "missing.cfg"))


class BundledConfigTests(SimpleTestCase):
    def test_bundled_configs_parse(self):
        configs = settings.BASE_DIR / "configs"
        study = load_config(str(configs / "modifier_study.cfg"))
        self.assertEqual(study.analysis.stratify, "x1")
        self.assertEqual(study.synthetic.confounder, 1)
        cohort = load_config(str(configs / "cohort_csv.cfg"))
        self.assertEqual(cohort.schema.outcome, "death")
        self.assertTrue(cohort.export_draws)
