from django.core.management.base import BaseCommand, CommandError

from effects.exceptions import EmmError
from effects.services.config_service import load_config
from effects.services.export_service import FORMATS
from effects.services.pipeline_service import run_pipeline


class Command(BaseCommand):
    help = "Run the configured effect-modification pipeline and write reports and exports."

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Path to a key = value pipeline config")
        parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
        parser.add_argument("--out", default=None, help="Override the output directory")
        parser.add_argument("--parallel-methods", action="store_true", default=None,
                            help="Run the estimators concurrently")
        parser.add_argument("--format", action="append", choices=FORMATS, dest="formats",
                            help="Export format; repeat for several (default: all)")

    def handle(self, *args, **options):
        overrides = {
            "seed": options["seed"],
            "output_dir": options["out"],
            "parallel_methods": options["parallel_methods"],
        }
        try:
            config = load_config(options["config"], overrides=overrides)
            report = run_pipeline(config, options["formats"] or FORMATS)
        except EmmError as exc:
            raise CommandError(str(exc)) from exc

        for method in report.methods:
            self.stdout.write(f"{method}: done")
        if not report.ok:
            for failure in report.failures:
                self.stderr.write(f"{failure['method']} failed: {failure['error']}: {failure['message']}")
            raise CommandError(f"{len(report.failures)} stage(s) failed; partial report in {config.output_dir}")
        self.stdout.write(self.style.SUCCESS(f"Report written to {config.output_dir}"))
