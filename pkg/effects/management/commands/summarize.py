from django.core.management.base import BaseCommand, CommandError

from effects.exceptions import EmmError
from effects.services.config_service import load_config
from effects.services.dataset_service import descriptive_summary, format_summary_text
from effects.services.pipeline_service import load_dataset


class Command(BaseCommand):
    help = "Print descriptive statistics of the configured dataset, overall and by outcome."

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Pipeline config naming the data source")
        parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
        parser.add_argument("--out", default=None, help="Also write the table to this CSV path")

    def handle(self, *args, **options):
        try:
            config = load_config(options["config"], overrides={"seed": options["seed"]})
            data, _ = load_dataset(config)
        except EmmError as exc:
            raise CommandError(str(exc)) from exc
        summary = descriptive_summary(data)
        self.stdout.write(format_summary_text(summary))
        if options["out"]:
            summary.to_csv(options["out"], index=False, lineterminator="\n")
            self.stdout.write(self.style.SUCCESS(f"Summary written to {options['out']}"))
