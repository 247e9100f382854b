from dataclasses import replace

from django.core.management.base import BaseCommand, CommandError

from effects.exceptions import ConfigError, EmmError
from effects.services.config_service import load_config
from effects.services.dataset_service import generate_synthetic, write_csv


class Command(BaseCommand):
    help = "Draw a synthetic dataset from the config's synthetic.* section and write it as CSV."

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Config with synthetic.* keys")
        parser.add_argument("--out", required=True, help="Destination CSV; true ITEs go to <stem>.truth.csv")
        parser.add_argument("--seed", type=int, default=None, help="Override the synthetic seed")

    def handle(self, *args, **options):
        try:
            config = load_config(options["config"])
            if config.synthetic is None:
                raise ConfigError("config has no synthetic data source")
            spec = config.synthetic
            if options["seed"] is not None:
                spec = replace(spec, seed=options["seed"])
            data, truth = generate_synthetic(spec)
            path = write_csv(data, options["out"], true_ites=truth)
        except EmmError as exc:
            raise CommandError(str(exc)) from exc
        self.stdout.write(self.style.SUCCESS(f"Wrote {data.n} rows to {path}"))
