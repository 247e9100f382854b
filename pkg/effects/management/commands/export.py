from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from effects.exceptions import EmmError
from effects.services.export_service import FORMATS, export_artifacts
from effects.services.report_service import read_document


class Command(BaseCommand):
    help = "Re-export fit-the-fit trees and subgroup plot data from a report.json sidecar."

    def add_arguments(self, parser):
        parser.add_argument("--report", required=True, help="Path to report.json")
        parser.add_argument("--format", action="append", dest="formats",
                            help=f"One of {', '.join(FORMATS)}; repeat for several (default: all)")
        parser.add_argument("--out", default=None, help="Output directory (default: next to the report)")

    def handle(self, *args, **options):
        report_path = Path(options["report"])
        out = Path(options["out"]) if options["out"] else report_path.parent
        try:
            document = read_document(str(report_path))
            written = export_artifacts(document, options["formats"] or FORMATS, out)
        except EmmError as exc:
            raise CommandError(str(exc)) from exc
        for path in written:
            self.stdout.write(str(path))
        self.stdout.write(self.style.SUCCESS(f"Exported {len(written)} file(s)"))
