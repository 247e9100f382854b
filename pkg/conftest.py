import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "emm_toolkit.settings")
django.setup()
