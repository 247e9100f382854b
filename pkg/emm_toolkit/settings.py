import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "dev-secret-key-change-in-production")
DEBUG = os.getenv("DEBUG", "False").lower() == "true"

INSTALLED_APPS = [
    "effects",
]

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": BASE_DIR / "db.sqlite3",
    }
}

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = True
USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Estimation engine
EMM_LOG_LEVEL = os.getenv("EMM_LOG_LEVEL", "INFO").upper()
EMM_SHOW_PROGRESS = os.getenv("EMM_SHOW_PROGRESS", "false").lower() == "true"
EMM_MAX_WORKERS = int(os.getenv("EMM_MAX_WORKERS", str(os.cpu_count() or 1)))
EMM_OUTPUT_DIR = os.getenv("EMM_OUTPUT_DIR", "emm_output")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{levelname} {module}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "effects": {
            "handlers": ["console"],
            "level": EMM_LOG_LEVEL,
            "propagate": False,
        },
    },
}

if DEBUG:
    print(f"DEBUG: EMM_MAX_WORKERS = {EMM_MAX_WORKERS}")
    print(f"DEBUG: EMM_OUTPUT_DIR = {EMM_OUTPUT_DIR}")
