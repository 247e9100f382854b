from django.apps import AppConfig


class EffectsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'effects'
