from django.apps import AppConfig


class CdpLabConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'cdplab'
    verbose_name = 'CDP authentication lab'
