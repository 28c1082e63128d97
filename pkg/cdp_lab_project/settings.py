"""
Django settings for cdp_lab_project project.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# The lab serves no HTTP traffic; the key only satisfies Django's startup checks.
SECRET_KEY = os.getenv('CDP_LAB_SECRET_KEY', 'django-insecure-cdp-lab-offline-key')

DEBUG = os.getenv('CDP_LAB_DEBUG', '0') == '1'

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'cdplab',
]

MIDDLEWARE = []

# No models; management commands and SimpleTestCase only.
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Experiment configuration
CDP_LAB_DEFAULT_CONFIG = BASE_DIR / 'cdplab' / 'data' / 'default_config.json'

# Overrides the `seed` of the experiment config when set
CDP_LAB_SEED = os.getenv('CDP_LAB_SEED')

CDP_LAB_THREADS = int(os.getenv('CDP_LAB_THREADS', '1'))

# Logging configuration
CDP_LAB_LOG_LEVEL = os.getenv('CDP_LAB_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': CDP_LAB_LOG_LEVEL,
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
        'file': {
            'level': CDP_LAB_LOG_LEVEL,
            'class': 'logging.FileHandler',
            'filename': os.getenv('CDP_LAB_LOG_FILE', 'cdp_lab.log'),
            'formatter': 'simple',
            'delay': True,
        },
    },
    'loggers': {
        'cdplab': {
            'handlers': ['console', 'file'],
            'level': CDP_LAB_LOG_LEVEL,
            'propagate': False,
        },
    },
}
