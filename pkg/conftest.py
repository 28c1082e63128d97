import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'cdp_lab_project.settings')
django.setup()
