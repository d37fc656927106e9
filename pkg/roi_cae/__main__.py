# roi_cae/__main__.py
"""``python -m roi_cae``."""

import sys

from .cli import main

sys.exit(main())
