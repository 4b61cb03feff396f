"""Allow ``python -m vncseg``."""

import sys

from .cli import main

sys.exit(main())
