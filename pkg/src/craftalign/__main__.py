"""Allow ``python -m craftalign``."""

import sys

from craftalign.cli import main

sys.exit(main())
