"""Entry point for `python -m src.reljudge.cli`."""

import sys

from src.reljudge.cli.main import main

if __name__ == "__main__":
    sys.exit(main())
