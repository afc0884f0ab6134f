"""Module entry point: ``python -m pdm4d <command> ...``."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
