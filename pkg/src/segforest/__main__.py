"""Run the command-line interface with ``python -m segforest``."""
import sys

from segforest.cli import main

sys.exit(main())
