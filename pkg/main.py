"""
Normal-Form Laboratory - entry point

    python main.py normalize --config configs/minimal.json
"""

import sys

from nekhoroshev_lab.cli import main

if __name__ == "__main__":
    sys.exit(main())
