#!/usr/bin/env python3
"""
Runs the slnet command-line tool from a source checkout, without installing it.

    python run_cli.py --config config/desk_scale.yaml gen-data
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.main import main

if __name__ == "__main__":
    sys.exit(main())
