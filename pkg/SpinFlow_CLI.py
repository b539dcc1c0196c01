#!/usr/bin/env python3
"""
SpinFlow - stereo table-tennis ball tracking, rally segmentation and spin clustering
Run `python SpinFlow_CLI.py --help` for the subcommands.
"""

import sys

from utils.cli import main

if __name__ == "__main__":
    sys.exit(main())
