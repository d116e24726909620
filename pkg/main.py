"""
HyperInvert
Hypernetwork-based GAN inversion

Main entry point for the command-line tool.
"""

import os
import sys

# Ensure project root is on sys.path BEFORE importing local packages
current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    # insert at front to ensure local APP package is preferred
    sys.path.insert(0, current_dir)

from APP.cli import main


if __name__ == "__main__":
    sys.exit(main())
