#!/usr/bin/env python3
"""Recompute every closed-form claim about the two-state toy problem."""

import sys

from isalab.cli import main

if __name__ == "__main__":
    sys.exit(main(["reproduce-toy", *sys.argv[1:]]))
