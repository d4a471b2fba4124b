"""
Entrypoint for the irnet command line: synth, train, eval, gradcheck, bench, detect.
"""

import sys

from core.cli import main

if __name__ == "__main__":
    sys.exit(main())
