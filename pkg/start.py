#!/usr/bin/env python3
"""
Entry script for the grounding toolkit
Pins BLAS to one thread before numpy loads so benchmark timings are comparable
"""

import os
import sys

for variable in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(variable, "1")

from cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
