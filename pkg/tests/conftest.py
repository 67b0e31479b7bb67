"""Test-session setup.

Pin BLAS to one thread before numpy loads: every matrix in this suite is
small, and on a shared box the threaded BLAS dispatch costs more than the
math itself.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
