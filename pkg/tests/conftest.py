"""Test-process environment: cap BLAS threading before numpy loads.

The models here use small matrices where thread-pool overhead costs more
than it saves (about 2.5x CPU time on a 2-core box), and a fixed thread
count keeps floating-point reductions bit-reproducible across runs.
"""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
