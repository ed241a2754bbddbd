"""``python -m nelsonvc``: the thread budget is applied before numpy loads."""

import os
import sys


def _thread_budget(argv):
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


if __name__ == "__main__":
    n = _thread_budget(sys.argv[1:])
    if n is None or n.isdigit():
        # BLAS stays single-threaded; parallelism is across independent tasks
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
    from nelsonvc.expcli import main

    sys.exit(main())
