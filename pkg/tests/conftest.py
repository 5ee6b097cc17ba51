import os

# pin BLAS pools before numpy loads: reproducible, and faster for the
# small matrices used throughout
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
