import os

# Pin BLAS pools to one thread before numpy loads anywhere: the determinism
# contracts (bit-identical training runs, checkpoints) are stated for the
# single-threaded configuration.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
