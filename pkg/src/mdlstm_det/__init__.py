"""2D-LSTM fully-convolutional object detector, implemented on numpy.

Set ``MDLSTM_DET_THREADS`` before the first import to cap the BLAS thread pool.
"""
import os

_threads = os.environ.get("MDLSTM_DET_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
