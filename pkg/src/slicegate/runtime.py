"""Process-level runtime knobs."""

from threadpoolctl import threadpool_limits


def pin_blas_threads(n: int = 1) -> None:
    """Pin BLAS pools to n threads.

    The model's matrices are small enough that OpenBLAS threading costs
    more than it saves, and a fixed thread count keeps float reductions
    identical across hosts with different core counts.
    """
    threadpool_limits(limits=n, user_api="blas")
