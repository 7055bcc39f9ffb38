import pytest

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@pytest.fixture(scope="session", autouse=True)
def _single_blas_thread():
    # Bitwise-determinism assertions must not depend on BLAS thread count.
    if threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=1):
        yield
