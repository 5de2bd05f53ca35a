import numpy as np
import pytest


# xinject ships a pytest plugin whose fixture carries a mark, which pytest 9 rejects at
# import time; the plugin is disabled via `-p no:xinject_pytest_plugin` and its
# autouse fixture is re-registered here unchanged (minus the mark).
@pytest.fixture(autouse=True)
def xinject_test_context():
    from xinject.context import XContext, _setup_blank_app_and_thread_root_contexts_globals

    _setup_blank_app_and_thread_root_contexts_globals()
    yield XContext.grab()
    _setup_blank_app_and_thread_root_contexts_globals()


def _finite_difference(fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """ Central differences of `fn()` w.r.t. every entry of `array`, perturbed in place. """
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        original = array[idx]
        array[idx] = original + h
        plus = fn()
        array[idx] = original - h
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def _relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-7)
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def finite_difference():
    return _finite_difference


@pytest.fixture
def relative_error():
    return _relative_error
