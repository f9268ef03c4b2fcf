"""Smooth test functions for weak-error estimation.

All built-ins are C^infinity with bounded derivatives of order 1, 2, 3,
which is what the weak convergence theory requires of the observable.
Each maps batched positions (..., d) -> (...).
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError


def phi_tanh(q):
    """tanh of the first coordinate."""
    return np.tanh(q[..., 0])


def phi_smooth_clip(q):
    """First coordinate, smoothly clipped to (-2, 2); slope 1 at the origin."""
    return 2.0 * np.tanh(0.5 * q[..., 0])


def phi_cos_sum(q):
    """cos of the coordinate sum."""
    return np.cos(q.sum(axis=-1))


TEST_FUNCTIONS = {
    "tanh": phi_tanh,
    "smooth-clip": phi_smooth_clip,
    "cos-sum": phi_cos_sum,
}


def get_test_function(name: str):
    try:
        return TEST_FUNCTIONS[name]
    except KeyError:
        raise UsageError(
            f"unknown test function '{name}'; built-ins: {', '.join(sorted(TEST_FUNCTIONS))}"
        ) from None
