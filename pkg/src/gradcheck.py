"""
Central-difference gradient oracle.

Compares analytic gradients from ``backward`` against
``(f(x + h) - f(x - h)) / 2h`` on sampled coordinates of each parameter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from src.tensor import Tensor, backward, no_grad

logger = logging.getLogger("mars.gradcheck")


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison.

    Attributes:
        max_rel_error: Largest relative error over checked coordinates.
        checked: Number of coordinates compared.
        passed: ``max_rel_error <= tol``.
        worst: (parameter index, flat coordinate) of the largest error.
    """

    max_rel_error: float
    checked: int
    passed: bool
    worst: tuple[int, int]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = 20,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Check analytic gradients of a scalar function of ``params``.

    Args:
        f: Deterministic closure returning a scalar Tensor.
        params: Tensors with ``requires_grad`` that ``f`` reads.
        h: Central-difference step.
        tol: Pass threshold on the maximum relative error.
        max_coords_per_param: Coordinates sampled per parameter (None = all).
        seed: Seed of the coordinate sampler.
        floor: Lower bound of the relative-error denominator.

    Returns:
        A GradCheckReport.
    """
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, (0, 0), 0
    with no_grad():
        for pi, p in enumerate(params):
            size = p.size
            if max_coords_per_param is None or size <= max_coords_per_param:
                coords = np.arange(size)
            else:
                coords = np.sort(rng.choice(size, max_coords_per_param, replace=False))
            original = p.data
            for flat in coords:
                idx = np.unravel_index(int(flat), p.shape)
                plus = original.copy()
                plus[idx] += h
                p.data = plus
                f_plus = f().item()
                minus = original.copy()
                minus[idx] -= h
                p.data = minus
                f_minus = f().item()
                p.data = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = float(analytic[pi][idx])
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                checked += 1
                if err > worst_err:
                    worst_err, worst_at = err, (pi, int(flat))

    passed = worst_err <= tol
    if not passed:
        logger.debug("Gradient check failed: rel err %.3e at %s", worst_err, worst_at)
    return GradCheckReport(max_rel_error=worst_err, checked=checked, passed=passed, worst=worst_at)
