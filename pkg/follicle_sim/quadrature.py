"""Composite Gauss-Legendre rules on intervals and curvilinear strips."""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import QuadratureFailure

logger = logging.getLogger(__name__)

WIDTH_TOL = 1e-12


@lru_cache(maxsize=None)
def unit_rule(order: int, strips: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes/weights on [0, 1] with ``strips`` equal panels."""
    nodes, weights = leggauss(order)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    edges = np.arange(strips) / strips
    all_nodes = (edges[:, None] + nodes[None, :] / strips).ravel()
    all_weights = np.tile(weights / strips, strips)
    all_nodes.setflags(write=False)
    all_weights.setflags(write=False)
    return all_nodes, all_weights


def interval_rule(a, b, order: int, strips: int = 1, strict: bool = True):
    """Nodes and weights on [a, b] for broadcastable limit arrays.

    Returns arrays of shape ``a.shape + (order * strips,)``. Empty or
    reversed intervals get zero weight; a reversal beyond rounding is a
    decomposition error when ``strict``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    width = b - a
    if strict and np.any(width < -WIDTH_TOL):
        raise QuadratureFailure("negative region width", worst=float(np.min(width)))
    width = np.maximum(width, 0.0)
    nodes, weights = unit_rule(order, strips)
    return a[..., None] + width[..., None] * nodes, width[..., None] * weights


def tensor_rule(x_range, y_range, order: int, strips: int = 1):
    """Tensor rule on a rectangle (limits may be arrays over a leading axis)."""
    x, wx = interval_rule(*x_range, order, strips)
    y, wy = interval_rule(*y_range, order, strips)
    q = x.shape[-1]
    X = np.repeat(x, q, axis=-1)
    W = np.repeat(wx, q, axis=-1) * np.tile(wy, q)
    Y = np.tile(y, q)
    return X, Y, W


def strip_rule(outer_range, inner_limits: Callable, order: int, strips: int = 1, strict: bool = True):
    """Curvilinear rule: outer variable on ``outer_range``, inner on ``inner_limits(outer)``.

    ``inner_limits`` maps an array of outer nodes to ``(lo, hi)`` arrays of the
    same shape. Returns (outer, inner, weight) flattened along the last axis.
    """
    outer, w_outer = interval_rule(*outer_range, order, strips)
    lo, hi = inner_limits(outer)
    inner, w_inner = interval_rule(lo, hi, order, strips, strict=strict)
    q = inner.shape[-1]
    lead = outer.shape[:-1]
    O = np.repeat(outer, q, axis=-1)
    I = inner.reshape(lead + (-1,))
    W = (w_outer[..., None] * w_inner).reshape(lead + (-1,))
    return O, I, W


@dataclass(frozen=True)
class QuadraturePlan:
    """Rule parameters held fixed while a window's map is iterated."""

    order: int = 7
    strips: int = 1
    rtol: float = 1e-7
    atol: float = 1e-13
    max_level: int = 3

    def refined(self) -> "QuadraturePlan":
        return replace(self, strips=2 * self.strips)

    def to_dict(self):
        return {"order": self.order, "strips": self.strips, "rtol": self.rtol, "atol": self.atol, "max_level": self.max_level}


def richardson_error(coarse, fine) -> float:
    """Conservative error estimate from two strip levels."""
    return float(np.max(np.abs(np.asarray(fine) - np.asarray(coarse)))) if np.size(fine) else 0.0


def choose_plan(plan: QuadraturePlan, integrate: Callable[[QuadraturePlan], np.ndarray]) -> Tuple[QuadraturePlan, np.ndarray, float]:
    """Double the strips until two successive levels agree to rtol (relative) or atol.

    Returns the finer accepted plan, its values and the last error estimate.
    """
    coarse = integrate(plan)
    error = np.inf
    for _ in range(plan.max_level):
        finer = plan.refined()
        fine = integrate(finer)
        error = richardson_error(coarse, fine)
        scale = float(np.max(np.abs(fine))) if np.size(fine) else 0.0
        plan, coarse = finer, fine
        if error <= plan.rtol * scale + plan.atol:
            return plan, fine, error
    logger.warning("quadrature refinement stopped at %d strips with estimate %.3e", plan.strips, error)
    return plan, coarse, error
