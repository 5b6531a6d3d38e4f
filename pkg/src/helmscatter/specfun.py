"""Cylindrical special functions for the Helmholtz solver.

Provides integer-order Bessel functions J_n, Y_n, the outgoing Hankel
function H_n^(1) = J_n + i Y_n, their derivatives, and the symbol of the
Dirichlet-to-Neumann operator on a circle,

    dtn_symbol(l, kappa, R) = kappa * H_l^(1)'(kappa R) / H_l^(1)(kappa R),

which maps the Fourier mode e^{il theta} of a radiating trace on |x| = R to
the mode of its radial derivative.  Time convention exp(-i omega t), so
H^(1) is the outgoing kernel.

Negative orders are reduced by parity, C_{-n} = (-1)^n C_n, before any
backend call, so the identity holds bit-identically.  Orders and arguments
are capped; requests beyond the cap raise CapabilityError rather than
returning silently degraded values.
"""

import logging
from typing import Union

import numpy as np
from scipy import special as _sp

from .errors import CapabilityError

logger = logging.getLogger(__name__)

# Validated range: the test fixture table covers orders and arguments up to
# these caps. Beyond them accuracy is not vouched for, so we refuse.
MAX_ORDER: int = 200
MAX_ARGUMENT: float = 200.0

ArrayLike = Union[float, np.ndarray]


def _check_order(n: int) -> int:
    if not isinstance(n, (int, np.integer)):
        raise TypeError(f"order must be an integer, got {type(n).__name__}")
    if abs(int(n)) > MAX_ORDER:
        raise CapabilityError(f"order |{n}| exceeds supported maximum {MAX_ORDER}")
    return int(n)


def _check_argument(x: ArrayLike, positive: bool) -> np.ndarray:
    xa = np.asarray(x, dtype=float)
    if xa.size and np.max(np.abs(xa)) > MAX_ARGUMENT:
        raise CapabilityError(
            f"argument magnitude {np.max(np.abs(xa)):g} exceeds supported "
            f"maximum {MAX_ARGUMENT:g}"
        )
    if positive:
        if xa.size and np.min(xa) <= 0.0:
            raise ValueError("argument must be strictly positive for singular kinds")
    else:
        if xa.size and np.min(xa) < 0.0:
            raise ValueError("argument must be non-negative")
    return xa


def _parity(n: int) -> tuple[int, float]:
    # C_{-n} = (-1)^n C_n for J, Y and hence for H^(1).
    if n < 0:
        return -n, -1.0 if n % 2 else 1.0
    return n, 1.0


def _ret(x: ArrayLike, value: np.ndarray):
    if np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0):
        return value[()] if isinstance(value, np.ndarray) else value
    return value


def bessel_j(n: int, x: ArrayLike) -> ArrayLike:
    """Bessel function of the first kind J_n(x), integer n, real x >= 0."""
    n = _check_order(n)
    xa = _check_argument(x, positive=False)
    m, sign = _parity(n)
    return _ret(x, sign * _sp.jv(m, xa))


def bessel_y(n: int, x: ArrayLike) -> ArrayLike:
    """Bessel function of the second kind Y_n(x), integer n, real x > 0."""
    n = _check_order(n)
    xa = _check_argument(x, positive=True)
    m, sign = _parity(n)
    return _ret(x, sign * _sp.yv(m, xa))


def hankel1(n: int, x: ArrayLike) -> ArrayLike:
    """Outgoing Hankel function H_n^(1)(x) = J_n(x) + i Y_n(x), real x > 0."""
    n = _check_order(n)
    xa = _check_argument(x, positive=True)
    m, sign = _parity(n)
    return _ret(x, sign * _sp.hankel1(m, xa))


def cyl_derivative(kind: str, n: int, x: ArrayLike) -> ArrayLike:
    """Derivative C_n'(x) via the recurrence C_n' = (C_{n-1} - C_{n+1}) / 2.

    kind is "J" for Bessel of the first kind or "H1" for the outgoing
    Hankel function.
    """
    if kind == "J":
        f = bessel_j
    elif kind == "H1":
        f = hankel1
    else:
        raise ValueError(f"unknown kind {kind!r}, expected 'J' or 'H1'")
    if abs(n) + 1 > MAX_ORDER:
        raise CapabilityError(
            f"derivative of order {n} needs order {abs(n) + 1} > {MAX_ORDER}"
        )
    return 0.5 * (f(n - 1, x) - f(n + 1, x))


def dtn_symbol(l: int, kappa: float, radius: float) -> complex:
    """Symbol of the circular Dirichlet-to-Neumann map for mode e^{il theta}.

    Returns kappa * H_l^(1)'(kappa * radius) / H_l^(1)(kappa * radius).
    For large |l| at fixed kappa*radius the real part approaches -|l|/radius
    (evanescent decay); the imaginary part stays bounded.
    """
    if kappa <= 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if radius <= 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    z = kappa * radius
    return complex(kappa * cyl_derivative("H1", l, z) / hankel1(l, z))


# --- vectorised internals used by the field-evaluation modules ------------


def jv_orders(orders: np.ndarray, x: np.ndarray) -> np.ndarray:
    """J_n(x) broadcast over an integer order array, with parity reduction."""
    orders = np.asarray(orders, dtype=int)
    if orders.size and np.max(np.abs(orders)) > MAX_ORDER:
        raise CapabilityError(f"order beyond supported maximum {MAX_ORDER}")
    sign = np.where((orders < 0) & (orders % 2 != 0), -1.0, 1.0)
    return sign * _sp.jv(np.abs(orders), x)


def h1_orders(orders: np.ndarray, x: np.ndarray) -> np.ndarray:
    """H_n^(1)(x) broadcast over an integer order array, parity-reduced."""
    orders = np.asarray(orders, dtype=int)
    if orders.size and np.max(np.abs(orders)) > MAX_ORDER:
        raise CapabilityError(f"order beyond supported maximum {MAX_ORDER}")
    sign = np.where((orders < 0) & (orders % 2 != 0), -1.0, 1.0)
    return sign * _sp.hankel1(np.abs(orders), x)
