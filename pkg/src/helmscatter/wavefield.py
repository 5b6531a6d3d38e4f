"""Cylindrical wavefunction algebra: expansions, rotations, translations.

Fields are represented by truncated series of signed-order wavefunctions
about an expansion origin,

    regular:    psi_l(r, theta) = J_l(kappa r) e^{il theta},    r >= 0,
    radiating:  phi_m(r, theta) = H_m^(1)(kappa r) e^{im theta}, r > 0,

with coefficients indexed l = -N..N.  A regular expansion converges inside
any disk where the represented field is smooth; a radiating expansion of a
scattered field is valid outside the disk of radius R_D enclosing the
scatterer.

Incident fields enter as regular expansions: a plane wave e^{i kappa d.x}
has a_l = i^l e^{-il theta_inc} (Jacobi-Anger), and a point source, taken
as the unnormalized kernel H_0^(1)(kappa |x - s|), has
a_l = H_l^(1)(kappa |s|) e^{-il theta_s} about the origin for |x| < |s|.

Re-centering uses Graf's addition theorem.  With b = new origin - old
origin and C = J (regular_to_regular, valid everywhere) or C = H^(1)
(radiating_to_regular, valid for |x - new origin| < |b|):

    C_m(kappa r) e^{im theta}  about the old origin
        = sum_l  C_{m-l}(kappa |b|) e^{i(m-l) arg b} psi_l  about the new.

The translation matrix stores that coefficient at [row = l out, col = m in].
All functions here are pure; matrices are plain ndarrays, safe to share.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import specfun

logger = logging.getLogger(__name__)

# Empirical truncation margins for the reconstruction identities; override
# by passing explicit orders.
PAD_PLANE_WAVE: int = 10
PAD_POINT_SOURCE: int = 15
PAD_TRANSLATION: int = 20


def _polar(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=float)
    r = np.hypot(pts[..., 0], pts[..., 1])
    theta = np.arctan2(pts[..., 1], pts[..., 0])
    return r, theta


def eval_regular(l: int, kappa: float, points) -> np.ndarray:
    """psi_l = J_l(kappa r) e^{il theta} at points of shape (..., 2)."""
    r, theta = _polar(points)
    return specfun.bessel_j(l, kappa * r) * np.exp(1j * l * theta)


def eval_radiating(m: int, kappa: float, points) -> np.ndarray:
    """phi_m = H_m^(1)(kappa r) e^{im theta}; points must avoid the origin."""
    r, theta = _polar(points)
    if np.min(r) <= 0.0:
        raise ValueError("radiating wavefunction is singular at the origin")
    return specfun.hankel1(m, kappa * r) * np.exp(1j * m * theta)


def grad_regular(l: int, kappa: float, points) -> np.ndarray:
    """Cartesian gradient of psi_l, shape (..., 2)."""
    r, theta = _polar(points)
    r = np.where(r == 0.0, 1e-300, r)  # limits below are finite for |l| != 1
    e = np.exp(1j * l * theta)
    dr = kappa * specfun.cyl_derivative("J", l, kappa * r) * e
    dt = 1j * l * specfun.bessel_j(l, kappa * r) * e / r
    ct, st = np.cos(theta), np.sin(theta)
    return np.stack([dr * ct - dt * st, dr * st + dt * ct], axis=-1)


def grad_radiating(m: int, kappa: float, points) -> np.ndarray:
    """Cartesian gradient of phi_m, shape (..., 2)."""
    r, theta = _polar(points)
    if np.min(r) <= 0.0:
        raise ValueError("radiating wavefunction is singular at the origin")
    e = np.exp(1j * m * theta)
    dr = kappa * specfun.cyl_derivative("H1", m, kappa * r) * e
    dt = 1j * m * specfun.hankel1(m, kappa * r) * e / r
    ct, st = np.cos(theta), np.sin(theta)
    return np.stack([dr * ct - dt * st, dr * st + dt * ct], axis=-1)


@dataclass
class Expansion:
    """Truncated cylindrical wavefunction series about an origin.

    Attributes
    ----------
    kind : str
        "regular" (J radial parts) or "radiating" (H^(1) radial parts).
    kappa : float
        Wavenumber of the medium the expansion lives in.
    origin : ndarray, shape (2,)
        Expansion center.
    order : int
        Truncation order N; coefficients are indexed l = -N..N.
    coefficients : ndarray, shape (2N+1,), complex
    """

    kind: str
    kappa: float
    origin: np.ndarray
    order: int
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in ("regular", "radiating"):
            raise ValueError(f"unknown expansion kind {self.kind!r}")
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        self.coefficients = np.asarray(self.coefficients, dtype=complex)
        if self.coefficients.shape != (2 * self.order + 1,):
            raise ValueError(
                f"expected {2 * self.order + 1} coefficients for order "
                f"{self.order}, got {self.coefficients.shape}"
            )

    @property
    def ells(self) -> np.ndarray:
        return np.arange(-self.order, self.order + 1)


def evaluate_expansion(exp: Expansion, points) -> np.ndarray:
    """Sum the truncated series at points of shape (..., 2)."""
    pts = np.asarray(points, dtype=float) - exp.origin
    r, theta = _polar(pts)
    shape = r.shape
    r = r.reshape(1, -1)
    theta = theta.reshape(1, -1)
    orders = exp.ells[:, None]
    if exp.kind == "regular":
        radial = specfun.jv_orders(orders, exp.kappa * r)
    else:
        if np.min(r) <= 0.0:
            raise ValueError("radiating expansion evaluated at its origin")
        radial = specfun.h1_orders(orders, exp.kappa * r)
    modes = radial * np.exp(1j * orders * theta)
    return (exp.coefficients @ modes.reshape(len(orders), -1)).reshape(shape)


def expansion_gradient(exp: Expansion, points) -> np.ndarray:
    """Cartesian gradient of the truncated series, shape (..., 2)."""
    pts = np.asarray(points, dtype=float) - exp.origin
    grad_mode = grad_regular if exp.kind == "regular" else grad_radiating
    out = np.zeros(pts.shape, dtype=complex)
    for l, c in zip(exp.ells, exp.coefficients):
        if c != 0.0:
            out += c * grad_mode(int(l), exp.kappa, pts)
    return out


def plane_wave_coeffs(theta_inc: float, kappa: float, order: int) -> Expansion:
    """Regular expansion of e^{i kappa d.x}, d = (cos, sin)(theta_inc)."""
    l = np.arange(-order, order + 1)
    coeffs = np.exp(1j * l * (np.pi / 2 - theta_inc))  # i^l e^{-il theta}
    return Expansion("regular", kappa, np.zeros(2), order, coeffs)


def point_source_coeffs(source, kappa: float, order: int) -> Expansion:
    """Regular expansion about the origin of H_0^(1)(kappa |x - source|).

    Valid for |x| < |source|; the kernel is unnormalized (no i/4 factor).
    """
    src = np.asarray(source, dtype=float).reshape(2)
    rs = np.hypot(src[0], src[1])
    if rs == 0.0:
        raise ValueError("point source must not sit at the expansion origin")
    ts = np.arctan2(src[1], src[0])
    l = np.arange(-order, order + 1)
    coeffs = specfun.h1_orders(l, kappa * rs) * np.exp(-1j * l * ts)
    return Expansion("regular", kappa, np.zeros(2), order, coeffs)


def rotation_diag(alpha: float, order: int) -> np.ndarray:
    """Diagonal e^{il alpha}, l = -N..N, of the rotation operator."""
    return np.exp(1j * np.arange(-order, order + 1) * alpha)


def translation_matrix(
    kind: str, offset, kappa: float, order_out: int, order_in: int
) -> np.ndarray:
    """Coefficient map re-centering an expansion by `offset`.

    Maps coefficients about an old origin to regular-expansion coefficients
    about new origin = old origin + offset.  kind selects the radial family
    of the source expansion: "regular_to_regular" (J, valid everywhere) or
    "radiating_to_regular" (H^(1), valid where |x - new origin| < |offset|).
    Entry [l + order_out, m + order_in] = C_{m-l}(kappa |b|) e^{i(m-l) arg b}.
    """
    b = np.asarray(offset, dtype=float).reshape(2)
    rb = np.hypot(b[0], b[1])
    if kind == "regular_to_regular":
        fam = specfun.jv_orders
        if rb == 0.0:
            return np.eye(2 * order_out + 1, 2 * order_in + 1, k=order_out - order_in,
                          dtype=complex)
    elif kind == "radiating_to_regular":
        fam = specfun.h1_orders
        if rb == 0.0:
            raise ValueError("radiating re-expansion requires a nonzero offset")
    else:
        raise ValueError(f"unknown translation kind {kind!r}")
    tb = np.arctan2(b[1], b[0])
    l_out = np.arange(-order_out, order_out + 1)
    m_in = np.arange(-order_in, order_in + 1)
    diff = m_in[None, :] - l_out[:, None]
    return fam(diff, kappa * rb) * np.exp(1j * diff * tb)


# --- incident fields -------------------------------------------------------


@dataclass
class PlaneWave:
    """Incident plane wave amplitude * e^{i kappa d.x}."""

    kappa: float
    theta: float
    amplitude: complex = 1.0

    @property
    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta)])

    def value(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.amplitude * np.exp(1j * self.kappa * (pts @ self.direction))

    def grad(self, points) -> np.ndarray:
        v = self.value(points)
        return 1j * self.kappa * v[..., None] * self.direction

    def local_coeffs(self, center, order: int) -> Expansion:
        c = np.asarray(center, dtype=float).reshape(2)
        phase = self.amplitude * np.exp(1j * self.kappa * (c @ self.direction))
        base = plane_wave_coeffs(self.theta, self.kappa, order)
        return Expansion("regular", self.kappa, c, order, phase * base.coefficients)


@dataclass
class PointSource:
    """Incident circular wave amplitude * H_0^(1)(kappa |x - location|)."""

    kappa: float
    location: np.ndarray
    amplitude: complex = 1.0

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=float).reshape(2)

    def value(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        r = np.linalg.norm(pts - self.location, axis=-1)
        return self.amplitude * specfun.h1_orders(np.array(0), self.kappa * r)

    def grad(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        d = pts - self.location
        r = np.linalg.norm(d, axis=-1)
        h1 = specfun.h1_orders(np.array(1), self.kappa * r)
        return (-self.kappa * self.amplitude * h1 / r)[..., None] * d

    def local_coeffs(self, center, order: int) -> Expansion:
        # Re-centering the kernel is exact: only the source-to-center vector
        # enters the coefficient formula.
        c = np.asarray(center, dtype=float).reshape(2)
        rel = self.location - c
        exp = point_source_coeffs(rel, self.kappa, order)
        return Expansion(
            "regular", self.kappa, c, order, self.amplitude * exp.coefficients
        )
