"""Analytic reference scatterers: circles solved by separation of variables.

For a circle centered at the origin every cylindrical mode scatters into
itself, so the transfer matrix is diagonal with closed-form entries. These
serve as ground truth for the numerically computed polygon matrices and let
the ensemble solver mix circles with polygons at no extra cost.

The interior wavenumber of a penetrable circle may be complex (absorbing
medium), which requires Bessel J at complex argument; that one evaluation
goes straight to the scipy backend since the solver-facing specfun module
is real-argument only.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import specfun
from .errors import GeometryError
from .tmatrix import TMatrix, scatterer_fingerprint
from .wavefield import Expansion, evaluate_expansion

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CircleScatterer:
    """Disk obstacle of the given radius, sound-soft or penetrable.

    n_interior follows the same convention as for polygons: the interior
    wavenumber is kappa * sqrt(n_interior).
    """

    radius: float
    kind: str
    n_interior: complex | None = None
    label: str = ""

    def __post_init__(self):
        if self.radius <= 0.0:
            raise GeometryError("circle radius must be positive")
        if self.kind == "sound_soft":
            if self.n_interior is not None:
                raise GeometryError("sound-soft circles take no n_interior")
        elif self.kind == "penetrable":
            if self.n_interior is None:
                raise GeometryError("penetrable circles need n_interior")
            if complex(self.n_interior).real <= 0.0:
                raise GeometryError("Re(n_interior) must be positive")
        else:
            raise GeometryError(f"unknown scatterer kind {self.kind!r}")

    @property
    def circumradius(self) -> float:
        return self.radius


def _bessel_j_any(m: int, z: complex):
    """J_m at real or complex argument, parity-reduced integer order."""
    if isinstance(z, complex) and z.imag != 0.0:
        n, sign = (-m, -1.0 if m % 2 else 1.0) if m < 0 else (m, 1.0)
        return sign * _sp.jv(n, z)
    return specfun.bessel_j(m, float(np.real(z)))


def _bessel_j_any_deriv(m: int, z: complex):
    return 0.5 * (_bessel_j_any(m - 1, z) - _bessel_j_any(m + 1, z))


def _penetrable_diag(kappa_o: float, kappa_i: complex, a: float,
                     ells: np.ndarray) -> np.ndarray:
    """Diagonal entries of a penetrable circle's transfer matrix.

    Per mode m, the scattered coefficient b and interior coefficient c of a
    unit incident regular mode solve

        [ H_m(k_o a)      -J_m(k_i a)     ] [b]   [ -J_m(k_o a)      ]
        [ k_o H_m'(k_o a) -k_i J_m'(k_i a)] [c] = [ -k_o J_m'(k_o a) ],

    which is continuity of the field and of its radial derivative at r = a.
    """
    diag = np.empty(len(ells), dtype=complex)
    singular = []
    for idx, m in enumerate(ells):
        m = int(m)
        jo = specfun.bessel_j(m, kappa_o * a)
        djo = specfun.cyl_derivative("J", m, kappa_o * a)
        ho = specfun.hankel1(m, kappa_o * a)
        dho = specfun.cyl_derivative("H1", m, kappa_o * a)
        ji = _bessel_j_any(m, kappa_i * a)
        dji = _bessel_j_any_deriv(m, kappa_i * a)
        mat = np.array([[ho, -ji], [kappa_o * dho, -kappa_i * dji]])
        rhs = np.array([-jo, -kappa_o * djo])
        # The two columns have wildly different magnitudes once |m| enters
        # the evanescent regime, so test singularity on the column-scaled
        # system (and solve that one for conditioning).
        s = np.abs(mat).max(axis=0)
        if np.any(s == 0.0):
            singular.append(m)
            diag[idx] = np.nan
            continue
        scaled = mat / s
        det = scaled[0, 0] * scaled[1, 1] - scaled[0, 1] * scaled[1, 0]
        if abs(det) < 1e-13:
            singular.append(m)
            diag[idx] = np.nan
            continue
        diag[idx] = np.linalg.solve(scaled, rhs)[0] / s[0]
    if singular:
        raise ValueError(
            f"interface system singular for modes {singular}; the circle "
            "sits on an interior resonance of the truncated problem")
    return diag


def circle_tmatrix_soundsoft(kappa: float, radius: float, order: int) -> TMatrix:
    """Diagonal transfer matrix of a sound-soft circle.

    Mode m of a unit regular incident wave needs the radiating coefficient
    -J_m(kappa a) / H1_m(kappa a) to cancel the trace on r = a.
    """
    if kappa <= 0.0 or radius <= 0.0:
        raise ValueError("kappa and radius must be positive")
    ells = np.arange(-order, order + 1)
    z = kappa * radius
    diag = -specfun.jv_orders(ells, z) / specfun.h1_orders(ells, z)
    circle = CircleScatterer(radius, "sound_soft")
    return TMatrix(
        entries=np.diag(diag),
        kappa=kappa,
        order=order,
        origin=np.zeros(2),
        scatterer_hash=scatterer_fingerprint(circle),
        solver_params={"method": "separation_of_variables"},
    )


def circle_tmatrix_penetrable(
    kappa_o: float, kappa_i: complex, radius: float, order: int
) -> TMatrix:
    """Diagonal transfer matrix of a penetrable circle.

    kappa_i is the interior wavenumber (kappa_o times the square root of
    the refractive index). Raises ValueError naming the affected modes if
    an interface system is numerically singular.
    """
    if kappa_o <= 0.0 or radius <= 0.0:
        raise ValueError("kappa_o and radius must be positive")
    kappa_i = complex(kappa_i)
    if kappa_i.real <= 0.0:
        raise ValueError("Re(kappa_i) must be positive")
    ells = np.arange(-order, order + 1)
    diag = _penetrable_diag(kappa_o, kappa_i, radius, ells)
    circle = CircleScatterer(radius, "penetrable",
                             n_interior=(kappa_i / kappa_o) ** 2)
    return TMatrix(
        entries=np.diag(diag),
        kappa=kappa_o,
        order=order,
        origin=np.zeros(2),
        scatterer_hash=scatterer_fingerprint(circle),
        solver_params={"method": "separation_of_variables"},
    )


def circle_tmatrix(circle: CircleScatterer, kappa: float, order: int) -> TMatrix:
    """Transfer matrix of a circle scatterer of either kind."""
    if circle.kind == "sound_soft":
        return circle_tmatrix_soundsoft(kappa, circle.radius, order)
    kappa_i = kappa * np.sqrt(complex(circle.n_interior))
    diag = _penetrable_diag(kappa, kappa_i, circle.radius,
                            np.arange(-order, order + 1))
    return TMatrix(
        entries=np.diag(diag),
        kappa=kappa,
        order=order,
        origin=np.zeros(2),
        scatterer_hash=scatterer_fingerprint(circle),
        solver_params={"method": "separation_of_variables"},
    )


def circle_scattered_field(
    circle: CircleScatterer, kappa: float, incident_coeffs, points
) -> np.ndarray:
    """Scattered field of a circle at the origin, outside its boundary.

    incident_coeffs are regular-expansion coefficients indexed -N..N; the
    result sums the correspondingly weighted radiating modes at each point.
    """
    coeffs = np.asarray(incident_coeffs, dtype=complex)
    if coeffs.ndim != 1 or coeffs.size % 2 != 1:
        raise ValueError("incident coefficients must have odd length 2N+1")
    order = coeffs.size // 2
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.hypot(pts[:, 0], pts[:, 1])
    if np.any(r < circle.radius - 1e-12):
        raise ValueError("evaluation points must lie outside the circle")
    tmat = circle_tmatrix(circle, kappa, order)
    scattered = Expansion("radiating", kappa, np.zeros(2), order,
                          tmat.apply(coeffs))
    return evaluate_expansion(scattered, pts)
