"""Scatterer transfer matrices: construction, transforms, persistence.

A transfer matrix maps the local regular-expansion coefficients of an
incident field to the radiating-expansion coefficients of the scattered
field, both expansions centered at the matrix origin and indexed by the
signed mode orders -N..N. Rows correspond to radiating output modes and
columns to regular input modes.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .geomesh import artificial_radius, build_mesh
from .wavefield import (
    Expansion,
    eval_regular,
    evaluate_expansion,
    expansion_gradient,
    grad_regular,
    rotation_diag,
)

logger = logging.getLogger(__name__)

TMATRIX_FORMAT_VERSION = 1


def truncation_order(kappa: float, enclosing_radius: float) -> int:
    """Expansion order needed to resolve a scatterer of given disk radius.

    ceil(kappa R + 4 (kappa R)^(1/3) + 5): the classical rule that tracks
    the transition of the radial functions from oscillatory to evanescent
    just beyond order kappa R, with a safety band.
    """
    if kappa <= 0.0 or enclosing_radius <= 0.0:
        raise ValueError("kappa and enclosing radius must be positive")
    z = kappa * enclosing_radius
    return int(np.ceil(z + 4.0 * z ** (1.0 / 3.0) + 5.0))


def scatterer_fingerprint(scatterer) -> str:
    """Stable hex digest identifying a scatterer's shape and material.

    Covers polygon vertices (or circle radius), kind, and refractive index,
    so a stored matrix can be checked against the shape it claims to model.
    """
    parts = [scatterer.kind]
    if hasattr(scatterer, "vertices"):
        parts.append("polygon")
        parts.extend(f"{float(x)!r},{float(y)!r}" for x, y in scatterer.vertices)
    else:
        parts.append(f"circle:{float(scatterer.radius)!r}")
    n = getattr(scatterer, "n_interior", None)
    if n is not None:
        n = complex(n)
        parts.append(f"n:{n.real!r}+{n.imag!r}j")
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


@dataclass
class TMatrix:
    """Transfer matrix with its wavenumber, origin, and provenance record.

    entries[i, j] couples incident regular mode l = j - order to scattered
    radiating mode m = i - order. The symmetry defect of the entries is
    measured once at construction and kept with the matrix.
    """

    entries: np.ndarray
    kappa: float
    order: int
    origin: np.ndarray
    scatterer_hash: str = ""
    solver_params: dict = field(default_factory=dict)
    rotation: float = 0.0
    symmetry_defect: float = field(init=False)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=complex)
        n = 2 * self.order + 1
        if self.entries.shape != (n, n):
            raise ValueError(
                f"entries shape {self.entries.shape} does not match order "
                f"{self.order} (expected {(n, n)})")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("matrix entries must be finite")
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        self.entries.setflags(write=False)
        self.origin.setflags(write=False)
        self.symmetry_defect = symmetry_residual(self.entries)

    @property
    def ells(self) -> np.ndarray:
        """Signed mode orders -N..N shared by the rows and columns."""
        return np.arange(-self.order, self.order + 1)

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        """Map incident regular coefficients to scattered radiating ones."""
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape[0] != 2 * self.order + 1:
            raise ValueError(
                f"coefficient vector has {coeffs.shape[0]} modes, matrix "
                f"expects {2 * self.order + 1}")
        return self.entries @ coeffs


def symmetry_residual(entries) -> float:
    """Frobenius norm of T + conj(T.T) + 2 T conj(T.T).

    Zero for the exact matrix of a lossless scatterer: with the scattered
    field defined as an additive correction (b = T a on top of the incident
    expansion), energy conservation says I + 2T is unitary, and expanding
    (I + 2T)(I + 2T)* = I gives T + T* + 2TT* = 0. The residual grows with
    discretization error and with absorption, which makes it a cheap
    built-in accuracy and passivity diagnostic.
    """
    t = np.asarray(getattr(entries, "entries", entries), dtype=complex)
    ts = t.conj().T
    return float(np.linalg.norm(t + ts + 2.0 * (t @ ts)))


def rotate_tmatrix(tmat: TMatrix, alpha: float) -> TMatrix:
    """Transfer matrix of the same scatterer rotated by alpha radians.

    Conjugation by the diagonal phase matrix D = diag(e^{i l alpha}):
    the rotated entries are e^{-i m alpha} T_{ml} e^{i l alpha}. Exact up
    to roundoff, no re-solve involved.
    """
    d = rotation_diag(alpha, tmat.order)
    entries = tmat.entries * np.conj(d)[:, None] * d[None, :]
    return dataclasses.replace(
        tmat, entries=entries, rotation=tmat.rotation + alpha)


def set_origin(tmat: TMatrix, new_origin) -> TMatrix:
    """Record a new reference point for the matrix.

    Entries are unchanged; the coupling step translates incident and
    scattered expansions to this point when an ensemble is assembled.
    """
    return dataclasses.replace(
        tmat, origin=np.asarray(new_origin, dtype=float).reshape(2))


def save_tmatrix(tmat: TMatrix, path) -> None:
    """Write a matrix to a UTF-8 JSON document (extension .tmat.json).

    Floats are serialized with repr so entries round-trip bit for bit.
    """
    doc = {
        "version": TMATRIX_FORMAT_VERSION,
        "kappa": float(tmat.kappa),
        "order": int(tmat.order),
        "origin": [float(tmat.origin[0]), float(tmat.origin[1])],
        "rotation": float(tmat.rotation),
        "scatterer_hash": tmat.scatterer_hash,
        "solver_params": tmat.solver_params,
        "symmetry_residual": float(tmat.symmetry_defect),
        "entries": [[float(z.real), float(z.imag)]
                    for z in tmat.entries.ravel()],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def load_tmatrix(path) -> TMatrix:
    """Read a matrix written by save_tmatrix.

    Raises ValueError on malformed documents or unsupported versions and
    logs a warning if the stored symmetry residual does not match the one
    recomputed from the entries.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a valid matrix file: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise ValueError(f"{path}: missing version field")
    if doc["version"] != TMATRIX_FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported format version {doc['version']}")
    try:
        order = int(doc["order"])
        n = 2 * order + 1
        flat = np.asarray(doc["entries"], dtype=float)
        if flat.shape != (n * n, 2):
            raise ValueError(
                f"expected {n * n} entry pairs, found {flat.shape}")
        entries = (flat[:, 0] + 1j * flat[:, 1]).reshape(n, n)
        tmat = TMatrix(
            entries=entries,
            kappa=float(doc["kappa"]),
            order=order,
            origin=np.asarray(doc["origin"], dtype=float),
            scatterer_hash=doc.get("scatterer_hash", ""),
            solver_params=doc.get("solver_params", {}),
            rotation=float(doc.get("rotation", 0.0)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed matrix file: {exc}") from exc
    stored = doc.get("symmetry_residual")
    if stored is not None and abs(stored - tmat.symmetry_defect) > 1e-12 * max(
            1.0, abs(stored)):
        logger.warning(
            "%s: stored symmetry residual %.3e != recomputed %.3e",
            path, stored, tmat.symmetry_defect)
    return tmat


# --- far field and matrix construction --------------------------------------


IPOWERS = np.array([1.0 + 0.0j, 1.0j, -1.0 + 0.0j, -1.0j])


def far_field_from_traces(points, weights, u, du, kappa: float, angles):
    """Far-field pattern from traces on a circle centered at the origin.

    u and du are the field and its outward normal derivative at the
    quadrature points.  The pattern F is normalized so that a radiating
    field behaves as e^{i kappa r} / sqrt(r) * F(theta) for large r; it is
    the boundary integral of u d_n(e^{-i kappa x.d}) - (d_n u) e^{-i kappa
    x.d} over the circle, scaled by e^{i pi/4} / sqrt(8 pi kappa), with
    d = (cos theta, sin theta).
    """
    ang = np.asarray(angles, dtype=float)
    if ang.size == 0:
        raise ValueError("angle list must not be empty")
    squeeze = ang.ndim == 0
    ang = np.atleast_1d(ang).ravel()
    pts = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    u = np.asarray(u, dtype=complex)
    du = np.asarray(du, dtype=complex)
    d = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    normals = pts / np.linalg.norm(pts, axis=1)[:, None]
    kernel = np.exp(-1j * kappa * (pts @ d.T))
    pattern = (w * u) @ ((-1j * kappa) * (normals @ d.T) * kernel)
    pattern -= (w * du) @ kernel
    pattern *= np.exp(0.25j * np.pi) / np.sqrt(8.0 * np.pi * kappa)
    return pattern[0] if squeeze else pattern


def far_field(solution, angles):
    """Far-field pattern of a TDG solution's scattered field.

    Samples the pattern at the given angles by integrating the solution's
    traces over the artificial circle; see far_field_from_traces for the
    normalization.  The solution must come from a mesh with that circle
    (any radius works: the integral is radius-independent up to
    discretization error).
    """
    from . import tdg

    pts, w, _, u, du = tdg.boundary_traces(solution)
    return far_field_from_traces(
        pts, w, u, du, solution.system.kappa_o, angles)


def _mode_loads(l: int, kappa: float):
    """Boundary data (g_D, g_N) for a unit incident regular mode l."""

    def g_D(pts):
        return -eval_regular(l, kappa, pts)

    def g_N(pts, n_gamma):
        return grad_regular(l, kappa, pts) @ np.asarray(n_gamma, dtype=float)

    return g_D, g_N


def _expansion_loads(inc: Expansion):
    """Boundary data (g_D, g_N) for an incident regular expansion."""

    def g_D(pts):
        return -evaluate_expansion(inc, pts)

    def g_N(pts, n_gamma):
        return expansion_gradient(inc, pts) @ np.asarray(n_gamma, dtype=float)

    return g_D, g_N


@dataclass
class TDGSolverHandle:
    """Reusable local solver for the shape a matrix was computed from.

    Wraps the assembled TDG system of the centered scatterer; the
    factorization is cached inside the system after the first solve, so
    follow-up solves against new incident expansions cost one
    back-substitution each.  The ensemble near-field path relies on this:
    it re-solves the local problem with the coupled incident field as
    boundary data and evaluates the solution inside the meshed disk.
    """

    scatterer: object
    system: object
    order: int

    @property
    def kappa(self) -> float:
        """Exterior wavenumber of the wrapped system."""
        return self.system.kappa_o

    @property
    def radius(self) -> float:
        """Radius of the meshed disk (artificial boundary)."""
        return float(self.system.mesh.R)

    def solve_regular(self, coeffs):
        """Solve the local problem for an incident regular expansion.

        coeffs are the expansion coefficients about the mesh center,
        indexed l = -M..M for any order M (an ensemble feeds padded
        vectors longer than the matrix order).  Returns the TDG solution:
        the scattered field on the exterior elements and, for a penetrable
        scatterer, the total transmitted field on the interior ones.
        """
        from . import tdg

        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.ndim != 1 or coeffs.size % 2 != 1:
            raise ValueError(
                "incident coefficients must be a vector of odd length")
        inc = Expansion(
            "regular", self.kappa, np.zeros(2), coeffs.size // 2, coeffs)
        rhs = tdg.assemble_rhs(self.system, *_expansion_loads(inc))
        return tdg.solve(
            self.system, rhs, incident="regular expansion", method="filtered")


def compute_tmatrix(scatterer, kappa: float, h: float, p: int,
                    flux=None, n_angles: int | None = None):
    """Transfer matrix of a polygon scatterer via the DtN-TDG solver.

    The scatterer is centered at its centroid for the solve; the returned
    matrix records the original centroid as its origin.  The order N
    follows truncation_order(kappa, circumradius) and the mesh radius is
    artificial_radius(scatterer, h).  Column l comes from the solve with
    incident data g_D = -psi_l (regular mode l), plus the matching normal
    data for a penetrable scatterer: its far-field pattern is sampled on
    an equispaced grid of 4N + 16 angles (override with n_angles) and
    projected onto the radiating modes with the periodic trapezoid rule,

        T_{ml} = 1/4 sqrt(kappa/pi) i^m (1 + i) integral of
                 pattern_l(theta) e^{-i m theta} dtheta,

    which inverts the large-argument Hankel asymptotics, so that the
    scattered field of incident coefficients a is the radiating expansion
    with coefficients T a.  All 2N + 1 columns share one factorization.

    Returns (matrix, handle); the handle reuses the factorized system for
    near-field solves against arbitrary incident expansions.
    """
    from . import tdg

    centered = scatterer.centered()
    order = truncation_order(kappa, centered.circumradius)
    mesh = build_mesh(centered, artificial_radius(centered, h), h)
    kind = "dirichlet" if scatterer.kind == "sound_soft" else "transmission"
    system = tdg.assemble_system(
        mesh, p, kappa, kind, n_interior=scatterer.n_interior, flux=flux)
    ells = np.arange(-order, order + 1)
    logger.info(
        "computing order-%d transfer matrix (%d columns, %d dofs)",
        order, ells.size, system.n_dofs)
    rhs = np.column_stack([
        tdg.assemble_rhs(system, *_mode_loads(int(l), kappa)) for l in ells])
    sol = tdg.solve(system, rhs, incident="regular modes", method="filtered")

    n_ang = 4 * order + 16 if n_angles is None else int(n_angles)
    if n_ang < 2 * order + 2:
        raise ValueError(
            f"n_angles = {n_ang} cannot resolve modes up to order {order}")
    theta = 2.0 * np.pi * np.arange(n_ang) / n_ang
    patterns = np.column_stack(
        [far_field(sol.column(j), theta) for j in range(ells.size)])
    projector = np.exp(-1j * np.outer(ells, theta)) * (2.0 * np.pi / n_ang)
    constant = 0.25 * np.sqrt(kappa / np.pi) * (1.0 + 1.0j)
    entries = constant * IPOWERS[np.mod(ells, 4)][:, None] * (projector @ patterns)

    params = {
        "h": float(h),
        "p": int(p),
        "M": int(system.flux.M),
        "flux": {"a": system.flux.a, "b": system.flux.b, "d": system.flux.d},
        "n_angles": n_ang,
        "worst_residual": float(sol.residual),
    }
    if system.flux.xi is not None:
        params["xi"] = float(system.flux.xi)
    tmat = TMatrix(
        entries=entries,
        kappa=float(kappa),
        order=order,
        origin=scatterer.centroid,
        scatterer_hash=scatterer_fingerprint(centered),
        solver_params=params,
    )
    logger.info("transfer matrix done: symmetry defect %.3e",
                tmat.symmetry_defect)
    handle = TDGSolverHandle(scatterer=centered, system=system, order=order)
    return tmat, handle
