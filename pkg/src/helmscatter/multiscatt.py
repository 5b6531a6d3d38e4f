"""Coupled multiple scattering by ensembles of precomputed scatterers.

An ensemble places rotated copies of a few reference shapes at given
positions. Each copy j carries the transfer matrix of its shape, rotated
to its orientation, and the coupled system

    b_j = T_j (a_j + sum_{i != j} S_{ji} b_i)

is solved for the radiating coefficients b_j, where a_j expands the
incident field about center j and S_{ji} re-expands radiating modes of
obstacle i as regular modes about center j. The total field is then the
incident field plus all radiating expansions; near the obstacles it can be
re-rendered by a local solve on each meshed disk.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapabilityError,
    ConvergenceError,
    GeometryError,
    SeparationError,
)
from .tmatrix import rotate_tmatrix, scatterer_fingerprint, truncation_order
from .wavefield import (
    Expansion,
    evaluate_expansion,
    rotation_diag,
    translation_matrix,
)

logger = logging.getLogger(__name__)

GMRES_TOL = 1e-8
GMRES_MAX_ITER = 200

# Largest coupled system the dense cross-validation path will assemble.
DENSE_LIMIT = 5000

# Extra expansion orders for the incident data of a near-field re-solve.
NEAR_FIELD_PAD = 10


@dataclass
class Ensemble:
    """Arrangement of rotated shape copies sharing one exterior medium.

    shapes holds the distinct reference scatterers (polygons, or anything
    exposing kind/circumradius such as the analytic circles used in
    tests). Obstacle j is shapes[shape_index[j]] rotated by rotations[j]
    about its centroid and centered at positions[j].
    """

    shapes: list
    shape_index: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    kappa: float

    def __post_init__(self):
        if len(self.shapes) == 0:
            raise GeometryError("ensemble needs at least one shape")
        self.shape_index = np.asarray(self.shape_index, dtype=int).ravel()
        n = self.shape_index.size
        if n == 0:
            raise GeometryError("ensemble needs at least one obstacle")
        self.positions = np.asarray(
            self.positions, dtype=float).reshape(n, 2)
        self.rotations = np.asarray(
            self.rotations, dtype=float).reshape(n)
        bad = (self.shape_index < 0) | (self.shape_index >= len(self.shapes))
        if np.any(bad):
            raise GeometryError(
                f"shape indices {self.shape_index[bad]} out of range for "
                f"{len(self.shapes)} shapes")
        if not self.kappa > 0.0:
            raise GeometryError("ensemble wavenumber must be positive")

    @property
    def n_obstacles(self) -> int:
        return self.shape_index.size

    @property
    def disk_radii(self) -> np.ndarray:
        """Per-obstacle expansion disk radius (shape circumradius)."""
        per_shape = np.array([s.circumradius for s in self.shapes])
        return per_shape[self.shape_index]

    def truncation_orders(self) -> np.ndarray:
        """Per-obstacle expansion order from the standard truncation rule."""
        per_shape = np.array([
            truncation_order(self.kappa, s.circumradius)
            for s in self.shapes])
        return per_shape[self.shape_index]


@dataclass
class ArrangementReport:
    """Separation diagnostics: hard entries invalidate the solve, soft
    entries only disable near-field rendering. Each entry is
    (i, j, distance, required distance)."""

    hard: list = field(default_factory=list)
    soft: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.hard

    @property
    def near_field_ok(self) -> bool:
        return not self.hard and not self.soft

    def describe(self) -> str:
        lines = []
        for i, j, dist, need in self.hard:
            lines.append(
                f"obstacles {i} and {j}: expansion disks overlap "
                f"(distance {dist:.6g}, need > {need:.6g})")
        for i, j, dist, need in self.soft:
            lines.append(
                f"obstacles {i} and {j}: meshed disks overlap "
                f"(distance {dist:.6g}, need > {need:.6g}); "
                "near-field rendering disabled")
        return "\n".join(lines)


def validate_arrangement(ensemble: Ensemble, h: float | None = None,
                         gamma_radii=None) -> ArrangementReport:
    """Check pairwise obstacle separations.

    Hard constraint: expansion disks |c_i - c_j| > R_i + R_j (the coupled
    system is meaningless otherwise). Soft constraint, checked when the
    mesh width h or explicit per-obstacle meshed-disk radii are given: the
    meshed disks of radius R + 2h must not intersect, otherwise the
    near-field representation is unavailable.
    """
    radii = ensemble.disk_radii
    if gamma_radii is None and h is not None:
        gamma_radii = radii + 2.0 * float(h)
    report = ArrangementReport()
    pos = ensemble.positions
    for i in range(ensemble.n_obstacles):
        for j in range(i + 1, ensemble.n_obstacles):
            dist = float(np.hypot(*(pos[i] - pos[j])))
            need = float(radii[i] + radii[j])
            if dist <= need:
                report.hard.append((i, j, dist, need))
            elif gamma_radii is not None:
                soft_need = float(gamma_radii[i] + gamma_radii[j])
                if dist <= soft_need:
                    report.soft.append((i, j, dist, soft_need))
    return report


def _check_incident(incident, ensemble: Ensemble):
    if abs(incident.kappa - ensemble.kappa) > 1e-12 * ensemble.kappa:
        raise ValueError(
            f"incident wavenumber {incident.kappa} does not match the "
            f"ensemble wavenumber {ensemble.kappa}")
    location = getattr(incident, "location", None)
    if location is not None:
        dist = np.linalg.norm(ensemble.positions - location, axis=1)
        inside = np.flatnonzero(dist <= ensemble.disk_radii)
        if inside.size:
            raise GeometryError(
                f"point source at {tuple(location)} lies inside the "
                f"expansion disk of obstacle {inside[0]}")


def incident_local_coeffs(incident, ensemble: Ensemble, orders=None) -> list:
    """Regular expansion coefficients of the incident field per obstacle.

    orders defaults to the standard per-shape truncation orders; solve_multi
    passes the orders of the supplied transfer matrices instead.
    """
    _check_incident(incident, ensemble)
    if orders is None:
        orders = ensemble.truncation_orders()
    return [
        incident.local_coeffs(ensemble.positions[j], int(orders[j]))
        .coefficients
        for j in range(ensemble.n_obstacles)
    ]


def _coupling_blocks(ensemble: Ensemble, orders) -> dict:
    """Dense translation blocks S_{ji} for all obstacle pairs."""
    blocks = {}
    for j in range(ensemble.n_obstacles):
        for i in range(ensemble.n_obstacles):
            if i == j:
                continue
            offset = ensemble.positions[j] - ensemble.positions[i]
            blocks[j, i] = translation_matrix(
                "radiating_to_regular", offset, ensemble.kappa,
                int(orders[j]), int(orders[i]))
    return blocks


def _gmres(apply_op, rhs: np.ndarray, tol: float, max_iter: int):
    """Full (non-restarted) GMRES with modified Gram-Schmidt.

    Returns (solution, relative residual history). The small Hessenberg
    least-squares problem is re-solved each iteration; at the desk scales
    this module targets, orthogonalization dominates anyway.
    """
    n = rhs.size
    bnorm = float(np.linalg.norm(rhs))
    if bnorm == 0.0:
        return np.zeros(n, dtype=complex), [0.0]
    steps = min(max_iter, n)
    basis = np.zeros((n, steps + 1), dtype=complex)
    hess = np.zeros((steps + 1, steps), dtype=complex)
    basis[:, 0] = rhs / bnorm
    e1 = np.zeros(steps + 1, dtype=complex)
    e1[0] = bnorm
    history = []
    for k in range(steps):
        w = apply_op(basis[:, k])
        for i in range(k + 1):
            hess[i, k] = np.vdot(basis[:, i], w)
            w = w - hess[i, k] * basis[:, i]
        hnorm = float(np.linalg.norm(w))
        hess[k + 1, k] = hnorm
        y, *_ = np.linalg.lstsq(
            hess[: k + 2, : k + 1], e1[: k + 2], rcond=None)
        resid = float(
            np.linalg.norm(e1[: k + 2] - hess[: k + 2, : k + 1] @ y)) / bnorm
        history.append(resid)
        if resid <= tol:
            return basis[:, : k + 1] @ y, history
        if hnorm <= 1e-14 * bnorm or k == steps - 1:
            break
        basis[:, k + 1] = w / hnorm
    err = ConvergenceError(
        f"coupled solve stalled at relative residual {history[-1]:.3e} "
        f"after {len(history)} iterations (target {tol:.1e})")
    err.history = history
    raise err


@dataclass
class MultiSolution:
    """Solved ensemble: per-obstacle radiating coefficients plus context.

    handles, when present, map shape indices to the reusable local TDG
    solvers needed for near-field evaluation.
    """

    ensemble: Ensemble
    incident: object
    coefficients: list
    residuals: list
    method: str
    handles: list | None = None

    @property
    def orders(self) -> np.ndarray:
        return np.array([(len(b) - 1) // 2 for b in self.coefficients])


def solve_multi(ensemble: Ensemble, tmatrices, incident,
                tol: float = GMRES_TOL, max_iter: int = GMRES_MAX_ITER,
                method: str = "gmres", handles=None) -> MultiSolution:
    """Solve the coupled scattering system for an ensemble.

    tmatrices lists one transfer matrix per shape (not per obstacle);
    per-obstacle matrices come from rotating them. method is "gmres"
    (matrix-free, default), "direct" (dense assembly, for cross-checks,
    refused above DENSE_LIMIT unknowns), or "fixed_point" (Neumann-style
    coupling iteration, converges for well-separated obstacles).
    """
    if len(tmatrices) != len(ensemble.shapes):
        raise ValueError(
            f"{len(tmatrices)} transfer matrices for "
            f"{len(ensemble.shapes)} shapes")
    for s, tm in enumerate(tmatrices):
        if abs(tm.kappa - ensemble.kappa) > 1e-12 * ensemble.kappa:
            raise ValueError(
                f"transfer matrix {s} wavenumber {tm.kappa} does not match "
                f"ensemble wavenumber {ensemble.kappa}")
    report = validate_arrangement(ensemble)
    if not report.ok:
        raise SeparationError(
            "arrangement violates the separation condition:\n"
            + report.describe())
    n_obs = ensemble.n_obstacles
    rotated = [
        rotate_tmatrix(tmatrices[ensemble.shape_index[j]],
                       float(ensemble.rotations[j]))
        for j in range(n_obs)
    ]
    orders = np.array([tm.order for tm in rotated])
    sizes = 2 * orders + 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_tot = int(offsets[-1])
    a_locals = incident_local_coeffs(incident, ensemble, orders=orders)
    blocks = _coupling_blocks(ensemble, orders)

    def split(x):
        return [x[offsets[j]: offsets[j + 1]] for j in range(n_obs)]

    def apply_op(x):
        parts = split(x)
        out = np.empty_like(x)
        for j in range(n_obs):
            coupled = np.zeros(sizes[j], dtype=complex)
            for i in range(n_obs):
                if i != j:
                    coupled += blocks[j, i] @ parts[i]
            out[offsets[j]: offsets[j + 1]] = (
                parts[j] - rotated[j].entries @ coupled)
        return out

    rhs = np.concatenate([
        rotated[j].entries @ a_locals[j] for j in range(n_obs)])
    logger.info(
        "coupled system: %d obstacles, %d unknowns, method=%s",
        n_obs, n_tot, method)

    if method == "gmres":
        x, history = _gmres(apply_op, rhs, tol, max_iter)
    elif method == "direct":
        if n_tot > DENSE_LIMIT:
            raise CapabilityError(
                f"dense solve refused for {n_tot} > {DENSE_LIMIT} unknowns")
        dense = np.eye(n_tot, dtype=complex)
        for j in range(n_obs):
            for i in range(n_obs):
                if i != j:
                    dense[offsets[j]: offsets[j + 1],
                          offsets[i]: offsets[i + 1]] = (
                        -rotated[j].entries @ blocks[j, i])
        x = np.linalg.solve(dense, rhs)
        bnorm = np.linalg.norm(rhs)
        res = float(np.linalg.norm(rhs - apply_op(x)))
        history = [res / bnorm if bnorm > 0.0 else 0.0]
    elif method == "fixed_point":
        bnorm = float(np.linalg.norm(rhs))
        x = rhs.copy()
        history = []
        if bnorm == 0.0:
            history.append(0.0)
        for _ in range(max_iter):
            if bnorm == 0.0:
                break
            resid = rhs - apply_op(x)
            rel = float(np.linalg.norm(resid)) / bnorm
            history.append(rel)
            if rel <= tol:
                break
            x = x + resid
        else:
            err = ConvergenceError(
                f"coupling iteration stalled at relative residual "
                f"{history[-1]:.3e} after {max_iter} sweeps (target "
                f"{tol:.1e}); the obstacles may be too strongly coupled")
            err.history = history
            raise err
    else:
        raise ValueError(f"unknown solve method {method!r}")
    logger.info("coupled solve done: residual %.3e after %d iterations",
                history[-1], len(history))
    return MultiSolution(
        ensemble=ensemble, incident=incident, coefficients=split(x),
        residuals=history, method=method, handles=handles)


def _rotate_points(points, alpha):
    c, s = np.cos(alpha), np.sin(alpha)
    x, y = points[..., 0], points[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def _scattered_sum(msol: MultiSolution, pts: np.ndarray) -> np.ndarray:
    ens = msol.ensemble
    out = np.zeros(len(pts), dtype=complex)
    for j in range(ens.n_obstacles):
        exp = Expansion(
            "radiating", ens.kappa, ens.positions[j],
            int(msol.orders[j]), msol.coefficients[j])
        out += evaluate_expansion(exp, pts)
    return out


def _near_field_values(msol: MultiSolution, j: int, pts: np.ndarray):
    """Total field at points inside obstacle j's meshed disk.

    The local problem is solved in the reference frame of the unrotated,
    centered shape: incident data is the field of everything else (incident
    wave plus the other obstacles' radiating expansions) expanded about the
    obstacle center, with the frame rotation applied as a diagonal phase.
    """
    from . import tdg
    from .geomesh import winding_inside

    ens = msol.ensemble
    shape_id = int(ens.shape_index[j])
    handle = msol.handles[shape_id]
    if handle is None:
        raise ValueError(f"no local solver available for shape {shape_id}")
    alpha = float(ens.rotations[j])
    order = int(msol.orders[j]) + NEAR_FIELD_PAD
    coeffs = msol.incident.local_coeffs(
        ens.positions[j], order).coefficients.copy()
    for i in range(ens.n_obstacles):
        if i == j:
            continue
        shift = translation_matrix(
            "radiating_to_regular", ens.positions[j] - ens.positions[i],
            ens.kappa, order, int(msol.orders[i]))
        coeffs += shift @ msol.coefficients[i]
    coeffs *= rotation_diag(alpha, order)
    sol = handle.solve_regular(coeffs)

    ref_pts = _rotate_points(pts - ens.positions[j], -alpha)
    values = np.empty(len(pts), dtype=complex)
    inside = winding_inside(ref_pts, handle.scatterer.vertices)
    if np.any(inside):
        if handle.scatterer.kind == "sound_soft":
            values[inside] = 0.0
        else:
            values[inside] = tdg.eval_solution(sol, ref_pts[inside])
    outside = ~inside
    if np.any(outside):
        local_inc = Expansion(
            "regular", ens.kappa, np.zeros(2), order, coeffs)
        values[outside] = (
            evaluate_expansion(local_inc, ref_pts[outside])
            + tdg.eval_solution(sol, ref_pts[outside]))
    return values


def total_field(msol: MultiSolution, points, near_field: bool = False):
    """Total acoustic field of a solved ensemble at the given points.

    Outside every obstacle's meshed disk the field is the incident wave
    plus the radiating expansions. With near_field enabled (requires the
    solver handles and pairwise disjoint meshed disks), points inside a
    meshed disk are rendered from a local solve: sound-soft interiors
    are 0 by convention, penetrable interiors carry the transmitted
    field. Without near_field, points inside any expansion disk are
    refused.
    """
    pts = np.asarray(points, dtype=float)
    squeeze = pts.ndim == 1
    flat = np.atleast_2d(pts).reshape(-1, 2)
    ens = msol.ensemble
    dist = np.linalg.norm(
        flat[:, None, :] - ens.positions[None, :, :], axis=2)

    if near_field:
        if msol.handles is None or any(h is None for h in msol.handles):
            raise ValueError(
                "near-field evaluation needs a solver handle for every "
                "shape; pass them to solve_multi")
        gamma_radii = np.array([
            msol.handles[int(s)].radius for s in ens.shape_index])
        report = validate_arrangement(ensemble=ens, gamma_radii=gamma_radii)
        if not report.near_field_ok:
            raise SeparationError(
                "near-field rendering unavailable, the obstacles are too "
                "close:\n" + report.describe())
        in_disk = dist < gamma_radii[None, :]
        owner = np.where(in_disk.any(axis=1), in_disk.argmax(axis=1), -1)
        out = np.empty(len(flat), dtype=complex)
        far = owner < 0
        if np.any(far):
            out[far] = (msol.incident.value(flat[far])
                        + _scattered_sum(msol, flat[far]))
        for j in np.unique(owner[owner >= 0]):
            sel = owner == j
            out[sel] = _near_field_values(msol, int(j), flat[sel])
    else:
        violation = dist < ens.disk_radii[None, :]
        if np.any(violation):
            p, j = np.argwhere(violation)[0]
            raise GeometryError(
                f"point ({flat[p, 0]:.6g}, {flat[p, 1]:.6g}) lies inside "
                f"the expansion disk of obstacle {j}; enable near_field "
                "to evaluate there")
        out = msol.incident.value(flat) + _scattered_sum(msol, flat)
    out = out.reshape(() if squeeze else pts.shape[:-1])
    return out


def disk_quadrature(center, radius: float, n_quad: int):
    """Tensor polar rule on a disk: n_quad radial Gauss points times
    2 n_quad equispaced angles. Returns (points, weights); the weights
    include the polar Jacobian and sum to the disk area."""
    if radius <= 0.0 or n_quad < 1:
        raise ValueError("disk quadrature needs radius > 0 and n_quad >= 1")
    center = np.asarray(center, dtype=float).reshape(2)
    x, wx = np.polynomial.legendre.leggauss(n_quad)
    r = 0.5 * radius * (x + 1.0)
    wr = 0.5 * radius * wx
    theta = 2.0 * np.pi * np.arange(2 * n_quad) / (2 * n_quad)
    rr = np.repeat(r, 2 * n_quad)
    tt = np.tile(theta, n_quad)
    pts = center[None, :] + np.stack(
        [rr * np.cos(tt), rr * np.sin(tt)], axis=1)
    w = np.repeat(wr * r, 2 * n_quad) * (np.pi / n_quad)
    return pts, w


def l2_norm_on_disk(msol: MultiSolution, center, radius: float,
                    n_quad: int = 40) -> float:
    """L2 norm of the total field over a disk, by tensor polar quadrature.

    The disk must lie in the region where the outer representation is
    valid (outside every obstacle's expansion disk)."""
    pts, w = disk_quadrature(center, radius, n_quad)
    vals = total_field(msol, pts)
    return float(np.sqrt(np.sum(w * np.abs(vals) ** 2)))


@dataclass
class SweepResult:
    """Table of (parameter, observable) rows from a parameter sweep.

    Rows whose generated arrangement violates the separation condition are
    flagged invalid and carry NaN observables."""

    parameters: np.ndarray
    observables: np.ndarray
    valid: np.ndarray

    @property
    def argmax(self) -> float:
        """Parameter value maximizing the observable over valid rows."""
        if not np.any(self.valid):
            raise ValueError("no valid sweep rows")
        obs = np.where(self.valid, self.observables, -np.inf)
        return float(self.parameters[int(np.argmax(obs))])


def sweep(ensemble_generator, values, incident, observable: dict,
          h: float, p: int, tol: float = GMRES_TOL,
          max_iter: int = GMRES_MAX_ITER, method: str = "gmres",
          tmatrices=None, handles=None) -> SweepResult:
    """Evaluate an observable across a family of arrangements.

    The generator maps each parameter value to an Ensemble over one fixed
    shape list; transfer matrices are computed once per shape (or taken
    from tmatrices if given) and reused for every row, which is the point
    of the transfer-matrix factorization. observable holds the
    l2_norm_on_disk arguments: center, radius, and optionally n_quad.
    """
    from .tmatrix import compute_tmatrix

    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("sweep needs at least one parameter value")
    first = ensemble_generator(float(values[0]))
    prints = [scatterer_fingerprint(s.centered() if hasattr(s, "centered")
                                    else s) for s in first.shapes]
    if tmatrices is None:
        tmatrices, handles = [], []
        for shape in first.shapes:
            tm, handle = compute_tmatrix(shape, first.kappa, h, p)
            tmatrices.append(tm)
            handles.append(handle)
    obs_args = dict(observable)
    center = obs_args.pop("center")
    radius = obs_args.pop("radius")
    n_quad = int(obs_args.pop("n_quad", 40))
    if obs_args:
        raise ValueError(f"unknown observable arguments {sorted(obs_args)}")

    results = np.full(values.size, np.nan)
    valid = np.zeros(values.size, dtype=bool)
    for row, value in enumerate(values):
        ens = ensemble_generator(float(value))
        row_prints = [
            scatterer_fingerprint(s.centered() if hasattr(s, "centered")
                                  else s) for s in ens.shapes]
        if row_prints != prints or ens.kappa != first.kappa:
            raise ValueError(
                f"generator changed shapes or wavenumber at parameter "
                f"{value}; transfer matrices cannot be reused")
        try:
            msol = solve_multi(
                ens, tmatrices, incident, tol=tol, max_iter=max_iter,
                method=method, handles=handles)
            results[row] = l2_norm_on_disk(msol, center, radius, n_quad)
            valid[row] = True
        except SeparationError as exc:
            logger.warning("parameter %g skipped: %s", value, exc)
    return SweepResult(parameters=values, observables=results, valid=valid)
