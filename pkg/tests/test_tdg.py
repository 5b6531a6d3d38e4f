"""Tests for the plane-wave Trefftz DG solver.

The manufactured-solution classes are the real correctness gates: a
radiating exact field for the sound-soft path and a radiating/plane-wave
pair for the penetrable path, both of which must converge under
p-refinement.  Everything else checks the building blocks (edge integrals,
arc quadrature, Fourier traces) against independent quadrature or series
oracles, plus the documented error behavior.
"""

import numpy as np
import pytest

from helmscatter import specfun, tdg, wavefield
from helmscatter.errors import CapabilityError, GeometryError
from helmscatter.geomesh import (
    EDGE_GAMMA,
    EDGE_GAMMA_R,
    EDGE_INNER,
    EdgeGeometry,
    Mesh,
    PolygonScatterer,
    artificial_radius,
    build_mesh,
)
from helmscatter.tdg import (
    FluxParams,
    PWBasis,
    TDGSystem,
    arc_quadrature,
    assemble_rhs,
    assemble_system,
    boundary_traces,
    default_dtn_order,
    eval_solution,
    fourier_traces_on_arcs,
    gamma_r_fourier_traces,
    plane_wave_directions,
    solve,
    straight_edge_integral,
)

SQRT3 = np.sqrt(3.0)


def _segment_gauss(e0, e1, n):
    x, w = np.polynomial.legendre.leggauss(n)
    e0 = np.asarray(e0, dtype=float)
    e1 = np.asarray(e1, dtype=float)
    pts = e0 + 0.5 * (x[:, None] + 1.0) * (e1 - e0)
    return pts, 0.5 * np.linalg.norm(e1 - e0) * w


def _element_outward_normal(mesh, e, k):
    na, nb = mesh.edges[e]
    e0, e1 = mesh.nodes[na], mesh.nodes[nb]
    t = e1 - e0
    n = np.array([t[1], -t[0]]) / np.hypot(*t)
    centroid = mesh.nodes[mesh.elements[k]].mean(axis=0)
    if n @ (centroid - 0.5 * (e0 + e1)) > 0.0:
        n = -n
    return n


@pytest.fixture(scope="module")
def soft_mesh():
    square = PolygonScatterer(
        [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]], kind="sound_soft"
    )
    h = 0.6
    return build_mesh(square, artificial_radius(square, h), h)


@pytest.fixture(scope="module")
def soft_sys(soft_mesh):
    return assemble_system(soft_mesh, 9, 2.0, "dirichlet")


@pytest.fixture(scope="module")
def trans_mesh():
    tri = PolygonScatterer(
        [[0.0, 1.0], [-SQRT3 / 2, -0.5], [SQRT3 / 2, -0.5]],
        kind="penetrable",
        n_interior=2.25,
    )
    h = 0.55
    return build_mesh(tri, artificial_radius(tri, h), h)


@pytest.fixture(scope="module")
def trans_sys(trans_mesh):
    return assemble_system(trans_mesh, 9, 2.0, "transmission", n_interior=2.25)


@pytest.fixture(scope="module")
def ref_mesh():
    # Reference configuration used across the convergence-flavored tests:
    # side-2 square, kappa 5, mesh width 0.5 (p = 20 where a solve is needed).
    square = PolygonScatterer(
        [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]], kind="sound_soft"
    )
    h = 0.5
    return build_mesh(square, artificial_radius(square, h), h)


def _plane_wave_load(system, theta_inc):
    d = np.array([np.cos(theta_inc), np.sin(theta_inc)])
    kappa = system.kappa_o

    def g_D(pts):
        return -np.exp(1j * kappa * (np.asarray(pts) @ d))

    return assemble_rhs(system, g_D)


@pytest.fixture(scope="module")
def ref_solution(ref_mesh):
    system = assemble_system(ref_mesh, 20, 5.0, "dirichlet")
    return solve(system, _plane_wave_load(system, 0.35))


class TestPlaneWaveDirections:
    def test_layout(self):
        d = plane_wave_directions(12)
        assert d.shape == (12, 2)
        assert np.allclose(np.hypot(d[:, 0], d[:, 1]), 1.0, atol=1e-14)
        assert np.allclose(d[0], [np.cos(np.pi / 6), np.sin(np.pi / 6)], atol=1e-14)
        assert np.allclose(d[-1], [1.0, 0.0], atol=1e-13)

    def test_pairwise_distinct(self):
        d = plane_wave_directions(20)
        gram = d @ d.T
        np.fill_diagonal(gram, 0.0)
        assert gram.max() < 1.0 - 1e-3

    def test_too_few(self):
        with pytest.raises(ValueError):
            plane_wave_directions(2)


class TestDefaultDtnOrder:
    def test_reference_value(self):
        # ceil(2 * 2.6142) + 10 = 16 versus truncation order 18 + 5 = 23.
        assert default_dtn_order(2.0, 2.6142135623730955) == 23

    def test_exceeds_kr(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            kappa = float(rng.uniform(0.3, 30.0))
            radius = float(rng.uniform(0.2, 5.0))
            assert default_dtn_order(kappa, radius) > kappa * radius


class TestBasisAndFluxTypes:
    def test_basis_rejects_non_unit(self):
        d = plane_wave_directions(4)
        with pytest.raises(ValueError):
            PWBasis(4, 1.1 * d, np.ones(3))

    def test_basis_rejects_duplicates(self):
        d = plane_wave_directions(4)
        d = np.vstack([d, d[0]])
        with pytest.raises(ValueError):
            PWBasis(5, d, np.ones(3))

    def test_basis_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            PWBasis(6, plane_wave_directions(4), np.ones(3))

    def test_flux_defaults(self):
        flux = FluxParams()
        assert (flux.a, flux.b, flux.d) == (0.5, 0.5, 0.5)
        assert flux.M is None and flux.xi is None

    @pytest.mark.parametrize("bad", [dict(a=0.0), dict(b=-1.0), dict(d=0.0),
                                     dict(M=0), dict(xi=-2.0)])
    def test_flux_validation(self, bad):
        with pytest.raises(ValueError):
            FluxParams(**bad)


class TestStraightEdgeIntegral:
    E0 = np.array([-0.2, 0.5])
    E1 = np.array([0.4, 0.9])

    def _oracle(self, kr, kc, dr, dc, n=32):
        pts, w = _segment_gauss(self.E0, self.E1, n)
        integrand = np.exp(1j * (kc * (pts @ np.asarray(dc)) - kr * (pts @ np.asarray(dr))))
        return complex(w @ integrand)

    def test_equal_parameters_give_length(self):
        d = np.array([np.cos(1.3), np.sin(1.3)])
        length = np.linalg.norm(self.E1 - self.E0)
        for kappa in (2.0, 2.0 * np.sqrt(3.0 + 1.0j)):
            val = straight_edge_integral(kappa, kappa, d, d, self.E0, self.E1)
            assert val == pytest.approx(length, abs=1e-13)

    def test_matches_quadrature_real(self):
        dr = np.array([np.cos(1.1), np.sin(1.1)])
        dc = np.array([np.cos(-0.3), np.sin(-0.3)])
        val = straight_edge_integral(2.0, 5.0, dr, dc, self.E0, self.E1)
        assert abs(val - self._oracle(2.0, 5.0, dr, dc)) <= 1e-12

    def test_matches_quadrature_complex(self):
        # Trial wavenumber of an absorbing interior, n_i = 3 + 1i.
        kc = 2.0 * np.sqrt(3.0 + 1.0j)
        dr = np.array([np.cos(0.8), np.sin(0.8)])
        dc = np.array([np.cos(2.4), np.sin(2.4)])
        val = straight_edge_integral(2.0, kc, dr, dc, self.E0, self.E1)
        assert abs(val - self._oracle(2.0, kc, dr, dc)) <= 1e-12

    def test_swap_conjugation(self):
        kr = 2.0 * np.sqrt(3.0 + 1.0j)
        kc = 1.7 + 0.2j
        dr = np.array([np.cos(0.3), np.sin(0.3)])
        dc = np.array([np.cos(1.9), np.sin(1.9)])
        left = np.conj(straight_edge_integral(kr, kc, dr, dc, self.E0, self.E1))
        right = straight_edge_integral(np.conj(kc), np.conj(kr), dc, dr,
                                       self.E0, self.E1)
        assert abs(left - right) <= 1e-13 * abs(left)

    @pytest.mark.parametrize("eps", [1e-9, 1e-7, 1e-5, 1e-3])
    def test_small_phase_branch(self, eps):
        # Nearly equal parameters straddle the series cutoff; both branches
        # must agree with quadrature, so the value is continuous across it.
        dr = np.array([1.0, 0.0])
        dc = np.array([np.cos(eps), np.sin(eps)])
        val = straight_edge_integral(3.0, 3.0, dr, dc, self.E0, self.E1)
        assert abs(val - self._oracle(3.0, 3.0, dr, dc)) <= 1e-13

    def test_degenerate_edge(self):
        d = np.array([1.0, 0.0])
        with pytest.raises(ValueError):
            straight_edge_integral(1.0, 1.0, d, d, self.E0, self.E0)


def _arc(radius, theta0, theta1, center=(0.0, 0.0)):
    center = np.asarray(center, dtype=float)
    ends = center + radius * np.array(
        [[np.cos(theta0), np.sin(theta0)], [np.cos(theta1), np.sin(theta1)]]
    )
    return EdgeGeometry("arc", ends, center=center, radius=radius,
                        theta0=theta0, theta1=theta1)


class TestArcQuadrature:
    def test_weights_sum_to_arc_length(self):
        arc = _arc(1.7, 0.3, 1.2)
        _, w, _ = arc_quadrature(arc, 8)
        assert abs(w.sum() - 1.7 * 0.9) <= 1e-14

    def test_points_on_circle(self):
        arc = _arc(2.5, -0.4, 0.9, center=(0.3, -0.1))
        pts, _, th = arc_quadrature(arc, 6)
        r = np.hypot(pts[:, 0] - 0.3, pts[:, 1] + 0.1)
        assert np.allclose(r, 2.5, atol=1e-14)
        assert np.all((th > -0.4) & (th < 0.9))

    def test_rejects_straight_edge(self):
        edge = EdgeGeometry("straight", np.array([[0.0, 0.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            arc_quadrature(edge, 4)

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            arc_quadrature(_arc(1.0, 0.0, 1.0), 0)

    def test_full_circle_orthogonality(self):
        arcs = [_arc(1.9, 0.0, 2.1), _arc(1.9, 2.1, 4.2),
                _arc(1.9, 4.2, 2.0 * np.pi)]
        for l in (-3, -1, 0, 2, 5):
            total = 0.0
            for arc in arcs:
                _, w, th = arc_quadrature(arc, 40)
                total += np.sum(w * np.exp(1j * l * th)) / 1.9
            expected = 2.0 * np.pi if l == 0 else 0.0
            assert abs(total - expected) <= 1e-12

    def test_plane_wave_self_convergence(self):
        arc = _arc(2.61, 0.7, 1.8)
        d = np.array([np.cos(0.2), np.sin(0.2)])
        U1, V1 = fourier_traces_on_arcs(5.0, d, [arc], 6)
        U2, V2 = fourier_traces_on_arcs(5.0, d, [arc], 6, n_points=400)
        assert np.max(np.abs(U1 - U2)) <= 1e-10 * np.max(np.abs(U2))
        assert np.max(np.abs(V1 - V2)) <= 1e-10 * np.max(np.abs(V2))


class TestFourierTraces:
    def test_jacobi_anger_on_full_circle(self):
        # The circle trace of a plane wave has Fourier coefficients
        # i^l J_l(kappa R) e^{-i l theta_d}; integrating over a fictitious
        # full-circle element must reproduce them.
        radius, kappa, n_orders = 1.9, 3.2, 12
        arcs = [_arc(radius, 0.0, np.pi), _arc(radius, np.pi, 2.0 * np.pi)]
        dirs = plane_wave_directions(7)
        U, V = fourier_traces_on_arcs(kappa, dirs, arcs, n_orders)
        theta_d = np.arctan2(dirs[:, 1], dirs[:, 0])
        orders = np.arange(-n_orders, n_orders + 1)
        scale = 2.0 * np.pi * radius
        exp_u = np.empty_like(U)
        exp_v = np.empty_like(V)
        for il, l in enumerate(orders):
            radial = specfun.bessel_j(int(l), kappa * radius)
            dradial = kappa * specfun.cyl_derivative("J", int(l), kappa * radius)
            exp_u[:, il] = scale * (1j ** l) * radial * np.exp(-1j * l * theta_d)
            exp_v[:, il] = scale * (1j ** l) * dradial * np.exp(-1j * l * theta_d)
        assert np.max(np.abs(U - exp_u)) <= 1e-10 * np.max(np.abs(exp_u))
        assert np.max(np.abs(V - exp_v)) <= 1e-10 * np.max(np.abs(exp_v))

    def test_constant_has_unit_l0_coefficient(self, soft_mesh):
        # With kappa = 0 every basis function is 1, so the l = 0 trace
        # coefficients of any fixed direction sum to exactly 1 around the
        # circle (and all rows of non-boundary elements stay zero).
        p = 3
        basis = PWBasis(p, plane_wave_directions(p),
                        np.zeros(soft_mesh.n_elements))
        M = 4
        what = gamma_r_fourier_traces(basis, soft_mesh, M)
        boundary = {
            int(soft_mesh.edge_elements[e].max())
            for e in np.flatnonzero(soft_mesh.edge_tags == EDGE_GAMMA_R)
        }
        total = sum(what[k * p, M] for k in boundary)
        assert abs(total - 1.0) <= 1e-12
        for k in range(soft_mesh.n_elements):
            if k not in boundary:
                assert np.all(what[k * p : (k + 1) * p] == 0.0)


class TestAssembleSystem:
    def test_dimension(self, soft_mesh, soft_sys):
        n = 9 * soft_mesh.n_elements
        assert soft_sys.n_dofs == n
        assert soft_sys.matrix.shape == (n, n)

    def test_block_sparsity(self, soft_mesh, soft_sys):
        p = 9
        neighbors = {k: {k} for k in range(soft_mesh.n_elements)}
        for e in range(len(soft_mesh.edges)):
            a, b = soft_mesh.edge_elements[e]
            if a >= 0 and b >= 0:
                neighbors[int(a)].add(int(b))
                neighbors[int(b)].add(int(a))
        boundary = {
            int(soft_mesh.edge_elements[e].max())
            for e in np.flatnonzero(soft_mesh.edge_tags == EDGE_GAMMA_R)
        }
        for k1 in range(soft_mesh.n_elements):
            rows = slice(k1 * p, (k1 + 1) * p)
            for k2 in range(soft_mesh.n_elements):
                block = soft_sys.matrix[rows, k2 * p : (k2 + 1) * p]
                if np.any(block != 0.0):
                    allowed = (k2 in neighbors[k1]) or (
                        k1 in boundary and k2 in boundary
                    )
                    assert allowed, (k1, k2)

    def test_transmission_flux_resolution(self, trans_sys, trans_mesh):
        assert trans_sys.flux.xi == pytest.approx(2.5)  # (2 + 3) / 2
        assert trans_sys.flux.M == default_dtn_order(2.0, trans_mesh.R)
        assert trans_sys.kappa_i == pytest.approx(3.0)

    def test_dtn_truncation_must_exceed_kr(self, soft_mesh):
        with pytest.raises(ValueError, match="M"):
            assemble_system(soft_mesh, 5, 2.0, "dirichlet",
                            flux=FluxParams(M=3))

    def test_large_p_refused(self, soft_mesh):
        with pytest.raises(CapabilityError):
            assemble_system(soft_mesh, 41, 2.0, "dirichlet")

    def test_large_p_override(self):
        square = PolygonScatterer(
            [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]],
            kind="sound_soft",
        )
        mesh = build_mesh(square, artificial_radius(square, 1.0), 1.0)
        system = assemble_system(mesh, 41, 2.0, "dirichlet", allow_large_p=True)
        assert system.n_dofs == 41 * mesh.n_elements

    def test_kind_validation(self, soft_mesh, trans_mesh):
        with pytest.raises(ValueError):
            assemble_system(soft_mesh, 5, 0.0, "dirichlet")
        with pytest.raises(ValueError):
            assemble_system(soft_mesh, 5, 2.0, "neumann")
        with pytest.raises(GeometryError):
            assemble_system(soft_mesh, 5, 2.0, "transmission", n_interior=2.0)
        with pytest.raises(GeometryError):
            assemble_system(trans_mesh, 5, 2.0, "dirichlet")
        with pytest.raises(ValueError):
            assemble_system(soft_mesh, 5, 2.0, "dirichlet", n_interior=2.0)
        with pytest.raises(ValueError):
            assemble_system(trans_mesh, 5, 2.0, "transmission")
        with pytest.raises(ValueError):
            assemble_system(trans_mesh, 5, 2.0, "transmission", n_interior=0.0)
        with pytest.raises(ValueError):
            assemble_system(trans_mesh, 5, 2.0, "transmission",
                            n_interior=2.0 - 1.0j)

    def test_requires_artificial_boundary(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        mesh = Mesh(
            nodes=nodes,
            elements=np.array([[0, 1, 2]]),
            element_region=np.array([0]),
            edges=np.array([[0, 1], [0, 2], [1, 2]]),
            edge_tags=np.array([EDGE_GAMMA, EDGE_GAMMA, EDGE_GAMMA]),
            R=2.0,
            h=1.0,
        )
        with pytest.raises(GeometryError, match="artificial"):
            assemble_system(mesh, 5, 2.0, "dirichlet")


class TestFormSignStructure:
    def test_imag_quadratic_form_nonpositive(self, soft_sys, rng):
        # The penalty and radiation terms make the scheme dissipative:
        # Im A(v, v) <= 0 for every discrete v (frozen sign convention).
        A = soft_sys.matrix
        for _ in range(100):
            v = rng.standard_normal(soft_sys.n_dofs) + 1j * rng.standard_normal(
                soft_sys.n_dofs
            )
            v /= np.linalg.norm(v)
            q = complex(np.vdot(v, A @ v))
            assert q.imag <= 1e-10

    def test_penalty_matrix_negative_imaginary(self, soft_mesh):
        P = assemble_system(soft_mesh, 7, 2.0, "dirichlet",
                            penalty_only=True).matrix
        scale = np.linalg.norm(P)
        assert np.linalg.norm(P + P.conj().T) <= 1e-12 * scale
        eigs = np.linalg.eigvalsh(1j * P)
        assert eigs.min() >= -1e-10 * eigs.max()


class TestManufacturedSolutions:
    def test_sound_soft_p_convergence(self, soft_mesh):
        x0 = np.array([0.3, -0.2])
        kappa = 2.0

        def exact(pts):
            return wavefield.eval_radiating(0, kappa, np.asarray(pts) - x0)

        ang = np.linspace(0.0, 2.0 * np.pi, 24, endpoint=False)
        ring = 0.5 * (np.sqrt(2.0) + soft_mesh.R) * np.column_stack(
            [np.cos(ang), np.sin(ang)]
        )
        errs = []
        for p in (9, 13):
            system = assemble_system(soft_mesh, p, kappa, "dirichlet")
            sol = solve(system, assemble_rhs(system, exact))
            assert sol.residual <= 1e-10
            uh = eval_solution(sol, ring)
            ue = exact(ring)
            errs.append(np.max(np.abs(uh - ue)) / np.max(np.abs(ue)))
        assert errs[0] <= 5e-4
        assert errs[1] <= 2e-5
        assert errs[1] <= errs[0] / 5.0

    @pytest.mark.parametrize("n_i", [2.25, 3.0 + 1.0j])
    def test_transmission_p_convergence(self, n_i):
        tri = PolygonScatterer(
            [[0.0, 1.0], [-SQRT3 / 2, -0.5], [SQRT3 / 2, -0.5]],
            kind="penetrable",
            n_interior=n_i,
        )
        h = 0.55
        mesh = build_mesh(tri, artificial_radius(tri, h), h)
        kappa_o = 2.0
        kappa_i = kappa_o * np.sqrt(complex(n_i))
        x0 = np.array([0.1, 0.05])
        dstar = np.array([np.cos(0.4), np.sin(0.4)])

        def u_out(pts):
            return wavefield.eval_radiating(0, kappa_o, np.asarray(pts) - x0)

        def u_in(pts):
            return np.exp(1j * kappa_i * (np.asarray(pts) @ dstar))

        def g_D(pts):
            return u_out(pts) - u_in(pts)

        def g_N(pts, n_gamma):
            gi = 1j * kappa_i * (dstar @ n_gamma) * u_in(pts)
            go = wavefield.grad_radiating(0, kappa_o, np.asarray(pts) - x0) @ n_gamma
            return gi - go

        ang = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
        ring = 0.5 * (1.0 + mesh.R) * np.column_stack([np.cos(ang), np.sin(ang)])
        inner = 0.3 * np.column_stack([np.cos(ang), np.sin(ang)])
        errs = []
        for p in (9, 13):
            system = assemble_system(mesh, p, kappa_o, "transmission",
                                     n_interior=n_i)
            sol = solve(system, assemble_rhs(system, g_D, g_N))
            assert sol.residual <= 1e-10
            err_o = np.max(np.abs(eval_solution(sol, ring) - u_out(ring)))
            err_o /= np.max(np.abs(u_out(ring)))
            err_i = np.max(np.abs(eval_solution(sol, inner) - u_in(inner)))
            err_i /= np.max(np.abs(u_in(inner)))
            errs.append((err_o, err_i))
        assert errs[1][0] <= 1e-5
        assert errs[1][1] <= 1e-4
        assert errs[1][0] <= errs[0][0] / 5.0
        assert errs[1][1] <= errs[0][1] / 5.0


class TestAssembleRhs:
    def test_zero_data(self, soft_sys, trans_sys):
        zero = lambda pts: np.zeros(len(pts), dtype=complex)
        zero2 = lambda pts, n: np.zeros(len(pts), dtype=complex)
        assert np.all(assemble_rhs(soft_sys, zero) == 0.0)
        assert np.all(assemble_rhs(trans_sys, zero, zero2) == 0.0)

    def test_linearity(self, soft_sys):
        g1 = lambda pts: np.exp(1j * 2.0 * np.asarray(pts)[:, 0])
        g2 = lambda pts: np.asarray(pts)[:, 1] ** 2 + 0.5j
        combo = lambda pts: g1(pts) + 2.0 * g2(pts)
        r1 = assemble_rhs(soft_sys, g1)
        r2 = assemble_rhs(soft_sys, g2)
        rc = assemble_rhs(soft_sys, combo)
        scale = np.linalg.norm(rc)
        assert np.linalg.norm(rc - (r1 + 2.0 * r2)) <= 1e-13 * scale

    def test_transmission_needs_gn(self, trans_sys):
        with pytest.raises(ValueError):
            assemble_rhs(trans_sys, lambda pts: np.ones(len(pts)))

    def test_default_normal_datum_is_minus_gn(self, trans_sys):
        g_D = lambda pts: np.exp(1j * np.asarray(pts)[:, 0])
        g_N = lambda pts, n: (0.3 + 0.1j) * np.asarray(pts)[:, 1]
        explicit = lambda pts, n: -g_N(pts, n)
        a = assemble_rhs(trans_sys, g_D, g_N)
        b = assemble_rhs(trans_sys, g_D, g_N, g_D_normal=explicit)
        assert np.array_equal(a, b)

    def test_dirichlet_matches_quadrature_oracle(self, soft_mesh, soft_sys):
        p, kappa = 9, 2.0
        dirs = soft_sys.basis.directions
        a = soft_sys.flux.a
        d_inc = np.array([np.cos(0.7), np.sin(0.7)])
        g_D = lambda pts: -np.exp(1j * kappa * (np.asarray(pts) @ d_inc))
        expected = np.zeros(soft_sys.n_dofs, dtype=complex)
        for e in np.flatnonzero(soft_mesh.edge_tags == EDGE_GAMMA):
            k = int(soft_mesh.edge_elements[e].max())
            n_k = _element_outward_normal(soft_mesh, e, k)
            na, nb = soft_mesh.edges[e]
            pts, w = _segment_gauss(soft_mesh.nodes[na], soft_mesh.nodes[nb], 64)
            vbar = np.exp(-1j * kappa * (pts @ dirs.T))
            fac = 1j * kappa * (dirs @ n_k - a)
            expected[k * p : (k + 1) * p] += fac * (vbar.T @ (w * g_D(pts)))
        got = assemble_rhs(soft_sys, g_D)
        assert np.max(np.abs(got - expected)) <= 1e-10 * np.max(np.abs(expected))

    def test_transmission_matches_quadrature_oracle(self, trans_mesh, trans_sys):
        p, kappa_o = 9, 2.0
        dirs = trans_sys.basis.directions
        flux = trans_sys.flux
        xi = flux.xi
        d_inc = np.array([np.cos(-0.4), np.sin(-0.4)])
        g_D = lambda pts: -np.exp(1j * kappa_o * (np.asarray(pts) @ d_inc))

        def g_N(pts, n_gamma):
            return 1j * kappa_o * (d_inc @ n_gamma) * np.exp(
                1j * kappa_o * (np.asarray(pts) @ d_inc)
            )

        expected = np.zeros(trans_sys.n_dofs, dtype=complex)
        for e in np.flatnonzero(trans_mesh.edge_tags == EDGE_GAMMA):
            ka, kb = (int(x) for x in trans_mesh.edge_elements[e])
            inside = ka if trans_mesh.element_region[ka] == 1 else kb
            n_gamma = _element_outward_normal(trans_mesh, e, inside)
            na, nb = trans_mesh.edges[e]
            pts, w = _segment_gauss(trans_mesh.nodes[na], trans_mesh.nodes[nb], 64)
            gd, gn = g_D(pts), g_N(pts, n_gamma)
            gdn = -gn
            for k in (ka, kb):
                kap = trans_sys.basis.element_kappa[k]
                n_k = _element_outward_normal(trans_mesh, e, k)
                vbar = np.exp(-1j * kap * (pts @ dirs.T))
                ck = -1j * kap
                row = (
                    0.5 * (ck * (dirs @ n_gamma)) * (vbar.T @ (w * gd))
                    - (1j * flux.b / xi) * (ck * (dirs @ n_k)) * (vbar.T @ (w * gn))
                    - 0.5 * (vbar.T @ (w * gdn))
                    + 1j * xi * flux.a * float(n_gamma @ n_k) * (vbar.T @ (w * gd))
                )
                expected[k * p : (k + 1) * p] += row
        got = assemble_rhs(trans_sys, g_D, g_N)
        assert np.max(np.abs(got - expected)) <= 1e-10 * np.max(np.abs(expected))


class TestSolve:
    def test_zero_rhs(self, soft_sys):
        sol = solve(soft_sys, np.zeros(soft_sys.n_dofs))
        assert np.all(sol.coefficients == 0.0)
        assert sol.residual == 0.0

    def test_stacked_equals_separate(self, soft_sys):
        B = np.column_stack([_plane_wave_load(soft_sys, 0.3),
                             _plane_wave_load(soft_sys, 1.7)])
        stacked = solve(soft_sys, B)
        assert stacked.coefficients.shape == B.shape
        for j in range(2):
            single = solve(soft_sys, B[:, j])
            col = stacked.column(j)
            diff = np.linalg.norm(col.coefficients - single.coefficients)
            assert diff <= 1e-10 * np.linalg.norm(single.coefficients)

    def test_shape_mismatch(self, soft_sys):
        with pytest.raises(ValueError):
            solve(soft_sys, np.zeros(soft_sys.n_dofs + 1))

    def test_column_needs_stacked(self, soft_sys):
        sol = solve(soft_sys, np.zeros(soft_sys.n_dofs))
        with pytest.raises(ValueError):
            sol.column(0)

    def test_singular_matrix_reports_pivot_ratio(self):
        fake = TDGSystem(
            mesh=None, basis=None, flux=FluxParams(), kind="dirichlet",
            kappa_o=1.0, kappa_i=None,
            matrix=np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex),
        )
        with pytest.raises(np.linalg.LinAlgError, match="pivot"):
            solve(fake, np.array([1.0, 0.0]))

    def test_reference_configuration_residual(self, ref_mesh, ref_solution):
        # At p = 20 the plane-wave basis is redundant enough that the matrix
        # is singular to working precision (extended-precision refinement
        # diverges), so the relative-to-load residual sits at the
        # double-precision evaluation floor near 4e-9.  The solve is still
        # backward stable, which is what the direct method can promise; the
        # 1e-10 relative residual holds at the orders below the pathology.
        system = ref_solution.system
        x = ref_solution.coefficients
        b = _plane_wave_load(system, 0.35)
        rnorm = np.linalg.norm(system.matrix @ x - b)
        backward = rnorm / (np.linalg.norm(system.matrix) * np.linalg.norm(x)
                            + np.linalg.norm(b))
        assert backward <= 1e-14
        assert ref_solution.residual <= 1e-8

        moderate = assemble_system(ref_mesh, 13, 5.0, "dirichlet")
        sol = solve(moderate, _plane_wave_load(moderate, 0.35))
        assert sol.residual <= 1e-10


class TestFilteredSolve:
    def test_matches_direct_on_well_conditioned_system(self, soft_mesh):
        # At moderate p both methods resolve the same solution; the filtered
        # minimum-norm answer must reproduce the direct field.
        system = assemble_system(soft_mesh, 9, 2.0, "dirichlet")
        rhs = _plane_wave_load(system, 0.35)
        direct = solve(system, rhs)
        filtered = solve(system, rhs, method="filtered")
        assert filtered.residual <= 1e-10
        ang = np.linspace(0.0, 2.0 * np.pi, 32, endpoint=False)
        ring = 2.0 * np.column_stack([np.cos(ang), np.sin(ang)])
        ud = eval_solution(direct, ring)
        uf = eval_solution(filtered, ring)
        assert np.max(np.abs(ud - uf)) <= 1e-9 * np.max(np.abs(ud))

    def test_minimum_norm_on_singular_basis(self, ref_mesh):
        # At p = 20 the basis is redundant and the matrix numerically rank
        # deficient; the direct solve returns an arbitrary member of the
        # near-null solution family while the filtered solve picks the
        # smallest one, at no cost in residual.
        system = assemble_system(ref_mesh, 20, 5.0, "dirichlet")
        rhs = _plane_wave_load(system, 0.35)
        direct = solve(system, rhs)
        filtered = solve(system, rhs, method="filtered")
        assert filtered.residual <= 1e-6
        norm_d = np.linalg.norm(direct.coefficients)
        norm_f = np.linalg.norm(filtered.coefficients)
        assert norm_f < 0.1 * norm_d

    def test_deterministic(self, soft_sys):
        rhs = _plane_wave_load(soft_sys, 1.1)
        first = solve(soft_sys, rhs, method="filtered")
        second = solve(soft_sys, rhs, method="filtered")
        assert np.array_equal(first.coefficients, second.coefficients)

    def test_unknown_method_rejected(self, soft_sys):
        with pytest.raises(ValueError, match="method"):
            solve(soft_sys, np.zeros(soft_sys.n_dofs), method="qr")


class TestEvalSolution:
    def test_single_coefficient_is_plane_wave(self, soft_sys, soft_mesh):
        k, j = 3, 2
        coeff = np.zeros(soft_sys.n_dofs, dtype=complex)
        coeff[k * 9 + j] = 1.0
        sol = tdg.TDGSolution(soft_sys, coeff)
        centroids = soft_mesh.element_centroids()
        d = soft_sys.basis.directions[j]
        val = eval_solution(sol, centroids[k])
        assert np.ndim(val) == 0
        assert val == pytest.approx(np.exp(2.0j * (centroids[k] @ d)), abs=1e-14)
        other = 17
        assert eval_solution(sol, centroids[other]) == 0.0

    def test_outside_point_named_in_error(self, soft_sys):
        with pytest.raises(GeometryError, match="10"):
            eval_solution(tdg.TDGSolution(
                soft_sys, np.zeros(soft_sys.n_dofs, dtype=complex)),
                np.array([10.0, 0.0]))

    def test_obstacle_interior_rejected(self, soft_sys):
        # The sound-soft mesh leaves the obstacle unmeshed.
        with pytest.raises(GeometryError):
            eval_solution(tdg.TDGSolution(
                soft_sys, np.zeros(soft_sys.n_dofs, dtype=complex)),
                np.array([0.0, 0.0]))

    def test_stacked_solution_rejected(self, soft_sys):
        sol = tdg.TDGSolution(soft_sys,
                              np.zeros((soft_sys.n_dofs, 2), dtype=complex))
        with pytest.raises(ValueError):
            eval_solution(sol, np.array([2.0, 0.0]))

    def test_interior_jumps_decay_with_p(self, ref_mesh):
        # Discontinuities across interior faces are a discretization
        # artifact and must shrink under p-refinement.  Past p of about 17
        # on this mesh the basis redundancy makes the linear system singular
        # to working precision and the midpoint jumps regress, so the decay
        # is asserted over the orders the arithmetic supports.
        jumps = []
        for p in (9, 13, 17):
            system = assemble_system(ref_mesh, p, 5.0, "dirichlet")
            sol = solve(system, _plane_wave_load(system, 0.35))
            dirs = system.basis.directions
            total = 0.0
            for e in np.flatnonzero(ref_mesh.edge_tags == EDGE_INNER)[:40]:
                na, nb = ref_mesh.edges[e]
                mid = 0.5 * (ref_mesh.nodes[na] + ref_mesh.nodes[nb])
                ka, kb = (int(x) for x in ref_mesh.edge_elements[e])
                vals = []
                for k in (ka, kb):
                    kap = system.basis.element_kappa[k]
                    c = sol.coefficients[k * p : (k + 1) * p]
                    vals.append(np.exp(1j * kap * (mid @ dirs.T)) @ c)
                total += abs(vals[0] - vals[1])
            jumps.append(total)
        assert jumps[1] < jumps[0]
        assert jumps[2] < jumps[1]


class TestBoundaryTraces:
    def test_matches_exact_solution(self, soft_mesh):
        x0 = np.array([0.3, -0.2])
        kappa = 2.0

        def exact(pts):
            return wavefield.eval_radiating(0, kappa, np.asarray(pts) - x0)

        system = assemble_system(soft_mesh, 13, kappa, "dirichlet")
        sol = solve(system, assemble_rhs(system, exact))
        pts, w, th, u, du = boundary_traces(sol)
        R = soft_mesh.R
        assert abs(w.sum() - 2.0 * np.pi * R) <= 1e-12 * R
        assert np.allclose(np.hypot(pts[:, 0], pts[:, 1]), R, atol=1e-12)
        ue = exact(pts)
        scale = np.max(np.abs(ue))
        assert np.max(np.abs(u - ue)) <= 1e-3 * scale
        grad = wavefield.grad_radiating(0, kappa, pts - x0)
        due = (grad * pts).sum(axis=1) / R
        assert np.max(np.abs(du - due)) <= 1e-3 * np.max(np.abs(due))

    def test_agrees_with_eval(self, soft_mesh):
        system = assemble_system(soft_mesh, 9, 2.0, "dirichlet")
        sol = solve(system, _plane_wave_load(system, 1.2))
        pts, _, _, u, _ = boundary_traces(sol)
        assert np.max(np.abs(u - eval_solution(sol, pts))) <= 1e-10

    def test_penalty_only_has_no_traces(self, soft_mesh):
        system = assemble_system(soft_mesh, 5, 2.0, "dirichlet",
                                 penalty_only=True)
        sol = tdg.TDGSolution(system, np.zeros(system.n_dofs, dtype=complex))
        with pytest.raises(ValueError):
            boundary_traces(sol)


class TestDtnTruncationSaturation:
    def test_solution_insensitive_beyond_default(self, ref_mesh):
        # The discrete boundary trace carries inter-element jumps whose
        # Fourier tail feeds the added DtN orders, so raising M beyond the
        # default perturbs the solution at the level of those jumps (not at
        # roundoff).  Pin that the perturbation is small in the field and
        # bounded in the coefficients.
        base_sys = assemble_system(ref_mesh, 13, 5.0, "dirichlet")
        M = base_sys.flux.M
        base = solve(base_sys, _plane_wave_load(base_sys, 0.35))
        bumped_sys = assemble_system(ref_mesh, 13, 5.0, "dirichlet",
                                     flux=FluxParams(M=M + 5))
        bumped = solve(bumped_sys, _plane_wave_load(bumped_sys, 0.35))
        cdiff = np.linalg.norm(bumped.coefficients - base.coefficients)
        assert cdiff <= 1e-2 * np.linalg.norm(base.coefficients)
        ang = np.linspace(0.0, 2.0 * np.pi, 32, endpoint=False)
        ring = 1.9 * np.column_stack([np.cos(ang), np.sin(ang)])
        u1 = eval_solution(base, ring)
        u2 = eval_solution(bumped, ring)
        assert np.max(np.abs(u2 - u1)) <= 1e-4 * np.max(np.abs(u1))
