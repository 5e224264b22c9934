"""Macroscopic residual, kinetics rows and Jacobian."""
import numpy as np
import pytest
from conftest import mesh_1d, mesh_2d, mesh_3d

from dfnfem.assembly import Discretization, butler_volmer_residual, jacobian_macro, residual_macro
from dfnfem.errors import KineticsOverflowError, SingularLogError, StructuralError
from dfnfem.mesh import TAG
from dfnfem.params import exchange_current, ocp

DT = 30.0


def equilibrium_state(disc, params):
    """Rest state built from the node coordinates: phi_s = 0 in the anode, U_c - U_a in the cathode."""
    d = disc.dofs
    mesh = disc.mesh
    Ua = float(ocp(params.materials, "anode", params.anode.c_s0 / params.anode.c_s_max))
    Uc = float(ocp(params.materials, "cathode", params.cathode.c_s0 / params.cathode.c_s_max))
    y = np.zeros(d.size)
    y[d.c] = params.c_e0
    y[d.p] = -Ua
    ax = mesh.thickness_axis
    x_sep = sum(mesh.layer_thickness[k] for k in ("anode_cc", "anode", "separator") if k in mesh.layer_thickness)
    cath = d.s_nodes[mesh.nodes[d.s_nodes, ax] > x_sep * (1 - 1e-12)]
    y[d.dof_s[cath]] = Uc - Ua
    cs = np.empty(d.j.stop - d.j.start)
    cs[d.electrode_slices["anode"]] = params.anode.c_s0
    cs[d.electrode_slices["cathode"]] = params.cathode.c_s0
    return y, cs


def random_state(disc, params, seed):
    rng = np.random.default_rng(seed)
    d = disc.dofs
    y, cs = equilibrium_state(disc, params)
    y[d.c] *= 1 + 0.2 * rng.uniform(-1, 1, d.c.stop)
    y[d.p] += 0.02 * rng.uniform(-1, 1, d.c.stop)
    y[d.s] += 0.02 * rng.uniform(-1, 1, d.s.stop - d.s.start)
    y[d.j] = 3e-5 * rng.uniform(-1, 1, d.j.stop - d.j.start)
    y_prev = y.copy()
    y_prev[d.c] *= 1 + 0.05 * rng.uniform(-1, 1, d.c.stop)
    cs = cs * (1 + 0.05 * rng.uniform(-1, 1, cs.size))
    dcs = -rng.uniform(1e5, 1e6, cs.size)
    return y, y_prev, cs, dcs


# ---------------------------------------------------------------------------
# kinetics rows
# ---------------------------------------------------------------------------

def test_bv_zero_overpotential(params):
    cs = 0.5 * params.anode.c_s_max
    U = float(ocp(params.materials, "anode", 0.5))
    assert butler_volmer_residual(cs, 1000.0, U + 0.1, 0.1, 0.0, params, "anode") == pytest.approx(0.0, abs=1e-20)


def test_bv_hand_value(params):
    a = params.anode
    cs = 0.5 * a.c_s_max
    U = float(ocp(params.materials, "anode", 0.5))
    i0 = a.k_s * params.F * np.sqrt(1000.0 * cs * (a.c_s_max - cs))
    expected = 2.0 * i0 / params.F * np.sinh(params.F * 0.01 / (2 * params.R * params.T))
    got = -butler_volmer_residual(cs, 1000.0, U + 0.01, 0.0, 0.0, params, "anode")
    assert got == pytest.approx(expected, rel=1e-13)
    assert float(exchange_current(a.k_s, cs, a.c_s_max, 1000.0, params.F)) == pytest.approx(i0, rel=1e-13)


def test_bv_near_saturation_vanishes(params):
    """The kinetic term decays like sqrt(c_max - c_s) as the particle surface fills."""
    j = 1.234e-6
    gaps = []
    for eps in (1e-8, 1e-10, 1e-12):
        cs = params.anode.c_s_max * (1 - eps)
        U = float(ocp(params.materials, "anode", 1 - eps))
        gaps.append(j - butler_volmer_residual(cs, 1000.0, U + 0.05, 0.0, j, params, "anode"))
    assert gaps[0] == pytest.approx(10 * gaps[1], rel=1e-3)
    assert gaps[1] == pytest.approx(10 * gaps[2], rel=1e-3)


def test_bv_overflow_reports_node(params):
    with pytest.raises(KineticsOverflowError) as info:
        butler_volmer_residual(0.5 * params.anode.c_s_max, 1000.0, 1e3, 0.0, 0.0, params, "anode", node=7)
    assert info.value.node == 7


def test_bv_rhs_matches_scalar_form(params):
    disc = Discretization(mesh_1d())
    d = disc.dofs
    y, y_prev, cs, _ = random_state(disc, params, 3)
    c, p, s = y[disc.j_cols[:, 0]], y[disc.j_cols[:, 1]], y[disc.j_cols[:, 2]]
    f = disc.bv_rhs(c, p, s, cs, params)
    for e in ("anode", "cathode"):
        sl = d.electrode_slices[e]
        ref = -butler_volmer_residual(cs[sl], c[sl], s[sl], p[sl], 0.0, params, e)
        np.testing.assert_allclose(f[sl], ref, rtol=1e-14, atol=0)


# ---------------------------------------------------------------------------
# residual structure
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("make_mesh", [mesh_1d, mesh_2d, mesh_3d])
def test_equilibrium_state_has_zero_residual(params, make_mesh):
    disc = Discretization(make_mesh())
    y, cs = equilibrium_state(disc, params)
    R, J = disc.residual_and_jacobian(y, y, cs, 0.0, params, DT, 0.0)
    # zero up to the rounding of each row's terms (collector rows carry large conductivities)
    term_size = abs(J) @ np.abs(y)
    assert np.all(np.abs(R) <= 1e-14 * term_size + 1e-20)


def test_uniform_state_under_load_only_tab_rows_1d(params):
    disc = Discretization(mesh_1d())
    d = disc.dofs
    y, cs = equilibrium_state(disc, params)
    R = disc.residual(y, y, cs, params, DT, 24.0)
    tab = np.nonzero(disc.tab_load)[0]
    assert tab.size == 1
    assert R[tab[0]] == pytest.approx(-24.0, rel=1e-14)
    rest = np.delete(R, tab)
    assert np.max(np.abs(rest)) < 1e-12
    assert d.s.start <= tab[0] < d.s.stop


def test_uniform_state_under_load_two_element_tab_2d(params):
    height = 1e-4
    mesh = mesh_2d(ny=2, height=height)
    disc = Discretization(mesh)
    y, cs = equilibrium_state(disc, params)
    R = disc.residual(y, y, cs, params, DT, 24.0)
    tab = np.nonzero(disc.tab_load)[0]
    # tab nodes sorted by their y coordinate: end nodes H/4, middle node H/2
    nodes = disc.dofs.s_nodes[tab - disc.dofs.s.start]
    order = np.argsort(mesh.nodes[nodes, 1])
    np.testing.assert_allclose(R[tab][order], -24.0 * np.array([0.25, 0.5, 0.25]) * height, rtol=1e-13)
    assert np.max(np.abs(np.delete(R, tab))) < 1e-12


def test_tab_scale_3d_maps_plane_current():
    mesh = mesh_3d()
    disc = Discretization(mesh)
    total = disc.tab_load.sum() * disc.current_scale
    assert total == pytest.approx(mesh.plane_area, rel=1e-13)


def test_applied_current_is_affine_and_local(params):
    disc = Discretization(mesh_2d())
    y, y_prev, cs, _ = random_state(disc, params, 1)
    R0 = disc.residual(y, y_prev, cs, params, DT, 0.0)
    R1 = disc.residual(y, y_prev, cs, params, DT, 10.0)
    R2 = disc.residual(y, y_prev, cs, params, DT, 30.0)
    diff = R1 - R0
    changed = np.nonzero(diff)[0]
    np.testing.assert_array_equal(changed, np.nonzero(disc.tab_load)[0])
    np.testing.assert_allclose(R2 - R0, 3 * diff, rtol=1e-12, atol=1e-18)


def test_dirichlet_row_is_identity(params):
    disc = Discretization(mesh_1d())
    y, y_prev, cs, dcs = random_state(disc, params, 2)
    R, J = disc.residual_and_jacobian(y, y_prev, cs, dcs, params, DT, 24.0)
    for k in disc.dirichlet:
        assert R[k] == y[k]
        row = J.getrow(k).toarray().ravel()
        expected = np.zeros_like(row)
        expected[k] = 1.0
        np.testing.assert_array_equal(row, expected)


@pytest.mark.parametrize("make_mesh", [mesh_1d, mesh_2d])
def test_linear_solid_potential_is_discretely_exact(params, make_mesh):
    """phi_s linear across the cathode with slope -i/sigma_eff balances the tab flux."""
    mesh = make_mesh()
    disc = Discretization(mesh)
    d = disc.dofs
    y, cs = equilibrium_state(disc, params)
    ca = params.cathode
    sigma_eff = ca.eps_s**ca.beta * ca.sigma
    i_app = 24.0
    nodes = mesh.electrode_nodes("cathode")
    x = mesh.nodes[nodes, mesh.thickness_axis]
    slope = -i_app / sigma_eff
    y[d.dof_s[nodes]] += slope * (x - x.min())
    R = disc.residual(y, y, cs, params, DT, i_app)
    rows = d.dof_s[nodes]
    interface = np.isclose(x, x.min())
    # interior and tab rows balance, only the separator face carries the flux
    assert np.max(np.abs(R[rows[~interface]])) < 1e-10 * i_app
    face = mesh.plane_area
    assert R[rows[interface]].sum() == pytest.approx(-i_app * face, rel=1e-10)


# ---------------------------------------------------------------------------
# Jacobian
# ---------------------------------------------------------------------------

def test_electrolyte_block_at_uniform_concentration(params):
    """dR_c/dc = eps/dt M + D_eff K assembled by hand from two-node element matrices."""
    mesh = mesh_1d(na=3, ns=2, nc=3)
    disc = Discretization(mesh)
    d = disc.dofs
    y, cs = equilibrium_state(disc, params)
    J = disc.jacobian(y, y, cs, 0.0, params, DT, 0.0).toarray()
    D0 = params.materials.electrolyte_diffusivity(params.c_e0)
    nc = d.c.stop
    ref = np.zeros((nc, nc))
    region = {TAG["anode"]: params.anode, TAG["separator"]: params.separator, TAG["cathode"]: params.cathode}
    for conn, tag in zip(mesh.elements, mesh.tags):
        layer = region[int(tag)]
        h = abs(mesh.nodes[conn[1], 0] - mesh.nodes[conn[0], 0])
        M = h / 6 * np.array([[2.0, 1.0], [1.0, 2.0]])
        K = 1 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])
        Ke = layer.eps_e / DT * M + layer.eps_e**layer.beta * D0 * K
        idx = d.dof_c[conn]
        ref[np.ix_(idx, idx)] += Ke
    np.testing.assert_allclose(J[d.c, d.c], ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def test_kinetics_diagonal_is_one_at_equilibrium(params):
    disc = Discretization(mesh_1d())
    d = disc.dofs
    y, cs = equilibrium_state(disc, params)
    J = disc.jacobian(y, y, cs, 0.0, params, DT, 0.0)
    np.testing.assert_array_equal(J.diagonal()[d.j], 1.0)


@pytest.mark.parametrize("make_mesh,seed", [(mesh_1d, 0), (mesh_1d, 1), (mesh_2d, 2), (mesh_3d, 3)])
def test_jacobian_matches_central_differences(params, make_mesh, seed):
    disc = Discretization(make_mesh())
    d = disc.dofs
    y, y_prev, cs, dcs = random_state(disc, params, seed)
    i_app = 24.0

    def res(z):
        # surface concentration follows the kinetics unknowns through dcs_dj
        return disc.residual(z, y_prev, cs + dcs * (z[d.j] - y[d.j]), params, DT, i_app)

    R, J = disc.residual_and_jacobian(y, y_prev, cs, dcs, params, DT, i_app)
    np.testing.assert_allclose(R, res(y), rtol=1e-13, atol=1e-13 * np.abs(R).max())
    J = J.toarray()
    # typical magnitude of each unknown; errors are judged against the size of each row's terms
    typical = np.maximum(np.abs(y), 1e-3)
    typical[d.j] = 3e-5
    row_scale = np.abs(J) @ typical
    for k in range(d.size):
        h = 1e-6 * typical[k]
        e = np.zeros(d.size)
        e[k] = h
        fd = (res(y + e) - res(y - e)) / (2 * h)
        err = np.abs(J[:, k] - fd) * typical[k] / row_scale
        assert err.max() < 1e-5, k


def test_module_level_forms_match_methods(params):
    disc = Discretization(mesh_1d())
    y, y_prev, cs, dcs = random_state(disc, params, 4)
    np.testing.assert_array_equal(
        residual_macro(disc, y, y_prev, cs, params, DT, 5.0), disc.residual(y, y_prev, cs, params, DT, 5.0)
    )
    J1 = jacobian_macro(disc, y, y_prev, cs, dcs, params, DT, 5.0)
    J2 = disc.jacobian(y, y_prev, cs, dcs, params, DT, 5.0)
    assert abs(J1 - J2).max() == 0


def test_complex_parameters_propagate(params):
    disc = Discretization(mesh_1d())
    y, y_prev, cs, _ = random_state(disc, params, 5)
    h = 1e-30
    pc = params.with_values({"t_plus": params.t_plus + 1j * h})
    dR = disc.residual(y, y_prev, cs, pc, DT, 24.0).imag / h
    d2 = 1e-6
    fd = (
        disc.residual(y, y_prev, cs, params.with_values({"t_plus": params.t_plus + d2}), DT, 24.0)
        - disc.residual(y, y_prev, cs, params.with_values({"t_plus": params.t_plus - d2}), DT, 24.0)
    ) / (2 * d2)
    np.testing.assert_allclose(dR, fd, rtol=1e-6, atol=1e-8 * np.abs(fd).max())


# ---------------------------------------------------------------------------
# conservation and errors
# ---------------------------------------------------------------------------

def test_converged_step_balances_charge(small_model, params):
    model = small_model
    state0 = model.initialize_state(params, 24.0)
    state, _ = model.solve_time_step(state0, params, DT, 24.0)
    d = model.dofs
    j = state.y[d.j]
    for e, sign in (("anode", 1.0), ("cathode", -1.0)):
        w = model.disc.electrode_node_weights(e)
        total = params.F * params.layer(e).a_s * w @ j[d.electrode_slices[e]]
        assert total == pytest.approx(sign * 24.0, rel=1e-8)


def test_non_positive_concentration_is_reported(params):
    disc = Discretization(mesh_1d())
    d = disc.dofs
    y, cs = equilibrium_state(disc, params)
    y[d.c.start + 3:d.c.start + 5] = -1.0
    with pytest.raises(SingularLogError) as info:
        disc.residual(y, y, cs, params, DT, 0.0)
    assert info.value.element is not None


def test_wrong_lengths_are_structural_errors(params):
    disc = Discretization(mesh_1d())
    y, cs = equilibrium_state(disc, params)
    with pytest.raises(StructuralError):
        disc.residual(y[:-1], y[:-1], cs, params, DT, 0.0)
    with pytest.raises(StructuralError):
        disc.residual(y, y, cs[:-1], params, DT, 0.0)
