"""Macroscopic residual blocks and their sparse Jacobian.

Unknowns are ordered as one flat vector ``y = [c_e, phi_e, phi_s, j_s]``
over the nodes that carry each field (see :class:`DofMap`). The residual
rows are

    R_c = eps_e M (c - c_prev) / dt + int D_eff grad(psi) . grad(c) - a_s (1 - t+) M j
    R_p = int kappa_eff grad(psi) . (grad(phi_e) - 2RT(1 - t+)/F grad(c) / c) - a_s F M j
    R_s = -int sigma_eff grad(psi) . grad(phi_s) - a_s F M j - int_tab psi i_tab
    R_j = j - 2 i0 / F sinh(F eta / 2RT)

with M the consistent mass matrix of the element. The solid-charge rows
carry an overall minus sign so that a positive applied current density is
a discharge; the anode tab rows are replaced by phi_s = 0.

Element tangents are obtained by complex-step differentiation of the
vectorised element residual, which is exact to roundoff.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import KineticsOverflowError, SingularLogError, StructuralError
from .mesh import ELECTRODES, TAG, MacroMesh, reference_corners
from .params import ParameterSet, exchange_current, ocp

SINH_CAP = 40.0
CS_STEP = 1e-20  # complex-step size for state derivatives

_GP = 1.0 / np.sqrt(3.0)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ElementGeometry:
    N: np.ndarray  # (nq, nen) shape values at quadrature points
    dN: np.ndarray  # (E, nq, nen, dim) physical gradients
    w: np.ndarray  # (E, nq) quadrature weight times |det J|
    M: np.ndarray  # (E, nen, nen) unit-coefficient consistent mass


def element_geometry(mesh: MacroMesh, elements: np.ndarray) -> ElementGeometry:
    dim = mesh.dim
    corners = reference_corners(dim)  # (nen, dim)
    qpts = np.array(np.meshgrid(*[[-_GP, _GP]] * dim, indexing="ij")).reshape(dim, -1).T  # (nq, dim)
    # shape functions and reference gradients
    fac = 0.5 * (1.0 + qpts[:, None, :] * corners[None, :, :])  # (nq, nen, dim)
    N = np.prod(fac, axis=2)
    dNref = np.empty(fac.shape)
    for d in range(dim):
        others = np.prod(np.delete(fac, d, axis=2), axis=2) if dim > 1 else 1.0
        dNref[:, :, d] = 0.5 * corners[None, :, d] * others
    X = mesh.nodes[elements]  # (E, nen, dim)
    J = np.einsum("ead,qak->eqdk", X, dNref)  # dx_d / dxi_k
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise StructuralError("inverted or degenerate element")
    Jinv = np.linalg.inv(J)
    dN = np.einsum("qak,eqkd->eqad", dNref, Jinv)
    w = np.abs(det)  # unit Gauss weights for the 2-point rule
    M = np.einsum("eq,qa,qb->eab", w, N, N)
    return ElementGeometry(N=N, dN=dN, w=w, M=M)


# ---------------------------------------------------------------------------
# degrees of freedom
# ---------------------------------------------------------------------------

class DofMap:
    """Index map between nodal fields and the flat macroscopic vector."""

    def __init__(self, mesh: MacroMesh):
        n = mesh.n_nodes
        self.c_nodes = np.nonzero(mesh.has_c)[0]
        self.s_nodes = np.nonzero(mesh.has_s)[0]
        self.j_nodes = np.concatenate([mesh.electrode_nodes(e) for e in ELECTRODES])
        nc, ns, nj = self.c_nodes.size, self.s_nodes.size, self.j_nodes.size
        self.dof_c = np.full(n, -1)
        self.dof_p = np.full(n, -1)
        self.dof_s = np.full(n, -1)
        self.dof_j = np.full(n, -1)
        self.dof_c[self.c_nodes] = np.arange(nc)
        self.dof_p[self.c_nodes] = nc + np.arange(nc)
        self.dof_s[self.s_nodes] = 2 * nc + np.arange(ns)
        self.dof_j[self.j_nodes] = 2 * nc + ns + np.arange(nj)
        self.c = slice(0, nc)
        self.p = slice(nc, 2 * nc)
        self.s = slice(2 * nc, 2 * nc + ns)
        self.j = slice(2 * nc + ns, 2 * nc + ns + nj)
        self.size = 2 * nc + ns + nj
        # j dofs of each electrode, as slices of the j block
        self.electrode_slices = {}
        start = 0
        for e in ELECTRODES:
            k = mesh.electrode_nodes(e).size
            self.electrode_slices[e] = slice(start, start + k)
            start += k
        self.j_electrode = np.concatenate(
            [np.full(mesh.electrode_nodes(e).size, TAG[e]) for e in ELECTRODES]
        )

    def block_sizes(self):
        return {"c": self.c.stop - self.c.start, "p": self.p.stop - self.p.start,
                "s": self.s.stop - self.s.start, "j": self.j.stop - self.j.start}


@dataclass
class StateVector:
    """Macroscopic flat vector plus per-electrode particle profiles (nodes x radial)."""

    y: np.ndarray
    micro: dict

    def copy(self):
        return StateVector(self.y.copy(), {k: v.copy() for k, v in self.micro.items()})


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def _per_element(tags, values: dict, dtype):
    out = np.zeros(tags.size, dtype=dtype)
    for tag, v in values.items():
        out[tags == tag] = v
    return out


def _dtype_of(*vals):
    return complex if any(np.iscomplexobj(v) for v in vals) else float


def _scatter(idx, vals, n):
    idx = idx.ravel()
    vals = vals.ravel()
    if np.iscomplexobj(vals):
        return np.bincount(idx, vals.real, n) + 1j * np.bincount(idx, vals.imag, n)
    return np.bincount(idx, vals, n)


class _Group:
    """Elements sharing one local unknown layout."""

    def __init__(self, kind, mesh, dofs, elem_ids):
        self.kind = kind
        self.ids = elem_ids
        self.tags = mesh.tags[elem_ids]
        conn = mesh.elements[elem_ids]
        self.conn = conn
        self.geo = element_geometry(mesh, conn)
        self.nen = conn.shape[1]
        if kind == "electrode":
            cols = [dofs.dof_c[conn], dofs.dof_p[conn], dofs.dof_s[conn], dofs.dof_j[conn]]
            rows = cols[:3]
        elif kind == "separator":
            cols = [dofs.dof_c[conn], dofs.dof_p[conn]]
            rows = cols
        else:
            cols = [dofs.dof_s[conn]]
            rows = cols
        self.cols = np.concatenate(cols, axis=1)
        self.rows = np.concatenate(rows, axis=1)
        if np.any(self.cols < 0):
            raise StructuralError(f"{kind} element touches a node without the required unknowns")


class Discretization:
    """Finite-element residual and Jacobian of the macroscopic equations on one mesh."""

    def __init__(self, mesh: MacroMesh):
        self.mesh = mesh
        self.dofs = d = DofMap(mesh)
        tags = mesh.tags
        self.groups = []
        for kind, sel in (
            ("electrode", (tags == TAG["anode"]) | (tags == TAG["cathode"])),
            ("separator", tags == TAG["separator"]),
            ("collector", (tags == TAG["anode_cc"]) | (tags == TAG["cathode_cc"])),
        ):
            ids = np.nonzero(sel)[0]
            if ids.size:
                self.groups.append(_Group(kind, mesh, d, ids))
        # tabs
        w_c = mesh.tab_node_weights("cathode")
        w_a = mesh.tab_node_weights("anode")
        self.tab_load = np.zeros(d.size)
        nz = np.nonzero(w_c)[0]
        self.tab_load[d.dof_s[nz]] = w_c[nz]
        self.current_scale = mesh.plane_area / mesh.tab_area("cathode")
        self.dirichlet = np.unique(d.dof_s[np.nonzero(w_a)[0]])
        # voltage weights (tab averages)
        self.voltage_weights = np.zeros(d.size)
        self.voltage_weights[d.dof_s[nz]] = w_c[nz] / w_c.sum()
        nza = np.nonzero(w_a)[0]
        self.voltage_weights[d.dof_s[nza]] -= w_a[nza] / w_a.sum()
        # nodal data of the kinetics rows
        jn = d.j_nodes
        self.j_cols = np.stack([d.dof_c[jn], d.dof_p[jn], d.dof_s[jn]], axis=1)
        self._build_pattern()

    # -- sparsity ---------------------------------------------------------

    def _build_pattern(self):
        d = self.dofs
        rows, cols = [], []
        for g in self.groups:
            r = np.broadcast_to(g.rows[:, :, None], (g.rows.shape[0], g.rows.shape[1], g.cols.shape[1]))
            c = np.broadcast_to(g.cols[:, None, :], r.shape)
            rows.append(r.ravel())
            cols.append(c.ravel())
        jr = np.arange(d.j.start, d.j.stop)
        bv_cols = np.concatenate([self.j_cols, jr[:, None]], axis=1)
        rows.append(np.repeat(jr, 4))
        cols.append(bv_cols.ravel())
        diag = np.arange(d.size)
        rows.append(diag)
        cols.append(diag)  # explicit diagonal keeps the pattern square-complete
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        key = rows.astype(np.int64) * d.size + cols
        ukey, inv = np.unique(key, return_inverse=True)
        self._slot = inv
        self._nnz = ukey.size
        urow = ukey // d.size
        self._indices = (ukey % d.size).astype(np.int32)
        self._indptr = np.searchsorted(urow, np.arange(d.size + 1)).astype(np.int32)
        self._dirichlet_slots = np.nonzero(np.isin(urow, self.dirichlet))[0]
        self._dirichlet_diag = np.nonzero(np.isin(urow, self.dirichlet) & (urow == ukey % d.size))[0]
        self._n_group_entries = sum(g.rows.size * g.cols.shape[1] for g in self.groups)

    @property
    def nnz(self):
        return self._nnz

    # -- element data -----------------------------------------------------

    def _region_arrays(self, params: ParameterSet, tags):
        a, sep, ca = params.anode, params.separator, params.cathode
        vals = {
            "eps_e": {TAG["anode"]: a.eps_e, TAG["separator"]: sep.eps_e, TAG["cathode"]: ca.eps_e},
            "beta": {TAG["anode"]: a.beta, TAG["separator"]: sep.beta, TAG["cathode"]: ca.beta},
            "a_s": {TAG["anode"]: a.a_s, TAG["cathode"]: ca.a_s},
            "sigma_eff": {
                TAG["anode"]: a.eps_s**a.beta * a.sigma,
                TAG["cathode"]: ca.eps_s**ca.beta * ca.sigma,
                TAG["anode_cc"]: params.sigma_cc_a,
                TAG["cathode_cc"]: params.sigma_cc_c,
            },
        }
        out = {}
        for key, table in vals.items():
            dtype = _dtype_of(*table.values())
            out[key] = _per_element(tags, table, dtype)
        return out

    def _check_concentration(self, cq, g):
        bad = np.real(cq) <= 0
        if np.any(bad):
            e = np.nonzero(np.any(bad.reshape(-1, *cq.shape[-2:]), axis=(0, 2)))[0][0]
            raise SingularLogError(
                f"non-positive electrolyte concentration in element {g.ids[e]}", element=int(g.ids[e])
            )

    def _group_residual(self, g: _Group, X, Xprev, params: ParameterSet, dt):
        """Local residual rows for all elements of a group; X is (..., E, n_loc)."""
        geo = g.geo
        nen = g.nen
        reg = self._region_arrays(params, g.tags)
        mat = params.materials
        F = params.F

        def at_q(u):
            return np.einsum("qa,...ea->...eq", geo.N, u)

        def grad(u):
            return np.einsum("eqad,...ea->...eqd", geo.dN, u)

        def stiff(coef, gu):
            return np.einsum("eqad,...eqd,eq->...ea", geo.dN, coef[..., None] * gu, geo.w)

        def mass(coef, u):
            return coef[:, None] * np.einsum("eab,...eb->...ea", geo.M, u)

        if g.kind == "collector":
            s = X[..., 0:nen]
            return -stiff(np.broadcast_to(reg["sigma_eff"][:, None], geo.w.shape), grad(s))

        c = X[..., 0:nen]
        p = X[..., nen:2 * nen]
        c_prev = Xprev[..., 0:nen]
        cq = at_q(c)
        self._check_concentration(cq, g)
        gc = grad(c)
        brug = (reg["eps_e"] ** reg["beta"])[:, None]
        D_eff = brug * mat.electrolyte_diffusivity(cq)
        k_eff = brug * mat.electrolyte_conductivity(cq)
        alpha = 2.0 * params.R * params.T * (1.0 - params.t_plus) / F
        Rc = mass(reg["eps_e"] / dt, c - c_prev) + stiff(D_eff, gc)
        Rp = stiff(k_eff, grad(p) - alpha * gc / cq[..., None])
        if g.kind == "separator":
            return np.concatenate([Rc, Rp], axis=-1)
        s = X[..., 2 * nen:3 * nen]
        j = X[..., 3 * nen:4 * nen]
        Mj = mass(reg["a_s"], j)
        Rc = Rc - (1.0 - params.t_plus) * Mj
        Rp = Rp - F * Mj
        sig = np.broadcast_to(reg["sigma_eff"][:, None], geo.w.shape)
        Rs = -stiff(sig, grad(s)) - F * Mj
        return np.concatenate([Rc, Rp, Rs], axis=-1)

    # -- kinetics ---------------------------------------------------------

    def _node_kinetics(self, params: ParameterSet):
        d = self.dofs
        dtype = _dtype_of(params.anode.k_s, params.cathode.k_s, params.anode.c_s_max, params.cathode.c_s_max)
        k_s = np.zeros(d.j.stop - d.j.start, dtype)
        cmax = np.zeros_like(k_s)
        for e in ELECTRODES:
            sl = d.electrode_slices[e]
            k_s[sl] = params.layer(e).k_s
            cmax[sl] = params.layer(e).c_s_max
        return k_s, cmax

    def bv_rhs(self, c, p, s, cs, params: ParameterSet):
        """(2 i0 / F) sinh(F eta / 2RT) at every kinetics node; inputs may carry a leading batch axis."""
        d = self.dofs
        k_s, cmax = self._node_kinetics(params)
        U = np.zeros(np.broadcast_shapes(np.shape(cs), k_s.shape), dtype=np.result_type(cs, cmax))
        for e in ELECTRODES:
            sl = d.electrode_slices[e]
            U[..., sl] = ocp(params.materials, e, cs[..., sl] / cmax[sl])
        eta = s - p - U
        x = params.F * eta / (2.0 * params.R * params.T)
        big = np.abs(np.real(x)) > SINH_CAP
        if np.any(big):
            node = int(self.dofs.j_nodes[np.nonzero(big.reshape(-1, k_s.size).any(axis=0))[0][0]])
            raise KineticsOverflowError(f"overpotential beyond sinh cap at node {node}", node=node)
        i0 = exchange_current(k_s, cs, cmax, c, params.F)
        return 2.0 * i0 / params.F * np.sinh(x)

    def _bv_inputs(self, y):
        c = y[..., self.j_cols[:, 0]]
        p = y[..., self.j_cols[:, 1]]
        s = y[..., self.j_cols[:, 2]]
        return c, p, s

    # -- public evaluation ------------------------------------------------

    def _check(self, y, y_prev, cs):
        n = self.dofs.size
        nj = self.dofs.j.stop - self.dofs.j.start
        if np.shape(y)[-1] != n or np.shape(y_prev)[-1] != n:
            raise StructuralError(f"state vectors must have length {n}")
        if np.shape(cs)[-1] != nj:
            raise StructuralError(f"surface concentrations must have length {nj}")

    def residual(self, y, y_prev, cs, params: ParameterSet, dt, i_app):
        """Flat macroscopic residual. Complex inputs (state or parameters) are supported."""
        self._check(y, y_prev, cs)
        n = self.dofs.size
        R = None
        for g in self.groups:
            r = self._group_residual(g, y[g.cols], y_prev[g.cols], params, dt)
            part = _scatter(g.rows, r, n)
            R = part if R is None else R + part
        c, p, s = self._bv_inputs(y)
        bv = self.bv_rhs(c, p, s, cs, params)
        R = R.astype(np.result_type(R, y, bv, 1.0))
        R[self.dofs.j] += y[self.dofs.j] - bv
        R = R - self.tab_load * (i_app * self.current_scale)
        R[self.dirichlet] = y[self.dirichlet]
        return R

    def residual_and_jacobian(self, y, y_prev, cs, dcs_dj, params: ParameterSet, dt, i_app):
        """Residual and sparse Jacobian; ``dcs_dj`` closes the surface-flux coupling (scalar or per node)."""
        self._check(y, y_prev, cs)
        d = self.dofs
        n = d.size
        R = np.zeros(n)
        data = []
        h = CS_STEP
        for g in self.groups:
            X = y[g.cols]
            n_loc = X.shape[1]
            Xb = X[None, :, :] + 1j * h * np.eye(n_loc)[:, None, :]
            out = self._group_residual(g, Xb, y_prev[g.cols], params, dt)  # (n_loc, E, n_res)
            R += _scatter(g.rows, out[0].real, n)
            Je = np.moveaxis(out.imag / h, 0, -1)  # (E, n_res, n_loc)
            data.append(Je.ravel())
        # kinetics rows
        c, p, s = self._bv_inputs(y)
        base = np.stack([c, p, s, cs])
        pert = base[None, :, :] + 1j * h * np.eye(4)[:, :, None]
        f = self.bv_rhs(pert[:, 0], pert[:, 1], pert[:, 2], pert[:, 3], params)  # (4, nj)
        df = f.imag / h
        R[d.j] += y[d.j] - f[0].real
        dRj = np.stack([-df[0], -df[1], -df[2], 1.0 - df[3] * dcs_dj], axis=1)
        data.append(dRj.ravel())
        data.append(np.zeros(n))
        R -= self.tab_load * (i_app * self.current_scale)
        vals = np.bincount(self._slot, np.concatenate(data), self._nnz)
        vals[self._dirichlet_slots] = 0.0
        vals[self._dirichlet_diag] = 1.0
        R[self.dirichlet] = y[self.dirichlet]
        J = sp.csr_matrix((vals, self._indices, self._indptr), shape=(n, n))
        return R, J

    def jacobian(self, y, y_prev, cs, dcs_dj, params, dt, i_app):
        return self.residual_and_jacobian(y, y_prev, cs, dcs_dj, params, dt, i_app)[1]

    def bv_surface_derivative(self, y, cs, params):
        """Partial derivative of the kinetics rows with respect to the surface concentration."""
        c, p, s = self._bv_inputs(y)
        f = self.bv_rhs(c, p, s, cs + 1j * CS_STEP, params)
        return -f.imag / CS_STEP

    def electrolyte_mass_matrix(self, params: ParameterSet):
        """Sparse eps_e-weighted mass matrix on the c_e block (coefficient of c_prev / dt, sign flipped)."""
        d = self.dofs
        nc = d.c.stop
        rows, cols, vals = [], [], []
        for g in self.groups:
            if g.kind == "collector":
                continue
            eps = self._region_arrays(params, g.tags)["eps_e"].real
            Me = eps[:, None, None] * g.geo.M
            dc = d.dof_c[g.conn]
            rows.append(np.repeat(dc, g.nen, axis=1).ravel())
            cols.append(np.tile(dc, (1, g.nen)).ravel())
            vals.append(Me.ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nc, nc)
        )

    def electrolyte_weights(self, params: ParameterSet):
        """Nodal vector w with w . c = integral of eps_e c_e over the electrolyte."""
        M = self.electrolyte_mass_matrix(params)
        return np.asarray(M.sum(axis=0)).ravel()

    def electrode_node_weights(self, electrode: str):
        """Integral of psi_k over the electrode for each of its kinetics nodes (in j-block order)."""
        d = self.dofs
        w = np.zeros(self.mesh.n_nodes)
        for g in self.groups:
            if g.kind != "electrode":
                continue
            sel = g.tags == TAG[electrode]
            np.add.at(w, g.conn[sel], g.geo.M[sel].sum(axis=2))
        nodes = d.j_nodes[d.electrode_slices[electrode]]
        return w[nodes]

    def terminal_voltage(self, y):
        return float(np.real(self.voltage_weights @ y))


# module-level forms mirroring the method interface

def residual_macro(disc: Discretization, U: StateVector | np.ndarray, U_prev, c_s_surf, params, dt, i_app):
    y = U.y if isinstance(U, StateVector) else U
    yp = U_prev.y if isinstance(U_prev, StateVector) else U_prev
    return disc.residual(y, yp, c_s_surf, params, dt, i_app)


def jacobian_macro(disc: Discretization, U, U_prev, c_s_surf, dcs_dj, params, dt, i_app):
    y = U.y if isinstance(U, StateVector) else U
    yp = U_prev.y if isinstance(U_prev, StateVector) else U_prev
    return disc.jacobian(y, yp, c_s_surf, dcs_dj, params, dt, i_app)


def butler_volmer_residual(c_s_surf, c_e, phi_s, phi_e, j_s, params: ParameterSet, electrode: str, node=None):
    """Kinetics residual j - (2 i0 / F) sinh(F eta / 2RT) at one node or an array of nodes."""
    layer = params.layer(electrode)
    eta = phi_s - phi_e - ocp(params.materials, electrode, np.asarray(c_s_surf) / layer.c_s_max)
    x = params.F * eta / (2.0 * params.R * params.T)
    if np.any(np.abs(np.real(x)) > SINH_CAP):
        raise KineticsOverflowError(f"overpotential beyond sinh cap at node {node}", node=node)
    i0 = exchange_current(layer.k_s, c_s_surf, layer.c_s_max, c_e, params.F)
    return j_s - 2.0 * i0 / params.F * np.sinh(x)
