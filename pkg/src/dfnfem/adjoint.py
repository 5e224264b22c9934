"""Discrete adjoint of the time-stepping scheme.

For residuals R^i(U^i, U^{i-1}, theta) = 0, i = 1..N, and U^0 = g(theta),
the gradient of an objective L(U^0..U^N, theta) is

    v^N = dL/dU^N
    (dR^i/dU^i)^T lam^i = -v^i
    v^{i-1} = dL/dU^{i-1} + (dR^i/dU^{i-1})^T lam^i
    dL/dtheta = dL/dtheta|explicit + sum_i (lam^i)^T dR^i/dtheta + (v^0)^T dg/dtheta

:func:`reverse_sweep` implements this recurrence on abstract callbacks;
:class:`TapeAdjoint` supplies the callbacks for a recorded forward run. The
state there is the full state including particle profiles; the particle
blocks are eliminated analytically so each step costs one transposed solve
of macroscopic size plus cheap banded particle solves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import AdjointFailure, StructuralError
from .mesh import ELECTRODES
from .solver import CellModel, SolutionTape

# parameters that change the mesh; their derivatives are not provided
GEOMETRY_FIELDS = ("thickness", "r_s")
PARAM_STEP = 1e-20


def reverse_sweep(
    n_steps: int,
    partial_U: Callable[[int], np.ndarray],
    solve_transposed: Callable[[int, np.ndarray], np.ndarray],
    prev_vjp: Callable[[int, np.ndarray], np.ndarray],
    param_vjp: Callable[[int, np.ndarray], np.ndarray],
    init_vjp: Callable[[np.ndarray], np.ndarray],
    explicit: np.ndarray,
) -> np.ndarray:
    """Backward recurrence over steps N..1 followed by the initial-condition term."""
    grad = np.array(explicit, dtype=float)
    v = partial_U(n_steps)
    for i in range(n_steps, 0, -1):
        lam = solve_transposed(i, v)
        grad = grad + param_vjp(i, lam)
        v = partial_U(i - 1) + prev_vjp(i, lam)
    return grad + init_vjp(v)


@dataclass
class AdjointCounters:
    macro_transposed_solves: int = 0
    init_transposed_solves: int = 0
    particle_solves: int = 0


@dataclass
class AdjointResult:
    gradient: np.ndarray
    names: list
    counters: AdjointCounters = field(default_factory=AdjointCounters)


def _complex_value(value, h_rel=PARAM_STEP):
    h = h_rel * max(abs(float(np.real(value))), 1e-300)
    return value + 1j * h, h


class TapeAdjoint:
    """Adjoint machinery for one recorded forward run."""

    def __init__(self, model: CellModel, tape: SolutionTape, names: Sequence[str]):
        self.model = model
        self.disc = model.disc
        self.dofs = model.dofs
        self.tape = tape
        self.params = tape.params
        self.names = list(names)
        for name in self.names:
            self.params.get(name)
            if name.split(".")[-1] in GEOMETRY_FIELDS:
                raise StructuralError(f"derivative with respect to geometric parameter {name!r} is not supported")
        self.counters = AdjointCounters()
        n_mac = self.dofs.size
        self.layout = {"macro": slice(0, n_mac)}
        start = n_mac
        for e in ELECTRODES:
            shape = tape.entries[0].state.micro[e].shape
            self.layout[e] = (slice(start, start + shape[0] * shape[1]), shape)
            start += shape[0] * shape[1]
        self.size = start

    # -- packing ----------------------------------------------------------

    def pack(self, macro, micro):
        out = np.zeros(self.size)
        out[self.layout["macro"]] = macro
        for e in ELECTRODES:
            sl, _ = self.layout[e]
            if micro is not None and e in micro:
                out[sl] = np.ravel(micro[e])
        return out

    def unpack(self, vec):
        micro = {}
        for e in ELECTRODES:
            sl, shape = self.layout[e]
            micro[e] = vec[sl].reshape(shape)
        return vec[self.layout["macro"]], micro

    # -- per-step pieces --------------------------------------------------

    def _surface(self, state):
        return np.concatenate([state.micro[e][:, -1] for e in ELECTRODES])

    def _step_data(self, i):
        entry = self.tape.entries[i]
        ops = self.model.micro_ops(self.params, entry.dt)
        nj = self.dofs.j.stop - self.dofs.j.start
        g = np.empty(nj)
        for e in ELECTRODES:
            g[self.dofs.electrode_slices[e]] = ops[e].dcs_dj
        return entry, self.tape.entries[i - 1], ops, g

    def step_jacobian(self, i):
        """Macroscopic step Jacobian at the tape state (surface coupling closed)."""
        entry, prev, ops, g = self._step_data(i)
        cs = self._surface(entry.state)
        _, J = self.disc.residual_and_jacobian(
            entry.state.y, prev.state.y, cs, g, self.params, entry.dt, entry.i_app
        )
        return J

    def adjoint_step(self, i, v):
        """Solve (dR^i/dU^i)^T lam = -v for the full (macro + particle) adjoint vector."""
        d = self.dofs
        entry, prev, ops, g = self._step_data(i)
        cs = self._surface(entry.state)
        _, J = self.disc.residual_and_jacobian(
            entry.state.y, prev.state.y, cs, g, self.params, entry.dt, entry.i_app
        )
        v_m, v_r = self.unpack(v)
        rhs = -np.array(v_m, dtype=float)
        rj = rhs[d.j]
        for e in ELECTRODES:
            op = ops[e]
            sl = d.electrode_slices[e]
            # b^T A^{-1} v_r with b = r_s^2 e_surf
            rj[sl] += op.flux_shape[-1] * (v_r[e] @ op.lam_surf)
        rhs[d.j] = rj
        try:
            lu = splu(sp.csc_matrix(J))
            lam_m = lu.solve(rhs, trans="T")
        except RuntimeError as exc:
            raise AdjointFailure(f"singular transposed system at step {i}: {exc}", step=i) from exc
        if not np.all(np.isfinite(lam_m)):
            raise AdjointFailure(f"non-finite adjoint at step {i}", step=i)
        self.counters.macro_transposed_solves += 1
        gk = self.disc.bv_surface_derivative(entry.state.y, cs, self.params)
        lam_r = {}
        lam_j = lam_m[d.j]
        for e in ELECTRODES:
            op = ops[e]
            sl = d.electrode_slices[e]
            lam_r[e] = -op.solve(v_r[e]) - np.multiply.outer(gk[sl] * lam_j[sl], op.lam_surf)
            self.counters.particle_solves += 1
        return self.pack(lam_m, lam_r)

    def prev_vjp(self, i, lam):
        """(dR^i/dU^{i-1})^T lam: only the two backward-Euler mass terms depend on U^{i-1}."""
        d = self.dofs
        entry, _, ops, _ = self._step_data(i)
        lam_m, lam_r = self.unpack(lam)
        out_m = np.zeros(d.size)
        Me = self.disc.electrolyte_mass_matrix(self.params)
        out_m[d.c] = -(Me.T @ lam_m[d.c]) / entry.dt
        out_r = {e: -(lam_r[e] @ ops[e].M) / entry.dt for e in ELECTRODES}
        return self.pack(out_m, out_r)

    def parameter_tangent_product(self, i, lam):
        """(lam^i)^T dR^i/dtheta for every requested parameter."""
        entry, prev, ops, _ = self._step_data(i)
        lam_m, lam_r = self.unpack(lam)
        cs = self._surface(entry.state)
        out = np.zeros(len(self.names))
        for k, name in enumerate(self.names):
            field_name = name.split(".")[-1]
            if field_name in ("c_s0", "c_e0"):
                continue  # enters only the initial state
            if field_name == "D_s":
                e = name.split(".")[0]
                out[k] = float(np.sum(lam_r[e] * (entry.state.micro[e] @ ops[e].K.T)))
                continue
            value, h = _complex_value(self.params.get(name))
            pc = self.params.with_values({name: value})
            R = self.disc.residual(entry.state.y, prev.state.y, cs, pc, entry.dt, entry.i_app)
            out[k] = float(lam_m @ (np.imag(R) / h))
        return out

    def init_vjp(self, v0):
        """(v^0)^T dg/dtheta, implicit differentiation through the initial algebraic solve."""
        d = self.dofs
        model = self.model
        v_m, v_r = self.unpack(v0)
        entry0 = self.tape.entries[0]
        y0 = entry0.state.y
        i_app = entry0.i_app
        active = model.init_active()
        cs0 = model.surface_start(self.params)
        _, J = self.disc.residual_and_jacobian(y0, y0, cs0, 0.0, self.params, 1.0, i_app)
        G = J[active][:, active]
        try:
            mu = splu(sp.csc_matrix(G)).solve(-v_m[active], trans="T")
        except RuntimeError as exc:
            raise AdjointFailure(f"singular initialization system: {exc}", step=0) from exc
        self.counters.init_transposed_solves += 1
        out = np.zeros(len(self.names))
        for k, name in enumerate(self.names):
            field_name = name.split(".")[-1]
            if field_name == "D_s":
                continue
            value, h = _complex_value(self.params.get(name))
            pc = self.params.with_values({name: value})
            y = y0.astype(complex)
            y[d.c] = pc.c_e0
            cs = np.empty(cs0.size, dtype=complex)
            for e in ELECTRODES:
                cs[d.electrode_slices[e]] = pc.layer(e).c_s0
            R = self.disc.residual(y, y, cs, pc, 1.0, i_app)
            out[k] = float(mu @ (np.imag(R[active]) / h))
            if field_name == "c_e0":
                out[k] += float(np.sum(v_m[d.c]))
            if field_name == "c_s0":
                out[k] += float(np.sum(v_r[name.split(".")[0]]))
        return out

    # -- sweep ------------------------------------------------------------

    def sweep(self, partial_macro: Sequence, explicit=None) -> np.ndarray:
        """Gradient for objective partials given per tape entry on the macroscopic unknowns."""
        n = self.tape.n_steps
        if len(partial_macro) != n + 1:
            raise StructuralError(f"need {n + 1} objective partials, got {len(partial_macro)}")
        for pm in partial_macro:
            if pm is not None and np.shape(pm) != (self.dofs.size,):
                raise StructuralError("objective partial has the wrong length")
        explicit = np.zeros(len(self.names)) if explicit is None else np.asarray(explicit, float)
        if explicit.shape != (len(self.names),):
            raise StructuralError("explicit parameter partial has the wrong length")

        def partial_U(i):
            pm = partial_macro[i]
            return self.pack(np.zeros(self.dofs.size) if pm is None else pm, None)

        return reverse_sweep(
            n, partial_U, self.adjoint_step, self.prev_vjp,
            self.parameter_tangent_product, self.init_vjp, explicit,
        )


def voltage_partials(model: CellModel, dL_dV: Sequence[float]):
    """Objective partials on the macroscopic unknowns for an objective of the terminal voltages."""
    w = model.disc.voltage_weights
    return [None if g == 0 else g * w for g in dL_dV]


def backward_sweep(model: CellModel, tape: SolutionTape, partial_macro, names, explicit=None) -> AdjointResult:
    adj = TapeAdjoint(model, tape, names)
    grad = adj.sweep(partial_macro, explicit)
    return AdjointResult(gradient=grad, names=list(names), counters=adj.counters)


def voltage_gradient(model: CellModel, tape: SolutionTape, dL_dV, names) -> AdjointResult:
    """Gradient of an objective that depends on the state only through the terminal voltages."""
    return backward_sweep(model, tape, voltage_partials(model, dL_dV), names)
