"""Backward-Euler time marching with a damped Newton solve per step.

Each step solves only the macroscopic unknowns: the particle surface
concentrations enter through the affine fast-path map of
:mod:`dfnfem.microsolver`, and the full particle profiles are recovered
once the step has converged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import Discretization, StateVector
from .errors import (
    TRIAL_ERRORS,
    ForwardFailure,
    InitializationError,
    InvalidParameterError,
    StepFailure,
)
from .mesh import ELECTRODES, MacroMesh, build_micro_mesh
from .microsolver import micro_operator, recover_micro_state, surface_base
from .params import ParameterSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DriveProtocol:
    """Constant-current drive; positive current density is a discharge."""

    i_app: float
    dt: float
    max_steps: int = 100000
    cutoff: float | None = None
    end_time: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameterError("protocol dt must be positive")
        if self.max_steps < 1:
            raise InvalidParameterError("protocol max_steps must be at least 1")
        if self.end_time is not None and not self.end_time > 0:
            raise InvalidParameterError("protocol end_time must be positive")

    @property
    def direction(self) -> str:
        return "lower" if self.i_app >= 0 else "upper"

    def crossed(self, voltage: float) -> bool:
        if self.cutoff is None or self.i_app == 0:
            return False
        return voltage < self.cutoff if self.i_app > 0 else voltage > self.cutoff


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-8
    max_iter: int = 25
    max_halvings: int = 8
    max_dt_halvings: int = 4


@dataclass
class NewtonStats:
    iterations: int = 0
    residual_norm: float = np.nan
    history: list = field(default_factory=list)
    linear_solves: int = 0


@dataclass
class TapeEntry:
    time: float
    dt: float
    i_app: float
    state: StateVector
    voltage: float
    stats: NewtonStats


@dataclass
class SolutionTape:
    params: ParameterSet
    protocol: DriveProtocol
    entries: list = field(default_factory=list)
    reason: str = "running"

    def __len__(self):
        return len(self.entries)

    @property
    def n_steps(self) -> int:
        return len(self.entries) - 1

    @property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.entries])

    @property
    def voltages(self) -> np.ndarray:
        return np.array([e.voltage for e in self.entries])

    @property
    def states(self) -> list:
        return [e.state for e in self.entries]


# Newton corrections below this size (relative to the iterate) are rounding noise
ROUNDOFF_STEP = 64 * np.finfo(float).eps


def _splu(J):
    try:
        return splu(sp.csc_matrix(J))
    except RuntimeError as exc:  # exactly singular
        raise StepFailure(f"singular Jacobian: {exc}") from exc


def newton_solve(evaluate, y0, scales, options: NewtonOptions, stats: NewtonStats | None = None):
    """Damped Newton iteration.

    ``evaluate(y, jac)`` returns ``(R, J)`` (``J`` may be None when ``jac`` is
    false). Convergence is declared when max_k |R_k| / (|J_kk| s_k) <= tol, with
    the row magnitudes |J_kk| frozen at the initial iterate. Steps are halved
    while the trial residual, measured through the current factorization
    (the size of the simplified Newton correction in units of ``scales``), does
    not decrease or the trial state is inadmissible. A correction that is
    already at rounding level relative to the iterate (and its scales) ends the
    iteration as converged, since no further reduction is representable.
    """
    stats = stats if stats is not None else NewtonStats()
    y = np.array(y0, dtype=float)
    R, J = evaluate(y, True)
    diag = np.abs(J.diagonal())
    diag[diag == 0] = 1.0
    row = diag * scales

    def measure(r):
        return float(np.max(np.abs(r) / row)) if r.size else 0.0

    norm = measure(R)
    stats.history.append(norm)
    stats.iterations = 1
    while norm > options.tol:
        if stats.iterations > options.max_iter:
            stats.residual_norm = norm
            raise StepFailure(f"Newton did not converge in {options.max_iter} iterations", norm)
        lu = _splu(J)
        delta = lu.solve(-R)
        stats.linear_solves += 1
        if not np.all(np.isfinite(delta)):
            raise StepFailure("non-finite Newton update", norm)
        if np.max(np.abs(delta) / np.maximum(np.abs(y), scales)) <= ROUNDOFF_STEP:
            y = y + delta
            R, _ = evaluate(y, False)
            stats.residual_norm = measure(R)
            stats.history.append(stats.residual_norm)
            stats.iterations += 1
            return y, stats
        ref = np.linalg.norm(delta / scales)
        alpha = 1.0
        for _ in range(options.max_halvings + 1):
            y_try = y + alpha * delta
            try:
                R_try, _ = evaluate(y_try, False)
                if measure(R_try) <= options.tol:
                    break
                n_try = np.linalg.norm(lu.solve(-R_try) / scales)
            except TRIAL_ERRORS:
                n_try = np.inf
            if np.isfinite(n_try) and n_try < ref:
                break
            alpha *= 0.5
        else:
            stats.residual_norm = norm
            raise StepFailure("line search failed to reduce the residual", norm)
        y = y_try
        R, J = evaluate(y, True)
        norm = measure(R)
        stats.history.append(norm)
        stats.iterations += 1
    stats.residual_norm = norm
    return y, stats


class CellModel:
    """A macroscopic mesh, its discretization and the particle resolution."""

    def __init__(self, mesh: MacroMesh, n_micro: int = 10, options: NewtonOptions | None = None):
        self.mesh = mesh
        self.disc = Discretization(mesh)
        self.dofs = self.disc.dofs
        self.n_micro = int(n_micro)
        self.options = options or NewtonOptions()

    # -- helpers ----------------------------------------------------------

    def micro_mesh(self, params: ParameterSet, electrode: str):
        return build_micro_mesh(float(np.real(params.layer(electrode).r_s)), self.n_micro)

    def micro_ops(self, params: ParameterSet, dt: float):
        return {
            e: micro_operator(self.micro_mesh(params, e), float(np.real(params.layer(e).D_s)), dt)
            for e in ELECTRODES
        }

    def scales(self, params: ParameterSet, i_app: float) -> np.ndarray:
        d = self.dofs
        s = np.empty(d.size)
        s[d.c] = params.c_e0
        s[d.p] = params.R * params.T / params.F
        s[d.s] = params.R * params.T / params.F
        current = abs(i_app) if i_app != 0 else 1.0
        for e in ELECTRODES:
            layer = params.layer(e)
            sl = d.electrode_slices[e]
            s[d.j][sl] = current / (layer.a_s * params.F * layer.thickness)
        return np.real(s)

    def surface_start(self, params: ParameterSet) -> np.ndarray:
        """Initial surface concentration at every kinetics node (j-block order)."""
        d = self.dofs
        cs = np.empty(d.j.stop - d.j.start)
        for e in ELECTRODES:
            cs[d.electrode_slices[e]] = params.layer(e).c_s0
        return cs

    def terminal_voltage(self, state: StateVector) -> float:
        return self.disc.terminal_voltage(state.y)

    # -- initial state ----------------------------------------------------

    def default_guess(self, params: ParameterSet) -> np.ndarray:
        d = self.dofs
        mesh = self.mesh
        Ua = params.ocp("anode", params.anode.c_s0 / params.anode.c_s_max)
        Uc = params.ocp("cathode", params.cathode.c_s0 / params.cathode.c_s_max)
        y = np.zeros(d.size)
        y[d.c] = params.c_e0
        y[d.p] = -Ua
        cath = self._cathode_side_solid_nodes()
        y[d.dof_s[cath]] = Uc - Ua
        return y

    def _cathode_side_solid_nodes(self):
        mesh = self.mesh
        ax = mesh.thickness_axis
        x_sep_end = sum(mesh.layer_thickness[k] for k in ("anode_cc", "anode", "separator") if k in mesh.layer_thickness)
        x = mesh.nodes[self.dofs.s_nodes, ax]
        return self.dofs.s_nodes[x >= x_sep_end * (1 - 1e-12)]

    def init_active(self) -> np.ndarray:
        d = self.dofs
        return np.arange(d.p.start, d.size)

    def init_system(self, params: ParameterSet, i_app: float):
        """Residual/Jacobian closure of the algebraic initialization problem on (phi_e, phi_s, j)."""
        d = self.dofs
        active = self.init_active()
        cs = self.surface_start(params)
        template = np.zeros(d.size)
        template[d.c] = params.c_e0

        def evaluate(ya, jac):
            y = template.copy()
            y[active] = ya
            if jac:
                R, J = self.disc.residual_and_jacobian(y, y, cs, 0.0, params, 1.0, i_app)
                return R[active], J[active][:, active]
            return self.disc.residual(y, y, cs, params, 1.0, i_app)[active], None

        return evaluate, active, template

    def initialize_state(self, params: ParameterSet, i_app: float = 0.0, guess=None,
                         options: NewtonOptions | None = None) -> StateVector:
        """Uniform concentrations plus the algebraic solve for potentials and fluxes."""
        options = options or self.options
        evaluate, active, template = self.init_system(params, i_app)
        y0 = self.default_guess(params) if guess is None else np.asarray(guess, float)
        try:
            ya, stats = newton_solve(evaluate, y0[active], self.scales(params, i_app)[active], options)
        except (StepFailure,) + TRIAL_ERRORS as exc:
            raise InitializationError(f"initial algebraic solve failed: {exc}") from exc
        y = template.copy()
        y[active] = ya
        micro = {
            e: np.full((self.mesh.electrode_nodes(e).size, self.n_micro + 1), float(params.layer(e).c_s0))
            for e in ELECTRODES
        }
        state = StateVector(y, micro)
        self._last_init_stats = stats
        return state

    # -- time stepping ----------------------------------------------------

    def step_system(self, state_prev: StateVector, params: ParameterSet, dt: float, i_app: float, ops=None):
        """Fast-path surface map and the residual closure for one step."""
        d = self.dofs
        ops = ops or self.micro_ops(params, dt)
        nj = d.j.stop - d.j.start
        cs_base = np.empty(nj)
        g = np.empty(nj)
        for e in ELECTRODES:
            sl = d.electrode_slices[e]
            cs_base[sl] = surface_base(ops[e], state_prev.micro[e])
            g[sl] = ops[e].dcs_dj
        y_prev = state_prev.y

        def evaluate(y, jac):
            cs = cs_base + g * y[d.j]
            if jac:
                return self.disc.residual_and_jacobian(y, y_prev, cs, g, params, dt, i_app)
            return self.disc.residual(y, y_prev, cs, params, dt, i_app), None

        return evaluate, ops

    def solve_time_step(self, state_prev: StateVector, params: ParameterSet, dt: float, i_app: float,
                        options: NewtonOptions | None = None):
        """One backward-Euler step; returns the new state and Newton statistics."""
        options = options or self.options
        d = self.dofs
        evaluate, ops = self.step_system(state_prev, params, dt, i_app)
        y, stats = newton_solve(evaluate, state_prev.y, self.scales(params, i_app), options)
        micro = {
            e: recover_micro_state(ops[e], state_prev.micro[e], y[d.j][d.electrode_slices[e]])
            for e in ELECTRODES
        }
        return StateVector(y, micro), stats

    def _advance(self, state, params, dt, i_app, options):
        """Cover one interval of length dt, halving the step on failure."""
        last = None
        for level in range(options.max_dt_halvings + 1):
            n_sub = 2**level
            h = dt / n_sub
            out = []
            current = state
            try:
                for _ in range(n_sub):
                    current, stats = self.solve_time_step(current, params, h, i_app, options)
                    out.append((h, current, stats))
                return out
            except (StepFailure,) + TRIAL_ERRORS as exc:
                last = exc
                log.info("step of %.4g s failed (%s); retrying with %d substeps", dt, exc, 2 * n_sub)
        raise StepFailure(f"step failed after {options.max_dt_halvings} dt halvings: {last}")

    def run_forward(self, params: ParameterSet, protocol: DriveProtocol,
                    options: NewtonOptions | None = None, initial_state: StateVector | None = None) -> SolutionTape:
        options = options or self.options
        tape = SolutionTape(params=params, protocol=protocol)
        i_app = protocol.i_app
        try:
            state = initial_state or self.initialize_state(params, i_app, options=options)
        except InitializationError as exc:
            tape.reason = "failure"
            raise ForwardFailure(str(exc), tape) from exc
        tape.entries.append(TapeEntry(0.0, 0.0, i_app, state, self.terminal_voltage(state),
                                      getattr(self, "_last_init_stats", NewtonStats())))
        t = 0.0
        for _ in range(protocol.max_steps):
            dt = protocol.dt
            if protocol.end_time is not None:
                dt = min(dt, protocol.end_time - t)
            try:
                subs = self._advance(state, params, dt, i_app, options)
            except StepFailure as exc:
                tape.reason = "failure"
                raise ForwardFailure(f"forward run failed at t = {t:.6g} s: {exc}", tape) from exc
            for h, state, stats in subs:
                t += h
                tape.entries.append(TapeEntry(t, h, i_app, state, self.terminal_voltage(state), stats))
            if protocol.crossed(tape.entries[-1].voltage):
                tape.reason = "cutoff"
                return tape
            if protocol.end_time is not None and t >= protocol.end_time * (1 - 1e-12):
                tape.reason = "end_time"
                return tape
        tape.reason = "max_steps"
        return tape

    # -- conserved quantities ---------------------------------------------

    def electrolyte_content(self, state: StateVector, params: ParameterSet) -> float:
        """Integral of eps_e c_e over the electrolyte (per unit plane area in 1D)."""
        return float(self.disc.electrolyte_weights(params) @ state.y[self.dofs.c])

    def solid_content(self, state: StateVector, params: ParameterSet) -> float:
        """Lithium in all particles: sum over nodes of w_node (3 eps_s / r_s^3) int r^2 c_s dr."""
        total = 0.0
        for e in ELECTRODES:
            layer = params.layer(e)
            op = micro_operator(self.micro_mesh(params, e), layer.D_s, 1.0)
            w = self.disc.electrode_node_weights(e)
            total += float(w @ op.content(state.micro[e])) * 3.0 * layer.eps_s / layer.r_s**3
        return total


def initialize_state(params: ParameterSet, mesh: MacroMesh, i_app: float = 0.0, n_micro: int = 10):
    return CellModel(mesh, n_micro).initialize_state(params, i_app)


def run_forward(params: ParameterSet, mesh: MacroMesh, protocol: DriveProtocol, n_micro: int = 10,
                options: NewtonOptions | None = None) -> SolutionTape:
    return CellModel(mesh, n_micro, options).run_forward(params, protocol)
