"""Parameter identification from terminal-voltage traces.

The objective is the mean over drive rates of the RMSE between predicted and
reference voltage, written in normalized design variables w in [0, 1]^L.
Gradients come from one adjoint sweep per rate.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adjoint import backward_sweep, voltage_partials
from .errors import ForwardFailure, IdentificationError, StructuralError
from .params import ParameterSet, ScalingSpec, scale, scale_jacobian, unscale
from .solver import CellModel, DriveProtocol, NewtonOptions

log = logging.getLogger(__name__)

THERMODYNAMIC_FIELDS = ("c_s0",)


@dataclass(frozen=True)
class RateData:
    """Reference trace of one constant-current run; samples are stored in time order."""

    name: str
    i_app: float
    dt: float
    times: np.ndarray
    voltages: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float)
        v = np.asarray(self.voltages, float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise StructuralError(f"rate {self.name}: times and voltages must be equal-length 1-D arrays")
        order = np.argsort(t, kind="stable")
        t, v = t[order], v[order]
        if np.any(np.diff(t) <= 0):
            raise StructuralError(f"rate {self.name}: reference times must be distinct")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "voltages", v)

    def prediction_protocol(self) -> DriveProtocol:
        # no cutoff: the prediction must cover the whole reference horizon
        return DriveProtocol(i_app=self.i_app, dt=self.dt, cutoff=None, end_time=float(self.times[-1]))


@dataclass
class OptimizerSettings:
    stage_max_iter: int = 10
    stage_threshold: float = 10e-3  # V
    max_iter: int = 200
    objective_tol: float = 0.0  # V; stop once the objective is below this
    stagnation_window: int = 9
    stagnation_threshold: float = 0.09e-3  # V
    use_stagnation: bool = True
    penalty: float = 50e-3  # V per missing sample
    max_failures: int = 50
    two_stage: bool = True


@dataclass
class IdentificationProblem:
    spec: ScalingSpec
    base: ParameterSet
    rates: list
    model: CellModel
    settings: OptimizerSettings = field(default_factory=OptimizerSettings)
    thermodynamic: tuple = ()
    newton: NewtonOptions | None = None

    def __post_init__(self):
        if not self.rates:
            raise StructuralError("identification needs at least one reference rate")
        for name in self.spec.names:
            self.base.get(name)
        if not self.thermodynamic:
            self.thermodynamic = tuple(n for n in self.spec.names if n.split(".")[-1] in THERMODYNAMIC_FIELDS)
        unknown = set(self.thermodynamic) - set(self.spec.names)
        if unknown:
            raise StructuralError(f"thermodynamic parameters not identified: {sorted(unknown)}")

    @property
    def kinetic(self) -> tuple:
        return tuple(n for n in self.spec.names if n not in self.thermodynamic)

    def params_at(self, w, names=None, w_full=None) -> ParameterSet:
        spec = self.spec if names is None else self.spec.subset(names)
        theta = scale(w, spec)
        values = dict(zip(spec.names, theta))
        return self.base.with_values(values)


@dataclass
class Evaluation:
    objective: float
    per_rate: list
    gradient_theta: np.ndarray | None = None


class Counters:
    def __init__(self):
        self.forward_runs = 0
        self.adjoint_sweeps = 0
        self.failures = 0

    @property
    def nf(self) -> int:
        """Forward-prediction count; an adjoint sweep counts as two forward runs."""
        return self.forward_runs + 2 * self.adjoint_sweeps


def align(times_pred, volts_pred, times_ref):
    """Linear interpolation of a predicted trace at reference times.

    Returns predicted values, a mask of covered samples and, for each covered
    sample, the two tape indices and weights used.
    """
    times_pred = np.asarray(times_pred)
    tol = 1e-9 * max(1.0, abs(times_pred[-1]))
    covered = times_ref <= times_pred[-1] + tol
    idx = np.clip(np.searchsorted(times_pred, times_ref, side="right") - 1, 0, max(len(times_pred) - 2, 0))
    if len(times_pred) == 1:
        w1 = np.zeros_like(times_ref)
        idx1 = idx
    else:
        span = times_pred[idx + 1] - times_pred[idx]
        w1 = np.clip((times_ref - times_pred[idx]) / span, 0.0, 1.0)
        idx1 = idx + 1
    w0 = 1.0 - w1
    pred = w0 * volts_pred[idx] + w1 * volts_pred[np.minimum(idx1, len(times_pred) - 1)]
    return pred, covered, idx, np.minimum(idx1, len(times_pred) - 1), w0, w1


def rate_rmse(tape_times, tape_volts, rate: RateData, penalty: float):
    """RMSE against a reference trace and dRMSE/dV per tape entry."""
    pred, covered, i0, i1, w0, w1 = align(tape_times, tape_volts, rate.times)
    resid = np.where(covered, pred - rate.voltages, penalty)
    n = resid.size
    rmse = float(np.sqrt(np.mean(resid**2)))
    dV = np.zeros(len(tape_volts))
    if rmse > 0:
        coef = np.where(covered, resid, 0.0) / (n * rmse)
        np.add.at(dV, i0, coef * w0)
        np.add.at(dV, i1, coef * w1)
    return rmse, dV


class Objective:
    """Objective and adjoint gradient with NF bookkeeping."""

    def __init__(self, problem: IdentificationProblem):
        self.problem = problem
        self.counters = Counters()

    def evaluate(self, params: ParameterSet, rates: Sequence[RateData], names=None) -> Evaluation:
        pb = self.problem
        model = pb.model
        per_rate = []
        grad = None if names is None else np.zeros(len(names))
        for rate in rates:
            self.counters.forward_runs += 1
            try:
                tape = model.run_forward(params, rate.prediction_protocol(), options=pb.newton)
            except ForwardFailure as exc:
                self.counters.failures += 1
                log.info("forward failure during objective evaluation: %s", exc)
                if self.counters.failures > pb.settings.max_failures:
                    raise IdentificationError("too many failed forward runs") from exc
                tape = exc.tape
            if tape is None or len(tape) == 0:
                per_rate.append(float(pb.settings.penalty))
                continue
            rmse, dV = rate_rmse(tape.times, tape.voltages, rate, pb.settings.penalty)
            per_rate.append(rmse)
            if names is not None and np.any(dV != 0):
                self.counters.adjoint_sweeps += 1
                res = backward_sweep(model, tape, voltage_partials(model, dV), names)
                grad += res.gradient / len(rates)
        return Evaluation(float(np.mean(per_rate)), per_rate, grad)

    def __call__(self, w, rates=None, names=None):
        pb = self.problem
        names = list(pb.spec.names) if names is None else list(names)
        rates = pb.rates if rates is None else rates
        return self.evaluate(pb.params_at(w, names), rates).objective

    def value_and_gradient(self, w, rates=None, names=None):
        """Objective (V) and dL/dw for the listed design variables."""
        pb = self.problem
        names = list(pb.spec.names) if names is None else list(names)
        rates = pb.rates if rates is None else rates
        spec = pb.spec.subset(names)
        ev = self.evaluate(pb.params_at(w, names), rates, names)
        return ev.objective, ev.gradient_theta * scale_jacobian(w, spec), ev


def objective(w, problem: IdentificationProblem):
    """Mean RMSE (V) and per-rate RMSE at design vector w."""
    ev = Objective(problem).evaluate(problem.params_at(w), problem.rates)
    return ev.objective, ev.per_rate


def objective_gradient(w, problem: IdentificationProblem):
    return Objective(problem).value_and_gradient(w)[1]


class _Stop(Exception):
    pass


@dataclass
class QuasiNewtonResult:
    w: np.ndarray
    f: float
    iterations: int
    reason: str
    evaluations: int


def _two_loop(g, pairs):
    """Apply the limited-memory inverse-Hessian approximation to g."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def minimize_box(fun_grad, w0, lower=0.0, upper=1.0, max_iter=200, memory=10, callback=None,
                 pgtol=1e-12, ftol=1e-15, first_step=0.1, max_backtracks=30, c1=1e-4):
    """Projected limited-memory BFGS on a box.

    Variables at a bound whose gradient points outward are held fixed; the
    remaining ones take the two-loop quasi-Newton direction built from the
    stored curvature pairs restricted to them. Steps are projected onto the
    box and accepted by backtracking on the Armijo condition along the
    projected path. ``callback(w, f)`` runs after every accepted iterate and
    may raise to stop the search.
    """
    w = np.clip(np.asarray(w0, float), lower, upper)
    lower = np.broadcast_to(np.asarray(lower, float), w.shape)
    upper = np.broadcast_to(np.asarray(upper, float), w.shape)
    f, g = fun_grad(w)
    n_eval = 1
    pairs = []
    for it in range(max_iter):
        if np.max(np.abs(np.clip(w - g, lower, upper) - w)) <= pgtol:
            return QuasiNewtonResult(w, f, it, "converged", n_eval)
        free = ~(((w <= lower) & (g > 0)) | ((w >= upper) & (g < 0)))
        accepted = False
        for attempt in range(2):
            masked = [(s * free, y * free) for s, y, _ in pairs]
            local = [(s, y, 1.0 / (s @ y)) for s, y in masked if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y))]
            d = -_two_loop(g * free, local) * free
            slope = g @ d
            if not local or slope >= 0:
                local = []
                d = -g * free
                slope = g @ d
            # without curvature information the step length is set from the box size
            alpha = 1.0 if local else first_step / max(np.max(np.abs(d)), 1e-300)
            for _ in range(max_backtracks):
                w_new = np.clip(w + alpha * d, lower, upper)
                dw = w_new - w
                if not np.any(dw):
                    break
                f_new, g_new = fun_grad(w_new)
                n_eval += 1
                if np.isfinite(f_new) and f_new <= f + c1 * (g @ dw):
                    accepted = True
                    break
                alpha *= 0.5
            if accepted or not pairs:
                break
            pairs = []  # retry once along the projected steepest descent
        if not accepted:
            return QuasiNewtonResult(w, f, it, "line_search", n_eval)
        s_k, y_k = w_new - w, g_new - g
        if s_k @ y_k > 1e-12 * np.sqrt((s_k @ s_k) * (y_k @ y_k)):
            pairs.append((s_k, y_k, 1.0 / (s_k @ y_k)))
            pairs = pairs[-memory:]
        reduction = f - f_new
        w, f, g = w_new, f_new, g_new
        if callback is not None:
            callback(w, f)
        if reduction <= ftol * max(abs(f), abs(f + reduction), 1.0):
            return QuasiNewtonResult(w, f, it + 1, "converged", n_eval)
    return QuasiNewtonResult(w, f, max_iter, "max_iter", n_eval)


@dataclass
class IdentificationResult:
    w: np.ndarray
    theta: dict
    objective: float
    per_rate_rmse: list
    history: list
    forward_runs: int
    adjoint_sweeps: int
    nf: int
    termination: str
    iterations: int
    stage_iterations: list
    w_init: np.ndarray
    wall_time: float

    def report(self) -> dict:
        return {
            "objective_V": self.objective,
            "per_rate_rmse_V": list(map(float, self.per_rate_rmse)),
            "parameters": {k: float(v) for k, v in self.theta.items()},
            "w": list(map(float, self.w)),
            "w_init": list(map(float, self.w_init)),
            "forward_runs": self.forward_runs,
            "adjoint_sweeps": self.adjoint_sweeps,
            "NF": self.nf,
            "iterations": self.iterations,
            "stage_iterations": self.stage_iterations,
            "termination": self.termination,
            "objective_history_V": list(map(float, self.history)),
            "wall_time_s": self.wall_time,
        }


def _stagnated(history, window, threshold):
    if len(history) <= window:
        return False
    last = history[-1]
    prev = np.asarray(history[-1 - window:-1])
    return float(np.mean(np.abs(last - prev))) < threshold


def _run_quasi_newton(obj: Objective, w0, names, rates, max_iter, stop_below=None, stagnation=None,
                      history=None):
    """Box-bounded quasi-Newton search in w with early-stop rules; returns (w, n_iterations, reason)."""
    history = [] if history is None else history

    def fun(w):
        f, g, _ = obj.value_and_gradient(w, rates, names)
        return f * 1e3, g * 1e3  # the optimizer works in mV

    w0 = np.clip(np.array(w0, float), 0.0, 1.0)
    state = {"reason": None, "w": w0, "nit": 0}

    def monitored(w):
        f, g = fun(w)
        if not state["nit"] and not history:
            history.append(f * 1e-3)
            if stop_below is not None and f * 1e-3 < stop_below:
                state["reason"] = "objective_tol"
                raise _Stop
        return f, g

    def callback(wk, fk):
        state["nit"] += 1
        state["w"] = np.array(wk)
        history.append(fk * 1e-3)
        if stop_below is not None and fk * 1e-3 < stop_below:
            state["reason"] = "objective_tol"
            raise _Stop
        if stagnation is not None and _stagnated(history, *stagnation):
            state["reason"] = "stagnation"
            raise _Stop

    try:
        res = minimize_box(monitored, w0, 0.0, 1.0, max_iter=max_iter, callback=callback)
        return res.w, res.iterations, res.reason
    except _Stop:
        return state["w"], state["nit"], state["reason"]


def two_stage_initialize(problem: IdentificationProblem, obj: Objective | None = None):
    """Stage 1 fits thermodynamic parameters on the lowest rate, stage 2 the kinetic ones on the rest.

    Returns (w_init, [stage-1 iterations, stage-2 iterations]).
    """
    obj = obj or Objective(problem)
    st = problem.settings
    names = problem.spec.names
    w = np.full(len(names), 0.5)
    rates = sorted(problem.rates, key=lambda r: abs(r.i_app))
    low, rest = rates[:1], (rates[1:] or rates[:1])
    iters = []
    for subset, stage_rates in ((problem.thermodynamic, low), (problem.kinetic, rest)):
        if not subset:
            iters.append(0)
            continue
        idx = [names.index(n) for n in subset]
        fixed = dict(zip(names, scale(w, problem.spec)))

        sub_problem_base = problem.base.with_values({n: v for n, v in fixed.items() if n not in subset})
        sub = IdentificationProblem(
            spec=problem.spec.subset(subset), base=sub_problem_base, rates=list(stage_rates),
            model=problem.model, settings=problem.settings, newton=problem.newton,
            thermodynamic=tuple(n for n in subset if n in problem.thermodynamic),
        )
        sub_obj = Objective(sub)
        sub_obj.counters = obj.counters
        try:
            w_sub, nit, _ = _run_quasi_newton(sub_obj, w[idx], list(subset), sub.rates, st.stage_max_iter,
                                        stop_below=st.stage_threshold)
        except (IdentificationError, ForwardFailure) as exc:
            warnings.warn(f"initial-value stage failed ({exc}); falling back to w = 0.5")
            return np.full(len(names), 0.5), iters + [0] * (2 - len(iters))
        w[idx] = w_sub
        iters.append(nit)
    return w, iters


def identify(problem: IdentificationProblem, w_start=None) -> IdentificationResult:
    """Two-stage initialization followed by the bounded quasi-Newton search on the full multi-rate objective."""
    t0 = time.perf_counter()
    st = problem.settings
    obj = Objective(problem)
    names = list(problem.spec.names)
    if w_start is not None:
        w_init, stage_iters = np.asarray(w_start, float), [0, 0]
    elif st.two_stage:
        w_init, stage_iters = two_stage_initialize(problem, obj)
    else:
        w_init, stage_iters = np.full(len(names), 0.5), [0, 0]
    history = []
    stagnation = (st.stagnation_window, st.stagnation_threshold) if st.use_stagnation else None
    try:
        w, nit, reason = _run_quasi_newton(
            obj, w_init, names, problem.rates, st.max_iter,
            stop_below=st.objective_tol if st.objective_tol > 0 else None,
            stagnation=stagnation, history=history,
        )
    except IdentificationError as exc:
        exc.history = history
        raise
    ev = obj.evaluate(problem.params_at(w), problem.rates)
    obj.counters.forward_runs -= len(problem.rates)  # the final report evaluation is not part of the search
    theta = dict(zip(names, scale(w, problem.spec)))
    return IdentificationResult(
        w=w, theta=theta, objective=ev.objective, per_rate_rmse=ev.per_rate, history=history,
        forward_runs=obj.counters.forward_runs, adjoint_sweeps=obj.counters.adjoint_sweeps,
        nf=obj.counters.nf, termination=reason, iterations=nit, stage_iterations=stage_iters,
        w_init=w_init, wall_time=time.perf_counter() - t0,
    )


def default_scaling() -> ScalingSpec:
    """Bounds and scaling kinds of the seven-parameter benchmark identification."""
    from .params import ScaledParameter, benchmark_parameters

    p = benchmark_parameters()
    return ScalingSpec((
        ScaledParameter("anode.beta", 1.2, 2.5, "linear"),
        ScaledParameter("cathode.beta", 1.2, 2.5, "linear"),
        ScaledParameter("t_plus", 0.2, 0.5, "linear"),
        ScaledParameter("anode.k_s", 5e-12, 5e-10, "log"),
        ScaledParameter("cathode.k_s", 5e-12, 5e-10, "log"),
        ScaledParameter("anode.c_s0", 0.6 * p.anode.c_s_max, 0.9 * p.anode.c_s_max, "linear"),
        ScaledParameter("cathode.c_s0", 0.4 * p.cathode.c_s_max, 0.7 * p.cathode.c_s_max, "linear"),
    ))


def reference_from_tape(name, tape, dt) -> RateData:
    return RateData(name=name, i_app=tape.protocol.i_app, dt=dt, times=tape.times, voltages=tape.voltages)


__all__ = [
    "RateData", "OptimizerSettings", "IdentificationProblem", "IdentificationResult", "Objective",
    "objective", "objective_gradient", "two_stage_initialize", "identify", "default_scaling",
    "align", "rate_rmse", "reference_from_tape", "unscale",
]
