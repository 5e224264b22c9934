"""Identification objective, gradient chain, two-stage initialization and the bounded quasi-Newton loop."""
import csv

import numpy as np
import pytest
from conftest import mesh_1d

from dfnfem.errors import ForwardFailure, IdentificationError, StructuralError
from dfnfem.ident import (
    IdentificationProblem, Objective, OptimizerSettings, RateData, _stagnated, align, default_scaling,
    identify, minimize_box, objective, objective_gradient, rate_rmse, reference_from_tape,
    two_stage_initialize,
)
from dfnfem.params import ScaledParameter, ScalingSpec, benchmark_parameters, scale, scale_jacobian, unscale
from dfnfem.solver import CellModel, DriveProtocol, NewtonOptions

ONE_C = 24.0
NEWTON = NewtonOptions(tol=1e-11)


@pytest.fixture(scope="module")
def model():
    return CellModel(mesh_1d(2, 1, 2), n_micro=4, options=NEWTON)


def references(model, params, rates=(0.5, 1.0), dt=60.0, end_time=600.0):
    out = []
    for c in rates:
        tape = model.run_forward(params, DriveProtocol(c * ONE_C, dt, end_time=end_time))
        out.append(reference_from_tape(f"{c}C", tape, dt))
    return out


def problem(model, params, refs, spec=None, **settings):
    spec = spec or default_scaling()
    return IdentificationProblem(spec, params, refs, model, OptimizerSettings(**settings), newton=NEWTON)


# ---------------------------------------------------------------------------
# alignment and per-rate RMSE
# ---------------------------------------------------------------------------

def test_align_interpolates_linearly():
    pred, covered, *_ = align(np.array([0.0, 10.0, 20.0]), np.array([4.0, 3.0, 2.0]), np.array([5.0, 10.0, 17.5]))
    np.testing.assert_allclose(pred, [3.5, 3.0, 2.25])
    assert covered.all()


def test_missing_samples_take_the_penalty():
    rate = RateData("r", 1.0, 10.0, np.array([0.0, 10.0, 20.0, 30.0]), np.array([4.0, 3.9, 3.8, 3.7]))
    rmse, dV = rate_rmse(np.array([0.0, 10.0]), np.array([4.0, 3.9]), rate, penalty=0.05)
    assert rmse == pytest.approx(np.sqrt(2 * 0.05**2 / 4), rel=1e-14)
    np.testing.assert_array_equal(dV, 0.0)


def test_rmse_derivative_matches_differences():
    rng = np.random.default_rng(0)
    t = np.arange(6) * 10.0
    rate = RateData("r", 1.0, 10.0, np.array([0.0, 7.0, 13.0, 29.0, 50.0]), 3.9 + 0.01 * rng.standard_normal(5))
    v = 3.9 + 0.01 * rng.standard_normal(6)
    _, dV = rate_rmse(t, v, rate, 0.05)
    h = 1e-7
    fd = [(rate_rmse(t, v + h * e, rate, 0.05)[0] - rate_rmse(t, v - h * e, rate, 0.05)[0]) / (2 * h) for e in np.eye(6)]
    np.testing.assert_allclose(dV, fd, rtol=1e-6, atol=1e-10)


def test_rate_data_orders_samples_and_rejects_duplicates():
    r = RateData("r", 1.0, 1.0, [2.0, 0.0, 1.0], [3.0, 5.0, 4.0])
    np.testing.assert_array_equal(r.times, [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(r.voltages, [5.0, 4.0, 3.0])
    with pytest.raises(StructuralError):
        RateData("r", 1.0, 1.0, [0.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(StructuralError):
        RateData("r", 1.0, 1.0, [0.0, 1.0], [1.0])


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def test_self_consistent_reference_gives_zero(model, params):
    refs = references(model, params)
    pb = problem(model, params, refs)
    w_true = unscale(params.vector(pb.spec.names), pb.spec)
    value, per_rate = objective(w_true, pb)
    assert value < 1e-9
    assert len(per_rate) == 2


def test_constant_offset_gives_offset(model, params):
    ref = references(model, params, rates=(1.0,))[0]
    shifted = RateData(ref.name, ref.i_app, ref.dt, ref.times, ref.voltages + 5e-3)
    pb = problem(model, params, [shifted])
    w_true = unscale(params.vector(pb.spec.names), pb.spec)
    assert objective(w_true, pb)[0] == pytest.approx(5e-3, rel=1e-7)


def test_objective_matches_rmse_recomputed_from_csv(model, params, tmp_path):
    refs = references(model, params)
    pb = problem(model, params, refs)
    w = np.full(len(pb.spec), 0.4)
    value, _ = objective(w, pb)
    # export predictions and references, then recompute with numpy only
    theta = pb.params_at(w)
    rmses = []
    for k, ref in enumerate(refs):
        tape = model.run_forward(theta, ref.prediction_protocol())
        path = tmp_path / f"pred_{k}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s", "voltage_V"])
            writer.writerows((repr(float(t)), repr(float(v))) for t, v in zip(tape.times, tape.voltages))
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        pred = np.interp(ref.times, data[:, 0], data[:, 1])
        rmses.append(np.sqrt(np.mean((pred - ref.voltages) ** 2)))
    assert value == pytest.approx(np.mean(rmses), rel=1e-12)


def test_objective_invariant_under_reordering(model, params):
    refs = references(model, params)
    w = np.full(7, 0.45)
    a = objective(w, problem(model, params, refs))[0]
    b = objective(w, problem(model, params, refs[::-1]))[0]
    perm = np.random.default_rng(1).permutation(refs[0].times.size)
    shuffled = RateData("s", refs[0].i_app, refs[0].dt, refs[0].times[perm], refs[0].voltages[perm])
    c = objective(w, problem(model, params, [shuffled, refs[1]]))[0]
    assert a == b == c


def test_failed_forward_runs_are_penalized_then_fatal(model, params, monkeypatch):
    refs = references(model, params, rates=(1.0,))
    pb = problem(model, params, refs, max_failures=1)
    obj = Objective(pb)

    def broken(*args, **kwargs):
        raise ForwardFailure("forced", None)

    monkeypatch.setattr(model, "run_forward", broken)
    assert obj(np.full(7, 0.5)) == pytest.approx(pb.settings.penalty)
    with pytest.raises(IdentificationError):
        obj(np.full(7, 0.5))


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------

def test_gradient_matches_finite_differences_in_w(model, params):
    names = ["t_plus", "anode.k_s", "cathode.c_s0"]
    spec = default_scaling().subset(names)
    refs = references(model, params)
    pb = problem(model, params, refs, spec=spec)
    w = np.array([0.3, 0.6, 0.45])
    f, g, _ = Objective(pb).value_and_gradient(w)
    h = 1e-5
    obj = Objective(pb)
    fd = np.array([(obj(w + h * e) - obj(w - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(g, fd, rtol=1e-3)


def test_scaling_chain_rule(model, params):
    refs = references(model, params, rates=(1.0,))
    pb = problem(model, params, refs)
    w = np.linspace(0.2, 0.8, 7)
    _, g_w, ev = Objective(pb).value_and_gradient(w)
    np.testing.assert_allclose(g_w, ev.gradient_theta * scale_jacobian(w, pb.spec), rtol=1e-15)
    np.testing.assert_allclose(objective_gradient(w, pb), g_w, rtol=1e-12)


def test_separator_exponent_component_is_zero(model, params):
    spec = ScalingSpec(tuple(default_scaling().entries) + (ScaledParameter("separator.beta", 1.2, 2.5, "linear"),))
    refs = references(model, params, rates=(1.0,))
    pb = problem(model, params, refs, spec=spec)
    g = objective_gradient(np.full(8, 0.4), pb)
    assert g[-1] == 0.0
    assert np.all(g[:-1] != 0.0)


def test_small_step_against_gradient_descends(model, params):
    refs = references(model, params)
    pb = problem(model, params, refs)
    obj = Objective(pb)
    w = np.full(7, 0.5)
    f, g, _ = obj.value_and_gradient(w)
    assert obj(w - 1e-3 * g / np.linalg.norm(g)) < f


def test_forward_count_convention(model, params):
    refs = references(model, params)
    pb = problem(model, params, refs)
    obj = Objective(pb)
    obj.value_and_gradient(np.full(7, 0.5))
    obj(np.full(7, 0.4))
    c = obj.counters
    assert (c.forward_runs, c.adjoint_sweeps) == (4, 2)
    assert c.nf == c.forward_runs + 2 * c.adjoint_sweeps == 8


def test_scaling_kinds():
    kinds = {p.name: p.kind for p in default_scaling().entries}
    assert kinds["anode.k_s"] == kinds["cathode.k_s"] == "log"
    assert {k for k, v in kinds.items() if v == "linear"} == {
        "anode.beta", "cathode.beta", "t_plus", "anode.c_s0", "cathode.c_s0"
    }


# ---------------------------------------------------------------------------
# optimizer and identification loop
# ---------------------------------------------------------------------------

def test_box_quasi_newton_solves_rosenbrock():
    def rosen(w):
        x = 2 * w - 0.5
        f = np.sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2)
        g = np.zeros_like(x)
        g[:-1] += -400 * x[:-1] * (x[1:] - x[:-1] ** 2) - 2 * (1 - x[:-1])
        g[1:] += 200 * (x[1:] - x[:-1] ** 2)
        return f, 2 * g

    res = minimize_box(rosen, np.full(4, 0.5), max_iter=300)
    np.testing.assert_allclose(res.w, 0.75, atol=1e-6)


def test_box_quasi_newton_respects_bounds():
    target = np.array([1.4, -0.2, 0.3])
    seen = []
    res = minimize_box(lambda w: (np.sum((w - target) ** 2), 2 * (w - target)), np.full(3, 0.5),
                       callback=lambda w, f: seen.append(w.copy()))
    np.testing.assert_allclose(res.w, [1.0, 0.0, 0.3], atol=1e-12)
    assert all(np.all((0 <= w) & (w <= 1)) for w in seen)


def test_stagnation_rule():
    flat = [5.0] * 5 + [1.0 + 1e-6 * k for k in range(10)]
    assert _stagnated(flat, 9, 0.09e-3)
    assert not _stagnated(flat[:9], 9, 0.09e-3)
    assert not _stagnated([1.0 - 0.01 * k for k in range(12)], 9, 0.09e-3)


@pytest.fixture(scope="module")
def midpoint_truth(params):
    spec = default_scaling()
    return params.with_values(dict(zip(spec.names, scale(np.full(7, 0.5), spec))))


def test_two_stage_stops_immediately_at_the_generating_point(model, midpoint_truth):
    refs = references(model, midpoint_truth)
    pb = problem(model, midpoint_truth, refs)
    w, iters = two_stage_initialize(pb)
    np.testing.assert_array_equal(w, 0.5)
    assert iters == [0, 0]


def test_two_stage_fits_thermodynamics_alone(model, params, midpoint_truth):
    """Kinetics already at the midpoint: the first stage alone brings the objective under 10 mV."""
    truth = midpoint_truth.with_values({"anode.c_s0": params.anode.c_s0, "cathode.c_s0": params.cathode.c_s0})
    refs = references(model, truth, rates=(0.5, 1.0, 2.0))
    pb = problem(model, truth, refs)
    assert objective(np.full(7, 0.5), pb)[0] > 10e-3
    w, iters = two_stage_initialize(pb)
    assert 1 <= iters[0] <= 10 and iters[1] == 0
    assert objective(w, pb)[0] < 10e-3


def test_identify_from_the_optimum_stops_at_iteration_zero(model, params):
    refs = references(model, params)
    pb = problem(model, params, refs, objective_tol=1e-8)
    w_true = unscale(params.vector(pb.spec.names), pb.spec)
    res = identify(pb, w_start=w_true)
    assert res.iterations == 0
    assert res.termination == "objective_tol"
    assert res.objective < 1e-9
    assert res.nf == res.forward_runs + 2 * res.adjoint_sweeps


def test_identify_records_accepted_iterates(model, params):
    refs = references(model, params)
    pb = problem(model, params, refs, max_iter=3, two_stage=False)
    res = identify(pb)
    assert res.iterations == 3 and res.termination == "max_iter"
    assert len(res.history) == res.iterations + 1
    assert res.history[-1] < res.history[0]
    assert res.stage_iterations == [0, 0]
    report = res.report()
    assert report["NF"] == res.nf and len(report["objective_history_V"]) == 4
