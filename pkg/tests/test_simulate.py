import math

import numpy as np
import pytest

from meancross import (ControlProcess, TimeGrid, estimate_expectation,
                       simulate_ensemble, with_spike)
from meancross.simulate import SimulationError, write_ensemble_csv


def constant_control(spec, grid, value):
    return ControlProcess.constant(grid, value, spec.U)


def test_example1_matches_exact_ode(example1):
    # sigma = 0: X(t) = e^t - 1 under u = 1; Euler error O(dt)
    grid = TimeGrid(1.0, 100000)
    ens = simulate_ensemble(example1, constant_control(example1, grid, 1.0),
                            grid, 1, seed=42)
    x_ln2 = float(ens.state_at(math.log(2))[0, 0])
    assert abs(x_ln2 - 1.0) <= 2e-5
    nodes = ens.times[::5000]
    vals = ens.states[0, ::5000, 0]
    assert np.abs(vals - (np.exp(nodes) - 1)).max() <= 2e-5


def test_example2_mean_band(example2):
    grid = TimeGrid(1.0, 200)
    ens = simulate_ensemble(example2, constant_control(example2, grid, 1.0),
                            grid, 100000, seed=42)
    mean, se = estimate_expectation(ens, example2.phi, 0.5)
    assert abs(mean - 1.0) <= 3 * se
    mean, se = estimate_expectation(ens, example2.phi, 0.25)
    assert abs(mean - 0.75) <= 3 * se


def test_degenerate_spike_bit_identical(example2):
    grid = TimeGrid(1.0, 100)
    base = constant_control(example2, grid, 1.0)
    spiked = with_spike(base, np.array([1.0]), 0.3, 0.05)
    e1 = simulate_ensemble(example2, base, grid, 2000, seed=9)
    e2 = simulate_ensemble(example2, spiked, grid, 2000, seed=9)
    assert np.array_equal(e1.states, e2.states)
    assert np.array_equal(e1.increments, e2.increments)


def test_worker_count_invariance(example2):
    grid = TimeGrid(1.0, 50)
    ctrl = constant_control(example2, grid, 1.0)
    e1 = simulate_ensemble(example2, ctrl, grid, 4001, seed=7, workers=1)
    e8 = simulate_ensemble(example2, ctrl, grid, 4001, seed=7, workers=8)
    assert np.array_equal(e1.states, e8.states)


def test_common_random_numbers_isolate_spike(example2):
    grid = TimeGrid(1.0, 100)
    base = constant_control(example2, grid, 1.0)
    spiked = with_spike(base, np.array([2.0]), 0.5, 0.1)
    e1 = simulate_ensemble(example2, base, grid, 500, seed=3)
    e2 = simulate_ensemble(example2, spiked, grid, 500, seed=3,
                           increments=e1.increments)
    split = grid.index_of(0.5)
    assert np.array_equal(e1.states[:, :split + 1], e2.states[:, :split + 1])
    assert not np.array_equal(e1.states[:, -1], e2.states[:, -1])


def test_spike_validation(example2):
    grid = TimeGrid(1.0, 100)
    base = constant_control(example2, grid, 1.0)
    with pytest.raises(ValueError, match="outside the control domain"):
        with_spike(base, np.array([3.0]), 0.2, 0.05)
    with pytest.raises(ValueError, match="tau"):
        with_spike(base, np.array([2.0]), 1.0, 0.05)
    clamped = with_spike(base, np.array([2.0]), 0.99, 0.05)
    assert clamped.spike.tau + clamped.spike.eps <= 1.0 + 1e-12


def test_spike_snap_is_reported(example2):
    grid = TimeGrid(1.0, 100)
    base = constant_control(example2, grid, 1.0)
    spiked = with_spike(base, np.array([2.0]), 0.2031, 0.0442)
    assert spiked.spike.snapped
    assert spiked.spike.tau == pytest.approx(0.20)
    assert spiked.spike.eps == pytest.approx(0.04)
    assert spiked.spike.tau_requested == 0.2031


def test_estimate_expectation_sentinels(example2):
    grid = TimeGrid(1.0, 10)
    ctrl = constant_control(example2, grid, 1.0)
    single = simulate_ensemble(example2, ctrl, grid, 1, seed=1)
    _, se = estimate_expectation(single, example2.phi, 0.5)
    assert math.isnan(se)
    many = simulate_ensemble(example2, ctrl, grid, 50, seed=1)
    const = example2.g  # identically zero
    mean, se = estimate_expectation(many, const, 0.5)
    assert mean == 0.0 and se == 0.0
    with pytest.raises(ValueError, match="grid node"):
        estimate_expectation(many, example2.phi, 0.123)


def test_weak_error_monotone_refinement(example1, example2):
    # deterministic problem: the horizon error is O(dt) and halves with dt
    errs = []
    for n in (1000, 2000, 4000):
        grid = TimeGrid(1.0, n)
        ens = simulate_ensemble(example1, constant_control(example1, grid, 1.0),
                                grid, 1, seed=5)
        errs.append(abs(float(ens.states[0, -1, 0]) - (math.e - 1)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)

    # example2's Euler chain is exact in distribution: halving the step can
    # only move the estimate within its own noise band
    import meancross.model as model
    exact = 3.25  # E[(1/2 + 1 + W(1))^2] under u = 1
    sq = model.Coefficient.from_sources("x*x", (), ("x",), ())
    for n in (8, 16):
        grid = TimeGrid(1.0, n)
        ens = simulate_ensemble(example2, constant_control(example2, grid, 1.0),
                                grid, 200000, seed=5)
        mean, se = estimate_expectation(ens, sq, 1.0)
        assert abs(mean - exact) <= 4 * se


def test_invalid_path_fraction_guard(tmp_path):
    from meancross import load_problem
    cfg = """
[problem]
T = 1.0
alpha = 10.0
x0 = 0.5

[coefficients]
b = 1/(x - 1)
sigma = 0.5
f = 0
g = 0
phi = x

[control]
kind = finite
points = 1
"""
    path = tmp_path / "singular.ini"
    path.write_text(cfg)
    spec = load_problem(path)
    grid = TimeGrid(1.0, 50)
    ctrl = ControlProcess.constant(grid, 1.0, spec.U)
    # most paths blow through the pole at x = 1
    with pytest.raises(SimulationError, match="domain error"):
        simulate_ensemble(spec, ctrl, grid, 500, seed=2)


def test_ensemble_csv_header(example2, tmp_path):
    grid = TimeGrid(1.0, 5)
    ens = simulate_ensemble(example2, constant_control(example2, grid, 1.0),
                            grid, 3, seed=1)
    out = tmp_path / "ensemble.csv"
    write_ensemble_csv(ens, out, max_paths=2)
    lines = out.read_text().splitlines()
    assert lines[0] == "path,step,t,x_1"
    assert len(lines) == 1 + 2 * 6


def test_deterministic_flag(example1, example2):
    grid = TimeGrid(1.0, 10)
    e1 = simulate_ensemble(example1, constant_control(example1, grid, 1.0),
                           grid, 1, seed=1)
    e2 = simulate_ensemble(example2, constant_control(example2, grid, 1.0),
                           grid, 1, seed=1)
    assert e1.deterministic and not e2.deterministic
