import os
import time

import numpy as np
import pytest

from wemp.configs.presets import preset_nonzero_source, preset_zero_source
from wemp.exceptions import PropagationError, SolverError
from wemp.models.problem import TimeGrid
from wemp.models.solver import BACKWARD_EULER, CRANK_NICOLSON
from wemp.services import parareal
from wemp.services.parareal import (
    PararealState,
    initial_coarse_sweep,
    parareal_iterate,
    run_parareal,
    stopping_error,
)
from wemp.services.time_integration import multiscale_sequential_solve

from .conftest import make_space


@pytest.fixture(scope="module")
def channel_space():
    return make_space(8, 4, level=2, contrast=True)


@pytest.fixture(scope="module")
def smooth_space():
    return make_space(4, 4, level=2)


def _sequential_at_coarse_points(space, data, time_grid, scheme):
    U0 = space.project_initial(data.initial)
    trajectory = multiscale_sequential_solve(space, data, time_grid.fine_step, scheme, initial=U0)
    return np.vstack([trajectory.at_index(n * time_grid.ratio) for n in range(time_grid.n_coarse + 1)])


def _max_error(space, iterate, sequential):
    return max(space.mass_norm(iterate[n] - sequential[n]) for n in range(len(sequential)))


CASES = [
    (preset_nonzero_source(1.0), TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-2), BACKWARD_EULER),
    (preset_nonzero_source(1.0), TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-2), CRANK_NICOLSON),
    (preset_zero_source(0.1), TimeGrid(final_time=0.1, coarse_step=0.01, fine_step=1e-3), BACKWARD_EULER),
]


@pytest.mark.parametrize("data, time_grid, scheme", CASES)
def test_iterate_k_is_exact_up_to_coarse_point_k(channel_space, data, time_grid, scheme):
    assert np.linalg.cond(channel_space.reduced_mass) <= 10.0
    sequential = _sequential_at_coarse_points(channel_space, data, time_grid, scheme)
    result = run_parareal(channel_space, data, time_grid, scheme, tolerance=1e-300)
    scale = 1.0 + max(channel_space.mass_norm(u) for u in sequential)
    for k, iterate in enumerate(result.iterates):
        for n in range(min(k, time_grid.n_coarse) + 1):
            assert channel_space.mass_norm(iterate[n] - sequential[n]) <= 1e-10 * scale
    assert result.report.iterations == time_grid.n_coarse


def test_iterate_zero_is_the_coarse_solution(smooth_space):
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-2)
    state = initial_coarse_sweep(smooth_space, data, time_grid)
    coarse = multiscale_sequential_solve(smooth_space, data, 0.1, BACKWARD_EULER, initial=state.trajectory[0])
    assert np.array_equal(state.trajectory, coarse.states)
    assert np.array_equal(state.coarse, state.trajectory[1:])


def test_iteration_is_causal(smooth_space):
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-2)
    state = initial_coarse_sweep(smooth_space, data, time_grid)
    perturbed = PararealState(iteration=0, trajectory=state.trajectory.copy(), coarse=state.coarse.copy())
    perturbed.trajectory[3] += 1.0
    clean = parareal_iterate(state, smooth_space, data, time_grid, BACKWARD_EULER)
    dirty = parareal_iterate(perturbed, smooth_space, data, time_grid, BACKWARD_EULER)
    assert np.array_equal(clean.trajectory[:4], dirty.trajectory[:4])
    assert not np.array_equal(clean.trajectory[4], dirty.trajectory[4])
    assert clean.iteration == 1
    assert state.fine.shape == state.coarse.shape


def test_parallel_fine_sweep_is_deterministic(smooth_space):
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-2)
    serial = run_parareal(smooth_space, data, time_grid, CRANK_NICOLSON, tolerance=1e-8, workers=1)
    threaded = run_parareal(smooth_space, data, time_grid, CRANK_NICOLSON, tolerance=1e-8, workers=4)
    assert serial.report.errors == threaded.report.errors
    for a, b in zip(serial.iterates, threaded.iterates):
        assert np.array_equal(a, b)


def test_error_decays_each_iteration(smooth_space):
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-3)
    sequential = _sequential_at_coarse_points(smooth_space, data, time_grid, BACKWARD_EULER)
    result = run_parareal(smooth_space, data, time_grid, BACKWARD_EULER, tolerance=1e-300, kmax=4)
    errors = [_max_error(smooth_space, iterate, sequential) for iterate in result.iterates]
    for k in range(1, 4):
        assert errors[k + 1] <= 0.5 * errors[k]
    assert result.report.errors[3] < result.report.errors[0]


def test_loose_tolerance_stops_before_iterating(smooth_space):
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-2)
    for tolerance in (1.0, 1e6):
        result = run_parareal(smooth_space, data, time_grid, BACKWARD_EULER, tolerance=tolerance)
        report = result.report
        assert report.iterations == 0 and report.converged
        assert len(result.iterates) == 1
        assert (report.coarse_solves, report.fine_solves) == (10, 0)
        assert report.history_rows()[0]["err"] == ""


def test_kmax_caps_the_iteration(smooth_space):
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-2)
    result = run_parareal(smooth_space, data, time_grid, BACKWARD_EULER, tolerance=1e-300, kmax=2)
    report = result.report
    assert report.iterations == 2 and not report.converged
    assert (report.coarse_solves, report.fine_solves) == (30, 200)
    assert [row["k"] for row in report.history_rows()] == [0, 1, 2]
    phases = report.phases
    assert report.estimated_parallel_seconds <= sum(p.coarse + p.correction + p.fine for p in phases) + 1e-9


def test_invalid_arguments(smooth_space):
    data = preset_zero_source(0.1)
    time_grid = TimeGrid(final_time=0.1, coarse_step=0.01, fine_step=1e-3)
    with pytest.raises(ValueError):
        run_parareal(smooth_space, data, time_grid, BACKWARD_EULER, tolerance=0.0)
    with pytest.raises(ValueError):
        run_parareal(smooth_space, data, time_grid, BACKWARD_EULER, tolerance=1e-8, kmax=0)


def test_fine_failure_names_the_interval(smooth_space, monkeypatch):
    data = preset_zero_source(0.1)
    time_grid = TimeGrid(final_time=0.1, coarse_step=0.01, fine_step=1e-3)
    original = parareal.fine_propagate

    def failing(space, U, start, *args):
        if start == time_grid.coarse_time(2):
            raise SolverError("singular", {"step": 21})
        return original(space, U, start, *args)

    monkeypatch.setattr(parareal, "fine_propagate", failing)
    with pytest.raises(PropagationError) as info:
        run_parareal(smooth_space, data, time_grid, BACKWARD_EULER, tolerance=1e-8, workers=3)
    assert info.value.context == {"step": 21, "interval": 2}


def test_stopping_error():
    previous = np.zeros((3, 2))
    current = np.array([[9.0, 9.0], [3.0, 4.0], [0.0, 0.0]])
    # row 0 is U^0 and never counts
    assert stopping_error(previous, current) == 2.5
    assert stopping_error(previous, current, "mass", np.eye(2)) == 2.5
    assert stopping_error(previous, current, "mass", 4 * np.eye(2)) == 5.0
    with pytest.raises(ValueError):
        stopping_error(previous, current, "mass")
    with pytest.raises(ValueError):
        stopping_error(previous, current[:2])


def test_relative_errors_against_a_reference(smooth_space):
    data = preset_zero_source(0.1)
    time_grid = TimeGrid(final_time=0.1, coarse_step=0.01, fine_step=1e-3)
    sequential = _sequential_at_coarse_points(smooth_space, data, time_grid, BACKWARD_EULER)
    reference = smooth_space.reconstruct(sequential)
    result = run_parareal(smooth_space, data, time_grid, BACKWARD_EULER, tolerance=1e-300, reference=reference)
    relative = result.report.relative_errors
    assert len(relative) == len(result.iterates)
    assert relative[0][0] == 0.0
    assert np.all(relative[-1] <= 1e-6)
    assert relative[0][-1] > relative[-1][-1]


@pytest.mark.perf
@pytest.mark.skipif((os.cpu_count() or 1) < 8, reason="needs 8 CPUs")
def test_estimated_parallel_time_beats_sequential():
    space = make_space(16, 8, level=2, contrast=True)
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-3)
    U0 = space.project_initial(data.initial)
    space.step_factor(time_grid.fine_step)
    space.step_factor(time_grid.coarse_step)
    for n in range(time_grid.n_fine + 1):
        space.load(data.source, n * time_grid.fine_step)

    started = time.perf_counter()
    multiscale_sequential_solve(space, data, time_grid.fine_step, BACKWARD_EULER, initial=U0)
    sequential_seconds = time.perf_counter() - started

    result = run_parareal(space, data, time_grid, BACKWARD_EULER, tolerance=1e-300, kmax=2, initial=U0)
    assert result.report.estimated_parallel_seconds < sequential_seconds


@pytest.mark.perf
@pytest.mark.skipif((os.cpu_count() or 1) < 8, reason="needs 8 CPUs")
def test_fine_sweep_scales_with_workers():
    space = make_space(16, 8, level=2, contrast=True)
    data = preset_nonzero_source(1.0)
    time_grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-3)
    serial = run_parareal(space, data, time_grid, BACKWARD_EULER, tolerance=1e-300, kmax=1, workers=1)
    threaded = run_parareal(space, data, time_grid, BACKWARD_EULER, tolerance=1e-300, kmax=1, workers=8)
    assert np.array_equal(serial.trajectory, threaded.trajectory)
    assert serial.report.phases[1].fine >= 3.0 * threaded.report.phases[1].fine
