import numpy as np
import pytest
from pydantic import ValidationError

from wemp.configs.presets import initial_bubble, oscillating_source, preset_nonzero_source
from wemp.exceptions import ConfigurationError, SolverError
from wemp.models.problem import ProblemData, TimeGrid
from wemp.models.solver import BACKWARD_EULER, CRANK_NICOLSON, SchemeConfig
from wemp.services.coefficient import homogeneous_field
from wemp.services.fem import assemble_mass, assemble_stiffness
from wemp.services.grid import build_grid, nodal_interpolate
from wemp.services.time_integration import (
    FineSystem,
    coarse_propagate,
    fine_propagate,
    fine_reference_solve,
    jump_operator,
    march,
    multiscale_sequential_solve,
)


def _sine(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


@pytest.fixture(scope="module")
def sine_mode():
    grid = build_grid(8, 8)
    kappa = homogeneous_field(grid)
    mass, stiffness = assemble_mass(grid), assemble_stiffness(grid, kappa)
    u0 = nodal_interpolate(grid, _sine)
    # the interpolated sine is an exact eigenvector of the Q1 pencil
    eigenvalue = stiffness.quadratic(u0) / mass.quadratic(u0)
    return grid, kappa, mass, stiffness, u0, eigenvalue


def _amplitude(mass, u0, u):
    return (u @ (mass @ u0)) / mass.quadratic(u0)


def test_scheme_startup():
    assert all(BACKWARD_EULER.uses_backward_euler(m) for m in range(10))
    assert [CRANK_NICOLSON.uses_backward_euler(m) for m in range(5)] == [True, True, True, False, False]
    assert not SchemeConfig(scheme="crank-nicolson", startup_steps=0).uses_backward_euler(0)


def test_time_grid_validation():
    grid = TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=1e-3)
    assert (grid.n_coarse, grid.ratio, grid.n_fine) == (10, 100, 1000)
    assert grid.coarse_times()[-1] == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        TimeGrid(final_time=1.0, coarse_step=0.3, fine_step=0.1)
    with pytest.raises(ValidationError):
        TimeGrid(final_time=1.0, coarse_step=0.1, fine_step=0.1)


def test_backward_euler_matches_discrete_flow(sine_mode):
    grid, kappa, mass, stiffness, u0, lam = sine_mode
    data = ProblemData(initial=_sine, final_time=0.1)
    trajectory = fine_reference_solve(grid, kappa, data, 1e-2, mass=mass, stiffness=stiffness)
    expected = (1 + lam * 1e-2) ** -10
    assert np.allclose(trajectory.final, expected * u0, rtol=1e-10, atol=1e-13)


def test_crank_nicolson_matches_discrete_flow(sine_mode):
    grid, kappa, mass, stiffness, u0, lam = sine_mode
    data = ProblemData(initial=_sine, final_time=0.1)
    trajectory = fine_reference_solve(grid, kappa, data, 1e-2, CRANK_NICOLSON, mass=mass, stiffness=stiffness)
    dt = 1e-2
    expected = (1 + lam * dt) ** -3 * ((1 - lam * dt / 2) / (1 + lam * dt / 2)) ** 7
    assert np.allclose(trajectory.final, expected * u0, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("scheme, low, high", [(BACKWARD_EULER, 1.8, 2.2), (CRANK_NICOLSON, 3.5, 4.5)])
def test_temporal_order(sine_mode, scheme, low, high):
    grid, kappa, mass, stiffness, u0, lam = sine_mode
    data = ProblemData(initial=_sine, final_time=0.1)
    exact = np.exp(-lam * 0.1)
    errors = []
    for dt in (4e-3, 2e-3, 1e-3):
        trajectory = fine_reference_solve(grid, kappa, data, dt, scheme, mass=mass, stiffness=stiffness)
        errors.append(abs(_amplitude(mass, u0, trajectory.final) - exact))
    for coarse, fine in zip(errors, errors[1:]):
        assert low <= coarse / fine <= high


def test_march_records_and_restarts(unit_space):
    data = preset_nonzero_source(0.1)
    u0 = unit_space.project_initial(data.initial)
    full = march(unit_space, u0, 0, 10, 1e-2, data.source, CRANK_NICOLSON, record_every=4)
    assert full.indices.tolist() == [0, 4, 8, 10]
    assert full.times[-1] == pytest.approx(0.1)
    restarted = march(unit_space, full.at_index(4), 4, 6, 1e-2, data.source, CRANK_NICOLSON)
    assert np.array_equal(restarted.final, full.final)
    assert np.array_equal(full.at_time(0.08), full.at_index(8))
    with pytest.raises(KeyError):
        full.at_index(5)


class _FailingSystem:
    def mass_matvec(self, u):
        return u

    def stiffness_matvec(self, u):
        return u

    def shifted_solve(self, shift, rhs):
        raise SolverError("singular", {"shift": shift})

    def load(self, source, t):
        return 0.0


class _BlowUpSystem(_FailingSystem):
    def shifted_solve(self, shift, rhs):
        return rhs * np.nan


def test_march_failures_carry_the_step():
    with pytest.raises(SolverError) as info:
        march(_FailingSystem(), np.ones(3), 7, 2, 0.1, None, BACKWARD_EULER)
    assert info.value.context == {"shift": 0.1, "step": 8}
    with pytest.raises(SolverError) as info:
        march(_BlowUpSystem(), np.ones(3), 0, 2, 0.1, None, BACKWARD_EULER)
    assert info.value.context == {"step": 1}


def test_fine_system_caches_operators(small_grid, unit_kappa):
    system = FineSystem(small_grid, assemble_mass(small_grid), assemble_stiffness(small_grid, unit_kappa))
    assert system.operator(0.01) is system.operator(0.01)
    assert system.operator(0.01) is not system.operator(0.02)


def test_fine_propagate_composes(unit_space):
    U = unit_space.project_initial(initial_bubble)
    for scheme in (BACKWARD_EULER, CRANK_NICOLSON):
        halfway = fine_propagate(unit_space, U, 0.0, 0.05, 0.005, scheme, oscillating_source)
        twice = fine_propagate(unit_space, halfway, 0.05, 0.05, 0.005, scheme, oscillating_source)
        once = fine_propagate(unit_space, U, 0.0, 0.1, 0.005, scheme, oscillating_source)
        assert np.array_equal(twice, once)


def test_fine_propagate_matches_sequential_solve(unit_space):
    data = preset_nonzero_source(0.2)
    U = unit_space.project_initial(data.initial)
    sequential = multiscale_sequential_solve(unit_space, data, 0.01, CRANK_NICOLSON, initial=U)
    first = fine_propagate(unit_space, U, 0.0, 0.1, 0.01, CRANK_NICOLSON, data.source)
    second = fine_propagate(unit_space, first, 0.1, 0.1, 0.01, CRANK_NICOLSON, data.source)
    assert np.array_equal(first, sequential.at_index(10))
    assert np.array_equal(second, sequential.at_index(20))


def test_jump_vanishes_when_steps_coincide(unit_space):
    U = unit_space.project_initial(initial_bubble)
    jump = jump_operator(unit_space, U, 0.03, 0.01, 0.01, BACKWARD_EULER, oscillating_source)
    assert np.all(jump == 0.0)


def test_coarse_propagator_is_a_contraction(unit_space, rng):
    for _ in range(100):
        u, v = rng.standard_normal((2, unit_space.dimension))
        Eu = coarse_propagate(unit_space, u, 0.0, 0.1, None)
        Ev = coarse_propagate(unit_space, v, 0.0, 0.1, None)
        assert unit_space.mass_norm(Eu - Ev) <= (1 + 1e-12) * unit_space.mass_norm(u - v)


def test_coarse_propagator_is_consistent(unit_space):
    U = unit_space.project_initial(initial_bubble)
    moved = coarse_propagate(unit_space, U, 0.0, 1e-8, None)
    assert unit_space.mass_norm(moved - U) <= 1e-6 * unit_space.mass_norm(U)


def test_jump_differences_shrink_quadratically_with_the_coarse_step(unit_space, rng):
    for _ in range(5):
        u, v = (march(unit_space, w, 0, 50, 0.01, None, BACKWARD_EULER).final
                for w in rng.standard_normal((2, unit_space.dimension)))
        sizes = []
        for coarse_step in (0.01, 0.005):
            difference = (jump_operator(unit_space, u, 0.5, coarse_step, coarse_step / 10, BACKWARD_EULER, None)
                          - jump_operator(unit_space, v, 0.5, coarse_step, coarse_step / 10, BACKWARD_EULER, None))
            sizes.append(unit_space.mass_norm(difference))
        assert 3.0 <= sizes[0] / sizes[1] <= 5.0


def test_one_backward_euler_step_is_a_coarse_step(unit_space):
    U = unit_space.project_initial(initial_bubble)
    for index in (0, 30):
        step = march(unit_space, U, index, 1, 0.01, oscillating_source, BACKWARD_EULER).final
        assert np.array_equal(step, coarse_propagate(unit_space, U, index * 0.01, 0.01, oscillating_source))


def test_initial_condition_must_vanish_on_the_boundary(small_grid, unit_kappa, unit_space):
    data = ProblemData(initial=lambda x, y: 1.0 + x * y, final_time=0.1)
    with pytest.raises(ConfigurationError) as info:
        fine_reference_solve(small_grid, unit_kappa, data, 0.01)
    assert info.value.context["mismatch"] == 2.0
    with pytest.raises(ConfigurationError):
        multiscale_sequential_solve(unit_space, data, 0.01)


def test_backward_euler_contracts_without_source(small_grid, blocky_kappa, unit_space, rng):
    mass, stiffness = assemble_mass(small_grid), assemble_stiffness(small_grid, blocky_kappa)
    fine = march(FineSystem(small_grid, mass, stiffness), rng.standard_normal(small_grid.n_dofs), 0, 20, 0.05,
                 None, BACKWARD_EULER)
    norms = [mass.quadratic(u) for u in fine.states]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))
    reduced = march(unit_space, rng.standard_normal(unit_space.dimension), 0, 20, 0.05, None, BACKWARD_EULER)
    norms = [unit_space.mass_norm(U) for U in reduced.states]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))


def test_jump_differences_do_not_see_the_source(unit_space, rng):
    u, v = rng.standard_normal((2, unit_space.dimension))
    with_source = (jump_operator(unit_space, u, 0.2, 0.1, 0.01, BACKWARD_EULER, oscillating_source)
                   - jump_operator(unit_space, v, 0.2, 0.1, 0.01, BACKWARD_EULER, oscillating_source))
    without = (jump_operator(unit_space, u, 0.2, 0.1, 0.01, BACKWARD_EULER, None)
               - jump_operator(unit_space, v, 0.2, 0.1, 0.01, BACKWARD_EULER, None))
    assert unit_space.mass_norm(with_source - without) <= 1e-9 * unit_space.mass_norm(without)
