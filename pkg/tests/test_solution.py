import numpy as np
import pytest
from numpy.polynomial import Polynomial

from follicle_sim import model as mdl
from follicle_sim.characteristics import Controls, Face, FrozenControls, MaturityTrajectory, flow
from follicle_sim.config import TestHooks
from follicle_sim.errors import BoundViolation, InvalidTestFunction
from follicle_sim.fixedpoint import compute_constants
from follicle_sim.initial_data import BumpDensity, GaussianDensity, InitialData, PolynomialDensity
from follicle_sim.quadrature import QuadraturePlan, tensor_rule
from follicle_sim.solution import SolutionHandle, TestFunction, check_bounds, evaluate, trace_mismatch, weak_form_terms


# Fixtures
@pytest.fixture
def handle(params, constant_controls, bump_data) -> SolutionHandle:
    return SolutionHandle(params, constant_controls, [bump_data], QuadraturePlan(order=7, strips=2))


@pytest.fixture
def frozen_controls(params) -> Controls:
    times = np.linspace(0.0, params.T, 6)
    frozen = FrozenControls.constant(0.0, params.T, [0.7] * params.n, 0.8)
    return Controls(params, MaturityTrajectory.constant(times, [0.0] * params.n), frozen=frozen, step=2.5e-3)


def polynomial_data(params) -> InitialData:
    """Smooth low-degree data on every component, integrated exactly by the rules."""
    components = {}
    for f in range(params.n):
        for phase in (1, 2, 3):
            for k in range(1, params.N + 1):
                components[(f, phase, k)] = PolynomialDensity(0.5 + f + phase, (0.0, 1.0, 0.0, 1.0), [1.0, 1.0], [0.0, 1.0, -1.0])
    return InitialData(params, components)


def gaussian_data(params) -> InitialData:
    """Narrow Gaussians, negligible on every face, so all densities stay smooth."""
    components = {}
    for f in range(params.n):
        for phase in (1, 2, 3):
            for k in range(1, params.N + 1):
                components[(f, phase, k)] = GaussianDensity(1.0 + 0.1 * (f + phase + k), (0.5, 0.5), (0.1, 0.1))
    return InitialData(params, components)


def random_points(rng, count, t_hi):
    return rng.uniform(0.0, t_hi, count), rng.uniform(0.0, 1.0, count), rng.uniform(0.0, 1.0, count)


class TestEvaluation:
    def test_initial_time_returns_data(self, params, handle, bump_data):
        """At the anchor time every component equals its datum"""
        x, y = np.meshgrid(np.linspace(0.05, 0.95, 7), np.linspace(0.05, 0.95, 7))
        for key in bump_data.keys():
            values = handle.evaluate(*key, np.zeros_like(x), x, y)
            assert values == pytest.approx(bump_data.component(*key)(x, y), abs=1e-15)

    def test_late_proliferation_is_pure_transport(self, params, handle, bump_data):
        """Phase 2 values ahead of the entry front are the shifted datum"""
        t = 0.03
        shift = mdl.velocity_ghat(0, params) * t
        x = np.linspace(shift + 0.01, 0.99, 9)
        y = np.linspace(0.1, 0.9, 9)
        values = handle.evaluate(0, 2, 1, np.full_like(x, t), x, y)
        assert values == pytest.approx(bump_data.component(0, 2, 1)(x - shift, y), rel=1e-14, abs=1e-300)

    def test_zero_data(self, params, constant_controls):
        """Zero data gives identically zero densities and maturities"""
        empty = SolutionHandle(params, constant_controls, [InitialData(params)])
        t, x, y = random_points(np.random.default_rng(3), 50, params.T)
        assert np.all(empty.evaluate(1, 3, 2, t, x, y) == 0.0)
        assert np.all(empty.maturities([0.0, params.T]) == 0.0)

    def test_scalar_field_evaluation(self, handle, bump_data):
        assert evaluate(handle.field(0, 1, 1), 0.0, 0.5, 0.5) == pytest.approx(bump_data.component(0, 1, 1)(0.5, 0.5))
        assert handle.field(0, 3, 2).name == "tilde_2"

    def test_threaded_evaluation_matches_serial(self, params, constant_controls, bump_data):
        serial = SolutionHandle(params, constant_controls, [bump_data], chunk_size=64)
        pooled = SolutionHandle(params, constant_controls, [bump_data], threads=4, chunk_size=64)
        t, x, y = random_points(np.random.default_rng(5), 500, params.T)
        assert np.array_equal(serial.evaluate(0, 1, 2, t, x, y), pooled.evaluate(0, 1, 2, t, x, y))

    def test_nonnegative(self, params, handle):
        t, x, y = random_points(np.random.default_rng(11), 400, params.T)
        rng = np.random.default_rng(12)
        values = handle.evaluate_many(1, rng.integers(1, 4, t.size), rng.integers(1, params.N + 1, t.size), t, x, y)
        assert np.all(values >= 0.0)


class TestFunctionals:
    def test_initial_mass_and_maturity_exact(self, params, constant_controls):
        """Box-weighted integrals of polynomial data at t = 0"""
        data = polynomial_data(params)
        smooth = SolutionHandle(params, constant_controls, [data], QuadraturePlan(order=5))
        expected_mass = np.zeros(params.n)
        expected_maturity = np.zeros(params.n)
        for f, phase, k in data.keys():
            amplitude = 0.5 + f + phase
            # int (1 + x) dx = 3/2, int y (1 - y) dy = 1/6, int y^2 (1 - y) dy = 1/12
            expected_mass[f] += mdl.mass_weight(phase, params) * amplitude * 1.5 / 6.0
            if phase == 3:
                expected_maturity[f] += params.a2 * params.gamma_0 * amplitude * 1.5 * (params.gamma_s / 6.0 + params.gamma_0 / 12.0)
            else:
                expected_maturity[f] += mdl.mass_weight(phase, params) * params.gamma_s * amplitude * 1.5 / 12.0
        assert smooth.total_mass(0.0) == pytest.approx(expected_mass, rel=1e-12)
        assert smooth.maturity(0.0).per_follicle == pytest.approx(expected_maturity, rel=1e-12)

    def test_trace_compatibility(self, params, handle):
        """Late-proliferation entry values match the scaled early-proliferation exit values"""
        assert trace_mismatch(handle, np.linspace(0.01, 0.04, 4), np.linspace(0.1, 0.9, 9)) < 1e-8

    def test_sample_grid_and_reanchor(self, params, handle):
        grids = handle.sample_grid(0.02, 8)
        assert len(grids) == params.n * 3 * params.N
        assert all(g.shape == (8, 8) for g in grids.values())
        anchored = handle.reanchor(0.02, 8)
        assert anchored.t_anchor == 0.02
        assert handle.l1_distance(0.02, 0.02, 8) == 0.0


class TestLinearity:
    def test_superposition_with_frozen_controls(self, params, frozen_controls, bump_data):
        """Open-loop controls make the solution map linear in the data"""
        other = InitialData(params, {(0, 1, 1): GaussianDensity(0.7, (0.4, 0.6), (0.2, 0.1)), (1, 3, 2): GaussianDensity(1.3, (0.5, 0.5), (0.3, 0.3))})
        combined = bump_data.combine(2.0, other, 3.0)
        t, x, y = random_points(np.random.default_rng(17), 300, params.T)
        for f, phase, k in [(0, 1, 1), (0, 2, 2), (1, 3, 2), (1, 1, 2)]:
            a = SolutionHandle(params, frozen_controls, [bump_data]).evaluate(f, phase, k, t, x, y)
            b = SolutionHandle(params, frozen_controls, [other]).evaluate(f, phase, k, t, x, y)
            c = SolutionHandle(params, frozen_controls, [combined]).evaluate(f, phase, k, t, x, y)
            assert np.max(np.abs(c - (2.0 * a + 3.0 * b))) <= 1e-12 * max(1.0, np.max(np.abs(c)))


class TestWeakForm:
    def test_test_function_boundary_conditions(self, params):
        test = TestFunction.random(params, 0.04, np.random.default_rng(1))
        test.validate()
        T, X, Y = test.factors[(0, 1, 1)]
        test.factors[(0, 1, 1)] = (T, X + Polynomial([0.5]), Y)
        with pytest.raises(InvalidTestFunction):
            test.validate()

    @pytest.mark.parametrize("seed", [7, 11, 23])
    def test_residual_small_and_sensitive(self, params, constant_controls, seed):
        """The constructed solution satisfies the weak identity; a perturbed one does not"""
        tau = 0.04
        handle = SolutionHandle(params, constant_controls, [gaussian_data(params)], QuadraturePlan(order=10, strips=2))
        test = TestFunction.random(params, tau, np.random.default_rng(seed))
        terms = weak_form_terms(handle, test, tau, time_strips=1, face_strips=4)
        assert terms.residual <= 1e-5 * terms.scale
        perturbed = weak_form_terms(handle.perturbed((0, 1, 1), 1.01), test, tau, time_strips=1, face_strips=4)
        assert perturbed.residual >= 10.0 * terms.residual

    def test_tau_beyond_horizon(self, params, handle):
        test = TestFunction.random(params, 1.0, np.random.default_rng(2))
        with pytest.raises(ValueError):
            weak_form_terms(handle, test, 1.0)


class TestBounds:
    def test_bounds_hold(self, params, handle, bump_data, small_settings):
        constants = compute_constants(bump_data, params, small_settings)
        trajectory = MaturityTrajectory.constant(np.linspace(0.0, params.T, 6), [0.0] * params.n)
        report = check_bounds(handle, trajectory, constants, samples=400, seed=1)
        assert report.passed
        assert report.max_density_ratio <= 1.0
        assert report.to_dict()["slack"] == pytest.approx(constants.K)

    def test_maturity_above_K(self, params, handle, bump_data, small_settings):
        constants = compute_constants(bump_data, params, small_settings)
        trajectory = MaturityTrajectory.constant(np.linspace(0.0, params.T, 6), [2.0 * constants.K] * params.n)
        report = check_bounds(handle, trajectory, constants, samples=10, raise_on_failure=False)
        assert not report.passed
        assert report.offending["kind"] == "maturity"
        with pytest.raises(BoundViolation):
            check_bounds(handle, trajectory, constants, samples=10)


class TestPushForward:
    def test_late_proliferation_keeps_maturity(self, params, constant_controls):
        """Data confined to late proliferation only translates, so its maturity is invariant"""
        data = InitialData(params, {(0, 2, 1): GaussianDensity(1.0, (0.5, 0.5), (0.08, 0.15))})
        moving = SolutionHandle(params, constant_controls, [data], QuadraturePlan(order=7, strips=8))
        before, after = moving.maturities([0.0, params.T]).T
        assert before[0] > 0.0
        assert after == pytest.approx(before, rel=1e-6, abs=1e-12)
        assert moving.total_mass(params.T) == pytest.approx(moving.total_mass(0.0), rel=1e-6, abs=1e-12)

    def test_matches_lagrangian_push_forward(self, single_params):
        """Maturity equals the initial mass carried along characteristics and weighted by current maturity"""
        p = single_params
        t = 0.02
        times = np.linspace(0.0, p.T, 6)
        frozen = FrozenControls.constant(0.0, p.T, [0.7], 0.8)
        controls = Controls(p, MaturityTrajectory.constant(times, [0.0]), hooks=TestHooks(zero_loss=True), frozen=frozen, step=2.5e-3)
        data = InitialData(
            p,
            {
                (0, 1, 1): BumpDensity(1.0, (0.85, 0.85), (0.3, 0.3)),
                (0, 2, 1): BumpDensity(0.8, (0.5, 0.5), (0.3, 0.3)),
                (0, 3, 1): BumpDensity(0.5, (0.5, 0.5), (0.3, 0.3)),
            },
        )
        X, Y, W = tensor_rule((0.0, 1.0), (0.0, 1.0), 6, 64)

        def carried(phase, start, x, y, mass):
            """Maturity carried to time t by particles of one phase; front exits leave the system."""
            if mass.size == 0:
                return 0.0
            res = flow(phase, 0, (start, x, y), t, controls, direction="forward")
            total = 0.0
            arrived = res.face == Face.ENDPOINT
            gamma = p.gamma_s * res.y if phase != 3 else p.gamma_s + p.gamma_0 * res.y
            total += float(np.sum(mass[arrived] * gamma[arrived]))
            if phase == 1:
                front = res.face == Face.FRONT
                total += carried(2, res.s[front], np.zeros(int(front.sum())), res.y[front], mass[front])
                right = res.face == Face.RIGHT
                total += carried(3, res.s[right], res.x[right] * p.a1 / p.a2, np.zeros(int(right.sum())), mass[right])
            return total

        expected = 0.0
        for phase in (1, 2, 3):
            mass = data.component(0, phase, 1)(X, Y) * W * mdl.mass_weight(phase, p)
            keep = mass > 0
            expected += carried(phase, np.zeros(int(keep.sum())), X[keep], Y[keep], mass[keep])

        handle = SolutionHandle(p, controls, [data], QuadraturePlan(order=7, strips=4))
        assert handle.maturities([t])[0, 0] == pytest.approx(expected, rel=1e-4)
