import numpy as np
import pytest

from follicle_sim import model as mdl
from follicle_sim.errors import AssumptionViolated, ConfigError, OutOfDomain
from follicle_sim.model import ModelParams, Phase


class TestModelParams:
    def test_defaults_load(self, param_values):
        """The shipped parameter file is a valid parameter set"""
        p = ModelParams.from_mapping(param_values)
        assert p.n == 2 and p.N == 2
        assert p.gamma_0 == pytest.approx(p.gamma_m - p.gamma_s)
        assert p.to_dict()["tau_g"] == list(p.tau_g)

    def test_unknown_key_rejected(self, param_values):
        """Strict parsing: extra keys are an error"""
        param_values["colour"] = 3
        with pytest.raises(ConfigError) as info:
            ModelParams.from_mapping(param_values)
        assert info.value.context["unknown"] == ["colour"]

    def test_missing_key_rejected(self, param_values):
        """Strict parsing: every field is required"""
        del param_values["b3"]
        with pytest.raises(ConfigError) as info:
            ModelParams.from_mapping(param_values)
        assert info.value.context["missing"] == ["b3"]

    @pytest.mark.parametrize(
        "changes",
        [
            {"a2": 0.5},
            {"gamma_m": 0.9},
            {"tau_g": [1.0]},
            {"tau_h": [1.0, -1.0]},
            {"Us": 1.5},
            {"T": 0.0},
        ],
    )
    def test_invariants_enforced(self, param_values, changes):
        """Violated parameter invariants raise ConfigError"""
        param_values.update(changes)
        with pytest.raises(ConfigError):
            ModelParams.from_mapping(param_values)

    def test_integer_counts(self, param_values):
        """N and n must be JSON integers"""
        param_values["N"] = 2.0
        with pytest.raises(ConfigError):
            ModelParams.from_mapping(param_values)


class TestControls:
    def test_global_control_midpoint(self, params):
        """U at M = m sits halfway between its floor and ceiling"""
        U = mdl.global_control_U(params.m, 0.0, params)
        assert U == pytest.approx(params.U0 + params.Us + 0.5 * (1 - params.Us))

    def test_local_gain_saturates(self, params):
        """The follicular gain is capped at one"""
        assert mdl.local_gain(100.0, params) == pytest.approx(1.0)
        assert mdl.local_gain(0.0, params) == pytest.approx(params.b1 + 1.0 / params.b3)

    def test_control_derivatives_match_finite_differences(self, params):
        """Analytic dU/dM and db/dM_f against central differences"""
        eps = 1e-6
        for M in (0.3, 1.7, 2.5):
            fd = (mdl.global_control_U(M + eps, 0.0, params) - mdl.global_control_U(M - eps, 0.0, params)) / (2 * eps)
            assert mdl.dU_dM(M, params) == pytest.approx(fd, rel=1e-7)
        fd = (mdl.local_gain(0.5 + eps, params) - mdl.local_gain(0.5 - eps, params)) / (2 * eps)
        assert mdl.dgain_dMf(0.5, params) == pytest.approx(fd, rel=1e-7)


class TestClosures:
    def test_gamma_plus_is_root(self, params):
        """gamma_+ annihilates the maturation rate"""
        for u in (0.5, 0.8, 1.05):
            assert abs(mdl.h_rate(mdl.gamma_plus(u, params), u, 0, params)) < 1e-12
            assert abs(mdl.h_rate(mdl.gamma_minus(u, params), u, 0, params)) < 1e-12

    def test_sign_hypotheses_hold_on_control_range(self, params):
        """Every control value reachable with the defaults satisfies the sign conditions"""
        u = np.linspace(0.495, 1.05, 50)
        for f in range(params.n):
            mdl.check_sign_hypotheses(u, f, params)
        assert np.all((mdl.gamma_plus(u, params) > params.gamma_s) & (mdl.gamma_plus(u, params) < params.gamma_m))

    def test_sign_hypotheses_violation(self, params):
        """A weak constant term pushes gamma_+ below gamma_s"""
        weak = params.with_changes(c2=0.1)
        assert mdl.gamma_plus(1.0, weak) <= weak.gamma_s
        with pytest.raises(AssumptionViolated) as info:
            mdl.check_sign_hypotheses(1.0, 0, weak, t=0.25)
        assert info.value.context["t"] == 0.25

    def test_velocity_signs(self, params):
        """Phase-1 maturation is upward everywhere, Phase-3 maturation points inward at both faces"""
        y = np.linspace(0.0, 1.0, 11)
        assert np.all(mdl.velocity_hbar(y, 0.8, 0, params) > 0)
        assert mdl.velocity_htilde(0.0, 0.8, 0, params) > 0
        assert mdl.velocity_htilde(1.0, 0.8, 0, params) < 0
        assert mdl.velocity_ghat(1, params) == pytest.approx(params.tau_g[1] / (params.a2 - params.a1))
        assert mdl.velocity_gtilde(1, params) == pytest.approx(params.tau_g[1] / params.a2)

    def test_height_derivatives(self, params):
        """d/dy of the normalized maturation velocities"""
        eps = 1e-6
        for y in (0.1, 0.5, 0.9):
            fd_bar = (mdl.velocity_hbar(y + eps, 0.7, 1, params) - mdl.velocity_hbar(y - eps, 0.7, 1, params)) / (2 * eps)
            fd_tilde = (mdl.velocity_htilde(y + eps, 0.7, 1, params) - mdl.velocity_htilde(y - eps, 0.7, 1, params)) / (2 * eps)
            assert mdl.dhbar_dy(y, 0.7, 1, params) == pytest.approx(fd_bar, rel=1e-7)
            assert mdl.dhtilde_dy(y, 0.7, 1, params) == pytest.approx(fd_tilde, rel=1e-7)

    def test_loss_vanishes_at_full_control(self, params):
        """No loss once U reaches one"""
        assert mdl.loss_rate(params.gamma_s, 1.0, params) == pytest.approx(0.0)
        assert mdl.loss_rate(params.gamma_s, 0.5, params) == pytest.approx(0.5 * params.K_lambda)


class TestUnitSquare:
    def test_box_corners(self, params):
        """Cycle-2 late proliferation starts at age a2 + a1"""
        x, y = mdl.rescale_to_unit(params.a2 + params.a1, 0.0, Phase.LATE_PROLIFERATION, 2, params)
        assert (x, y) == pytest.approx((0.0, 0.0))
        a, gamma = mdl.rescale_from_unit(1.0, 1.0, Phase.DIFFERENTIATION, 1, params)
        assert (a, gamma) == pytest.approx((params.a2, params.gamma_m))

    def test_out_of_domain(self, params):
        with pytest.raises(OutOfDomain):
            mdl.rescale_to_unit(0.5, params.gamma_s + 0.1, Phase.EARLY_PROLIFERATION, 1, params)
        with pytest.raises(OutOfDomain):
            mdl.rescale_from_unit(0.5, 0.5, Phase.EARLY_PROLIFERATION, params.N + 1, params)

    def test_weights(self, params):
        """Mass factors are the box areas; the maturity weight is gamma times the area"""
        assert mdl.mass_weight(Phase.EARLY_PROLIFERATION, params) == pytest.approx(params.a1 * params.gamma_s)
        assert mdl.mass_weight(Phase.LATE_PROLIFERATION, params) == pytest.approx((params.a2 - params.a1) * params.gamma_s)
        assert mdl.mass_weight(Phase.DIFFERENTIATION, params) == pytest.approx(params.a2 * params.gamma_0)
        assert mdl.maturity_weight(1.0, Phase.DIFFERENTIATION, params) == pytest.approx(params.a2 * params.gamma_0 * params.gamma_m)
