import numpy as np
import pytest

from follicle_sim import fv_oracle
from follicle_sim import model as mdl
from follicle_sim.config import TestHooks
from follicle_sim.errors import CFLViolation
from follicle_sim.fv_oracle import Grid
from follicle_sim.initial_data import InitialData, PolynomialDensity


# Fixtures
@pytest.fixture
def smooth_data(params) -> InitialData:
    """Quadratic data in every component, averaged exactly by the cell rule."""
    components = {}
    for f in range(params.n):
        for phase in (1, 2, 3):
            for k in range(1, params.N + 1):
                components[(f, phase, k)] = PolynomialDensity(1.0 + 0.1 * phase, (0.0, 1.0, 0.0, 1.0), [1.0, 1.0], [0.0, 1.0, -1.0])
    return InitialData(params, components)


class TestGrid:
    def test_cell_averages_preserve_mass(self, params, smooth_data):
        grid = Grid.from_initial(smooth_data, 8)
        expected = np.zeros(params.n)
        for f, phase, k in smooth_data.keys():
            expected[f] += mdl.mass_weight(phase, params) * smooth_data.l1_norm(f, phase, k)
        assert grid.masses() == pytest.approx(expected, rel=1e-12)

    def test_components_keyed_like_data(self, params, smooth_data):
        grid = Grid.from_initial(smooth_data, 4)
        components = grid.components()
        assert set(components) == set(smooth_data.keys())
        assert components[(1, 3, 2)].shape == (4, 4)

    def test_zero_data_stays_zero(self, params):
        result = fv_oracle.run(0.01, InitialData(params), params, 8)
        assert np.all(result.grid.values == 0.0)
        assert np.all(result.maturities == 0.0)


class TestStep:
    def test_cfl_enforced(self, params, smooth_data):
        grid = Grid.from_initial(smooth_data, 8)
        with pytest.raises(CFLViolation):
            fv_oracle.step(grid, dt=10.0 * fv_oracle.stable_dt(grid))

    def test_positivity(self, params, smooth_data):
        result = fv_oracle.run(0.02, smooth_data, params, 16)
        assert np.all(result.grid.values >= 0.0)
        assert result.grid.t == pytest.approx(0.02)

    def test_closed_domain_conserves_mass(self, params, smooth_data):
        """Without loss, mitosis or outflow the physical mass is invariant"""
        hooks = TestHooks(zero_loss=True, disable_mitosis=True, closed_domain=True)
        result = fv_oracle.run(0.02, smooth_data, params, 16, hooks=hooks)
        totals = result.masses.sum(axis=0)
        assert np.max(np.abs(totals - totals[0])) <= 1e-10 * totals[0]

    def test_mitosis_doubles_mass(self, params, smooth_data):
        """Mass entering cycle k + 1 is twice the mass leaving late proliferation of cycle k"""
        result = fv_oracle.run(0.01, smooth_data, params, 16, keep_ledgers=True)
        assert result.ledgers
        for ledger in result.ledgers:
            assert np.all(ledger.mitosis_in[:, 0] == 0.0)
            assert ledger.mitosis_in[:, 1:] == pytest.approx(2.0 * ledger.late_out[:, :-1], rel=1e-12)

    def test_interface_fluxes_balance(self, params, smooth_data):
        """Early-proliferation outflow equals late-proliferation inflow, top outflow equals bottom inflow"""
        result = fv_oracle.run(0.01, smooth_data, params, 16, keep_ledgers=True)
        for ledger in result.ledgers:
            assert ledger.late_in == pytest.approx(ledger.early_out, rel=1e-12)
            assert ledger.bottom_in == pytest.approx(ledger.top_out, rel=1e-12)


class TestSnapshots:
    def test_snapshots_hit_requested_times(self, params, smooth_data):
        result = fv_oracle.run(0.02, smooth_data, params, 8, snapshot_times=[0.0, 0.013])
        assert sorted(result.snapshots) == [0.0, 0.013]
        assert result.snapshots[0.013].t == 0.013
        assert np.array_equal(result.snapshots[0.0].values, Grid.from_initial(smooth_data, 8).values)
        assert result.times[-1] == pytest.approx(0.02)


class TestControls:
    def test_each_follicle_gets_its_own_gain(self, params):
        """Data on the first follicle only, so the follicular gains separate"""
        components = {(0, 1, 1): PolynomialDensity(0.5, (0.0, 1.0, 0.0, 1.0), [1.0], [1.0])}
        result = fv_oracle.run(0.01, InitialData(params, components), params, 8)
        for step in (0, len(result.times) - 1):
            M_f = result.maturities[:, step]
            t = result.times[step]
            for f in range(params.n):
                expected = mdl.local_control_u(M_f[f], M_f.sum(), t, f, params)
                assert result.controls[f, step] == pytest.approx(expected, rel=1e-14)
            assert result.controls[params.n, step] == pytest.approx(mdl.global_control_U(M_f.sum(), t, params), rel=1e-14)
        assert result.maturities[0, 0] > 0.0
        assert result.maturities[1, 0] == 0.0
        assert result.controls[0, 0] > result.controls[1, 0]
