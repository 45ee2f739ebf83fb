"""Unit and property tests of the electro-thermal-aging cell model."""

import numpy as np
import pytest

from conftest import random_admissible_profile
from solbat import battery
from solbat.battery import (
    BatteryState,
    charge_to_stoichiometry,
    electrolyte_resistance,
    equivalent_circuit,
    heat_generation,
    open_circuit_potential,
    sei_resistance,
    side_reaction_current,
    sigma_resistance,
    solve_battery_current,
    state_from_soc,
    step,
)
from solbat.errors import (
    BatteryDomainError,
    EndOfLifeError,
    InfeasiblePowerError,
)

# Frozen from tests/oracles/golden_chemistry.py (independent mpmath run).
GOLDEN_RSIG_POS = 0.0047584784660251407
GOLDEN_RSIG_NEG = 0.00036939051596310479
GOLDEN_RE_298 = 0.023818724553414506
GOLDEN_I0_POS = 1.832555329553647
GOLDEN_RF0 = 0.00026261382523549947
GOLDEN_KF = 0.00049331824100964977


class TestStoichiometry:
    def test_empty_electrode_anchors(self, params):
        assert charge_to_stoichiometry("pos", 0.0, params) == 0.9337
        assert charge_to_stoichiometry("neg", 0.0, params) == 0.8608

    def test_full_charge_matches_tabulated_endpoint(self, params):
        theta = charge_to_stoichiometry("pos", 1.747, params)
        assert abs(theta - 0.4855) / 0.4855 < 0.005

    def test_out_of_range_charge_raises(self, params):
        with pytest.raises(BatteryDomainError):
            charge_to_stoichiometry("pos", -0.01, params)
        with pytest.raises(BatteryDomainError):
            charge_to_stoichiometry("neg", params.q0 + 0.01, params)


class TestOpenCircuitPotential:
    def test_reference_temperature_recovers_ocp_curve(self, params):
        for theta in (0.2, 0.5, 0.8):
            v = open_circuit_potential("pos", theta, params.t_ref, params)
            assert v == params.pos.ocp(theta)

    def test_linear_in_temperature(self, params):
        theta = 0.4
        v0 = open_circuit_potential("neg", theta, params.t_ref, params)
        v10 = open_circuit_potential("neg", theta, params.t_ref + 10.0, params)
        assert v10 - v0 == pytest.approx(10.0 * params.neg.entropy(theta), rel=1e-12)

    def test_endpoint_theta_rejected(self, params):
        for bad in (0.0, 1.0, -0.1, 5e-5):
            with pytest.raises(BatteryDomainError):
                open_circuit_potential("pos", bad, 298.15, params)


class TestSigmaResistance:
    def test_exchange_current_closed_form_at_half(self, params):
        i0 = battery.exchange_current_density("pos", 0.5, params.t_ref, params)
        expected = (params.faraday * params.pos.k_reaction * params.pos.c_s_max
                    * np.sqrt(params.c_e0 * 0.25))
        assert i0 == pytest.approx(expected, rel=1e-12)
        assert i0 == pytest.approx(GOLDEN_I0_POS, rel=1e-12)

    def test_golden_values(self, params):
        assert sigma_resistance("pos", 0.5, 298.15, params) == pytest.approx(
            GOLDEN_RSIG_POS, rel=1e-12)
        assert sigma_resistance("neg", 0.5, 298.15, params) == pytest.approx(
            GOLDEN_RSIG_NEG, rel=1e-12)

    def test_inverse_area_scaling(self, params):
        import dataclasses
        half_area = dataclasses.replace(params, area=params.area / 2.0)
        r_full = sigma_resistance("pos", 0.5, 298.15, params)
        r_half = sigma_resistance("pos", 0.5, 298.15, half_area)
        assert r_half == pytest.approx(2.0 * r_full, rel=1e-12)

    def test_degenerate_theta_rejected(self, params):
        with pytest.raises(BatteryDomainError):
            sigma_resistance("neg", 0.0, 298.15, params)


class TestElectrolyteResistance:
    def test_golden_value(self, params):
        assert electrolyte_resistance(298.15, params) == pytest.approx(
            GOLDEN_RE_298, rel=1e-12)

    def test_inverse_in_conductivity(self, params):
        import dataclasses
        doubled = dataclasses.replace(
            params, kappa_eff=lambda t: 2.0 * params.kappa_eff(t))
        assert electrolyte_resistance(298.15, doubled) == pytest.approx(
            0.5 * electrolyte_resistance(298.15, params), rel=1e-12)

    def test_zero_separator_geometry(self, params):
        import dataclasses
        no_sep = dataclasses.replace(params, l_sep=0.0)
        expected = (params.pos.thickness + params.neg.thickness) / (
            2.0 * params.area * params.kappa_eff(298.15))
        assert electrolyte_resistance(298.15, no_sep) == pytest.approx(
            expected, rel=1e-12)


class TestSeiResistance:
    def test_fresh_cell(self, params):
        assert sei_resistance(0.0, params) == pytest.approx(GOLDEN_RF0, rel=1e-12)
        # three-significant-figure check of the arithmetic on table values
        assert sei_resistance(0.0, params) == pytest.approx(2.63e-4, rel=2e-3)

    def test_linear_growth(self, params):
        q = 0.37
        r0 = sei_resistance(0.0, params)
        r1 = sei_resistance(q, params)
        r2 = sei_resistance(2.0 * q, params)
        assert r2 - r1 == pytest.approx(r1 - r0, rel=1e-12)
        assert r1 - r0 == pytest.approx(GOLDEN_KF * q, rel=1e-12)

    def test_negative_loss_rejected(self, params):
        with pytest.raises(BatteryDomainError):
            sei_resistance(-1e-3, params)


class TestSideReaction:
    def test_zero_exchange_current_kills_side_reaction(self, params):
        import dataclasses
        dead = dataclasses.replace(params, i0_sr=lambda t: 0.0)
        s = state_from_soc(0.6, 1.0, 298.15, dead)
        assert side_reaction_current(s.q1_neg, 298.15, 0.5, dead) == 0.0

    def test_always_nonpositive(self, params):
        rng = np.random.default_rng(7)
        for _ in range(200):
            s = state_from_soc(rng.uniform(0.02, 0.98), 1.0,
                               rng.uniform(288.0, 318.0), params)
            i_bat = rng.uniform(-0.873, 0.873)
            assert side_reaction_current(s.q1_neg, s.t_bat, i_bat, params) <= 0.0

    def test_faster_at_high_soc(self, params):
        hi = state_from_soc(0.9, 1.0, 298.15, params)
        lo = state_from_soc(0.1, 1.0, 298.15, params)
        i_hi = side_reaction_current(hi.q1_neg, 298.15, 0.873, params)
        i_lo = side_reaction_current(lo.q1_neg, 298.15, 0.873, params)
        assert abs(i_hi) > abs(i_lo)


class TestCurrentSolve:
    def test_zero_power_zero_current(self, params, fresh_state):
        assert solve_battery_current(0.0, fresh_state, params) == 0.0

    def test_forward_constructed_current_recovered(self):
        # p_b assembled from a chosen current, then inverted
        v_eq, r_eq, n_cell, i_ref = 3.7, 0.05, 4000, 0.5
        p_b = n_cell * (v_eq + r_eq * i_ref) * i_ref * 1e-3
        assert p_b == pytest.approx(7.45)
        i = battery.current_from_power(v_eq, r_eq, p_b, n_cell)
        assert i == pytest.approx(i_ref, rel=1e-12)

    def test_round_trip_residual(self, params):
        rng = np.random.default_rng(3)
        for _ in range(100):
            s = state_from_soc(rng.uniform(0.05, 0.95), 1.0,
                               rng.uniform(290.0, 306.0), params)
            p_b = rng.uniform(-12.0, 12.0)
            v_eq, r_eq = equivalent_circuit(s.q1_pos, s.q1_neg, s.t_bat, params)
            i = solve_battery_current(p_b, s, params)
            assert abs(params.n_cell * (v_eq + r_eq * i) * i * 1e-3 - p_b) <= 1e-9

    def test_infeasible_discharge_raises(self):
        v_eq, r_eq, n_cell = 3.7, 0.05, 4000
        p_limit = -n_cell * v_eq ** 2 / (4.0 * r_eq) * 1e-3
        with pytest.raises(InfeasiblePowerError):
            battery.current_from_power(v_eq, r_eq, p_limit * 1.001, n_cell)


class TestHeatGeneration:
    def test_no_current_no_heat(self, params, fresh_state):
        q_irrev, q_rev = heat_generation(0.0, 298.15, fresh_state, params)
        assert q_irrev == 0.0 and q_rev == 0.0

    def test_reversible_heat_odd_in_current(self, params, fresh_state):
        _, q_pos = heat_generation(0.4, 298.15, fresh_state, params)
        _, q_neg = heat_generation(-0.4, 298.15, fresh_state, params)
        assert q_pos == pytest.approx(-q_neg, rel=1e-12)

    def test_irreversible_heat_quadratic(self, params, fresh_state):
        q1, _ = heat_generation(0.3, 298.15, fresh_state, params)
        q2, _ = heat_generation(0.6, 298.15, fresh_state, params)
        assert q2 == pytest.approx(4.0 * q1, rel=1e-12)


class TestStateOutputs:
    def test_fresh_cell_has_full_health(self, params):
        s = BatteryState(q1_pos=0.9, q1_neg=params.q0 - 0.9, t_bat=298.15)
        assert battery.q_loss(s, params) == pytest.approx(0.0, abs=1e-15)
        assert battery.soh(s, params) == pytest.approx(1.0)

    def test_midpoint_soc(self, params):
        s = BatteryState(q1_pos=0.8735, q1_neg=0.8735, t_bat=298.15)
        assert battery.soc(s, params) == pytest.approx(0.5, rel=1e-12)
        assert battery.soh(s, params) == pytest.approx(1.0, rel=1e-12)

    def test_end_of_life_threshold(self, params):
        # 40% loss leaves SoH exactly at the 60% end-of-life threshold
        loss = 0.4 * params.q0
        s = state_from_soc(0.5, 1.0 - loss / params.q0, 298.15, params)
        assert battery.soh(s, params) == pytest.approx(0.6, rel=1e-12)
        dead = BatteryState(q1_pos=params.q0, q1_neg=params.q0, t_bat=298.15)
        with pytest.raises(EndOfLifeError):
            battery.soh(dead, params)

    def test_soc_dual_formula_agreement(self, params):
        rng = np.random.default_rng(11)
        for _ in range(200):
            loss = rng.uniform(0.0, 0.3)
            q1p = rng.uniform(loss, params.q0)
            s = BatteryState(q1_pos=q1p, q1_neg=params.q0 + loss - q1p,
                             t_bat=298.15)
            via_pos = (s.q1_pos - battery.q_loss(s, params)) / (
                params.q0 - battery.q_loss(s, params))
            via_neg = (params.q0 - s.q1_neg) / (
                params.q0 - battery.q_loss(s, params))
            assert abs(via_pos - via_neg) <= 1e-12
            assert battery.soc(s, params) == via_pos


class TestStep:
    def test_fixed_point_without_side_reaction(self, params):
        import dataclasses
        frozen = dataclasses.replace(params, i0_sr=lambda t: 0.0)
        s = state_from_soc(0.5, 1.0, 298.15, frozen)
        nxt, _ = step(s, 0.0, 0.0, s.t_bat, 0.25, frozen)
        assert nxt == s

    def test_capacity_loss_monotone(self, params, fresh_state):
        rng = np.random.default_rng(5)
        s = fresh_state
        prev_loss = battery.q_loss(s, params)
        for i in range(96):
            # alternate charge/discharge so SoC cycles instead of saturating
            p_b = rng.uniform(0.0, 6.0) * (1.0 if i % 8 < 4 else -1.0)
            s, out = step(s, p_b, rng.uniform(-0.05, 0.05),
                          rng.uniform(292.0, 303.0), 0.25, params)
            assert out.q_loss >= prev_loss
            prev_loss = out.q_loss

    def test_charge_bookkeeping_identity(self, params, fresh_state):
        s = fresh_state
        for i in range(96):
            p_b = 2.0 * np.sin(2.0 * np.pi * i / 8.0)
            s, out = step(s, p_b, 0.02, 296.0, 0.25, params)
            ident = s.q1_pos + s.q1_neg - params.q0 - out.q_loss
            assert abs(ident) <= 1e-12

    def test_thermal_relaxation_to_ambient(self, params):
        s = state_from_soc(0.5, 1.0, 306.0, params)
        t_amb = 296.0
        gap = s.t_bat - t_amb
        for _ in range(200):
            s, _ = step(s, 0.0, 0.0, t_amb, 0.25, params)
            new_gap = s.t_bat - t_amb
            assert 0.0 <= new_gap <= gap
            gap = new_gap
        assert gap < 0.05

    def test_euler_first_order_convergence(self, params):
        def roll(dt):
            s = state_from_soc(0.4, 1.0, 298.15, params)
            for _ in range(round(1.0 / dt)):
                s, _ = step(s, 5.0, 0.0, 298.15, dt, params)
            return np.array([s.q1_pos, s.q1_neg, s.t_bat])

        def error(dt):
            return np.linalg.norm(roll(dt) - roll(dt / 100.0))

        assert error(0.25) / error(0.025) >= 8.0

    def test_propagates_infeasible_power(self, params, fresh_state):
        with pytest.raises(InfeasiblePowerError):
            step(fresh_state, -3000.0, 0.0, 298.15, 0.25, params)


class TestInvariantSuiteSample:
    def test_random_profiles_preserve_invariants(self, params):
        rng = np.random.default_rng(2024)
        dt = 0.25
        for _ in range(25):
            p_b, q_c, t_amb = random_admissible_profile(rng, 96, dt)
            s = state_from_soc(rng.uniform(0.25, 0.75), 1.0, 298.15, params)
            prev_loss, prev_soh = 0.0, 1.0
            for i in range(96):
                cur_soc = battery.soc(s, params)
                # steer hourly power toward the SoC midpoint so the profile
                # stays inside the physical charge box
                bias = np.clip((0.5 - cur_soc) * 20.0, -6.0, 6.0)
                demand = np.clip(p_b[i] + bias, -8.0, 8.0)
                v_eq, r_eq = equivalent_circuit(s.q1_pos, s.q1_neg, s.t_bat, params)
                i_bat = solve_battery_current(demand, s, params)
                i_sr = side_reaction_current(s.q1_neg, s.t_bat, i_bat, params)
                assert i_sr <= 0.0
                assert abs(params.n_cell * (v_eq + r_eq * i_bat) * i_bat * 1e-3
                           - demand) <= 1e-9
                s, out = step(s, demand, q_c[i], t_amb[i], dt, params)
                assert out.q_loss >= prev_loss
                assert out.soh <= prev_soh
                assert abs(s.q1_pos + s.q1_neg - params.q0 - out.q_loss) <= 1e-12
                prev_loss, prev_soh = out.q_loss, out.soh


class TestParamsIO:
    def test_yaml_round_trip(self, tmp_path, params):
        doc = """
        Q0: 1.747
        N_cell: 2000
        D_s_neg: 4.0e-14
        theta_0pct_pos: 0.93
        """
        path = tmp_path / "cell.yaml"
        path.write_text(doc)
        loaded = battery.load_battery_params(path)
        assert loaded.n_cell == 2000
        assert loaded.neg.d_s == 4.0e-14
        assert loaded.pos.theta_0pct == 0.93
        assert loaded.pos.d_s == params.pos.d_s  # untouched default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("mystery_knob: 3\n")
        with pytest.raises(BatteryDomainError):
            battery.load_battery_params(path)

    def test_defaults_match_reference_table(self, params):
        assert params.q0 == 1.747
        assert params.area == 0.0598
        assert params.pos.theta_0pct == 0.9337
        assert params.neg.theta_100pct == 0.8608
        assert params.n_cell == 4000
        assert params.c_t == 0.0278
        assert params.r_t == 200.0
        assert params.eta_c == 7.0
