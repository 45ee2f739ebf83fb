import numpy as np
import pytest

from solbat.battery import BatteryState, default_battery_params, state_from_soc


@pytest.fixture(scope="session")
def params():
    return default_battery_params()


@pytest.fixture()
def fresh_state(params):
    return state_from_soc(0.5, 1.0, 298.15, params)


def random_admissible_profile(rng, n_steps, dt, p_max=8.0):
    """Hourly-blocked power/cooling/ambient profile that keeps SoC inside (0, 1).

    Returns per-step arrays (p_b, q_c, t_amb) plus a callable that biases the
    next hourly power draw toward the SoC midpoint; used by invariant suites.
    """
    blocks = int(np.ceil(n_steps * dt))
    per_block = max(1, round(1.0 / dt))
    p_b = np.repeat(rng.uniform(-p_max, p_max, size=blocks), per_block)[:n_steps]
    # thermal-control power stays small: with R_T = 200 K/kW a sustained
    # 0.05 kW already shifts the equilibrium temperature by 10 K
    q_c = np.repeat(rng.uniform(-0.05, 0.05, size=blocks), per_block)[:n_steps]
    t_amb = np.repeat(rng.uniform(290.0, 304.0, size=blocks), per_block)[:n_steps]
    return p_b, q_c, t_amb
