"""Temperature-enhanced physics-based equivalent circuit model of a Li-ion pack.

State is the electric charge held in each electrode plus a lumped pack
temperature. Side reactions at the negative electrode drain cyclable lithium,
which shows up simultaneously as capacity loss and as SEI resistance growth.
Dynamics are integrated with forward Euler at the caller's time step.

All operations are pure functions of ``(state, params)`` and accept numpy
arrays in place of scalars for the state components, so ensembles can be
propagated in a single vectorized call. Units follow the pack convention:
time in hours, charge in Ah, power in kW, temperature in K, resistance in
ohms, current in A.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import yaml

from . import chemistry
from .errors import (
    BatteryDomainError,
    EndOfLifeError,
    InfeasiblePowerError,
    SingularityError,
)

THETA_MIN = 1e-4  # admissible stoichiometry box; OCP fits are singular at 0/1
THETA_MAX = 1.0 - 1e-4
_Q_TOL = 1e-12


@dataclass(frozen=True)
class ElectrodeParams:
    """Per-electrode geometry, transport, and kinetic constants."""

    r_p: float            # particle radius [m]
    d_s: float            # solid diffusivity at T_ref [m^2/s]
    a_s: float            # specific interfacial area [1/m]
    thickness: float      # electrode thickness [m]
    eps_s: float          # active material volume fraction [-]
    c_s_max: float        # max solid concentration [mol/m^3]
    theta_0pct: float     # stoichiometry at 0% SoC [-]
    theta_100pct: float   # stoichiometry at 100% SoC [-]
    k_reaction: float     # kinetic rate constant at T_ref
    ea_d_s: float         # activation energy of d_s [J/mol]
    ea_k: float           # activation energy of k_reaction [J/mol]
    ocp: Callable         # reference OCP V_ref(theta) [V]
    entropy: Callable     # entropic coefficient K_T(theta) [V/K]


@dataclass(frozen=True)
class BatteryParams:
    """Cell, pack, degradation, and thermal constants plus function handles."""

    pos: ElectrodeParams
    neg: ElectrodeParams
    l_sep: float          # separator thickness [m]
    faraday: float        # [C/mol]
    r_gas: float          # [J/(K*mol)]
    t_ref: float          # [K]
    c_e0: float           # nominal electrolyte concentration [mol/m^3]
    u_sr_ref: float       # side-reaction reference potential [V]
    i0_sr: Callable       # side-reaction exchange current density i0_sr(T) [A/m^2]
    r_f0_area: float      # fresh SEI film resistance [ohm*m^2]
    m_f: float            # SEI molar mass [kg/mol]
    rho_f: float          # SEI density [kg/m^3]
    kappa_f: float        # SEI conductivity [S/m]
    q0: float             # pristine cell capacity [Ah]
    area: float           # electrode plate area [m^2]
    r_col: float          # current collector resistance [ohm]
    n_cell: int           # cells in the pack [-]
    c_t: float            # thermal capacitance [kWh/K]
    r_t: float            # thermal resistance [K/kW]
    eta_c: float          # temperature-control coefficient of performance [-]
    kappa_eff: Callable   # effective electrolyte conductivity kappa(T) [S/m]
    chemistry_name: str = "lco-graphite"

    def electrode(self, which: str) -> ElectrodeParams:
        if which == "pos":
            return self.pos
        if which == "neg":
            return self.neg
        raise ValueError(f"electrode must be 'pos' or 'neg', got {which!r}")


@dataclass(frozen=True)
class BatteryState:
    """Dynamic state: electrode charges [Ah] and pack temperature [K]."""

    q1_pos: float
    q1_neg: float
    t_bat: float


@dataclass(frozen=True)
class BatteryOutput:
    """Observables of one integration step.

    ``v_bat``, ``i_bat``, ``p_b``, ``p_c`` and ``q_gen`` describe the
    transition (evaluated at the pre-step state that fixed the current);
    ``soc``, ``soh`` and ``q_loss`` describe the state at the end of the step.
    """

    soc: float
    soh: float
    v_bat: float
    i_bat: float
    p_b: float
    p_c: float
    q_loss: float
    q_gen: float


def default_battery_params(**overrides) -> BatteryParams:
    """Parameter set of the simulated 1.747 Ah LCO/graphite cell.

    Keyword overrides replace top-level fields, e.g.
    ``default_battery_params(n_cell=2000)``.
    """
    pos = ElectrodeParams(
        r_p=2e-6, d_s=1e-14, a_s=8.85e6, thickness=80e-6, eps_s=0.59,
        c_s_max=51554.0, theta_0pct=0.9337, theta_100pct=0.4855,
        k_reaction=2.33e-11, ea_d_s=5000.0, ea_k=5000.0,
        ocp=chemistry.ocp_pos, entropy=chemistry.entropy_pos,
    )
    neg = ElectrodeParams(
        r_p=2e-6, d_s=3.9e-14, a_s=7.236e6, thickness=88e-6, eps_s=0.4824,
        c_s_max=30555.0, theta_0pct=0.02, theta_100pct=0.8608,
        k_reaction=5.03e-11, ea_d_s=5000.0, ea_k=5000.0,
        ocp=chemistry.ocp_neg, entropy=chemistry.entropy_neg,
    )
    params = BatteryParams(
        pos=pos,
        neg=neg,
        # separator thickness: the source table prints an impossible 2.5e6;
        # a standard 25 um separator is used instead
        l_sep=25e-6,
        faraday=96487.0,
        r_gas=8.314,
        t_ref=298.15,
        c_e0=1000.0,
        u_sr_ref=0.21,
        i0_sr=chemistry.i0_sr,
        r_f0_area=0.01,
        m_f=0.162,
        rho_f=1690.0,
        kappa_f=5e-6,
        q0=1.747,
        area=0.0598,
        r_col=0.0,
        n_cell=4000,
        c_t=0.0278,
        r_t=200.0,
        eta_c=7.0,
        kappa_eff=chemistry.kappa_eff,
    )
    return replace(params, **overrides) if overrides else params


# Symbol names accepted by parameter files, mapped to dataclass paths.
_ELECTRODE_KEYS = {
    "R_p": "r_p", "D_s": "d_s", "a_s": "a_s", "L": "thickness",
    "eps_s": "eps_s", "c_s_max": "c_s_max", "theta_0pct": "theta_0pct",
    "theta_100pct": "theta_100pct", "k_eff": "k_reaction",
    "Ea_D_s": "ea_d_s", "Ea_k": "ea_k",
}
_CELL_KEYS = {
    "L_sep": "l_sep", "F": "faraday", "R_g": "r_gas", "T_ref": "t_ref",
    "c_e0": "c_e0", "U_sr_ref": "u_sr_ref", "r_f0": "r_f0_area",
    "M_f": "m_f", "rho_f": "rho_f", "kappa_f": "kappa_f", "Q0": "q0",
    "A": "area", "R_col": "r_col", "N_cell": "n_cell", "C_T": "c_t",
    "R_T": "r_t", "eta_c": "eta_c",
}


def battery_params_from_dict(doc: dict) -> BatteryParams:
    """Build a parameter set from a mapping of symbol names to SI values.

    Per-electrode symbols take a ``_pos`` / ``_neg`` suffix (``D_s_neg``,
    ``theta_0pct_pos``, ...). Unlisted symbols keep their defaults; unknown
    keys raise. Function handles are not configurable through files.
    """
    params = default_battery_params()
    pos_kw, neg_kw, cell_kw = {}, {}, {}
    for key, value in doc.items():
        if key.endswith("_pos") and key[:-4] in _ELECTRODE_KEYS:
            pos_kw[_ELECTRODE_KEYS[key[:-4]]] = float(value)
        elif key.endswith("_neg") and key[:-4] in _ELECTRODE_KEYS:
            neg_kw[_ELECTRODE_KEYS[key[:-4]]] = float(value)
        elif key in _CELL_KEYS:
            attr = _CELL_KEYS[key]
            cell_kw[attr] = int(value) if attr == "n_cell" else float(value)
        else:
            raise BatteryDomainError(f"unknown battery parameter {key!r}")
    if pos_kw:
        params = replace(params, pos=replace(params.pos, **pos_kw))
    if neg_kw:
        params = replace(params, neg=replace(params.neg, **neg_kw))
    if cell_kw:
        params = replace(params, **cell_kw)
    return params


def load_battery_params(path) -> BatteryParams:
    """Load a parameter set from a YAML/JSON file of symbol-name keys."""
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise BatteryDomainError(f"{path}: expected a mapping of parameters")
    return battery_params_from_dict(doc)


# ---------------------------------------------------------------------------
# Elementwise model algebra. These accept floats or same-shaped numpy arrays.
# ---------------------------------------------------------------------------

def charge_to_stoichiometry(electrode: str, q1, params: BatteryParams):
    """Map electrode charge Q1 [Ah] to its normalized concentration theta."""
    if np.any(np.asarray(q1) < -_Q_TOL) or np.any(np.asarray(q1) > params.q0 + _Q_TOL):
        raise BatteryDomainError(
            f"electrode charge outside [0, Q0={params.q0}] Ah"
        )
    el = params.electrode(electrode)
    scale = 3600.0 / (params.area * el.thickness * params.faraday
                      * el.eps_s * el.c_s_max)
    anchor = el.theta_0pct if electrode == "pos" else el.theta_100pct
    return anchor - scale * q1


def _check_theta(theta):
    if np.any(np.asarray(theta) < THETA_MIN) or np.any(np.asarray(theta) > THETA_MAX):
        raise BatteryDomainError(
            f"stoichiometry outside admissible box [{THETA_MIN}, {THETA_MAX}]"
        )


def open_circuit_potential(electrode: str, theta, t_bat, params: BatteryParams):
    """Open-circuit potential V1 [V] with first-order temperature correction."""
    _check_theta(theta)
    el = params.electrode(electrode)
    return el.ocp(theta) + el.entropy(theta) * (t_bat - params.t_ref)


def exchange_current_density(electrode: str, theta, t_bat, params: BatteryParams):
    """Main-reaction exchange current density i0 [A/m^2]."""
    el = params.electrode(electrode)
    k_t = el.k_reaction * chemistry.arrhenius(t_bat, el.ea_k, params.t_ref)
    return params.faraday * k_t * el.c_s_max * np.sqrt(
        params.c_e0 * theta * (1.0 - theta))


def sigma_resistance(electrode: str, theta, t_bat, params: BatteryParams):
    """Charge-transfer plus solid-phase diffusion resistance R_sigma [ohm]."""
    if np.any(np.asarray(theta) * (1.0 - np.asarray(theta)) <= 0.0):
        raise BatteryDomainError("theta*(1-theta) must be positive")
    _check_theta(theta)
    el = params.electrode(electrode)
    i0 = exchange_current_density(electrode, theta, t_bat, params)
    r_ct = (params.r_gas * t_bat / params.faraday) / (
        params.area * el.thickness * el.a_s * i0)
    h = 1e-4  # central-difference step on theta
    v_hi = el.ocp(theta + h) + el.entropy(theta + h) * (t_bat - params.t_ref)
    v_lo = el.ocp(theta - h) + el.entropy(theta - h) * (t_bat - params.t_ref)
    dv_dtheta = (v_hi - v_lo) / (2.0 * h)
    d_s_t = el.d_s * chemistry.arrhenius(t_bat, el.ea_d_s, params.t_ref)
    r_diff = (-dv_dtheta) / (
        params.area * el.thickness * params.faraday * el.eps_s * el.c_s_max
    ) * el.r_p ** 2 / (15.0 * d_s_t)
    return r_ct + r_diff


def electrolyte_resistance(t_bat, params: BatteryParams):
    """Lumped electrolyte resistance R_e [ohm]."""
    stack = params.pos.thickness + 2.0 * params.l_sep + params.neg.thickness
    return stack / (2.0 * params.area * params.kappa_eff(t_bat))


def sei_resistance_coeffs(params: BatteryParams) -> tuple[float, float]:
    """(R_f0, K_f): fresh SEI resistance [ohm] and its growth slope [ohm/Ah]."""
    geom = params.neg.a_s * params.area * params.neg.thickness
    r_f0 = params.r_f0_area / geom
    k_f = (params.m_f / (params.rho_f * params.kappa_f)) * 3600.0 / (
        params.faraday * geom ** 2)
    return r_f0, k_f


def sei_resistance(q_loss, params: BatteryParams):
    """SEI film resistance R_f [ohm], linear in capacity loss."""
    if np.any(np.asarray(q_loss) < -_Q_TOL):
        raise BatteryDomainError("capacity loss cannot be negative")
    r_f0, k_f = sei_resistance_coeffs(params)
    return r_f0 + k_f * q_loss


def side_reaction_current(q1_neg, t_bat, i_bat, params: BatteryParams):
    """Side-reaction current I_sr [A] at the negative electrode (always <= 0)."""
    theta_n = charge_to_stoichiometry("neg", q1_neg, params)
    v1_neg = open_circuit_potential("neg", theta_n, t_bat, params)
    i0_sr = np.maximum(params.i0_sr(t_bat), 0.0)
    alpha = -i0_sr * params.neg.a_s * np.exp(
        params.faraday * (params.u_sr_ref - v1_neg)
        / (2.0 * params.r_gas * t_bat))
    i0_n = exchange_current_density("neg", theta_n, t_bat, params)
    plate = params.area * params.neg.thickness
    beta = i_bat / (2.0 * plate * params.neg.a_s * i0_n)
    gamma = 1.0 / (2.0 * params.neg.a_s * i0_n)
    s = 1.0 - 2.0 * gamma * alpha
    if np.any(np.asarray(s) <= 1e-12):
        raise SingularityError(
            f"side-reaction singularity 1-2*gamma*alpha <= 0 at "
            f"q1_neg={q1_neg}, t_bat={t_bat}, i_bat={i_bat}"
        )
    j_sr = (alpha * beta + alpha * np.sqrt(beta ** 2 + s)) / s
    return plate * j_sr


def equivalent_circuit(q1_pos, q1_neg, t_bat, params: BatteryParams):
    """Equivalent voltage V_eq [V] and resistance R_eq [ohm] of one cell."""
    theta_p = charge_to_stoichiometry("pos", q1_pos, params)
    theta_n = charge_to_stoichiometry("neg", q1_neg, params)
    v_eq = (open_circuit_potential("pos", theta_p, t_bat, params)
            - open_circuit_potential("neg", theta_n, t_bat, params))
    q_lo = q1_pos + q1_neg - params.q0
    r_eq = (sigma_resistance("pos", theta_p, t_bat, params)
            + sigma_resistance("neg", theta_n, t_bat, params)
            + sei_resistance(np.maximum(q_lo, 0.0), params)
            + electrolyte_resistance(t_bat, params)
            + params.r_col)
    return v_eq, r_eq


def current_from_power(v_eq, r_eq, p_b, n_cell):
    """Cell current [A] delivering pack power p_b [kW], given V_eq and R_eq."""
    p_cell = p_b * 1e3 / n_cell
    disc = v_eq ** 2 + 4.0 * r_eq * p_cell
    if np.any(np.asarray(disc) < 0.0):
        p_min = float(np.min(-n_cell * np.asarray(v_eq) ** 2
                             / (4.0 * np.asarray(r_eq)) * 1e-3))
        bad = p_b if np.ndim(p_b) == 0 else float(
            np.min(np.broadcast_to(p_b, np.shape(disc))[np.asarray(disc) < 0]))
        raise InfeasiblePowerError(bad, p_min)
    i_bat = (-v_eq + np.sqrt(disc)) / (2.0 * r_eq)
    return np.where(np.asarray(p_b) == 0.0, 0.0, i_bat) if np.ndim(i_bat) else (
        0.0 if p_b == 0.0 else float(i_bat))


def solve_battery_current(p_b, state: BatteryState, params: BatteryParams):
    """Solve Eq.-of-power quadratic for the cell current I_bat [A]."""
    v_eq, r_eq = equivalent_circuit(state.q1_pos, state.q1_neg, state.t_bat, params)
    return current_from_power(v_eq, r_eq, p_b, params.n_cell)


def heat_generation(i_bat, t_bat, state: BatteryState, params: BatteryParams):
    """Pack heat generation split into (irreversible, reversible) parts [kW]."""
    _, r_eq = equivalent_circuit(state.q1_pos, state.q1_neg, t_bat, params)
    theta_p = charge_to_stoichiometry("pos", state.q1_pos, params)
    theta_n = charge_to_stoichiometry("neg", state.q1_neg, params)
    q_irrev = params.n_cell * i_bat ** 2 * r_eq * 1e-3
    q_rev = (params.n_cell * i_bat * t_bat
             * (params.pos.entropy(theta_p) - params.neg.entropy(theta_n)) * 1e-3)
    return q_irrev, q_rev


def q_loss(state: BatteryState, params: BatteryParams) -> float:
    """Capacity loss [Ah] accumulated by side reactions."""
    return state.q1_pos + state.q1_neg - params.q0


def soh(state: BatteryState, params: BatteryParams) -> float:
    """State of health: remaining capacity fraction."""
    loss = q_loss(state, params)
    if np.any(np.asarray(loss) >= params.q0):
        raise EndOfLifeError(f"capacity loss {loss} Ah >= Q0 {params.q0} Ah")
    return 1.0 - loss / params.q0


def soc(state: BatteryState, params: BatteryParams) -> float:
    """State of charge of the aged cell."""
    loss = q_loss(state, params)
    if np.any(np.asarray(loss) >= params.q0):
        raise EndOfLifeError(f"capacity loss {loss} Ah >= Q0 {params.q0} Ah")
    return (state.q1_pos - loss) / (params.q0 - loss)


def state_from_soc(soc0: float, soh0: float, t_bat: float,
                   params: BatteryParams) -> BatteryState:
    """Construct electrode charges consistent with a given SoC and SoH."""
    loss = (1.0 - soh0) * params.q0
    usable = params.q0 - loss
    return BatteryState(q1_pos=loss + soc0 * usable,
                        q1_neg=params.q0 - soc0 * usable,
                        t_bat=t_bat)


def power_balance(p_pv, p_load, p_grid, p_c, eta_pv: float, eta_b: float):
    """Battery charging power [kW] implied by the household power balance."""
    return eta_b * (eta_pv * p_pv - p_grid - p_load - p_c)


def step(state: BatteryState, p_b, q_c, t_amb, dt: float,
         params: BatteryParams) -> tuple[BatteryState, BatteryOutput]:
    """Advance the pack one forward-Euler step of dt hours.

    ``p_b`` is the demanded pack electric power (charge > 0) and ``q_c`` the
    thermal power injected by the temperature-control system (heating > 0,
    electric draw |q_c|/eta_c).
    """
    if dt <= 0.0:
        raise BatteryDomainError("dt must be positive")
    v_eq, r_eq = equivalent_circuit(state.q1_pos, state.q1_neg, state.t_bat, params)
    i_bat = current_from_power(v_eq, r_eq, p_b, params.n_cell)
    i_sr = side_reaction_current(state.q1_neg, state.t_bat, i_bat, params)
    q_irrev, q_rev = heat_generation(i_bat, state.t_bat, state, params)
    p_c = abs(q_c) / params.eta_c
    nxt = BatteryState(
        q1_pos=state.q1_pos + dt * i_bat,
        q1_neg=state.q1_neg + dt * (-i_bat - i_sr),
        t_bat=state.t_bat + dt * ((t_amb - state.t_bat) / params.r_t
                                  + q_irrev + q_rev + q_c) / params.c_t,
    )
    out = BatteryOutput(
        soc=soc(nxt, params),
        soh=soh(nxt, params),
        v_bat=v_eq + r_eq * i_bat,
        i_bat=i_bat,
        p_b=p_b,
        p_c=p_c,
        q_loss=q_loss(nxt, params),
        q_gen=q_irrev + q_rev,
    )
    return nxt, out
