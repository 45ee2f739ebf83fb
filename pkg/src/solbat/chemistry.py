"""Default electrode and electrolyte property functions.

The cell model needs four groups of nonlinear material functions: open-circuit
potentials of both electrodes, their entropic coefficients, the effective
electrolyte conductivity, and Arrhenius corrections for the kinetic and solid
diffusion constants. The defaults below are the widely used LCO/graphite
empirical fits that accompany the parameter set in
:func:`solbat.battery.default_battery_params`; all of them are plain
functions of the normalized lithium concentration ``theta`` (or temperature)
and accept scalars or numpy arrays.

Every function here is pluggable: :class:`solbat.battery.BatteryParams`
stores them as handles, so an alternative chemistry can be dropped in without
touching the model code.
"""

from __future__ import annotations

import numpy as np

GAS_CONSTANT = 8.314  # J/(K*mol)

# Electrolyte porosity of the positive/separator/negative regions and the
# Bruggeman exponent used by the shipped conductivity correction.
_EPS_E = (0.385, 0.724, 0.485)
_BRUGG = 4.0
_LAYERS_M = (80e-6, 2 * 25e-6, 88e-6)  # pos, 2*sep, neg thickness weights


def _horner(theta, coeffs):
    """Evaluate a polynomial with ascending-order coefficients."""
    acc = theta * 0.0 + coeffs[-1]  # scalar in, scalar out
    for c in coeffs[-2::-1]:
        acc = acc * theta + c
    return acc


_OCP_POS_NUM = (-4.656, 0.0, 88.669, 0.0, -401.119, 0.0, 342.909, 0.0,
                -462.471, 0.0, 433.434)
_OCP_POS_DEN = (-1.0, 0.0, 18.933, 0.0, -79.532, 0.0, 37.311, 0.0,
                -73.083, 0.0, 95.96)
_ENT_POS_NUM = (0.199521039, -0.928373822, 1.364550689000003,
                -0.6115448939999998)
_ENT_POS_DEN = (1.0, -5.661479886999997, 11.47636191, -9.82431213599998,
                3.048755063)
_ENT_NEG_NUM = (0.005269056, 3.299265709, -91.79325798, 1004.911008,
                -5812.278127, 19329.7549, -37147.8947, 38379.18127,
                -16515.05308)
_ENT_NEG_DEN = (1.0, -48.09287227, 1017.234804, -10481.80419, 59431.3,
                -195881.6488, 374577.3152, -385821.1607, 165705.8597)


def ocp_pos(theta):
    """Reference open-circuit potential of the LCO positive electrode [V]."""
    return _horner(theta, _OCP_POS_NUM) / _horner(theta, _OCP_POS_DEN)


def ocp_neg(theta):
    """Reference open-circuit potential of the graphite negative electrode [V]."""
    rt = np.sqrt(theta)
    return (0.7222 + 0.1387 * theta + 0.029 * rt
            - 0.0172 / theta + 0.0019 / (theta * rt)
            + 0.2808 * np.exp(0.9 - 15.0 * theta)
            - 0.7984 * np.exp(0.4465 * theta - 0.4108))


def entropy_pos(theta):
    """Entropic coefficient dU+/dT of the positive electrode [V/K]."""
    return -0.001 * _horner(theta, _ENT_POS_NUM) / _horner(theta, _ENT_POS_DEN)


def entropy_neg(theta):
    """Entropic coefficient dU-/dT of the negative electrode [V/K]."""
    return 0.001 * _horner(theta, _ENT_NEG_NUM) / _horner(theta, _ENT_NEG_DEN)


def electrolyte_conductivity(c_e, t_bat):
    """Bulk electrolyte conductivity [S/m] as a function of salt
    concentration [mol/m^3] and temperature [K]."""
    poly = ((-10.5 + 0.668e-3 * c_e + 0.494e-6 * c_e ** 2)
            + (0.074 - 1.78e-5 * c_e - 8.86e-10 * c_e ** 2) * t_bat
            + (-6.96e-5 + 2.8e-8 * c_e) * t_bat ** 2)
    return 1e-4 * c_e * poly ** 2


_EPS_AVG = sum(e * L for e, L in zip(_EPS_E, _LAYERS_M)) / sum(_LAYERS_M)
_BRUGG_FACTOR = _EPS_AVG ** _BRUGG


def kappa_eff(t_bat, c_e0: float = 1000.0):
    """Effective lumped electrolyte conductivity [S/m].

    Bulk conductivity at the nominal salt concentration, corrected by a
    Bruggeman factor built from the thickness-weighted average porosity of
    the positive/separator/negative regions.
    """
    return electrolyte_conductivity(c_e0, t_bat) * _BRUGG_FACTOR


def arrhenius(t_bat, e_act: float, t_ref: float = 298.15):
    """Arrhenius correction factor exp(Ea/R * (1/Tref - 1/T))."""
    return np.exp(e_act / GAS_CONSTANT * (1.0 / t_ref - 1.0 / t_bat))


# Side-reaction exchange current density measurements (T [K] -> i0_sr [A/m^2])
# used by the shipped piecewise-linear fit.
I0_SR_POINTS = ((273.15, 0.39e-7), (298.15, 2.28e-7), (323.15, 6.3e-7))
_SR_T0, _SR_Y0 = I0_SR_POINTS[0]
_SR_T1, _SR_Y1 = I0_SR_POINTS[1]
_SR_T2, _SR_Y2 = I0_SR_POINTS[2]
_SR_S0 = (_SR_Y1 - _SR_Y0) / (_SR_T1 - _SR_T0)
_SR_S1 = (_SR_Y2 - _SR_Y1) / (_SR_T2 - _SR_T1)


def i0_sr(t_bat):
    """Side-reaction exchange current density [A/m^2].

    Piecewise-linear interpolation through the three measured points with
    linear extrapolation of the end segments, floored at zero.
    """
    t = np.asarray(t_bat, dtype=float)
    val = np.where(t < _SR_T1,
                   _SR_Y0 + _SR_S0 * (t - _SR_T0),
                   _SR_Y1 + _SR_S1 * (t - _SR_T1))
    out = np.maximum(val, 0.0)
    return float(out) if np.ndim(t_bat) == 0 else out
