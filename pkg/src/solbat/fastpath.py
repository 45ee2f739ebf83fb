"""Compiled evaluation kernel for the stage-2 rollout (default chemistry).

The numpy rollout in :mod:`solbat.optimizer` dispatches ~100 small-array
ufuncs per step, which dominates solve time. This module reimplements the
same arithmetic as explicit loops under numba for the shipped LCO/graphite
chemistry; parameter sets with custom function handles fall back to the
numpy path. A regression test pins the two paths together to float noise.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import chemistry
from .battery import BatteryParams, sei_resistance_coeffs

_OCP_POS_NUM = np.array(chemistry._OCP_POS_NUM)
_OCP_POS_DEN = np.array(chemistry._OCP_POS_DEN)
_ENT_POS_NUM = np.array(chemistry._ENT_POS_NUM)
_ENT_POS_DEN = np.array(chemistry._ENT_POS_DEN)
_ENT_NEG_NUM = np.array(chemistry._ENT_NEG_NUM)
_ENT_NEG_DEN = np.array(chemistry._ENT_NEG_DEN)


def is_default_chemistry(params: BatteryParams) -> bool:
    return (params.pos.ocp is chemistry.ocp_pos
            and params.pos.entropy is chemistry.entropy_pos
            and params.neg.ocp is chemistry.ocp_neg
            and params.neg.entropy is chemistry.entropy_neg
            and params.i0_sr is chemistry.i0_sr
            and params.kappa_eff is chemistry.kappa_eff)


@njit(cache=True)
def _horner(x, coeffs):
    acc = coeffs[-1]
    for idx in range(len(coeffs) - 2, -1, -1):
        acc = acc * x + coeffs[idx]
    return acc


@njit(cache=True)
def _ocp_neg(theta):
    rt = np.sqrt(theta)
    return (0.7222 + 0.1387 * theta + 0.029 * rt
            - 0.0172 / theta + 0.0019 / (theta * rt)
            + 0.2808 * np.exp(0.9 - 15.0 * theta)
            - 0.7984 * np.exp(0.4465 * theta - 0.4108))


@njit(cache=True)
def _v1(pos_side, theta, dtemp):
    if pos_side:
        ocp = _horner(theta, _OCP_POS_NUM) / _horner(theta, _OCP_POS_DEN)
        ent = -0.001 * _horner(theta, _ENT_POS_NUM) / _horner(theta, _ENT_POS_DEN)
    else:
        ocp = _ocp_neg(theta)
        ent = 0.001 * _horner(theta, _ENT_NEG_NUM) / _horner(theta, _ENT_NEG_DEN)
    return ocp + ent * dtemp, ent


@njit(cache=True)
def _v1_extended(pos_side, theta, dtemp, lo, hi):
    """(v1, slope, entropy) with the C1 linear continuation of the rollout."""
    th = min(max(theta, lo), hi)
    base, ent = _v1(pos_side, th, dtemp)
    v_hi, _ = _v1(pos_side, th + 1e-4, dtemp)
    v_lo, _ = _v1(pos_side, th - 1e-4, dtemp)
    slope = (v_hi - v_lo) / 2e-4
    return base + slope * (theta - th), slope, ent


@njit(cache=True)
def _i0_sr(t_bat):
    if t_bat < 298.15:
        val = 0.39e-7 + (2.28e-7 - 0.39e-7) / 25.0 * (t_bat - 273.15)
    else:
        val = 2.28e-7 + (6.3e-7 - 2.28e-7) / 25.0 * (t_bat - 298.15)
    return max(val, 0.0)


@njit(cache=True)
def _kappa_bulk(ce, t):
    poly = ((-10.5 + 0.668e-3 * ce + 0.494e-6 * ce * ce)
            + (0.074 - 1.78e-5 * ce - 8.86e-10 * ce * ce) * t
            + (-6.96e-5 + 2.8e-8 * ce) * t * t)
    return 1e-4 * ce * poly * poly


@njit(cache=True)
def rollout_kernel(xb, ens, w_norm, pc, limits, w1, w2,
                   cost_out, pen_out, g_out):
    """Evaluate the blocked dispatch rollout for a batch of decisions.

    ``pc`` packs the scalar constants (see pack_constants); ``limits`` is
    (soc_min, soc_max, v_min, v_max, i_max, p_b_max, t_min, t_max).
    """
    (dt, n_di_f, eta_pv, eta_b, eta_c, x0_q1p, x0_q1n, x0_tb,
     far, rg, t_ref, c_e0, q0, area, r_col, n_cell_f, c_t, r_t,
     u_sr_ref, r_f0, k_f, stack, brugg, kappa_cost,
     p_th0, p_scale, p_as, p_L, p_kr, p_ea_k, p_ea_d, p_csmax, p_rp15d,
     p_cap, p_lo, p_hi,
     n_th100, n_scale, n_as, n_L, n_kr, n_ea_k, n_ea_d, n_csmax, n_rp15d,
     n_cap, n_lo, n_hi) = pc

    B = xb.shape[0]
    m = ens.shape[0]
    n_t = ens.shape[1]
    n_di = int(n_di_f)
    n_b = n_t // n_di
    n_cell = n_cell_f
    soc_min, soc_max, v_min, v_max, i_max, p_b_max, t_min, t_max = limits
    ct_p = area * p_L * p_as
    ct_n = area * n_L * n_as
    plate_n = area * n_L

    for b in range(B):
        q1p = np.empty(m)
        q1n = np.empty(m)
        tb = np.empty(m)
        for j in range(m):
            q1p[j] = x0_q1p
            q1n[j] = x0_q1n
            tb[j] = x0_tb
        cost = 0.0
        base = b * (n_t * m * 10)
        for i in range(n_t):
            blk = i // n_di
            pg = xb[b, blk]
            qc = xb[b, n_b + blk]
            qc_s = np.sqrt(qc * qc + 1e-8) - 1e-4
            p_c = qc_s / eta_c
            for j in range(m):
                pv = ens[j, i, 0]
                load = ens[j, i, 1]
                price = ens[j, i, 2]
                t_amb = ens[j, i, 3]
                p_b = eta_b * (eta_pv * pv - pg - load - p_c)

                theta_p = p_th0 - p_scale * q1p[j]
                theta_n = n_th100 - n_scale * q1n[j]
                dtemp = tb[j] - t_ref
                v1p, slope_p, ent_p = _v1_extended(True, theta_p, dtemp,
                                                   p_lo, p_hi)
                v1n, slope_n, ent_n = _v1_extended(False, theta_n, dtemp,
                                                   n_lo, n_hi)
                th_pc = min(max(theta_p, p_lo), p_hi)
                th_nc = min(max(theta_n, n_lo), n_hi)
                arr_k = np.exp(p_ea_k / rg * (1.0 / t_ref - 1.0 / tb[j]))
                arr_kn = arr_k if n_ea_k == p_ea_k else np.exp(
                    n_ea_k / rg * (1.0 / t_ref - 1.0 / tb[j]))
                i0_p = far * p_kr * arr_k * p_csmax * np.sqrt(
                    c_e0 * th_pc * (1.0 - th_pc))
                i0_n = far * n_kr * arr_kn * n_csmax * np.sqrt(
                    c_e0 * th_nc * (1.0 - th_nc))
                arr_d = arr_k if p_ea_d == p_ea_k else np.exp(
                    p_ea_d / rg * (1.0 / t_ref - 1.0 / tb[j]))
                arr_dn = arr_d if n_ea_d == p_ea_d else np.exp(
                    n_ea_d / rg * (1.0 / t_ref - 1.0 / tb[j]))
                thermal_volt = rg * tb[j] / far
                r_sig_p = thermal_volt / (ct_p * i0_p) \
                    + (-slope_p) / p_cap * (p_rp15d / arr_d)
                r_sig_n = thermal_volt / (ct_n * i0_n) \
                    + (-slope_n) / n_cap * (n_rp15d / arr_dn)
                q_lo = max(q1p[j] + q1n[j] - q0, 0.0)
                kap = max(_kappa_bulk(c_e0, tb[j]) * brugg, 1e-6)
                r_eq = (r_sig_p + r_sig_n + r_f0 + k_f * q_lo
                        + stack / (2.0 * area * kap) + r_col)
                v_eq = v1p - v1n

                disc = v_eq * v_eq + 4.0 * r_eq * (p_b * (1e3 / n_cell))
                i_bat = (-v_eq + np.sqrt(max(disc, 0.0))) / (2.0 * r_eq)
                if p_b == 0.0:
                    i_bat = 0.0
                i_bat = min(max(i_bat, -50.0), 50.0)
                v_bat = v_eq + r_eq * i_bat

                i0sr = _i0_sr(tb[j])
                exp_arg = min(far * (u_sr_ref - v1n) / (2.0 * rg * tb[j]),
                              50.0)
                alpha = -i0sr * n_as * np.exp(exp_arg)
                beta = i_bat / (2.0 * plate_n * n_as * i0_n)
                gamma = 1.0 / (2.0 * n_as * i0_n)
                s = 1.0 - 2.0 * gamma * alpha
                i_sr = plate_n * (alpha * beta
                                  + alpha * np.sqrt(beta * beta + s)) / s
                i_sr = max(i_sr, -50.0)

                cost += w_norm[j] * (kappa_cost * (-i_sr) - pg * price)

                q_irrev = n_cell * i_bat * i_bat * r_eq * 1e-3
                q_rev = n_cell * i_bat * tb[j] * (ent_p - ent_n) * 1e-3
                q1p[j] = q1p[j] + dt * i_bat
                q1n[j] = q1n[j] + dt * (-i_bat - i_sr)
                tb[j] = tb[j] + dt * ((t_amb - tb[j]) / r_t
                                      + q_irrev + q_rev + qc) / c_t
                q1p[j] = min(max(q1p[j], -0.5), q0 + 0.5)
                q1n[j] = min(max(q1n[j], -0.5), q0 + 0.5)
                tb[j] = min(max(tb[j], 230.0), 380.0)

                q_lo_next = q1p[j] + q1n[j] - q0
                soc_next = (q1p[j] - q_lo_next) / (q0 - q_lo_next)

                row = base + (i * m + j) * 10
                g_out[row + 0] = v_bat - v_min
                g_out[row + 1] = v_max - v_bat
                g_out[row + 2] = i_bat + i_max
                g_out[row + 3] = i_max - i_bat
                g_out[row + 4] = p_b + p_b_max
                g_out[row + 5] = p_b_max - p_b
                g_out[row + 6] = soc_next - soc_min + xb[b, 2 * n_b + 0]
                g_out[row + 7] = soc_max + xb[b, 2 * n_b + 1] - soc_next
                g_out[row + 8] = tb[j] - t_min + xb[b, 2 * n_b + 2]
                g_out[row + 9] = t_max + xb[b, 2 * n_b + 3] - tb[j]
        cost_out[b] = cost
        e1 = xb[b, 2 * n_b + 0]
        e2 = xb[b, 2 * n_b + 1]
        e3 = xb[b, 2 * n_b + 2]
        e4 = xb[b, 2 * n_b + 3]
        pen_out[b] = (e1 * (w1[0, 0] * e1 + w1[0, 1] * e3)
                      + e3 * (w1[1, 0] * e1 + w1[1, 1] * e3)
                      + e2 * (w2[0, 0] * e2 + w2[0, 1] * e4)
                      + e4 * (w2[1, 0] * e2 + w2[1, 1] * e4))


def _theta_window(el):
    lo = min(el.theta_0pct, el.theta_100pct)
    hi = max(el.theta_0pct, el.theta_100pct)
    return lo, hi


def pack_constants(spec) -> np.ndarray:
    """Flatten the problem constants consumed by :func:`rollout_kernel`."""
    p = spec.battery
    pos, neg = p.pos, p.neg
    r_f0, k_f = sei_resistance_coeffs(p)
    stack = pos.thickness + 2.0 * p.l_sep + neg.thickness
    scale_p = 3600.0 / (p.area * pos.thickness * p.faraday
                        * pos.eps_s * pos.c_s_max)
    scale_n = 3600.0 / (p.area * neg.thickness * p.faraday
                        * neg.eps_s * neg.c_s_max)
    p_lo, p_hi = _theta_window(pos)
    n_lo, n_hi = _theta_window(neg)
    return np.array([
        spec.horizon.dt, float(spec.horizon.n_di), spec.eta_pv, spec.eta_b,
        p.eta_c, spec.x0.q1_pos, spec.x0.q1_neg, spec.x0.t_bat,
        p.faraday, p.r_gas, p.t_ref, p.c_e0, p.q0, p.area, p.r_col,
        float(p.n_cell), p.c_t, p.r_t, p.u_sr_ref, r_f0, k_f, stack,
        chemistry._BRUGG_FACTOR, spec.cost.kappa,
        pos.theta_0pct, scale_p, pos.a_s, pos.thickness, pos.k_reaction,
        pos.ea_k, pos.ea_d_s, pos.c_s_max,
        pos.r_p ** 2 / 15.0 / pos.d_s,
        p.area * pos.thickness * p.faraday * pos.eps_s * pos.c_s_max,
        p_lo, p_hi,
        neg.theta_100pct, scale_n, neg.a_s, neg.thickness, neg.k_reaction,
        neg.ea_k, neg.ea_d_s, neg.c_s_max,
        neg.r_p ** 2 / 15.0 / neg.d_s,
        p.area * neg.thickness * p.faraday * neg.eps_s * neg.c_s_max,
        n_lo, n_hi,
    ])


def rollout_fast(spec, x_batch: np.ndarray, ens: np.ndarray,
                 w_norm: np.ndarray):
    """Kernel-backed equivalent of the numpy batch rollout."""
    B = x_batch.shape[0]
    m, n_t = ens.shape[0], ens.shape[1]
    pc = pack_constants(spec)
    lim = spec.limits
    limits = np.array([lim.soc_min, lim.soc_max, lim.v_min, lim.v_max,
                       lim.i_max, lim.p_b_max, lim.t_min, lim.t_max])
    cost = np.empty(B)
    pen = np.empty(B)
    g = np.empty(B * n_t * m * 10)
    rollout_kernel(np.ascontiguousarray(x_batch, dtype=np.float64),
                   np.ascontiguousarray(ens, dtype=np.float64),
                   np.ascontiguousarray(w_norm, dtype=np.float64),
                   pc, limits, np.ascontiguousarray(spec.cost.w1),
                   np.ascontiguousarray(spec.cost.w2), cost, pen, g)
    return cost, pen, g.reshape(B, -1)
