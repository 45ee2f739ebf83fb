"""Two-stage ensemble dispatch optimization.

Stage 1 rolls the committed schedule across the delay horizon for every
ensemble member with the exact cell model and averages the terminal states.
Stage 2 minimizes the summed member operating costs over the optimization
horizon with one shared, interval-blocked control sequence (grid power and
thermal-control power), soft SoC/temperature constraints with quadratically
penalized slacks, and hard voltage/current/power constraints per member.

The stage-2 rollout evaluates the cell algebra through C1 linear extensions
of the electrode curves outside a safe stoichiometry window: SQP iterates can
transiently overshoot the physical charge box, and the extension keeps the
landscape finite and differentiable there while reproducing the exact model
bit-for-bit inside the window. Gradients come from forward finite
differences, batched so one vectorized rollout serves all decision
directions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import Bounds, minimize

from . import battery as bat
from .battery import BatteryParams, BatteryState
from .ensemble import COL_LOAD, COL_PRICE, COL_PV, COL_TAMB
from .errors import (
    ConfigurationError,
    InfeasiblePowerError,
    InfeasibleProblemError,
)

_EXP_ARG_MAX = 50.0
_FD_THETA = 1e-4          # central-difference step for dV1/dtheta
_FD_REL = 1e-6            # relative forward-difference step on decisions
CONSTRAINT_TOL = 1e-6
OBJECTIVE_TOL = 1e-8
MAX_ITER = 200

_HARD_NAMES = ("v_min", "v_max", "i_min", "i_max", "p_b_min", "p_b_max")
_SOFT_NAMES = ("soc_min", "soc_max", "t_min", "t_max")
_ROWS_PER_POINT = len(_HARD_NAMES) + len(_SOFT_NAMES)
# rows safely beyond these margins at the incumbent are withheld from the QP
# working set; a post-solve check re-adds any that mattered, so the screen
# affects cost only, not the returned solution's feasibility
_PRUNE_MARGINS = np.array([0.3, 0.3, 0.6, 0.6, 6.0, 6.0,
                           0.25, 0.25, 3.0, 3.0])


def _as_matrix(w, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (2, 2) or not np.allclose(w, w.T):
        raise ConfigurationError(f"{name} must be a symmetric 2x2 matrix")
    if np.any(np.linalg.eigvalsh(w) <= 0.0):
        raise ConfigurationError(f"{name} must be positive definite")
    return w


@dataclass(frozen=True)
class HorizonConfig:
    """Market calendar: sample time, dispatch interval, and horizon lengths.

    All in hours. ``delay`` is the lead time before a commitment takes
    effect, ``optimization`` the re-optimized span, ``modification`` the
    cadence of re-optimization; prediction = delay + optimization.
    """

    dt: float = 0.25
    di: float = 1.0
    delay: float = 2.0
    optimization: float = 12.0
    modification: float = 1.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigurationError("dt must be positive")
        for name in ("di", "delay", "optimization", "modification"):
            steps = getattr(self, name) / self.dt
            if abs(steps - round(steps)) > 1e-9:
                raise ConfigurationError(
                    f"{name}={getattr(self, name)} h is not a multiple of "
                    f"dt={self.dt} h")
        if self.modification > self.delay:
            raise ConfigurationError("modification horizon must not exceed delay")
        for name in ("delay", "optimization", "modification"):
            if round(getattr(self, name) / self.dt) % self.n_di:
                raise ConfigurationError(
                    f"{name} must cover an integer number of dispatch intervals")

    @property
    def prediction(self) -> float:
        return self.delay + self.optimization

    @property
    def n_di(self) -> int:
        return round(self.di / self.dt)

    @property
    def n_d(self) -> int:
        return round(self.delay / self.dt)

    @property
    def n_t(self) -> int:
        return round(self.optimization / self.dt)

    @property
    def n_m(self) -> int:
        return round(self.modification / self.dt)

    @property
    def n_p(self) -> int:
        return self.n_d + self.n_t

    @property
    def n_blocks(self) -> int:
        return self.n_t // self.n_di

    @property
    def n_blocks_delay(self) -> int:
        return self.n_d // self.n_di

    @property
    def n_blocks_mod(self) -> int:
        return self.n_m // self.n_di


@dataclass(frozen=True)
class OperatingLimits:
    """Hard and soft operating ranges of Eq.-style inequality constraints."""

    soc_min: float = 0.01
    soc_max: float = 0.99
    v_min: float = 3.2
    v_max: float = 4.2
    i_max: float = 0.873
    p_b_max: float = 12.0
    p_grid_max: float = 10.0
    t_min: float = 296.15
    t_max: float = 300.15
    p_c_max: float = 0.1

    def __post_init__(self):
        if not (self.soc_min < self.soc_max and self.v_min < self.v_max
                and self.t_min < self.t_max):
            raise ConfigurationError("each lower limit must be below the upper")
        if min(self.i_max, self.p_b_max, self.p_grid_max, self.p_c_max) <= 0:
            raise ConfigurationError("limit magnitudes must be positive")


@dataclass(frozen=True)
class CostParams:
    """Economic weights: degradation price and slack penalty matrices."""

    n_cell: int = 4000
    xi_cell: float = 1.0      # investment per cell [$]
    eol_fraction: float = 0.6  # end-of-life capacity fraction K%
    q0: float = 1.747
    w1: np.ndarray = field(default_factory=lambda: np.diag([1e4, 1e4]))
    w2: np.ndarray = field(default_factory=lambda: np.diag([1e4, 1e4]))

    def __post_init__(self):
        object.__setattr__(self, "w1", _as_matrix(self.w1, "w1"))
        object.__setattr__(self, "w2", _as_matrix(self.w2, "w2"))
        if not 0.0 < self.eol_fraction < 1.0:
            raise ConfigurationError("eol_fraction must lie in (0, 1)")

    @property
    def kappa(self) -> float:
        """Degradation cost per amp-hour of capacity loss [$/Ah]."""
        return self.n_cell * self.xi_cell / ((1.0 - self.eol_fraction) * self.q0)


def trading_cost(p_grid, price):
    """Net electricity trading cost rate [$ per hour]; export earns."""
    return -price * p_grid


def degradation_cost(i_sr, cost: CostParams):
    """Battery aging cost rate [$ per hour] from the side-reaction current."""
    return cost.kappa * (-i_sr)


def running_cost(i_sr, p_grid, price, cost: CostParams):
    """Total operating cost rate [$ per hour]."""
    return trading_cost(p_grid, price) + degradation_cost(i_sr, cost)


@dataclass
class DecisionVector:
    """Blocked grid-power and thermal-control schedule plus four slacks."""

    p_grid_blocks: np.ndarray
    q_c_blocks: np.ndarray
    slacks: np.ndarray  # (eps1, eps2, eps3, eps4): SoC low/high, T low/high

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.p_grid_blocks, self.q_c_blocks, self.slacks])

    @classmethod
    def from_flat(cls, x: np.ndarray, n_blocks: int) -> "DecisionVector":
        x = np.asarray(x, dtype=float)
        if x.size != 2 * n_blocks + 4:
            raise ConfigurationError(
                f"decision vector length {x.size} != {2 * n_blocks + 4}")
        return cls(p_grid_blocks=x[:n_blocks].copy(),
                   q_c_blocks=x[n_blocks:2 * n_blocks].copy(),
                   slacks=x[2 * n_blocks:].copy())

    def to_dict(self) -> dict:
        return {"p_grid_blocks": self.p_grid_blocks.tolist(),
                "q_c_blocks": self.q_c_blocks.tolist(),
                "slacks": self.slacks.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "DecisionVector":
        return cls(np.array(doc["p_grid_blocks"], dtype=float),
                   np.array(doc["q_c_blocks"], dtype=float),
                   np.array(doc["slacks"], dtype=float))


def shift_decision(dv: DecisionVector, n_blocks_mod: int) -> DecisionVector:
    """Warm start for the next decision: drop the blocks that slid past the
    window, repeat the final block, keep the slacks."""
    if n_blocks_mod <= 0:
        return DecisionVector(dv.p_grid_blocks.copy(), dv.q_c_blocks.copy(),
                              dv.slacks.copy())

    def roll(blocks):
        return np.concatenate([blocks[n_blocks_mod:],
                               np.repeat(blocks[-1], n_blocks_mod)])

    return DecisionVector(roll(dv.p_grid_blocks), roll(dv.q_c_blocks),
                          dv.slacks.copy())


@dataclass
class SolveDiagnostics:
    iterations: int
    objective: float
    max_violation: float
    max_hard_violation: float
    wall_time: float
    n_evaluations: int
    converged: bool
    degraded: bool
    message: str


# ---------------------------------------------------------------------------
# Extended (search-safe) cell algebra used by the stage-2 rollout.
# ---------------------------------------------------------------------------

def _theta_window(el) -> tuple[float, float]:
    """Physical stoichiometry range of the electrode (0%..100% endpoints).

    The empirical OCP fits are only trustworthy between their tabulated
    endpoints; outside (SoC below 0 or above 1) the rollout switches to a C1
    linear continuation anchored at the window edge.
    """
    lo = min(el.theta_0pct, el.theta_100pct)
    hi = max(el.theta_0pct, el.theta_100pct)
    return lo, hi


def _v1_extended(el, theta, t_bat, t_ref):
    """V1(theta, T) with C1 linear continuation outside the safe window.

    Returns (v1, slope, entropy_at_clip). The base point and both
    central-difference probes are evaluated in one stacked ufunc pass.
    """
    lo, hi = _theta_window(el)
    theta_c = np.minimum(np.maximum(theta, lo), hi)
    stacked = np.concatenate([theta_c, theta_c + _FD_THETA, theta_c - _FD_THETA])
    ocp3 = el.ocp(stacked)
    ent3 = el.entropy(stacked)
    n = theta_c.shape[0]
    dtemp = t_bat - t_ref
    v3 = ocp3.reshape(3, n, -1) + ent3.reshape(3, n, -1) * dtemp[None]
    slope = (v3[1] - v3[2]) / (2.0 * _FD_THETA)
    return v3[0] + slope * (theta - theta_c), slope, ent3.reshape(3, n, -1)[0]


def _rollout(spec: "ProblemSpec", x_batch: np.ndarray,
             record: bool = False):
    """Evaluate costs and constraints for a batch of decision vectors.

    ``x_batch`` has shape (B, n_x). Returns ``(cost_norm, pen, g)`` where
    ``cost_norm`` is the member-averaged running-cost sum, ``pen`` the
    per-member slack penalty (the full objective is ``m * (cost_norm +
    pen)``), and ``g`` the stacked inequality values for the distinct
    ensemble members. With ``record`` set, a dict of per-step trajectories of
    the first batch row is appended to the return tuple.

    Duplicate ensemble members are collapsed with multiplicity weights; this
    is exact (identical members contribute identical costs and constraints)
    and makes a zero-spread ensemble evaluate identically to a single-member
    one.
    """
    from . import chemistry

    hz, lim, cost, p = spec.horizon, spec.limits, spec.cost, spec.battery
    ens, weights = spec.unique_members()
    m_full = spec.m
    m, n_t = ens.shape[0], ens.shape[1]
    n_b = hz.n_blocks
    B = x_batch.shape[0]
    w_norm = weights / m_full                                      # (m,)

    if not record:
        from . import fastpath
        if fastpath.is_default_chemistry(p):
            return fastpath.rollout_fast(spec, x_batch, ens, w_norm)

    p_grid = np.repeat(x_batch[:, :n_b], hz.n_di, axis=1)           # (B, n_t)
    q_c = np.repeat(x_batch[:, n_b:2 * n_b], hz.n_di, axis=1)       # (B, n_t)
    eps = x_batch[:, 2 * n_b:]                                      # (B, 4)

    pv = ens[:, :, COL_PV]
    load = ens[:, :, COL_LOAD]
    price = ens[:, :, COL_PRICE]
    t_amb = ens[:, :, COL_TAMB]

    pos, neg = p.pos, p.neg
    area, far, rg = p.area, p.faraday, p.r_gas
    scale_p = 3600.0 / (area * pos.thickness * far * pos.eps_s * pos.c_s_max)
    scale_n = 3600.0 / (area * neg.thickness * far * neg.eps_s * neg.c_s_max)
    r_f0, k_f = bat.sei_resistance_coeffs(p)
    stack = pos.thickness + 2.0 * p.l_sep + neg.thickness
    plate_n = area * neg.thickness
    kappa = cost.kappa
    dt = hz.dt

    q1p = np.full((B, m), spec.x0.q1_pos)
    q1n = np.full((B, m), spec.x0.q1_neg)
    t_b = np.full((B, m), spec.x0.t_bat)

    obj = np.zeros(B)
    g = np.empty((B, n_t, m, _ROWS_PER_POINT))
    traj = {k: np.empty((m, n_t)) for k in
            ("soc", "t_bat", "v_bat", "i_bat", "p_b", "i_sr")} if record else None

    # |q_c| is smoothed as sqrt(q^2 + delta^2) - delta inside the solver
    # landscape; the worst-case bias is 6e-5 kW (at |q_c| = delta), well
    # below the constraint tolerance, and the kink curvature the QP model
    # must track drops from 1/|q_c| to 1/delta
    q_c_smooth = np.sqrt(q_c * q_c + 1e-8) - 1e-4

    win_p = _theta_window(pos)
    win_n = _theta_window(neg)
    rp2_15ds_p = pos.r_p ** 2 / 15.0 / pos.d_s
    rp2_15ds_n = neg.r_p ** 2 / 15.0 / neg.d_s
    cap_p = area * pos.thickness * far * pos.eps_s * pos.c_s_max
    cap_n = area * neg.thickness * far * neg.eps_s * neg.c_s_max
    ct_p = area * pos.thickness * pos.a_s
    ct_n = area * neg.thickness * neg.a_s
    price_wsum = w_norm @ price                                     # (n_t,)

    for i in range(n_t):
        pg_i = p_grid[:, i][:, None]                                # (B, 1)
        p_c_i = q_c_smooth[:, i][:, None] / p.eta_c
        p_b = spec.eta_b * (spec.eta_pv * pv[:, i] - pg_i - load[:, i] - p_c_i)

        theta_p = pos.theta_0pct - scale_p * q1p
        theta_n = neg.theta_100pct - scale_n * q1n
        v1p, slope_p, ent_p = _v1_extended(pos, theta_p, t_b, p.t_ref)
        v1n, slope_n, ent_n = _v1_extended(neg, theta_n, t_b, p.t_ref)

        th_pc = np.minimum(np.maximum(theta_p, win_p[0]), win_p[1])
        th_nc = np.minimum(np.maximum(theta_n, win_n[0]), win_n[1])
        arr_k = chemistry.arrhenius(t_b, pos.ea_k, p.t_ref)
        arr_kn = arr_k if neg.ea_k == pos.ea_k else chemistry.arrhenius(
            t_b, neg.ea_k, p.t_ref)
        i0_p = far * pos.k_reaction * arr_k * pos.c_s_max * np.sqrt(
            p.c_e0 * th_pc * (1.0 - th_pc))
        i0_n = far * neg.k_reaction * arr_kn * neg.c_s_max * np.sqrt(
            p.c_e0 * th_nc * (1.0 - th_nc))

        arr_d = arr_k if pos.ea_d_s == pos.ea_k else chemistry.arrhenius(
            t_b, pos.ea_d_s, p.t_ref)
        arr_dn = arr_d if neg.ea_d_s == pos.ea_d_s else chemistry.arrhenius(
            t_b, neg.ea_d_s, p.t_ref)
        thermal_volt = rg * t_b / far
        r_sig_p = thermal_volt / (ct_p * i0_p) \
            + (-slope_p) / cap_p * (rp2_15ds_p / arr_d)
        r_sig_n = thermal_volt / (ct_n * i0_n) \
            + (-slope_n) / cap_n * (rp2_15ds_n / arr_dn)

        q_lo = np.maximum(q1p + q1n - p.q0, 0.0)
        # conductivity polynomial has a root near 199 K; floor it so the
        # electrolyte term stays finite on wild iterates
        r_eq = (r_sig_p + r_sig_n + r_f0 + k_f * q_lo
                + stack / (2.0 * area * np.maximum(p.kappa_eff(t_b), 1e-6))
                + p.r_col)
        v_eq = v1p - v1n

        disc = v_eq ** 2 + 4.0 * r_eq * (p_b * (1e3 / p.n_cell))
        i_bat = (-v_eq + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * r_eq)
        i_bat = np.where(p_b == 0.0, 0.0, i_bat)
        # far outside the admissible box the continuation current can grow
        # without bound; cap it well beyond any feasible current so fantasy
        # iterates stay finite (never active near feasibility)
        i_bat = np.minimum(np.maximum(i_bat, -50.0), 50.0)
        v_bat = v_eq + r_eq * i_bat

        i0_sr = np.maximum(p.i0_sr(t_b), 0.0)
        exp_arg = np.minimum(far * (p.u_sr_ref - v1n) / (2.0 * rg * t_b),
                             _EXP_ARG_MAX)
        alpha = -i0_sr * neg.a_s * np.exp(exp_arg)
        beta = i_bat / (2.0 * plate_n * neg.a_s * i0_n)
        gamma = 1.0 / (2.0 * neg.a_s * i0_n)
        s = 1.0 - 2.0 * gamma * alpha
        i_sr = plate_n * (alpha * beta + alpha * np.sqrt(beta ** 2 + s)) / s
        i_sr = np.maximum(i_sr, -50.0)  # same fantasy-region cap as i_bat

        obj += (-p_grid[:, i] * price_wsum[i]
                + kappa * ((-i_sr) @ w_norm))

        q_irrev = p.n_cell * i_bat ** 2 * r_eq * 1e-3
        q_rev = p.n_cell * i_bat * t_b * (ent_p - ent_n) * 1e-3
        q1p = q1p + dt * i_bat
        q1n = q1n + dt * (-i_bat - i_sr)
        t_b = t_b + dt * ((t_amb[:, i] - t_b) / p.r_t
                          + q_irrev + q_rev + q_c[:, i][:, None]) / p.c_t
        # keep fantasy iterates inside a bounded halo around the physical
        # state box (roughly SoC in [-0.3, 1.3], temperature hundreds of K
        # outside the band); constraint rows upstream of the clamp keep
        # their gradients, and the clamps never bind near feasibility
        q1p = np.minimum(np.maximum(q1p, -0.5), p.q0 + 0.5)
        q1n = np.minimum(np.maximum(q1n, -0.5), p.q0 + 0.5)
        t_b = np.minimum(np.maximum(t_b, 230.0), 380.0)

        q_lo_next = q1p + q1n - p.q0
        soc_next = (q1p - q_lo_next) / (p.q0 - q_lo_next)

        gi = g[:, i]
        gi[:, :, 0] = v_bat - lim.v_min
        gi[:, :, 1] = lim.v_max - v_bat
        gi[:, :, 2] = i_bat + lim.i_max
        gi[:, :, 3] = lim.i_max - i_bat
        gi[:, :, 4] = p_b + lim.p_b_max
        gi[:, :, 5] = lim.p_b_max - p_b
        gi[:, :, 6] = soc_next - lim.soc_min + eps[:, 0][:, None]
        gi[:, :, 7] = lim.soc_max + eps[:, 1][:, None] - soc_next
        gi[:, :, 8] = t_b - lim.t_min + eps[:, 2][:, None]
        gi[:, :, 9] = lim.t_max + eps[:, 3][:, None] - t_b

        if record:
            traj["soc"][:, i] = soc_next[0]
            traj["t_bat"][:, i] = t_b[0]
            traj["v_bat"][:, i] = v_bat[0]
            traj["i_bat"][:, i] = i_bat[0]
            traj["p_b"][:, i] = p_b[0]
            traj["i_sr"][:, i] = i_sr[0]

    lo1 = eps[:, [0, 2]]
    hi2 = eps[:, [1, 3]]
    pen = np.einsum("bi,ij,bj->b", lo1, cost.w1, lo1) \
        + np.einsum("bi,ij,bj->b", hi2, cost.w2, hi2)
    g = g.reshape(B, -1)
    return (obj, pen, g, traj) if record else (obj, pen, g)


@dataclass
class ProblemSpec:
    """Assembled stage-2 program: shared state, ensemble, limits, weights."""

    x0: BatteryState
    ensemble: np.ndarray      # (m, n_t, 4)
    horizon: HorizonConfig
    limits: OperatingLimits
    cost: CostParams
    battery: BatteryParams
    eta_pv: float
    eta_b: float

    @property
    def m(self) -> int:
        return self.ensemble.shape[0]

    @property
    def n_x(self) -> int:
        return 2 * self.horizon.n_blocks + 4

    @property
    def n_constraints(self) -> int:
        """Structural count over all members (duplicates included)."""
        return self.horizon.n_t * self.m * _ROWS_PER_POINT

    def unique_members(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct ensemble members and their multiplicities."""
        cached = getattr(self, "_unique_cache", None)
        if cached is None:
            uniq, counts = np.unique(self.ensemble, axis=0, return_counts=True)
            cached = (uniq, counts.astype(float))
            object.__setattr__(self, "_unique_cache", cached)
        return cached

    @property
    def m_unique(self) -> int:
        return self.unique_members()[0].shape[0]

    def bounds(self) -> Bounds:
        n_b = self.horizon.n_blocks
        q_c_max = self.battery.eta_c * self.limits.p_c_max
        lb = np.concatenate([np.full(n_b, -self.limits.p_grid_max),
                             np.full(n_b, -q_c_max), np.zeros(4)])
        ub = np.concatenate([np.full(n_b, self.limits.p_grid_max),
                             np.full(n_b, q_c_max), np.full(4, np.inf)])
        return Bounds(lb, ub)

    def constraint_label(self, row: int) -> str:
        i, rest = divmod(row, self.m_unique * _ROWS_PER_POINT)
        j, kind = divmod(rest, _ROWS_PER_POINT)
        names = _HARD_NAMES + _SOFT_NAMES
        return f"{names[kind]}[step={i},member={j}]"

    def hard_row_mask(self) -> np.ndarray:
        mask = np.zeros(_ROWS_PER_POINT, dtype=bool)
        mask[:len(_HARD_NAMES)] = True
        return np.tile(mask, self.horizon.n_t * self.m_unique)

    def evaluate(self, x: np.ndarray):
        """Full objective and constraints for one decision vector.

        The objective sums the running costs of all members plus each
        member's slack penalty: ``sum_j [sum_i cost_ij + eps' W eps]``.
        """
        cost_norm, pen, g = _rollout(self, np.asarray(x, dtype=float)[None, :])
        return float(self.m * (cost_norm[0] + pen[0])), g[0]

    def predict_trajectories(self, x: np.ndarray) -> dict:
        """Per-distinct-member predicted trajectories under a decision."""
        _, _, _, traj = _rollout(self, np.asarray(x, dtype=float)[None, :],
                                 record=True)
        return traj

    def expanded_controls(self, x: np.ndarray):
        """Per-step (p_grid, q_c) applied identically to every member."""
        dv = DecisionVector.from_flat(x, self.horizon.n_blocks)
        return (np.repeat(dv.p_grid_blocks, self.horizon.n_di),
                np.repeat(dv.q_c_blocks, self.horizon.n_di))

    def to_json(self) -> str:
        return json.dumps({
            "x0": [self.x0.q1_pos, self.x0.q1_neg, self.x0.t_bat],
            "ensemble": self.ensemble.tolist(),
            "horizon": {"dt": self.horizon.dt, "di": self.horizon.di,
                        "delay": self.horizon.delay,
                        "optimization": self.horizon.optimization,
                        "modification": self.horizon.modification},
            "limits": {k: getattr(self.limits, k)
                       for k in OperatingLimits.__dataclass_fields__},
            "cost": {"n_cell": self.cost.n_cell, "xi_cell": self.cost.xi_cell,
                     "eol_fraction": self.cost.eol_fraction, "q0": self.cost.q0,
                     "w1": self.cost.w1.tolist(), "w2": self.cost.w2.tolist()},
            "eta_pv": self.eta_pv,
            "eta_b": self.eta_b,
            "chemistry": self.battery.chemistry_name,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str,
                  battery_params: BatteryParams | None = None) -> "ProblemSpec":
        doc = json.loads(text)
        params = battery_params or bat.default_battery_params()
        if doc["chemistry"] != params.chemistry_name:
            raise ConfigurationError(
                f"serialized spec used chemistry {doc['chemistry']!r}; "
                f"pass matching battery params")
        return cls(
            x0=BatteryState(*doc["x0"]),
            ensemble=np.array(doc["ensemble"], dtype=float),
            horizon=HorizonConfig(**doc["horizon"]),
            limits=OperatingLimits(**doc["limits"]),
            cost=CostParams(n_cell=doc["cost"]["n_cell"],
                            xi_cell=doc["cost"]["xi_cell"],
                            eol_fraction=doc["cost"]["eol_fraction"],
                            q0=doc["cost"]["q0"],
                            w1=np.array(doc["cost"]["w1"]),
                            w2=np.array(doc["cost"]["w2"])),
            battery=params,
            eta_pv=doc["eta_pv"],
            eta_b=doc["eta_b"],
        )


def stage1_predict(x_hat: BatteryState, p_grid_steps, q_c_steps,
                   ensemble_delay: np.ndarray, params: BatteryParams,
                   eta_pv: float, eta_b: float, dt: float) -> BatteryState:
    """Mean terminal state after rolling the committed controls over the
    delay horizon for every ensemble member (exact cell model)."""
    m, n_d = ensemble_delay.shape[0], ensemble_delay.shape[1]
    if len(p_grid_steps) != n_d or len(q_c_steps) != n_d:
        raise ConfigurationError(
            f"committed controls cover {len(p_grid_steps)} steps, "
            f"delay horizon has {n_d}")
    if m > 1 and np.all(ensemble_delay == ensemble_delay[0]):
        # identical members: averaging would only add rounding noise
        ensemble_delay = ensemble_delay[:1]
        m = 1
    terminals = np.empty((m, 3))
    for j in range(m):
        s = x_hat
        for i in range(n_d):
            p_c = abs(q_c_steps[i]) / params.eta_c
            p_b = bat.power_balance(
                ensemble_delay[j, i, COL_PV], ensemble_delay[j, i, COL_LOAD],
                p_grid_steps[i], p_c, eta_pv, eta_b)
            try:
                s, _ = bat.step(s, p_b, q_c_steps[i],
                                ensemble_delay[j, i, COL_TAMB], dt, params)
            except InfeasiblePowerError as err:
                raise InfeasiblePowerError(err.p_b, err.p_b_min, member=j) from err
        terminals[j] = (s.q1_pos, s.q1_neg, s.t_bat)
    mean = terminals.mean(axis=0)
    return BatteryState(q1_pos=float(mean[0]), q1_neg=float(mean[1]),
                        t_bat=float(mean[2]))


def assemble_problem(x_hat_delay: BatteryState, ensemble_opt: np.ndarray,
                     horizon: HorizonConfig, limits: OperatingLimits,
                     cost: CostParams, params: BatteryParams,
                     eta_pv: float, eta_b: float) -> ProblemSpec:
    """Bundle the stage-2 program after dimension checks."""
    ensemble_opt = np.asarray(ensemble_opt, dtype=float)
    if ensemble_opt.ndim != 3 or ensemble_opt.shape[2] != 4:
        raise ConfigurationError("ensemble must have shape (m, n_t, 4)")
    if ensemble_opt.shape[1] != horizon.n_t:
        raise ConfigurationError(
            f"ensemble covers {ensemble_opt.shape[1]} steps, horizon needs "
            f"{horizon.n_t}")
    if ensemble_opt.shape[0] < 1:
        raise ConfigurationError("ensemble must contain at least one member")
    return ProblemSpec(x0=x_hat_delay, ensemble=ensemble_opt, horizon=horizon,
                       limits=limits, cost=cost, battery=params,
                       eta_pv=eta_pv, eta_b=eta_b)


class _Evaluator:
    """Caching bridge between scipy's scalar callbacks and batched rollouts.

    The objective handed to the solver is the member-averaged cost plus the
    correspondingly scaled slack penalty, all divided by the step count, so
    its magnitude is O(1) regardless of ensemble size and forward-difference
    noise stays below the optimality tolerance. Reported objectives are the
    plain member sum plus penalty.
    """

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        m = spec.m
        n_t = spec.horizon.n_t
        self._to_scaled = lambda cn, pen: (cn + pen) / n_t
        self._to_full = lambda cn, pen: m * (cn + pen)
        self._val_cache: dict[bytes, tuple[float, float, np.ndarray]] = {}
        self._jac_cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
        self.n_evaluations = 0
        self.best_feasible: tuple[float, np.ndarray] | None = None
        self.least_violating: tuple[float, np.ndarray] | None = None

    def _track(self, x: np.ndarray, scaled: float, g: np.ndarray):
        if not (np.isfinite(scaled) and np.all(np.isfinite(g))):
            return  # non-finite iterates are never candidates
        viol = float(max(0.0, -g.min())) if g.size else 0.0
        if viol <= CONSTRAINT_TOL:
            if self.best_feasible is None or scaled < self.best_feasible[0]:
                self.best_feasible = (scaled, x.copy())
        if self.least_violating is None or viol < self.least_violating[0]:
            self.least_violating = (viol, x.copy())

    def _store(self, x, key, cost_norm, pen, g):
        hit = (float(cost_norm), float(pen), g)
        self._val_cache[key] = hit
        self._track(x, self._to_scaled(cost_norm, pen), g)
        return hit

    def value(self, x: np.ndarray) -> tuple[float, float, np.ndarray]:
        key = x.tobytes()
        hit = self._val_cache.get(key)
        if hit is None:
            cn, pen, g = _rollout(self.spec, x[None, :])
            self.n_evaluations += 1
            hit = self._store(x, key, cn[0], pen[0], g[0])
        return hit

    def scaled_objective(self, x: np.ndarray) -> float:
        cn, pen, _ = self.value(x)
        return self._to_scaled(cn, pen)

    def full_objective(self, x: np.ndarray) -> float:
        cn, pen, _ = self.value(x)
        return self._to_full(cn, pen)

    def constraints(self, x: np.ndarray) -> np.ndarray:
        return self.value(x)[2]

    def jac(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(scaled objective gradient, constraint jacobian) by forward FD."""
        key = x.tobytes()
        hit = self._jac_cache.get(key)
        if hit is None:
            h = _FD_REL * np.maximum(1.0, np.abs(x))
            batch = np.vstack([x, x + np.diag(h)])
            cn, pen, g = _rollout(self.spec, batch)
            self.n_evaluations += batch.shape[0]
            if key not in self._val_cache:
                self._store(x, key, cn[0], pen[0], g[0])
            f = self._to_scaled(cn, pen)
            d_obj = (f[1:] - f[0]) / h
            d_g = (g[1:] - g[0]) / h[:, None]
            hit = (d_obj, d_g.T)
            self._jac_cache[key] = hit
        return hit


def solve_dispatch(spec: ProblemSpec,
                   warm_start: DecisionVector | np.ndarray | None = None,
                   max_iter: int = MAX_ITER
                   ) -> tuple[DecisionVector, SolveDiagnostics]:
    """Solve the blocked soft-constrained dispatch program with SLSQP.

    Returns a locally optimal decision and diagnostics. If the solver stalls
    but a feasible iterate was seen, that iterate is returned with the
    ``degraded`` flag set.

    Without a warm start the solve runs from two initial plans (idle grid
    and half-export, both with the thermal hold) and keeps the better
    result: the landscape has distinct local basins and a single cold start
    lands in a poor one often enough to matter. A warm-started attempt that
    finds no feasible iterate falls back to the cold strategy (a stale warm
    start can sit unrecoverably deep in the infeasible region under freshly
    sampled members); only if every start fails is
    :class:`InfeasibleProblemError` raised naming the worst constraint.
    """
    if warm_start is not None:
        if isinstance(warm_start, DecisionVector):
            warm_start = warm_start.to_flat()
        warm_start = np.asarray(warm_start, dtype=float)
        if warm_start.size != spec.n_x:
            raise ConfigurationError(
                f"warm start length {warm_start.size} incompatible with "
                f"{spec.n_x}")
        try:
            return _solve_once(spec, warm_start, max_iter, prune=True)
        except InfeasibleProblemError:
            pass
    x_a = _cold_start(spec)
    x_b = x_a.copy()
    x_b[:spec.horizon.n_blocks] = 0.5 * spec.limits.p_grid_max
    best = None
    last_err = None
    for x0 in (x_a, x_b):
        try:
            dv, diag = _solve_once(spec, x0, max_iter, prune=False)
        except InfeasibleProblemError as err:
            last_err = err
            continue
        if best is None or diag.objective < best[1].objective:
            best = (dv, diag)
    if best is None:
        raise last_err
    return best


def _cold_start(spec: ProblemSpec) -> np.ndarray:
    """Initial guess for a solve without history.

    Grid power and slacks start at zero. Thermal control starts at the
    steady-state value that holds the pack at the center of its temperature
    band under the mean ambient: an all-zero start is thermally infeasible
    whenever the ambient sits outside the band, which reliably traps the
    SQP in a huge-slack stall.
    """
    x0 = np.zeros(spec.n_x)
    n_b = spec.horizon.n_blocks
    t_center = 0.5 * (spec.limits.t_min + spec.limits.t_max)
    uniq, weights = spec.unique_members()
    t_amb_mean = float(np.average(uniq[:, :, COL_TAMB].mean(axis=1),
                                  weights=weights))
    q_hold = (t_center - t_amb_mean) / spec.battery.r_t
    q_cap = spec.battery.eta_c * spec.limits.p_c_max
    x0[n_b:2 * n_b] = min(max(q_hold, -q_cap), q_cap)
    return x0


def _solve_once(spec: ProblemSpec, x0: np.ndarray, max_iter: int,
                prune: bool) -> tuple[DecisionVector, SolveDiagnostics]:
    n_b = spec.horizon.n_blocks
    bounds = spec.bounds()
    x0 = np.clip(np.asarray(x0, dtype=float), bounds.lb, bounds.ub)

    ev = _Evaluator(spec)
    t0 = time.perf_counter()
    total_nit = 0

    def run_slsqp(x_start, keep=None, iter_budget=None):
        nonlocal total_nit
        if keep is None:
            cons = {"type": "ineq", "fun": ev.constraints,
                    "jac": lambda x: ev.jac(x)[1]}
        else:
            cons = {"type": "ineq",
                    "fun": lambda x, k=keep: ev.constraints(x)[k],
                    "jac": lambda x, k=keep: ev.jac(x)[1][k]}
        res = minimize(ev.scaled_objective, x_start,
                       jac=lambda x: ev.jac(x)[0], method="SLSQP",
                       bounds=bounds, constraints=[cons],
                       options={"maxiter": iter_budget or max_iter,
                                "ftol": OBJECTIVE_TOL})
        total_nit += int(res.nit)
        return res

    if not prune:
        # cold starts sit far from the solution; the near-active screen
        # would miss the rows that matter and misdirect the first rounds
        res = run_slsqp(x0)
    else:
        margins = np.tile(_PRUNE_MARGINS, spec.horizon.n_t * spec.m_unique)
        keep = ev.constraints(x0) < margins
        res = run_slsqp(x0, keep)
        # activation rounds: re-add any withheld row the solution violated;
        # they start near the incumbent, so a reduced budget suffices
        for _ in range(2):
            x_res = np.asarray(res.x, dtype=float)
            g_full = ev.constraints(x_res)
            missed = (~keep) & (g_full < CONSTRAINT_TOL)
            if not missed.any():
                break
            keep = keep | (g_full < margins)
            restart = x_res if res.success else x0
            res = run_slsqp(restart, keep, iter_budget=max(50, max_iter // 2))
        else:
            g_full = ev.constraints(np.asarray(res.x, dtype=float))
            if ((~keep) & (g_full < CONSTRAINT_TOL)).any():
                res = run_slsqp(x0)
    wall = time.perf_counter() - t0

    x_out = np.asarray(res.x, dtype=float)
    g = ev.constraints(x_out)
    viol = float(max(0.0, -g.min()))
    hard = spec.hard_row_mask()
    degraded = False
    if not (res.success and viol <= CONSTRAINT_TOL):
        if ev.best_feasible is not None:
            _, x_out = ev.best_feasible
            g = ev.constraints(x_out)
            degraded = True
        else:
            if ev.least_violating is None:
                raise InfeasibleProblemError("non-finite-evaluations",
                                             float("inf"))
            worst, x_bad = ev.least_violating
            g_bad = ev.constraints(x_bad)
            raise InfeasibleProblemError(
                spec.constraint_label(int(np.argmin(g_bad))), worst)

    diag = SolveDiagnostics(
        iterations=total_nit,
        objective=ev.full_objective(x_out),
        max_violation=float(max(0.0, -g.min())),
        max_hard_violation=float(max(0.0, -g[hard].min())),
        wall_time=wall,
        n_evaluations=ev.n_evaluations,
        converged=bool(res.success),
        degraded=degraded,
        message=str(res.message),
    )
    return DecisionVector.from_flat(x_out, n_b), diag
