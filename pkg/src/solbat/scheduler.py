"""Market-calendar bookkeeping and the receding-horizon simulation loop.

Every modification period the loop learns forecast-error moments from the
rolling history, samples a disturbance ensemble, predicts the state across
the delay horizon under the already committed schedule, solves the blocked
dispatch program, and commits the first modification-horizon block of the
solution. Between decisions the committed schedule drives the plant (the
exact cell model) against the measured disturbances.

Committed entries are immutable: the simulation keeps per-decision snapshots
of the schedule so audits can prove nothing committed was later altered.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import battery as bat
from .battery import BatteryState
from .config import ExperimentConfig
from .ensemble import (
    COL_LOAD,
    COL_PRICE,
    COL_PV,
    COL_TAMB,
    generate_ensemble,
    learn_moments,
    segment_of,
)
from .errors import (
    BatteryDomainError,
    CommitViolationError,
    ConfigurationError,
    EndOfLifeError,
    InfeasiblePowerError,
    InfeasibleProblemError,
    InsufficientHistoryError,
    SingularityError,
)
from .optimizer import (
    DecisionVector,
    HorizonConfig,
    assemble_problem,
    shift_decision,
    solve_dispatch,
    stage1_predict,
)
from .timeseries import DisturbanceTable

PAST, COMMITTED, TENTATIVE = "past", "committed", "tentative"


def horizon_indices(k: int, hz: HorizonConfig):
    """Index sets (delay, optimization, prediction) at decision instant k."""
    if k < 0:
        raise ConfigurationError("decision index must be nonnegative")
    s_d = range(k, k + hz.n_d)
    s_t = range(k + hz.n_d, k + hz.n_p)
    s_p = range(k, k + hz.n_p)
    return s_d, s_t, s_p


@dataclass
class ScheduleEntry:
    start_step: int
    p_grid: float
    q_c: float
    status: str


class DispatchSchedule:
    """Per-dispatch-interval ledger of grid power and thermal control."""

    def __init__(self, n_di: int):
        self.n_di = n_di
        self.entries: dict[int, ScheduleEntry] = {}

    def di_of(self, step: int) -> int:
        return step // self.n_di

    def write(self, di: int, p_grid: float, q_c: float, status: str) -> None:
        existing = self.entries.get(di)
        if existing is not None and existing.status in (COMMITTED, PAST):
            same = (existing.p_grid == p_grid and existing.q_c == q_c)
            promote_only = same and status in (COMMITTED, PAST)
            if not promote_only:
                raise CommitViolationError(
                    f"dispatch interval {di} is {existing.status} and cannot "
                    f"be altered")
            existing.status = status if status == PAST else existing.status
            return
        self.entries[di] = ScheduleEntry(di * self.n_di, p_grid, q_c, status)

    def controls_at(self, step: int) -> tuple[float, float]:
        entry = self.entries.get(self.di_of(step))
        if entry is None or entry.status == TENTATIVE:
            raise CommitViolationError(
                f"no committed schedule covers step {step}")
        return entry.p_grid, entry.q_c

    def controls_steps(self, steps) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.controls_at(s) for s in steps]
        arr = np.asarray(pairs, dtype=float)
        return arr[:, 0], arr[:, 1]

    def mark_past(self, now_step: int) -> None:
        for di, entry in self.entries.items():
            if entry.status == COMMITTED and (di + 1) * self.n_di <= now_step:
                entry.status = PAST

    def snapshot(self) -> dict[int, tuple[float, float, str]]:
        return {di: (e.p_grid, e.q_c, e.status)
                for di, e in self.entries.items()}


@dataclass
class LoopState:
    """Mutable state of the receding-horizon loop."""

    k: int
    x_hat: BatteryState
    schedule: DispatchSchedule
    seed: int
    prev_decision: DecisionVector | None = None


def commit_step(state: LoopState, decision: DecisionVector,
                hz: HorizonConfig) -> LoopState:
    """Fold a fresh solution into the schedule at decision instant k.

    The first modification horizon worth of blocks beyond the delay becomes
    a firm commitment; the remainder is stored as tentative and may be
    rewritten by later decisions. Previously committed entries are never
    touched.
    """
    if state.k % hz.n_m:
        raise ConfigurationError(
            f"commit_step called off the decision grid (k={state.k})")
    first_block_step = state.k + hz.n_d
    if first_block_step % hz.n_di:
        raise ConfigurationError("decision instant is not DI-aligned")
    di0 = first_block_step // hz.n_di
    for b in range(hz.n_blocks):
        status = COMMITTED if b < hz.n_blocks_mod else TENTATIVE
        state.schedule.write(di0 + b, float(decision.p_grid_blocks[b]),
                             float(decision.q_c_blocks[b]), status)
    state.prev_decision = decision
    return state


@dataclass
class SimulationLog:
    """Per-step plant records plus per-decision solver diagnostics."""

    dt: float
    columns: dict[str, np.ndarray]
    decisions: list[dict]
    events: list[dict]
    snapshots: list[tuple[int, dict]]
    start_time: float

    STEP_FIELDS = (
        "k", "time_h", "p_pv", "p_load", "price", "t_amb", "p_grid", "q_c",
        "p_c", "p_b_demand", "p_b", "i_bat", "v_bat", "soc", "soh", "t_bat",
        "q_loss", "i_sr", "cost_trade", "cost_bat", "cost_op",
        "viol_soc", "viol_v", "viol_i", "viol_p_b", "viol_p_grid", "viol_t",
        "viol_p_c", "viol_any", "saturated",
    )

    @property
    def n_steps(self) -> int:
        return len(self.columns["k"])

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.STEP_FIELDS)
            for i in range(self.n_steps):
                writer.writerow([repr(float(self.columns[f][i]))
                                 if f not in ("k",) else int(self.columns[f][i])
                                 for f in self.STEP_FIELDS])

    def solver_stats(self) -> dict:
        walls = [d["wall_time"] for d in self.decisions if d["solved"]]
        iters = [d["iterations"] for d in self.decisions if d["solved"]]
        if not walls:
            return {"n_decisions": len(self.decisions), "solved": 0}
        return {
            "n_decisions": len(self.decisions),
            "solved": len(walls),
            "degraded": int(sum(d["degraded"] for d in self.decisions
                                if d["solved"])),
            "fallbacks": int(sum(not d["solved"] for d in self.decisions)),
            "wall_mean": float(np.mean(walls)),
            "wall_var": float(np.var(walls)),
            "wall_max": float(np.max(walls)),
            "iterations_mean": float(np.mean(iters)),
        }


def audit_commitments(log: SimulationLog) -> dict:
    """Replay the schedule snapshots and check commitment integrity.

    Returns mutation and coverage mismatch counts; both must be zero for a
    correct run. Also verifies the realized grid power equals the
    concatenation of the per-decision firm commitments.
    """
    mutations = 0
    seen: dict[int, tuple[float, float]] = {}
    for _, snap in log.snapshots:
        for di, (p_grid, q_c, status) in snap.items():
            if status in (COMMITTED, PAST):
                if di in seen and seen[di] != (p_grid, q_c):
                    mutations += 1
                seen[di] = (p_grid, q_c)
    mismatches = 0
    realized = log.columns["p_grid"]
    ks = log.columns["k"].astype(int)
    n_di = log.decisions[0]["n_di"] if log.decisions else 1
    for i, k in enumerate(ks):
        di = k // n_di
        if di in seen and seen[di][0] != realized[i]:
            mismatches += 1
    return {"mutations": mutations, "mismatches": mismatches,
            "intervals_checked": len(seen)}


def _plant_step(state: BatteryState, p_grid: float, q_c: float,
                row: np.ndarray, dt: float, params, eta_pv: float,
                eta_b: float):
    """Apply one committed control to the plant with protective saturation.

    Returns (next_state, output, p_b_demand, p_b_applied, saturated).
    Demanded power is reduced only when the cell physically cannot absorb or
    deliver it: the current-solve discriminant going negative, or an
    electrode charge about to leave [0, Q0].
    """
    p_c = abs(q_c) / params.eta_c
    p_b_demand = bat.power_balance(row[COL_PV], row[COL_LOAD], p_grid, p_c,
                                   eta_pv, eta_b)
    v_eq, r_eq = bat.equivalent_circuit(state.q1_pos, state.q1_neg,
                                        state.t_bat, params)
    p_floor = -params.n_cell * v_eq ** 2 / (4.0 * r_eq) * 1e-3
    p_b = p_b_demand
    saturated = False
    if p_b < p_floor:
        p_b = p_floor * (1.0 - 1e-9)
        saturated = True
    i_bat = bat.current_from_power(v_eq, r_eq, p_b, params.n_cell)
    i_sr = bat.side_reaction_current(state.q1_neg, state.t_bat, i_bat, params)
    # two clamp passes: the admissible-current window depends weakly on the
    # side-reaction current, which itself shifts once the current is clamped
    margin = 1e-6
    for _ in range(2):
        i_lo = max(-state.q1_pos / dt,
                   (state.q1_neg - params.q0) / dt - i_sr) + margin
        i_hi = min((params.q0 - state.q1_pos) / dt,
                   state.q1_neg / dt - i_sr) - margin
        if i_lo <= i_bat <= i_hi:
            break
        i_bat = min(max(i_bat, i_lo), i_hi)
        p_b = params.n_cell * (v_eq + r_eq * i_bat) * i_bat * 1e-3
        i_sr = bat.side_reaction_current(state.q1_neg, state.t_bat, i_bat,
                                         params)
        saturated = True
    try:
        nxt, out = bat.step(state, p_b, q_c, row[COL_TAMB], dt, params)
    except BatteryDomainError:
        # residual overshoot beyond the two-pass window: pin the charge
        # exactly at the box edge and keep the thermal update
        nxt, out = bat.step(state, 0.0, q_c, row[COL_TAMB], dt, params)
        q1p = min(max(state.q1_pos + dt * i_bat, 0.0), params.q0)
        q1n = min(max(state.q1_neg + dt * (-i_bat - i_sr), 0.0), params.q0)
        nxt = BatteryState(q1_pos=q1p, q1_neg=q1n, t_bat=nxt.t_bat)
        saturated = True
    return nxt, out, p_b_demand, p_b, i_sr, saturated


def run_receding_horizon(initial_state: BatteryState, table: DisturbanceTable,
                         config: ExperimentConfig,
                         seed: int | None = None) -> SimulationLog:
    """Simulate the dispatch loop over ``config.sim_days`` of the table.

    The table must cover the warm-up history (persistence lookback plus the
    moment-learning window) followed by the simulated span. The loop seed
    defaults to ``config.seed``; ensembles at decision instant k draw from
    the substream (seed, k).
    """
    hz = config.horizon
    dt = hz.dt
    seed = config.seed if seed is None else seed
    spd = config.steps_per_day
    if spd % hz.n_m or (hz.n_d % hz.n_di):
        raise ConfigurationError("day length must align with decision grid")
    k0 = config.warmup_days * spd
    n_steps = round(config.sim_days * 24.0 / dt)
    if table.n < k0 + n_steps:
        raise ConfigurationError(
            f"table has {table.n} steps; needs warm-up {k0} plus span "
            f"{n_steps}")

    params = config.battery
    plant_params = params
    if config.plant_i0_sr_scale != 1.0 or config.plant_extra_resistance != 0.0:
        base_i0 = params.i0_sr
        plant_params = replace(
            params, r_col=params.r_col + config.plant_extra_resistance,
            i0_sr=lambda t, _f=base_i0, _s=config.plant_i0_sr_scale: _s * _f(t))

    errors = np.full_like(table.values, np.nan)
    errors[spd:] = table.values[:-spd] - table.values[spd:]
    times = table.times

    def seg_at(i: int) -> int:
        # prediction indices may run past the table; segments follow from time
        return segment_of(table.start + i * dt,
                          config.ensemble.segments_per_day)

    schedule = DispatchSchedule(hz.n_di)
    for di in range(k0 // hz.n_di, (k0 + hz.n_d) // hz.n_di):
        schedule.write(di, 0.0, 0.0, COMMITTED)
    loop = LoopState(k=k0, x_hat=initial_state, schedule=schedule, seed=seed)

    cols = {f: [] for f in SimulationLog.STEP_FIELDS}
    decisions: list[dict] = []
    events: list[dict] = []
    snapshots: list[tuple[int, dict]] = []
    lim = config.limits
    h_days = config.ensemble.history_days
    hist_lo_offset = h_days * spd + 1
    plant = initial_state

    def log_event(k, kind, detail):
        events.append({"k": int(k), "kind": kind, "detail": detail})

    def learn_window_moments(k, s_p):
        lo = max(spd, k - hist_lo_offset)
        w_times = times[lo:k]
        w_err = errors[lo:k]
        cache: dict[int, object] = {}
        moments = []
        for i in s_p:
            s_i = seg_at(i)
            if s_i not in cache:
                try:
                    cache[s_i] = learn_moments(
                        w_times, w_err, s_i,
                        config.ensemble.segments_per_day, h_days)
                except InsufficientHistoryError:
                    cache[s_i] = None
                    log_event(k, "insufficient_history", f"segment {s_i}")
            moments.append(cache[s_i])
        return moments

    def decide(k: int):
        s_d, s_t, s_p = horizon_indices(k, hz)
        nominal = table.values[np.asarray(s_p) - spd]
        moments = learn_window_moments(k, s_p)
        ens = generate_ensemble(nominal, moments, config.ensemble.m,
                                seed=[seed, k])
        p_grid_d, q_c_d = schedule.controls_steps(s_d)
        try:
            x_pred = stage1_predict(loop.x_hat, p_grid_d, q_c_d,
                                    ens.members[:, :hz.n_d], params,
                                    config.eta_pv, config.eta_b, dt)
        except (InfeasiblePowerError, BatteryDomainError, SingularityError,
                EndOfLifeError) as err:
            log_event(k, "stage1_fallback", str(err))
            try:
                x_pred = stage1_predict(loop.x_hat, p_grid_d, q_c_d,
                                        nominal[None, :hz.n_d], params,
                                        config.eta_pv, config.eta_b, dt)
            except (InfeasiblePowerError, BatteryDomainError,
                    SingularityError, EndOfLifeError) as err2:
                log_event(k, "stage1_hold_state", str(err2))
                x_pred = loop.x_hat
        spec = assemble_problem(x_pred, ens.members[:, hz.n_d:], hz, lim,
                                config.cost, params, config.eta_pv,
                                config.eta_b)
        warm = None
        if loop.prev_decision is not None:
            warm = shift_decision(loop.prev_decision, hz.n_blocks_mod)
        record = {"k": int(k), "n_di": hz.n_di, "solved": True}
        try:
            dv, diag = solve_dispatch(spec, warm_start=warm,
                                      max_iter=config.solver_max_iter)
            record.update(iterations=diag.iterations,
                          objective=diag.objective,
                          max_violation=diag.max_violation,
                          max_hard_violation=diag.max_hard_violation,
                          wall_time=diag.wall_time,
                          degraded=diag.degraded,
                          converged=diag.converged,
                          slacks=dv.slacks.tolist())
        except InfeasibleProblemError as err:
            log_event(k, "solver_fallback", str(err))
            dv = warm if warm is not None else DecisionVector(
                np.zeros(hz.n_blocks), np.zeros(hz.n_blocks), np.zeros(4))
            record["solved"] = False
        commit_step(loop, dv, hz)
        record["committed_p_grid"] = [
            float(dv.p_grid_blocks[b]) for b in range(hz.n_blocks_mod)]
        record["committed_q_c"] = [
            float(dv.q_c_blocks[b]) for b in range(hz.n_blocks_mod)]
        decisions.append(record)
        snapshots.append((int(k), schedule.snapshot()))

    for k in range(k0, k0 + n_steps):
        loop.k = k
        if k % hz.n_m == 0:
            schedule.mark_past(k)
            decide(k)
        p_grid, q_c = schedule.controls_at(k)
        row = table.values[k]
        nxt, out, p_b_demand, p_b, i_sr, saturated = _plant_step(
            plant, p_grid, q_c, row, dt, plant_params, config.eta_pv,
            config.eta_b)
        if saturated:
            log_event(k, "plant_saturation",
                      f"demand {p_b_demand:.4f} kW applied {p_b:.4f} kW")
        cost_trade = -row[COL_PRICE] * p_grid
        cost_bat = config.cost.kappa * (-i_sr)
        cost_op = cost_trade + cost_bat
        tol = 1e-6
        viol = {
            "viol_soc": out.soc < lim.soc_min - tol or out.soc > lim.soc_max + tol,
            "viol_v": out.v_bat < lim.v_min - tol or out.v_bat > lim.v_max + tol,
            "viol_i": abs(out.i_bat) > lim.i_max + tol,
            "viol_p_b": abs(p_b) > lim.p_b_max + tol,
            "viol_p_grid": abs(p_grid) > lim.p_grid_max + tol,
            "viol_t": nxt.t_bat < lim.t_min - tol or nxt.t_bat > lim.t_max + tol,
            "viol_p_c": out.p_c > lim.p_c_max + tol,
        }
        row_vals = {
            "k": k, "time_h": times[k], "p_pv": row[COL_PV],
            "p_load": row[COL_LOAD], "price": row[COL_PRICE],
            "t_amb": row[COL_TAMB], "p_grid": p_grid, "q_c": q_c,
            "p_c": out.p_c, "p_b_demand": p_b_demand, "p_b": p_b,
            "i_bat": out.i_bat, "v_bat": out.v_bat, "soc": out.soc,
            "soh": out.soh, "t_bat": nxt.t_bat, "q_loss": out.q_loss,
            "i_sr": i_sr, "cost_trade": cost_trade, "cost_bat": cost_bat,
            "cost_op": cost_op, "viol_any": any(viol.values()),
            "saturated": saturated, **viol,
        }
        for f in SimulationLog.STEP_FIELDS:
            cols[f].append(float(row_vals[f]))
        plant = nxt
        est = plant
        if config.estimator_soc_noise_std or config.estimator_t_noise_std:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=[seed, 1_000_003, k]))
            d_soc, d_t = rng.normal(0.0, 1.0, 2)
            q_shift = config.estimator_soc_noise_std * d_soc * params.q0
            est = BatteryState(
                q1_pos=min(max(plant.q1_pos + q_shift, 0.0), params.q0),
                q1_neg=min(max(plant.q1_neg - q_shift, 0.0), params.q0),
                t_bat=plant.t_bat + config.estimator_t_noise_std * d_t)
        loop.x_hat = est

    return SimulationLog(dt=dt,
                         columns={f: np.asarray(v) for f, v in cols.items()},
                         decisions=decisions, events=events,
                         snapshots=snapshots, start_time=float(times[k0]))
