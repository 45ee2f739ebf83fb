"""Forecast-error moment learning and disturbance-ensemble generation.

Disturbance vectors are ordered (p_pv, p_load, price, t_amb) throughout the
package; trajectories are float arrays of shape (n_steps, 4). Forecast errors
use the convention ``w = forecast - actual``, and sampled error realizations
are added on top of the nominal forecast, mirroring how the historical errors
were produced.

Moments are learned per day-segment from a short rolling history, and members
draw their errors independently per time step from N(mu, Sigma). Every draw
derives from an explicit seed, so ensembles are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientHistoryError

N_DIST = 4
COL_PV, COL_LOAD, COL_PRICE, COL_TAMB = range(N_DIST)
COLUMNS = ("p_pv", "p_load", "price", "t_amb")


@dataclass(frozen=True)
class DisturbanceSample:
    """One (PV power, load, price, ambient temperature) tuple."""

    p_pv: float
    p_load: float
    price: float
    t_amb: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_pv, self.p_load, self.price, self.t_amb])

    @classmethod
    def from_array(cls, row) -> "DisturbanceSample":
        return cls(float(row[0]), float(row[1]), float(row[2]), float(row[3]))


@dataclass(frozen=True)
class MomentSet:
    """First and second moments of the forecast error in one day segment."""

    segment: int
    mu: np.ndarray       # (n_dist,)
    sigma: np.ndarray    # (n_dist, n_dist)
    n_samples: int


@dataclass(frozen=True)
class EnsembleSet:
    """m disturbance trajectories over a prediction horizon."""

    members: np.ndarray  # (m, n_steps, n_dist)
    seed: object

    @property
    def m(self) -> int:
        return self.members.shape[0]

    @property
    def n_steps(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)


def segment_of(t_hours: float, segments_per_day: int) -> int:
    """Day segment (1-based) containing wall-clock time ``t_hours``."""
    width = 24.0 / segments_per_day
    return int(np.floor((t_hours % 24.0) / width)) + 1


def learn_moments(times, errors, segment: int, segments_per_day: int,
                  h_days: float) -> MomentSet:
    """Sample mean and unbiased covariance of in-segment errors.

    ``times`` are hours, ``errors`` is (n, n_dist). Only samples within the
    trailing ``h_days`` window (measured from the newest history entry) whose
    wall-clock time falls in ``segment`` participate. Fewer than two matches
    raise :class:`InsufficientHistoryError`.
    """
    times = np.asarray(times, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if times.size == 0:
        raise InsufficientHistoryError("empty forecast-error history")
    cutoff = times.max() - 24.0 * h_days
    width = 24.0 / segments_per_day
    seg = np.floor((times % 24.0) / width).astype(int) + 1
    mask = (times > cutoff) & (seg == segment)
    picked = errors[mask]
    if picked.shape[0] < 2:
        raise InsufficientHistoryError(
            f"{picked.shape[0]} sample(s) in segment {segment} within "
            f"{h_days} day(s); need at least 2"
        )
    mu = picked.mean(axis=0)
    centered = picked - mu
    sigma = centered.T @ centered / (picked.shape[0] - 1)
    return MomentSet(segment=segment, mu=mu, sigma=sigma,
                     n_samples=picked.shape[0])


def _factor(sigma: np.ndarray) -> np.ndarray:
    """Matrix square root for sampling; tolerates semidefinite inputs.

    Plain Cholesky when positive definite; otherwise an eigenvalue
    factorization with eigenvalues below 1e-12 treated as exactly zero, so a
    zero covariance yields zero spread regardless of the random stream.
    """
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(sigma)
        vals = np.where(vals < 1e-12, 0.0, vals)
        return vecs * np.sqrt(vals)


def generate_ensemble(nominal: np.ndarray, moments, m: int, seed) -> EnsembleSet:
    """Sample an m-member disturbance ensemble around a nominal forecast.

    ``moments`` is a per-step sequence of :class:`MomentSet` or ``None``
    (``None`` marks steps with insufficient history, which fall back to the
    nominal forecast). With ``m == 1`` the ensemble degenerates to the
    nominal forecast itself, which is the plain mean-forecast controller.
    Member ``j`` draws from a substream derived from ``(seed, j)``. PV and
    load are floored at zero after sampling; price and temperature are left
    untouched.
    """
    if m < 1:
        raise ValueError(f"ensemble size must be >= 1, got {m}")
    nominal = np.asarray(nominal, dtype=float)
    n_steps = nominal.shape[0]
    if len(moments) != n_steps:
        raise ValueError(
            f"{len(moments)} moment sets for {n_steps} horizon steps")
    members = np.repeat(nominal[None, :, :], m, axis=0)
    if m > 1:
        factors = [None if ms is None else _factor(ms.sigma) for ms in moments]
        entropy = list(seed) if isinstance(seed, (list, tuple)) else [seed]
        for j in range(m):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=entropy + [j]))
            z = rng.standard_normal((n_steps, nominal.shape[1]))
            for i, ms in enumerate(moments):
                if ms is None:
                    continue
                members[j, i] += ms.mu + factors[i] @ z[i]
    members[:, :, COL_PV] = np.maximum(members[:, :, COL_PV], 0.0)
    members[:, :, COL_LOAD] = np.maximum(members[:, :, COL_LOAD], 0.0)
    return EnsembleSet(members=members, seed=seed)


def persistence_forecast(times, values, horizon_times) -> np.ndarray:
    """Forecast by 24-hour persistence: value at t equals the value at t-24h.

    ``times``/``values`` are the measured history on a uniform grid;
    ``horizon_times`` may extend past the history provided every requested
    t-24h exists in it.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    horizon_times = np.asarray(horizon_times, dtype=float)
    if times.size < 2:
        raise InsufficientHistoryError("persistence needs at least 24h of history")
    lookup = horizon_times - 24.0
    idx = np.searchsorted(times, lookup)
    idx = np.clip(idx, 0, times.size - 1)
    aligned = np.abs(times[idx] - lookup) < 1e-9
    if not np.all(aligned):
        missing = horizon_times[~aligned]
        raise InsufficientHistoryError(
            f"history does not cover t-24h for horizon times {missing[:3]}...")
    return values[idx]
