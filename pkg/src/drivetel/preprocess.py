"""Trajectory cleaning and Kalman/RTS smoothing of speed and acceleration."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numba as nb
import numpy as np

from .errors import ConfigError, IntegrityError, NumericalError

MPH = 0.44704  # m/s per mi/h

SPEED_LIMITS = (0.0, 160.0 * MPH)
ACCEL_LIMITS = (-6.0, 4.0)
PHYSICAL_LIMITS = {"speed": SPEED_LIMITS, "acceleration": ACCEL_LIMITS}

DEFAULT_MAX_GAP = 5.0
DEFAULT_MIN_ZERO_RUN = 3.0

TRAJECTORY_COLUMNS = ("trip_id", "timestamp", "channel", "value", "active", "provenance")


@dataclass
class Trajectory:
    """Time-ordered samples of one channel of one trip.

    Values must be finite. Timestamps of cleaned trajectories are strictly
    increasing (see :meth:`check_monotone`); raw ones may not be yet.
    """

    trip_id: str
    channel: str
    times: np.ndarray
    values: np.ndarray
    units: str = ""
    active: bool | None = None
    provenance: str = "raw"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise IntegrityError(f"trajectory {self.trip_id}/{self.channel} has non-finite samples")

    def __len__(self):
        return len(self.times)

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.times) > 0))

    def check_monotone(self):
        if not self.is_monotone:
            raise IntegrityError(f"trajectory {self.trip_id}/{self.channel} timestamps not strictly increasing")
        return self

    def _take(self, idx, provenance=None):
        return Trajectory(self.trip_id, self.channel, self.times[idx], self.values[idx], self.units,
                          self.active, provenance or self.provenance)


@dataclass(frozen=True)
class RemovalReport:
    channel: str
    n_input: int
    n_below: int
    n_above: int

    @property
    def n_removed(self):
        return self.n_below + self.n_above


def enforce_physical_limits(traj: Trajectory) -> tuple[Trajectory, RemovalReport]:
    """Drop (never clamp) samples outside the closed physical bounds.

    Speed must lie in [0, 160] mi/h (stored in m/s), acceleration in
    [-6, 4] m/s^2. Other channels pass through untouched.
    """
    bounds = PHYSICAL_LIMITS.get(traj.channel)
    if bounds is None:
        return traj, RemovalReport(traj.channel, len(traj), 0, 0)
    lo, hi = bounds
    below = traj.values < lo
    above = traj.values > hi
    keep = ~(below | above)
    out = traj._take(keep, "cleaned")
    return out, RemovalReport(traj.channel, len(traj), int(below.sum()), int(above.sum()))


def split_on_time_gaps(traj: Trajectory, max_gap: float = DEFAULT_MAX_GAP) -> list[Trajectory]:
    """Drop non-increasing timestamps, then cut wherever the step exceeds max_gap."""
    if max_gap <= 0:
        raise ConfigError("max_gap must be positive")
    t = traj.times
    if len(t) == 0:
        return []
    keep = np.zeros(len(t), dtype=bool)
    keep[0] = True
    last = t[0]
    # a running max, not np.diff: a backwards jump must not re-admit later samples
    for i in range(1, len(t)):
        if t[i] > last:
            keep[i] = True
            last = t[i]
    kept = traj._take(keep, "cleaned")
    cuts = np.flatnonzero(np.diff(kept.times) > max_gap) + 1
    pieces = []
    for idx in np.split(np.arange(len(kept)), cuts):
        pieces.append(kept._take(idx))
    return pieces


def zero_runs(values: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of exact zeros as inclusive (start, stop) index pairs."""
    z = np.concatenate(([False], values == 0.0, [False]))
    d = np.diff(z.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), stops.tolist()))


def trim_zero_runs(traj: Trajectory, min_run: float = DEFAULT_MIN_ZERO_RUN) -> Trajectory:
    """Remove runs of exactly-zero speed lasting at least ``min_run`` seconds.

    A run's duration is the time between its first and last zero sample.
    """
    if min_run <= 0:
        raise ConfigError("min_run must be positive")
    keep = np.ones(len(traj), dtype=bool)
    for a, b in zero_runs(traj.values):
        if traj.times[b] - traj.times[a] >= min_run:
            keep[a:b + 1] = False
    return traj._take(keep, "cleaned")


def clean_trajectory(traj, max_gap=DEFAULT_MAX_GAP, min_run=DEFAULT_MIN_ZERO_RUN):
    """Limits, then gap splitting, then zero-run trimming. Returns pieces."""
    traj, report = enforce_physical_limits(traj)
    pieces = []
    for piece in split_on_time_gaps(traj, max_gap):
        if traj.channel == "speed":
            piece = trim_zero_runs(piece, min_run)
        if len(piece):
            pieces.append(piece)
    return pieces, report


# --- Kalman smoothing -------------------------------------------------------


def transition_matrix(dt: float) -> np.ndarray:
    return np.array([[1.0, dt], [0.0, 1.0]])


@dataclass
class SmootherConfig:
    """Linear-Gaussian speed/acceleration model.

    ``F`` maps the state (speed, acceleration) to the observation vector;
    when only speed is observed its first row is used. The prose describing
    the noise levels (variance 0.5 for speed, 1 for acceleration) disagrees
    with the matrix W = diag(1, 0.2); the matrix is the default here.
    """

    F: np.ndarray = field(default_factory=lambda: np.eye(2))
    V: np.ndarray = field(default_factory=lambda: np.eye(2))
    W: np.ndarray = field(default_factory=lambda: np.diag([1.0, 0.2]))
    mu0: np.ndarray = field(default_factory=lambda: np.array([0.0, 2.0]))
    C0: np.ndarray = field(default_factory=lambda: 1e3 * np.diag([2.0, 2.0]))

    def __post_init__(self):
        for name in ("F", "V", "W", "C0"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (2, 2):
                raise ConfigError(f"{name} must be 2x2")
            setattr(self, name, m)
        self.mu0 = np.asarray(self.mu0, dtype=float).reshape(2)
        for name in ("V", "W", "C0"):
            m = getattr(self, name)
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -1e-12:
                raise ConfigError(f"{name} must be symmetric positive semidefinite")

    @staticmethod
    def G(dt):
        return transition_matrix(dt)


class KinematicState(NamedTuple):
    speed: float
    acceleration: float


@dataclass
class SmoothedTrajectory:
    """Filtered and smoothed Gaussian state estimates on the input time grid."""

    trip_id: str
    times: np.ndarray
    means: np.ndarray  # (n, 2) smoothed
    covs: np.ndarray  # (n, 2, 2) smoothed
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    active: bool | None = None

    def __len__(self):
        return len(self.times)

    def __iter__(self) -> Iterator[tuple[float, KinematicState]]:
        for t, (s, a) in zip(self.times, self.means):
            yield float(t), KinematicState(float(s), float(a))


@nb.njit(cache=True)
def _predict(m, P, dt, W, m_out, P_out):
    # G = [[1, dt], [0, 1]]
    m_out[0] = m[0] + dt * m[1]
    m_out[1] = m[1]
    a = P[0, 0] + dt * (P[1, 0] + P[0, 1]) + dt * dt * P[1, 1]
    b = P[0, 1] + dt * P[1, 1]
    P_out[0, 0] = a + W[0, 0]
    P_out[0, 1] = b + W[0, 1]
    P_out[1, 0] = b + W[1, 0]
    P_out[1, 1] = P[1, 1] + W[1, 1]


@nb.njit(cache=True)
def _kalman_filter(y, dts, F, V, W, mu0, C0, m_pred, P_pred, m_filt, P_filt):
    """Forward pass; returns the failing step or -1."""
    n, p = y.shape
    L = np.zeros((p, p))
    for k in range(n):
        if k == 0:
            m_pred[0] = mu0
            P_pred[0] = C0
        else:
            _predict(m_filt[k - 1], P_filt[k - 1], dts[k - 1], W, m_pred[k], P_pred[k])
        m = m_pred[k]
        P = P_pred[k]
        S = F @ P @ F.T + V
        # Cholesky of the (at most 2x2) innovation covariance
        for i in range(p):
            for j in range(i + 1):
                acc = S[i, j]
                for q in range(j):
                    acc -= L[i, q] * L[j, q]
                if i == j:
                    if not acc > 0.0:
                        return k
                    L[i, i] = np.sqrt(acc)
                else:
                    L[i, j] = acc / L[j, j]
        # K' = S^-1 F P by forward then backward substitution
        X = F @ P
        for c in range(2):
            for i in range(p):
                acc = X[i, c]
                for q in range(i):
                    acc -= L[i, q] * X[q, c]
                X[i, c] = acc / L[i, i]
            for i in range(p - 1, -1, -1):
                acc = X[i, c]
                for q in range(i + 1, p):
                    acc -= L[q, i] * X[q, c]
                X[i, c] = acc / L[i, i]
        K = X.T.copy()
        m_filt[k] = m + K @ (y[k] - F @ m)
        IKF = np.eye(2) - K @ F
        # Joseph form keeps P symmetric PSD
        P_filt[k] = IKF @ P @ IKF.T + K @ V @ K.T
    return -1


@nb.njit(cache=True)
def _rts_smooth(dts, m_pred, P_pred, m_filt, P_filt, m_s, P_s):
    """Backward Rauch-Tung-Striebel pass in place on m_s/P_s; returns the failing step or -1."""
    n = m_filt.shape[0]
    for k in range(n - 2, -1, -1):
        dt = dts[k]
        Pp = P_pred[k + 1]
        det = Pp[0, 0] * Pp[1, 1] - Pp[0, 1] * Pp[1, 0]
        if det == 0.0 or not np.isfinite(det):
            return k
        inv = np.empty((2, 2))
        inv[0, 0] = Pp[1, 1] / det
        inv[0, 1] = -Pp[0, 1] / det
        inv[1, 0] = -Pp[1, 0] / det
        inv[1, 1] = Pp[0, 0] / det
        Pf = P_filt[k]
        # P_filt G'
        PGt = np.empty((2, 2))
        PGt[0, 0] = Pf[0, 0] + dt * Pf[0, 1]
        PGt[0, 1] = Pf[0, 1]
        PGt[1, 0] = Pf[1, 0] + dt * Pf[1, 1]
        PGt[1, 1] = Pf[1, 1]
        J = PGt @ inv
        m_s[k] = m_filt[k] + J @ (m_s[k + 1] - m_pred[k + 1])
        Ps = P_filt[k] + J @ (P_s[k + 1] - Pp) @ J.T
        P_s[k] = 0.5 * (Ps + Ps.T)
    return -1


def kalman_smooth(
    traj: Trajectory,
    config: SmootherConfig | None = None,
    acceleration: Trajectory | None = None,
) -> SmoothedTrajectory:
    """Forward Kalman filter and Rauch-Tung-Striebel backward pass.

    The state at the first timestamp has prior N(mu0, C0); each later state
    is G(dt) @ previous + N(0, W) with the exact step dt. If ``acceleration``
    is given (same timestamps), both rows of F are used.
    """
    cfg = config or SmootherConfig()
    traj.check_monotone()
    n = len(traj)
    if n < 2:
        raise ConfigError("kalman_smooth needs at least 2 samples")
    if acceleration is not None:
        if not np.array_equal(acceleration.times, traj.times):
            raise ConfigError("acceleration must share the speed timestamps")
        y = np.column_stack([traj.values, acceleration.values])
        F, V = cfg.F, cfg.V
    else:
        y = traj.values[:, None]
        F, V = cfg.F[:1], cfg.V[:1, :1]

    dts = np.diff(traj.times)
    m_pred = np.empty((n, 2))
    P_pred = np.empty((n, 2, 2))
    m_filt = np.empty((n, 2))
    P_filt = np.empty((n, 2, 2))
    bad = _kalman_filter(np.ascontiguousarray(y, dtype=float), dts, np.ascontiguousarray(F), np.ascontiguousarray(V),
                         cfg.W, cfg.mu0, cfg.C0, m_pred, P_pred, m_filt, P_filt)
    if bad >= 0:
        raise NumericalError(f"innovation covariance not positive definite at step {bad}")
    m_s = m_filt.copy()
    P_s = P_filt.copy()
    bad = _rts_smooth(dts, m_pred, P_pred, m_filt, P_filt, m_s, P_s)
    if bad >= 0:
        raise NumericalError(f"singular predicted covariance at step {bad}")

    return SmoothedTrajectory(traj.trip_id, traj.times.copy(), m_s, P_s, m_filt, P_filt, traj.active)


def derive_kinematics(smoothed: SmoothedTrajectory) -> tuple[Trajectory, Trajectory]:
    """Split a smoothed state sequence into speed and acceleration trajectories."""
    if len(smoothed) == 0:
        raise ConfigError("empty smoothed sequence")
    speed = Trajectory(smoothed.trip_id, "speed", smoothed.times, smoothed.means[:, 0], "m/s",
                       smoothed.active, "smoothed")
    accel = Trajectory(smoothed.trip_id, "acceleration", smoothed.times, smoothed.means[:, 1], "m/s^2",
                       smoothed.active, "smoothed")
    return speed, accel


# --- serialization ----------------------------------------------------------


def write_trajectories(trajs: Iterable[Trajectory], path) -> None:
    """CAN-style schema plus a provenance column (raw|cleaned|smoothed)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for tr in trajs:
            act = "" if tr.active is None else ("true" if tr.active else "false")
            for t, v in zip(tr.times.tolist(), tr.values.tolist()):
                w.writerow([tr.trip_id, repr(t), tr.channel, repr(v), act, tr.provenance])


def read_trajectories(path) -> list[Trajectory]:
    """Inverse of :func:`write_trajectories`; consecutive rows form one trajectory."""
    out = []
    cur_key, ts, vs = None, [], []

    def flush():
        if cur_key is not None:
            trip, ch, act, prov = cur_key
            active = None if act == "" else act == "true"
            units = {"speed": "m/s", "acceleration": "m/s^2"}.get(ch, "")
            out.append(Trajectory(trip, ch, ts, vs, units, active, prov))

    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != TRAJECTORY_COLUMNS:
            raise ConfigError(f"{path}: expected columns {TRAJECTORY_COLUMNS}")
        prev_t = None
        for row in reader:
            key = (row["trip_id"], row["channel"], row["active"], row["provenance"])
            t = float(row["timestamp"])
            # a new piece of the same trip starts when time does not advance
            if key != cur_key or (prev_t is not None and t <= prev_t):
                flush()
                cur_key, ts, vs = key, [], []
            ts.append(t)
            vs.append(float(row["value"]))
            prev_t = t
    flush()
    return out
