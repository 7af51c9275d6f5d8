"""Joint-angle estimation from muscle-length changes (EKF) with marker correction."""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .morphology import solve_ik

PINV_RCOND = 1e-8
S_COND_MAX = 1e12


@dataclass(frozen=True)
class EkfParams:
    Q: np.ndarray
    R: np.ndarray

    @classmethod
    def default(cls, n_joints, n_muscles, q=1e-6, r=1e-6):
        return cls(q * np.eye(n_joints), r * np.eye(n_muscles))


@dataclass(frozen=True)
class EkfState:
    theta_est: np.ndarray
    P: np.ndarray
    status: str = "ok"  # "ok" or "update_skipped"


def _healthy_rows(healthy, M):
    return np.ones(M, dtype=bool) if healthy is None else np.asarray(healthy, dtype=bool)


def _symmetrize(P):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if np.any(w < 0):
        P = (V * np.clip(w, 0.0, None)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def ekf_predict(state, delta_l, model, params, healthy=None):
    """Propagate the estimate by the pseudoinverse of G applied to the length change.

    ``healthy`` optionally masks muscles (ruptured rows are dropped from G).
    """
    delta_l = np.asarray(delta_l, dtype=float)
    if not np.all(np.isfinite(delta_l)):
        raise ValueError("delta_l must be finite")
    rows = _healthy_rows(healthy, len(delta_l))
    G = model.muscle_jacobian(state.theta_est)[rows]
    theta = state.theta_est + np.linalg.pinv(G, rcond=PINV_RCOND) @ delta_l[rows]
    return EkfState(theta, state.P + params.Q)


def ekf_update(state, l_meas, model, params, healthy=None):
    """Standard EKF measurement update with the muscle-length observation model."""
    l_meas = np.asarray(l_meas, dtype=float)
    if not np.all(np.isfinite(l_meas)):
        raise ValueError("l_meas must be finite")
    rows = _healthy_rows(healthy, len(l_meas))
    theta = state.theta_est
    e = (l_meas - model.muscle_lengths(theta))[rows]
    G = model.muscle_jacobian(theta)[rows]
    R = params.R[np.ix_(rows, rows)]
    S = G @ state.P @ G.T + R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > S_COND_MAX:
        return replace(state, status="update_skipped")
    K = np.linalg.solve(S, G @ state.P).T  # P G' S^-1, S symmetric
    P = (np.eye(len(theta)) - K @ G) @ state.P
    return EkfState(theta + K @ e, _symmetrize(P))


def ekf_step(state, l_prev, l_now, model, params, healthy=None):
    state = ekf_predict(state, np.asarray(l_now) - np.asarray(l_prev), model, params, healthy)
    return ekf_update(state, l_now, model, params, healthy)


@dataclass(frozen=True)
class VisionCorrection:
    theta: np.ndarray
    corrected: bool
    residual: float


def vision_correct(theta_est, p_marker, model, end_effector=0):
    """Re-solve IK toward an observed marker, starting from the current estimate.

    Only the mean is replaced; the caller keeps its covariance.  If IK fails
    to converge the uncorrected estimate is returned with ``corrected=False``.
    """
    p_marker = np.asarray(p_marker, dtype=float)
    if not np.all(np.isfinite(p_marker)):
        raise ValueError("marker position must be finite")
    res = solve_ik(model, p_marker, theta_est, end_effector)
    if not res.converged:
        return VisionCorrection(np.asarray(theta_est, dtype=float), False, res.residual)
    return VisionCorrection(res.theta, True, res.residual)


TRACE_COLUMNS = ("tick", "theta_true", "theta_est", "trace_P")


def write_trace(path, rows):
    """Write estimation traces; each row is (tick, theta_true or None, theta_est, P)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for tick, theta_true, theta_est, P in rows:
            true_s = "" if theta_true is None else " ".join(repr(float(v)) for v in np.atleast_1d(theta_true))
            w.writerow([tick, true_s, " ".join(repr(float(v)) for v in np.atleast_1d(theta_est)),
                        repr(float(np.trace(P)))])
