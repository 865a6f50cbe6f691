"""
Weighted MMSE block-coordinate descent for sum-rate maximization.

One iteration updates the receivers ``u``, then the MSE weights ``w``, then
the beamformers ``V``; each is the closed-form minimizer of the weighted MSE
objective with the other two blocks fixed.  The beamformer step solves
``(A + mu I) v_i = alpha_i w_i conj(u_i) h_i`` with the Lagrange multiplier
``mu >= 0`` picked by bisection so the power budget is met.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .channel import (CMat, SolverState, _as_complex, effective_gains, mse,
                      power, weighted_sum_rate)
from .errors import PreconditionError, SolverError

__all__ = ['WmmseConfig', 'Trajectory', 'update_u', 'update_w', 'update_v',
           'wmmse_objective', 'wmmse_round', 'solve_wmmse']

_RIDGE = 1e-12


@dataclass(frozen=True)
class WmmseConfig:
    max_iters: int = 100
    eps: float = 1e-4
    bisection_tol: float = 1e-8
    bisection_max_steps: int = 200

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.eps > 0 or not self.bisection_tol > 0:
            raise ValueError("eps and bisection_tol must be positive")


@dataclass
class Trajectory:
    """Per-iteration record of a solve.

    ``objective`` holds the weighted-MSE loss of the state at the end of each
    iteration (for MLBF the loss the meta-learners were trained on).
    """

    wsr: list = field(default_factory=list)
    power: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    elapsed_ms: list = field(default_factory=list)
    iters_used: int = 0
    converged: bool = False

    def record(self, wsr, pwr, objective, elapsed_ms):
        self.wsr.append(float(wsr))
        self.power.append(float(pwr))
        self.objective.append(float(objective))
        self.elapsed_ms.append(float(elapsed_ms))
        self.iters_used = len(self.wsr)

    @property
    def best_so_far(self):
        return np.maximum.accumulate(np.asarray(self.wsr))


def update_u(H, V, sigma2):
    """MMSE receivers ``u_i = conj(h_i^H v_i) / (sum_j |h_i^H v_j|^2 + sigma2)``.

    The conjugate makes ``u_i`` the stationary point of the MSE of the
    estimate ``u_i y_i``.
    """
    G = effective_gains(H, V)
    total = (np.abs(G) ** 2).sum(axis=1) + sigma2
    return np.conj(np.diag(G)) / total


def update_w(H, V, sigma2):
    """MSE weights ``w_i = 1 + SINR_i``, written as a ratio of powers."""
    G2 = np.abs(effective_gains(H, V)) ** 2
    total = G2.sum(axis=1) + sigma2
    return total / (total - np.diag(G2))


def _spd_solve(A, B, shift):
    try:
        factor = linalg.cho_factor(A + shift * np.eye(A.shape[0]), lower=True)
    except linalg.LinAlgError:
        factor = linalg.cho_factor(A + (shift + _RIDGE) * np.eye(A.shape[0]), lower=True)
    return linalg.cho_solve(factor, B)


def update_v(H, u, w, cfg, wcfg=WmmseConfig()):
    """Beamformer update with bisection on the power multiplier.

    Returns
    -------
    V : CMat
    mu : float
    """
    w = np.asarray(w, dtype=np.float64)
    if np.any(~(w > 0)):
        raise PreconditionError(f"MMSE weights must be positive, got {w}")
    Hc = _as_complex(H)
    u = np.asarray(u, dtype=np.complex128)
    alpha = cfg.weights
    c = alpha * w * np.abs(u) ** 2
    # A = sum_i c_i h_i h_i^H with h_i the i-th row of H as a column
    A = (Hc.T * c) @ Hc.conj()
    A = 0.5 * (A + A.conj().T)
    B = Hc.T * (alpha * w * np.conj(u))  # column i: alpha_i w_i conj(u_i) h_i

    if not np.any(B):
        return CMat.from_complex(np.zeros_like(Hc)), 0.0

    def beamformers(mu):
        return CMat.from_complex(_spd_solve(A, B, mu).T)

    if np.linalg.matrix_rank(A) < A.shape[0]:
        # B lies in range(A); the limit mu -> 0+ is the minimum-norm solution
        V = CMat.from_complex(np.linalg.lstsq(A, B, rcond=None)[0].T)
    else:
        V = beamformers(0.0)
    if power(V) <= cfg.P:
        return V, 0.0

    # invariant: power(lo) > P >= power(hi)
    lo, hi = 0.0, 1.0
    V_hi = beamformers(hi)
    steps = 0
    while power(V_hi) > cfg.P:
        lo, hi = hi, 2.0 * hi
        V_hi = beamformers(hi)
        steps += 1
        if steps > wcfg.bisection_max_steps:
            raise SolverError("could not bracket the power multiplier",
                              mu_hi=hi, power_hi=power(V_hi), P=cfg.P)
    for _ in range(wcfg.bisection_max_steps):
        if cfg.P - power(V_hi) <= wcfg.bisection_tol:
            return V_hi, hi
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        V_mid = beamformers(mid)
        if power(V_mid) > cfg.P:
            lo = mid
        else:
            hi, V_hi = mid, V_mid
    raise SolverError("bisection did not meet the power budget",
                      mu=hi, power=power(V_hi), P=cfg.P, gap=cfg.P - power(V_hi))


def wmmse_objective(H, V, u, w, cfg):
    """Weighted-MSE objective ``sum_i alpha_i (w_i e_i - log2 w_i)``."""
    e = mse(H, V, u, cfg.sigma2)
    return float(np.dot(cfg.weights, w * e - np.log2(w)))


def wmmse_round(H, V, cfg, wcfg=WmmseConfig()):
    """One u -> w -> V pass; returns ``(u, w, V_new, mu)``."""
    u = update_u(H, V, cfg.sigma2)
    w = update_w(H, V, cfg.sigma2)
    V_new, mu = update_v(H, u, w, cfg, wcfg)
    return u, w, V_new, mu


def solve_wmmse(H, V0, cfg, wcfg=WmmseConfig()):
    """Run WMMSE from ``V0`` until the WSR changes by at most ``eps``.

    Returns
    -------
    state : SolverState
        Final iterate; ``extras['mu']`` holds the last multiplier.
    traj : Trajectory
        One entry per iteration; ``objective`` is the weighted-MSE loss of
        ``(u_t, w_t, V_t)`` and is non-increasing in ``t``.
    """
    if power(V0) > cfg.P + 1e-9:
        raise PreconditionError(f"V0 is infeasible: Tr(VV^H) = {power(V0)} > P = {cfg.P}")
    start = time.perf_counter()
    traj = Trajectory()
    V = V0
    prev = weighted_sum_rate(H, V, cfg)
    u = w = None
    mu = 0.0
    for _ in range(wcfg.max_iters):
        u, w, V, mu = wmmse_round(H, V, cfg, wcfg)
        objective = wmmse_objective(H, V, u, w, cfg)
        rate = weighted_sum_rate(H, V, cfg)
        traj.record(rate, power(V), objective, 1e3 * (time.perf_counter() - start))
        if abs(rate - prev) <= wcfg.eps:
            traj.converged = True
            break
        prev = rate
    state = SolverState(V=V, u=u, w=w, outer_step=traj.iters_used, extras={'mu': mu})
    return state, traj
