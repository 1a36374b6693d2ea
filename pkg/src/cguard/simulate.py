"""Continuous-time closed-loop rollouts and contraction-rate measurement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClosedLoopTrajectory:
    t: np.ndarray
    y: np.ndarray  # (n, m)
    s2: np.ndarray  # (n, m)
    u: np.ndarray  # (n, m)


def simulate_closed_loop(plant, policy, y0, s2_0, duration, dt=1e-3):
    """Integrates (y, s2) under u = policy(y, s2) with classical RK4.

    The integrator state follows its continuous-time limit s2' = W_y y.
    """
    m = plant.dim_y
    Wy = policy.transform.W_y
    state = np.concatenate([np.asarray(y0, float), np.asarray(s2_0, float)])
    n = int(round(duration / dt))

    def deriv(s, t):
        y, s2 = s[:m], s[m:]
        u = policy.action(y, s2)
        return np.concatenate([np.asarray(plant.f(y, u, t), float), Wy @ y])

    T = np.zeros(n + 1)
    Y = np.zeros((n + 1, m))
    S2 = np.zeros((n + 1, m))
    U = np.zeros((n + 1, m))
    for k in range(n + 1):
        T[k] = k * dt
        Y[k] = state[:m]
        S2[k] = state[m:]
        U[k] = policy.action(Y[k], S2[k])
        if k == n:
            break
        t = T[k]
        k1 = deriv(state, t)
        k2 = deriv(state + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = deriv(state + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = deriv(state + dt * k3, t + dt)
        state = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return ClosedLoopTrajectory(t=T, y=Y, s2=S2, u=U)


def metric_distance(transform, traj_a, traj_b):
    """Distance between paired trajectories in the block-diagonal metric.

    Measures || [W_y (y_a - y_b); W_u (u_a - u_b)] || at every time sample.
    """
    dy = (traj_a.y - traj_b.y) @ transform.W_y.T
    du = (traj_a.u - traj_b.u) @ transform.W_u.T
    return np.sqrt((dy**2).sum(axis=1) + (du**2).sum(axis=1))


def fit_exponential_rate(t, d, skip_fraction=0.2, floor=1e-14):
    """Least-squares slope of log d(t) after the initial transient."""
    t = np.asarray(t, float)
    d = np.maximum(np.asarray(d, float), floor)
    k0 = int(len(t) * skip_fraction)
    tt, dd = t[k0:], np.log(d[k0:])
    A = np.column_stack([tt, np.ones_like(tt)])
    slope, _ = np.linalg.lstsq(A, dd, rcond=None)[0]
    return float(slope)
