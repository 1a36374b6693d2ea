"""2D peg benchmark: first-order lags over a gently waving surface.

The peg moves with decoupled first-order dynamics in x (lateral) and z
(vertical); contact force is a stiff one-sided spring against the surface
profile g(x). Tasks ask for a lateral position x_d and a contact force f_d.

    tau_z z' + z = u_z
    tau_x x' + x = u_x
    f = K_sur * min(z - g(x), 0)          g(x) = K1 sin x + K2 cos x

Integration uses the exact update of the linear lags, so stepping is
unconditionally stable for any step size.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .plant import PlantModel

TAU_Z = 0.0437
TAU_X = 0.01
DELTA_T = 0.01

X_D_RANGE = (1.0, 3.0)
F_D_RANGE = (-3.0, -0.5)
X0_RANGE = (1.0, 3.0)
Z0_RANGE = (-3.0, 1.0)
KSUR_RANGE = (1.0, 31.0)
KPROF_RANGE = (-0.01, 0.01)

REWARD_WEIGHTS = (1.0, 0.1)  # (distance, chattering)

TRAIN_SECONDS = 8.0
TEST_SECONDS = 16.0

FAILURE_ERROR = 0.4
ERROR_WINDOW_SECONDS = 1.0
CHATTER_THRESHOLD = 0.1  # mean per-step L1 action change over the last quarter
DRIFT_SLOPE = 0.05  # error growth (units/s) over the last quarter

# Perturbation magnitudes for the robustness study (multiplicative, uniform).
PERTURB_TAU = 0.5
PERTURB_KSUR = 1.0
PERTURB_KPROF = 0.5
PERTURB_FLOOR = 0.1  # parameters are clamped to >= floor * nominal


class NonFiniteAction(ValueError):
    pass


@dataclass
class PegParams:
    tau_z: float = TAU_Z
    tau_x: float = TAU_X
    K_sur: float = 16.0
    K1_sur: float = 0.0
    K2_sur: float = 0.0
    delta_t: float = DELTA_T

    def __post_init__(self):
        if self.tau_z <= 0 or self.tau_x <= 0:
            raise ValueError("time constants must be positive")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        # The step must resolve the fastest mode. Equality is allowed (the
        # nominal control period matches tau_x); the exact update stays
        # stable either way.
        if self.delta_t > min(self.tau_x, self.tau_z):
            raise ValueError("delta_t must not exceed the fastest time constant")

    def surface(self, x):
        return self.K1_sur * np.sin(x) + self.K2_sur * np.cos(x)

    def surface_slope(self, x):
        return self.K1_sur * np.cos(x) - self.K2_sur * np.sin(x)

    def surface_curvature(self, x):
        return -self.K1_sur * np.sin(x) - self.K2_sur * np.cos(x)


@dataclass
class TaskSample:
    x_d: float
    f_d: float
    x0: float
    z0: float


@dataclass
class PegState:
    x: float
    z: float
    f: float
    x_d: float
    f_d: float
    elapsed: float = 0.0

    @property
    def e_x(self):
        return self.x_d - self.x

    @property
    def e_f(self):
        return self.f_d - self.f


def contact_force(params, x, z):
    return params.K_sur * np.minimum(z - params.surface(x), 0.0)


def make_state(params, task):
    s = PegState(x=task.x0, z=task.z0, f=0.0, x_d=task.x_d, f_d=task.f_d)
    s.f = float(contact_force(params, s.x, s.z))
    return s


def step(state, params, action):
    """One control period: exact first-order updates, then force recompute."""
    u = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NonFiniteAction(f"non-finite action {u}")
    u_x, u_z = float(u[0]), float(u[1])
    dt = params.delta_t
    az = np.exp(-dt / params.tau_z)
    ax = np.exp(-dt / params.tau_x)
    z = u_z + (state.z - u_z) * az
    x = u_x + (state.x - u_x) * ax
    return PegState(
        x=x,
        z=z,
        f=float(contact_force(params, x, z)),
        x_d=state.x_d,
        f_d=state.f_d,
        elapsed=state.elapsed + dt,
    )


def observe(state, design="d"):
    """RL observation per state-space design.

    (a) raw (x, f); (b)/(c)/(d) tracking errors (e_x, e_f). For (c)/(d) the
    running error sums live inside the policy integrator, so only the errors
    are exposed here.
    """
    if design == "a":
        return np.array([state.x, state.f])
    if design in ("b", "c", "d"):
        return np.array([state.e_x, state.e_f])
    raise ValueError(f"unknown state design {design!r}")


def reward(state, prev_action, action, weights=REWARD_WEIGHTS):
    """Weighted penalties on tracking distance and chattering motion."""
    w_dist, w_chat = weights
    du = np.abs(np.asarray(action, float) - np.asarray(prev_action, float)).sum()
    return float(-w_dist * (abs(state.e_x) + abs(state.e_f)) - w_chat * du)


def sample_params(rng, delta_t=DELTA_T):
    """Dynamics coefficients for one episode; time constants are fixed."""
    return PegParams(
        tau_z=TAU_Z,
        tau_x=TAU_X,
        K_sur=float(rng.uniform(*KSUR_RANGE)),
        K1_sur=float(rng.uniform(*KPROF_RANGE)),
        K2_sur=float(rng.uniform(*KPROF_RANGE)),
        delta_t=delta_t,
    )


MAX_PENETRATION = 1.5


def sample_task(rng, params=None):
    """Targets and initial condition for one episode.

    The force target is capped so the required surface penetration stays
    below MAX_PENETRATION under the episode's stiffness; every sampled task
    is then reachable well inside the action range.
    """
    lo, hi = F_D_RANGE
    if params is not None:
        lo = -min(-lo, MAX_PENETRATION * params.K_sur)
        hi = max(hi, lo / 6.0)
    return TaskSample(
        x_d=float(rng.uniform(*X_D_RANGE)),
        f_d=float(rng.uniform(lo, hi)),
        x0=float(rng.uniform(*X0_RANGE)),
        z0=float(rng.uniform(*Z0_RANGE)),
    )


def perturb_params(params, rng):
    """Multiplicative parameter error for the robustness study.

    Each coefficient gets an independent uniform relative error (50% on the
    time constants and profile coefficients, 100% on the stiffness), clamped
    to stay at or above 10% of nominal.
    """
    def jitter(value, magnitude):
        eta = rng.uniform(-1.0, 1.0)
        return max(value * (1.0 + eta * magnitude), PERTURB_FLOOR * abs(value)) if value != 0 else value * 1.0

    def jitter_signed(value, magnitude):
        # profile coefficients may be negative or zero: plain multiplicative error
        return value * (1.0 + rng.uniform(-1.0, 1.0) * magnitude)

    return replace(
        params,
        tau_z=jitter(params.tau_z, PERTURB_TAU),
        tau_x=jitter(params.tau_x, PERTURB_TAU),
        K_sur=jitter(params.K_sur, PERTURB_KSUR),
        K1_sur=jitter_signed(params.K1_sur, PERTURB_KPROF),
        K2_sur=jitter_signed(params.K2_sur, PERTURB_KPROF),
    )


class PegEnv:
    """Stateful wrapper around the pure step/observe/reward operations."""

    def __init__(self, seed=0, design="d", reward_weights=REWARD_WEIGHTS, delta_t=DELTA_T):
        self.rng = np.random.default_rng(seed)
        self.design = design
        self.reward_weights = reward_weights
        self.delta_t = delta_t
        self.params = None
        self.state = None
        self.prev_action = np.zeros(2)

    def reset(self, task=None, params=None):
        self.params = params if params is not None else sample_params(self.rng, self.delta_t)
        task = task if task is not None else sample_task(self.rng, self.params)
        self.state = make_state(self.params, task)
        self.prev_action = np.zeros(2)
        return observe(self.state, self.design)

    @property
    def error_state(self):
        return np.array([self.state.e_x, self.state.e_f])

    def step(self, action):
        self.state = step(self.state, self.params, action)
        r = reward(self.state, self.prev_action, action, self.reward_weights)
        self.prev_action = np.asarray(action, dtype=float).copy()
        return observe(self.state, self.design), r, {"state": self.state}


class PegEnvPool:
    """Vectorized bank of independent environments with per-env RNG streams."""

    def __init__(self, n_envs, root_seed=0, design="d", reward_weights=REWARD_WEIGHTS, delta_t=DELTA_T):
        self.n = n_envs
        self.design = design
        self.reward_weights = reward_weights
        self.delta_t = delta_t
        seq = np.random.SeedSequence(root_seed)
        self.rngs = [np.random.default_rng(s) for s in seq.spawn(n_envs)]
        self.x = np.zeros(n_envs)
        self.z = np.zeros(n_envs)
        self.f = np.zeros(n_envs)
        self.x_d = np.zeros(n_envs)
        self.f_d = np.zeros(n_envs)
        self.K_sur = np.ones(n_envs)
        self.K1 = np.zeros(n_envs)
        self.K2 = np.zeros(n_envs)
        self.tau_z = np.full(n_envs, TAU_Z)
        self.tau_x = np.full(n_envs, TAU_X)
        self.prev_u = np.zeros((n_envs, 2))
        self.reset_all()

    def _surface(self, x):
        return self.K1 * np.sin(x) + self.K2 * np.cos(x)

    def _force(self):
        return self.K_sur * np.minimum(self.z - self._surface(self.x), 0.0)

    def reset_env(self, i, task=None, params=None):
        rng = self.rngs[i]
        p = params if params is not None else sample_params(rng, self.delta_t)
        t = task if task is not None else sample_task(rng, p)
        self.tau_z[i], self.tau_x[i] = p.tau_z, p.tau_x
        self.K_sur[i], self.K1[i], self.K2[i] = p.K_sur, p.K1_sur, p.K2_sur
        self.x[i], self.z[i] = t.x0, t.z0
        self.x_d[i], self.f_d[i] = t.x_d, t.f_d
        self.prev_u[i] = 0.0
        self.f[i] = self.K_sur[i] * min(self.z[i] - (p.K1_sur * np.sin(t.x0) + p.K2_sur * np.cos(t.x0)), 0.0)

    def reset_all(self):
        for i in range(self.n):
            self.reset_env(i)

    @property
    def error_state(self):
        return np.column_stack([self.x_d - self.x, self.f_d - self.f])

    def step(self, actions):
        u = np.asarray(actions, dtype=float)
        if not np.all(np.isfinite(u)):
            raise NonFiniteAction("non-finite action batch")
        dt = self.delta_t
        az = np.exp(-dt / self.tau_z)
        ax = np.exp(-dt / self.tau_x)
        self.z = u[:, 1] + (self.z - u[:, 1]) * az
        self.x = u[:, 0] + (self.x - u[:, 0]) * ax
        self.f = self._force()
        err = self.error_state
        w_dist, w_chat = self.reward_weights
        rewards = -w_dist * np.abs(err).sum(axis=1) - w_chat * np.abs(u - self.prev_u).sum(axis=1)
        self.prev_u = u.copy()
        return rewards


# ---- error-coordinate plant model (certification & audits) ----------------


def peg_error_plant(params, task):
    """In-contact error dynamics as a first-order plant with analytic Jacobians.

    State y = (e_x, e_f), action u = (u_x, u_z). Valid while the peg touches
    the surface (the force error pins down z through the contact spring).
    """
    K = params.K_sur
    tz, tx = params.tau_z, params.tau_x

    def recover(y):
        e_x, e_f = y
        x = task.x_d - e_x
        force = task.f_d - e_f
        z = params.surface(x) + force / K
        return x, z

    def f(y, u, t):
        x, z = recover(np.asarray(y, float))
        u = np.asarray(u, float)
        xdot = (u[0] - x) / tx
        zdot = (u[1] - z) / tz
        gp = params.surface_slope(x)
        return np.array([-xdot, -K * (zdot - gp * xdot)])

    def jac_y(y, u, t):
        x, z = recover(np.asarray(y, float))
        u = np.asarray(u, float)
        xdot = (u[0] - x) / tx
        gp = params.surface_slope(x)
        gpp = params.surface_curvature(x)
        j11 = -1.0 / tx
        j21 = -K * gp / tz - K * gpp * xdot + K * gp / tx
        return np.array([[j11, 0.0], [j21, -1.0 / tz]])

    def jac_u(y, u, t):
        x, _ = recover(np.asarray(y, float))
        gp = params.surface_slope(x)
        return np.array([[-1.0 / tx, 0.0], [K * gp / tx, -K / tz]])

    return PlantModel(dim_y=2, f=f, jac_y=jac_y, jac_u=jac_u, name="peg-error")


def nominal_peg_plant(params=None):
    """Error plant at the nominal task/profile (flat surface, mid stiffness)."""
    params = params or PegParams()
    task = TaskSample(x_d=2.0, f_d=-1.5, x0=2.0, z0=0.0)
    return peg_error_plant(params, task), task


# ---- trajectory metrics ----------------------------------------------------


def combined_error(e_x, e_f, delta_t, window_seconds=ERROR_WINDOW_SECONDS):
    """Final tracking error: larger of |e_x|, |e_f| averaged over the last window."""
    w = max(1, int(round(window_seconds / delta_t)))
    err = np.maximum(np.abs(np.asarray(e_x, float)), np.abs(np.asarray(e_f, float)))
    return float(err[-w:].mean())


def classify_failure(e_x, e_f, actions, delta_t):
    """Returns None for a success, else one of 'chattering' / 'drift' /
    'nonzero_equilibrium'."""
    err_final = combined_error(e_x, e_f, delta_t)
    if err_final <= FAILURE_ERROR:
        return None
    n = len(e_x)
    q = max(2, n // 4)
    du = np.abs(np.diff(np.asarray(actions, float), axis=0)).sum(axis=1)
    if du[-q:].mean() > CHATTER_THRESHOLD:
        return "chattering"
    err = np.maximum(np.abs(np.asarray(e_x, float)), np.abs(np.asarray(e_f, float)))[-q:]
    tt = np.arange(q) * delta_t
    slope = np.polyfit(tt, err, 1)[0]
    if slope > DRIFT_SLOPE:
        return "drift"
    return "nonzero_equilibrium"


# ---- static equilibrium audit ----------------------------------------------


def closed_form_equilibrium(params, task):
    """Steady-state action for a peg task: u_x = x_d, u_z from the contact spring."""
    u_x = task.x_d
    u_z = params.surface(task.x_d) + task.f_d / params.K_sur
    return np.array([u_x, u_z])


def _bisect(fn, lo, hi, iters=200):
    flo = fn(lo)
    fhi = fn(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if fm == 0.0 or (hi - lo) < 1e-15:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def numeric_equilibrium(params, task, search=(-50.0, 50.0)):
    """Root-finds the steady-state action without using the closed form.

    x settles at u_x, so the position condition is solved directly; the
    force condition is solved by bisection on u_z. Returns None when no
    in-range equilibrium exists (e.g. a positive force target).
    """
    u_x = _bisect(lambda v: task.x_d - v, *search)
    if u_x is None:
        return None

    def force_residual(u_z):
        return task.f_d - params.K_sur * min(u_z - params.surface(u_x), 0.0)

    u_z = _bisect(force_residual, *search)
    if u_z is None:
        return None
    return np.array([u_x, u_z])


def equilibrium_audit(policy, params, tasks, s_grid=None, slope_tol=1e-9):
    """Static-equilibrium audit of a policy on a batch of tasks.

    Checks (i) the integral-channel slope is bounded away from zero over the
    sampled non-saturated input region (a flat integral response admits
    spurious equilibria), and (ii) each task's steady-state action exists
    inside the action range. Reports closed-form vs numeric equilibrium
    agreement and lists unreachable targets.
    """
    from .policy import SATURATION_LIMIT

    m = policy.m
    if s_grid is None:
        axis = np.linspace(-2.0, 2.0, 9)
        grid = np.array(np.meshgrid(*([axis] * 2), indexing="ij")).reshape(2, -1).T
        s1 = np.repeat(grid[:, :1], m, axis=1)
        s2 = np.repeat(grid[:, 1:], m, axis=1)
    else:
        pts = np.atleast_2d(np.asarray(s_grid, float))
        s1, s2 = pts[:, :m], pts[:, m:]
    d1, d2, sat = policy.slopes_batch(s1, s2)
    live = sat <= SATURATION_LIMIT
    min_s2_slope = np.full(m, np.inf)
    for i in range(m):
        if live[:, i].any():
            min_s2_slope[i] = np.abs(d2[live[:, i], i]).min()
    integral_ok = bool(np.all(min_s2_slope > slope_tol))

    rows = []
    for task in tasks:
        closed = closed_form_equilibrium(params, task)
        numeric = numeric_equilibrium(params, task)
        if numeric is None:
            rows.append(
                {"task": task, "reachable": False, "u": None, "mismatch": np.inf}
            )
            continue
        reachable = bool(np.abs(numeric).max() <= policy.action_clip)
        rows.append(
            {
                "task": task,
                "reachable": reachable,
                "u": numeric,
                "mismatch": float(np.abs(closed - numeric).max()),
            }
        )
    return {
        "integral_slope_nonzero": integral_ok,
        "min_integral_slope": min_s2_slope,
        "targets": rows,
        "all_reachable": all(r["reachable"] for r in rows),
        "ok": integral_ok and all(r["reachable"] for r in rows),
    }
