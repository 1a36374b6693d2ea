"""Composite-variable reduction of impedance-shaped second-order error systems.

A spring-mass-damper error model

    Lambda_d e'' + K_d e' + K_p e + K_rl u = zeta

is reduced to first order through y = K1 e + K2 e', yielding

    Lambda_y y' + B_y y + K_rl_eff u = zeta_reduced

with positive diagonal coefficient matrices. Time-varying positive diagonal
"absorbing" matrices then soak up the nonlinear error zeta sample by sample;
when they exist and the per-axis slope conditions hold, the reduced loop is
contracting and the tracking error converges through the composite map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plant import PlantModel
from .transforms import identity_transform

ZERO_TOL = 1e-14


class UnderdampedGains(ValueError):
    """The per-axis discriminant K_d^2 - 4 K_p Lambda_d is negative."""


class NonPositiveGain(ValueError):
    pass


def _diag_vector(M, name, m=None):
    arr = np.asarray(M, dtype=float)
    if arr.ndim == 2:
        if arr.shape[0] != arr.shape[1]:
            raise ValueError(f"{name} must be square or 1-D")
        off = arr - np.diag(np.diag(arr))
        if np.abs(off).max(initial=0.0) > 0:
            raise ValueError(f"{name} must be diagonal")
        arr = np.diag(arr).copy()
    else:
        arr = np.atleast_1d(arr).astype(float)
    if m is not None and arr.size != m:
        raise ValueError(f"{name} must have {m} diagonal entries")
    return arr


@dataclass
class ImpedanceGains:
    """Diagonal impedance gains: desired inertia, damping, stiffness, and the
    feed-forward weight on the learned action."""

    Lambda_d: np.ndarray
    K_d: np.ndarray
    K_p: np.ndarray
    K_rl: np.ndarray

    def __post_init__(self):
        self.Lambda_d = _diag_vector(self.Lambda_d, "Lambda_d")
        m = self.Lambda_d.size
        self.K_d = _diag_vector(self.K_d, "K_d", m)
        self.K_p = _diag_vector(self.K_p, "K_p", m)
        self.K_rl = _diag_vector(self.K_rl, "K_rl", m)
        if np.any(self.Lambda_d <= 0) or np.any(self.K_d <= 0):
            raise NonPositiveGain("Lambda_d and K_d diagonals must be positive")
        if np.any(self.K_p < 0):
            raise NonPositiveGain("K_p diagonals must be nonnegative")

    @property
    def m(self):
        return self.Lambda_d.size


@dataclass
class CompositeMap:
    """First-order reduction coefficients derived from impedance gains.

    ``reduction_scale`` is the diagonal factor the reduction applies to the
    action term: identity on stiff axes, K_d on axes with zero stiffness
    (there the reduced equation is the original one multiplied through by
    K_d). ``K_rl_eff = reduction_scale * K_rl`` is the weight the reduced
    model sees; the same scale maps the raw model error into the reduced
    equation.
    """

    K1: np.ndarray
    K2: np.ndarray
    Lambda_y: np.ndarray
    B_y: np.ndarray
    K_rl: np.ndarray
    reduction_scale: np.ndarray
    branch: str = "+"

    @property
    def m(self):
        return self.K2.size

    @property
    def K_rl_eff(self):
        return self.reduction_scale * self.K_rl

    @property
    def model_eigenvalues(self):
        # ydot = -(B_y/Lambda_y) y - (K_rl_eff/Lambda_y) u
        return -self.B_y / self.Lambda_y

    @property
    def model_coupling(self):
        return -self.K_rl_eff / self.Lambda_y


def gains_to_first_order(gains, branch="+"):
    """Derives (K1, K2, Lambda_y, B_y) from the impedance gains.

    Per axis with stiffness kp > 0 (requires kd^2 - 4 kp ld >= 0):

        k1 = kp / ld
        k2 = 2 kp / (kd +/- sqrt(kd^2 - 4 kp ld))
        lambda_y = ld / k2,   b_y = ld

    Per axis with kp == 0:  k1 = 0, k2 = kd, lambda_y = ld, b_y = kd, and the
    action term is scaled by kd (see CompositeMap.reduction_scale).

    ``branch`` picks the root sign; '+' (default, the smaller k2) or '-'.
    Both roots satisfy the reduction identity.
    """
    if branch not in ("+", "-"):
        raise ValueError("branch must be '+' or '-'")
    ld, kd, kp = gains.Lambda_d, gains.K_d, gains.K_p
    m = gains.m
    K1 = np.zeros(m)
    K2 = np.zeros(m)
    Lam = np.zeros(m)
    By = np.zeros(m)
    scale = np.ones(m)
    for i in range(m):
        if kp[i] == 0.0:
            K1[i] = 0.0
            K2[i] = kd[i]
            Lam[i] = ld[i]
            By[i] = kd[i]
            scale[i] = kd[i]
        else:
            disc = kd[i] ** 2 - 4.0 * kp[i] * ld[i]
            if disc < 0:
                raise UnderdampedGains(
                    f"axis {i}: K_d^2 - 4 K_p Lambda_d = {disc:.6g} < 0"
                )
            root = np.sqrt(disc)
            denom = kd[i] + root if branch == "+" else kd[i] - root
            if denom <= 0:
                raise NonPositiveGain(f"axis {i}: nonpositive K2 denominator")
            K1[i] = kp[i] / ld[i]
            K2[i] = 2.0 * kp[i] / denom
            Lam[i] = ld[i] / K2[i]
            By[i] = ld[i]
    if np.any(K2 <= 0) or np.any(Lam <= 0) or np.any(By <= 0):
        raise NonPositiveGain("reduction produced a nonpositive coefficient")
    return CompositeMap(
        K1=K1, K2=K2, Lambda_y=Lam, B_y=By,
        K_rl=gains.K_rl.copy(), reduction_scale=scale, branch=branch,
    )


def reduction_residual(cmap, gains, e, edot, eddot):
    """Pointwise residual of the order reduction on given (e, e', e'') samples.

    Checks Lambda_y y' + B_y y == reduction_scale * (Lambda_d e'' + K_d e' +
    K_p e) elementwise; all arrays are (n, m). Returns the max |residual|.
    """
    e, edot, eddot = (np.atleast_2d(np.asarray(a, float)) for a in (e, edot, eddot))
    y = e * cmap.K1 + edot * cmap.K2
    ydot = edot * cmap.K1 + eddot * cmap.K2
    lhs = ydot * cmap.Lambda_y + y * cmap.B_y
    rhs = cmap.reduction_scale * (
        eddot * gains.Lambda_d + edot * gains.K_d + e * gains.K_p
    )
    return float(np.abs(lhs - rhs).max())


@dataclass
class AbsorbingCheckResult:
    feasible: np.ndarray  # (n, m) bool
    lam_witness: np.ndarray  # (n, m)
    b_witness: np.ndarray  # (n, m)
    residuals: np.ndarray  # (n, m)
    infeasible: list  # [(sample, axis), ...]
    witness_jumps: np.ndarray  # (n-1,) bool, large jump between samples

    @property
    def all_feasible(self):
        return bool(self.feasible.all())

    @property
    def feasible_fraction(self):
        return float(self.feasible.mean())

    def csv_rows(self):
        """Rows (sample, axis, feasible, lam_witness, b_witness, residual)."""
        n, m = self.feasible.shape
        for k in range(n):
            for i in range(m):
                yield (
                    k,
                    i,
                    int(self.feasible[k, i]),
                    self.lam_witness[k, i],
                    self.b_witness[k, i],
                    self.residuals[k, i],
                )


def _solve_axis_witness(a, c, zeta, lam_y, b_y):
    """Finds (lam~, b~) > 0 with zeta + (lam~ - lam_y) a + (b~ - b_y) c = 0.

    The solution set is the line lam~ a + b~ c = r with r = lam_y a + b_y c -
    zeta; feasibility is the line meeting the open positive quadrant. The
    witness is the point of that intersection closest to (lam_y, b_y),
    nudged strictly inside. Returns (feasible, lam~, b~).
    """
    r = lam_y * a + b_y * c - zeta
    eta = 1e-9 * max(1.0, abs(lam_y), abs(b_y))
    if abs(a) <= ZERO_TOL and abs(c) <= ZERO_TOL:
        if abs(zeta) <= 1e-9:
            return True, lam_y, b_y
        return False, np.nan, np.nan
    if abs(a) <= ZERO_TOL:
        b = r / c
        return (b > 0, lam_y, b) if b > 0 else (False, np.nan, np.nan)
    if abs(c) <= ZERO_TOL:
        lam = r / a
        return (lam > 0, lam, b_y) if lam > 0 else (False, np.nan, np.nan)

    # Both coordinates active: parametrize by lam~ = s, b~ = (r - a s)/c.
    # Feasible s interval (open): s > 0 and (r - a s)/c > 0.
    if c > 0:
        if a > 0:
            lo, hi = 0.0, r / a  # needs r > 0
        else:
            lo, hi = max(0.0, r / a), np.inf
    else:
        if a > 0:
            lo, hi = max(0.0, r / a), np.inf
        else:
            lo, hi = 0.0, r / a  # needs r < 0 -> r/a > 0
    if not (hi > lo):
        return False, np.nan, np.nan
    # closest point on the full line to (lam_y, b_y): offset by the error
    n2 = a * a + c * c
    s_star = lam_y - zeta * a / n2
    width = hi - lo
    pad = min(eta, 0.25 * width) if np.isfinite(width) else eta
    s = min(max(s_star, lo + pad), (hi - pad) if np.isfinite(hi) else s_star if s_star > lo + pad else lo + pad)
    b = (r - a * s) / c
    if s <= 0 or b <= 0:
        # numerically squeezed interval; midpoint fallback
        s = lo + 0.5 * width if np.isfinite(width) else lo + max(eta, 1.0)
        b = (r - a * s) / c
        if s <= 0 or b <= 0:
            return False, np.nan, np.nan
    return True, s, b


def absorbing_feasibility(samples, cmap):
    """Per-sample existence of positive absorbing matrices.

    ``samples`` is a triple of arrays (y, ydot, zeta), each (n, m); zeta must
    be the error of the *reduced* equation (scale raw second-order errors by
    ``cmap.reduction_scale``). Infeasibility is recorded, not raised.
    """
    y, ydot, zeta = (np.atleast_2d(np.asarray(a, dtype=float)) for a in samples)
    if not (y.shape == ydot.shape == zeta.shape):
        raise ValueError("y, ydot, zeta must share shape (n, m)")
    n, m = y.shape
    feas = np.zeros((n, m), dtype=bool)
    lam_w = np.full((n, m), np.nan)
    b_w = np.full((n, m), np.nan)
    res = np.full((n, m), np.nan)
    bad = []
    for k in range(n):
        for i in range(m):
            ok, lam, b = _solve_axis_witness(
                ydot[k, i], y[k, i], zeta[k, i], cmap.Lambda_y[i], cmap.B_y[i]
            )
            feas[k, i] = ok
            if ok:
                lam_w[k, i] = lam
                b_w[k, i] = b
                res[k, i] = abs(
                    zeta[k, i]
                    + (lam - cmap.Lambda_y[i]) * ydot[k, i]
                    + (b - cmap.B_y[i]) * y[k, i]
                )
            else:
                bad.append((k, i))
    jumps = np.zeros(max(n - 1, 0), dtype=bool)
    if n > 1:
        step = np.nansum(np.abs(np.diff(lam_w, axis=0)) + np.abs(np.diff(b_w, axis=0)), axis=1)
        ref = np.nanmedian(step) + 1e-12
        jumps = step > 10.0 * ref
    return AbsorbingCheckResult(
        feasible=feas, lam_witness=lam_w, b_witness=b_w,
        residuals=res, infeasible=bad, witness_jumps=jumps,
    )


@dataclass
class Theorem3Report:
    ok: bool
    min_margin_s1: np.ndarray  # per axis: min slope_s1 * k_rl over samples
    min_margin_s2: np.ndarray

    def __bool__(self):
        return self.ok


def verify_theorem3(cmap, slopes_s1, slopes_s2, epsilon, k_rl=None):
    """Per-axis slope conditions for the reduced loop.

    Requires ``slope_s1 * K_rl_i > epsilon`` and ``slope_s2 * K_rl_i >
    epsilon`` at every sampled point and axis. Slopes are (n, m) or (m,)
    arrays; ``k_rl`` defaults to the reduced map's effective weight.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    k = cmap.K_rl_eff if k_rl is None else _diag_vector(k_rl, "K_rl", cmap.m)
    d1 = np.atleast_2d(np.asarray(slopes_s1, dtype=float))
    d2 = np.atleast_2d(np.asarray(slopes_s2, dtype=float))
    m1 = (d1 * k).min(axis=0)
    m2 = (d2 * k).min(axis=0)
    return Theorem3Report(
        ok=bool(np.all(m1 > epsilon) and np.all(m2 > epsilon)),
        min_margin_s1=m1,
        min_margin_s2=m2,
    )


def theorem2_substitution(lam_witness, b_witness, k_rl):
    """Per-axis (lambda_i, b_ii) induced by absorbing witnesses.

    With positive witnesses, the reduced loop looks like a diagonal plant
    with lambda_i = -lam~_i b~_i and coupling b_ii = -lam~_i K_rl_i; feeding
    these into the hierarchical block check ties the reduced-loop conditions
    back to the per-axis inequalities.
    """
    lam_w = np.asarray(lam_witness, dtype=float)
    b_w = np.asarray(b_witness, dtype=float)
    k = np.asarray(k_rl, dtype=float)
    return -lam_w * b_w, -lam_w * k


def recover_tracking_error(y_traj, K1, K2, e0, delta_t):
    """Integrates e' = K2^{-1} (y - K1 e) along a sampled y trajectory.

    Uses the exact per-axis update with y held constant over each step.
    Returns an array of shape (len(y_traj) + 1, m) starting at e0.
    """
    y = np.atleast_2d(np.asarray(y_traj, dtype=float))
    K1 = _diag_vector(K1, "K1", y.shape[1])
    K2 = _diag_vector(K2, "K2", y.shape[1])
    if np.any(K2 == 0):
        raise ValueError("K2 must be invertible")
    e = np.zeros((y.shape[0] + 1, y.shape[1]))
    e[0] = np.asarray(e0, dtype=float)
    decay = np.where(K1 != 0, np.exp(-K1 / K2 * delta_t), 1.0)
    for k in range(y.shape[0]):
        drive = np.where(K1 != 0, y[k] / np.where(K1 != 0, K1, 1.0), 0.0)
        e[k + 1] = drive + (e[k] - drive) * decay
        zero = K1 == 0
        if zero.any():
            e[k + 1, zero] = e[k, zero] + delta_t * y[k, zero] / K2[zero]
    return e


@dataclass
class CartesianTrajectory:
    t: np.ndarray
    e: np.ndarray
    edot: np.ndarray
    y: np.ndarray
    ydot: np.ndarray
    zeta: np.ndarray  # raw second-order model error
    zeta_reduced: np.ndarray  # scaled into the reduced equation
    u: np.ndarray

    def absorbing_samples(self):
        return self.y, self.ydot, self.zeta_reduced


class CartesianTestbed:
    """Second-order truth model with an injected smooth bounded error term.

    The nominal first-order reduction (``plant_model``) is what gets
    certified; ``simulate`` rolls out the second-order dynamics

        Lambda_d e'' + K_d e' + K_p e + K_rl u = zeta(e, e')

    with zeta = amplitude * sin(e) * e' per axis, and logs everything the
    absorbing-feasibility check needs.
    """

    def __init__(self, gains, amplitude=0.0, branch="+"):
        self.gains = gains
        self.amplitude = float(amplitude)
        self.cmap = gains_to_first_order(gains, branch=branch)

    def zeta(self, e, edot):
        return self.amplitude * np.sin(e) * edot

    @property
    def plant_model(self):
        cm = self.cmap
        A = np.diag(cm.model_eigenvalues)
        B = np.diag(cm.model_coupling)
        return PlantModel(
            dim_y=cm.m,
            f=lambda y, u, t: A @ np.asarray(y, float) + B @ np.asarray(u, float),
            jac_y=lambda y, u, t: A,
            jac_u=lambda y, u, t: B,
            name="cartesian-reduction",
        )

    @property
    def transform(self):
        """Identity transform: the reduced model is diagonal by construction."""
        return identity_transform(self.cmap.model_eigenvalues, self.cmap.model_coupling)

    def simulate(self, policy, e0, edot0, duration, dt=1e-3):
        """Closed-loop rollout of the second-order truth under ``policy``.

        The policy acts on the composite variable y = K1 e + K2 e' with its
        own integral state; integration is classical RK4 on (e, e', s2).
        """
        cm = self.cmap
        gains = self.gains
        m = cm.m
        e = np.asarray(e0, dtype=float).copy()
        ed = np.asarray(edot0, dtype=float).copy()
        s2 = np.zeros(m)
        n = int(round(duration / dt))

        def deriv(state):
            e_, ed_, s2_ = state[:m], state[m : 2 * m], state[2 * m :]
            y_ = cm.K1 * e_ + cm.K2 * ed_
            u_ = policy.action(y_, s2_)
            z = self.zeta(e_, ed_)
            edd = (z - gains.K_d * ed_ - gains.K_p * e_ - gains.K_rl * u_) / gains.Lambda_d
            return np.concatenate([ed_, edd, y_]), u_, z, edd

        T = np.zeros(n + 1)
        E = np.zeros((n + 1, m))
        ED = np.zeros((n + 1, m))
        Y = np.zeros((n + 1, m))
        YD = np.zeros((n + 1, m))
        Z = np.zeros((n + 1, m))
        U = np.zeros((n + 1, m))
        state = np.concatenate([e, ed, s2])
        for k in range(n + 1):
            d, u_, z_, edd = deriv(state)
            T[k] = k * dt
            E[k] = state[:m]
            ED[k] = state[m : 2 * m]
            Y[k] = cm.K1 * E[k] + cm.K2 * ED[k]
            YD[k] = cm.K1 * ED[k] + cm.K2 * edd
            Z[k] = z_
            U[k] = u_
            if k == n:
                break
            k1 = d
            k2 = deriv(state + 0.5 * dt * k1)[0]
            k3 = deriv(state + 0.5 * dt * k2)[0]
            k4 = deriv(state + dt * k3)[0]
            state = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return CartesianTrajectory(
            t=T, e=E, edot=ED, y=Y, ydot=YD,
            zeta=Z, zeta_reduced=cm.reduction_scale * Z, u=U,
        )


def synthetic_cartesian_plant(gains, amplitude, branch="+"):
    """Testbed wrapping the nominal reduction and the perturbed truth model."""
    return CartesianTestbed(gains, amplitude=amplitude, branch=branch)
