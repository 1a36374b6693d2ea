"""Contraction certification of closed loops via generalized Jacobians.

The closed-loop differential dynamics in the transformed coordinates are
split into a structural part F1 (plant + policy slopes) and a time-varying
part F2 (driven by the derivative of W_y, zero under the standing
assumption that the transform is frozen). The loop is certified on a finite
sample grid: a grid pass is necessary evidence, not a proof over the
continuum — callers should treat failures as disproof and passes as strong
numerical support.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .transforms import build_transform


class SingularTheta(ValueError):
    """The metric factor Theta is not invertible."""


class DimensionMismatch(ValueError):
    pass


def generalized_jacobian(J, Theta, Theta_dot):
    """F = (Theta_dot + Theta J) Theta^{-1}: the Jacobian in the metric Theta^T Theta."""
    J = np.asarray(J, dtype=float)
    Theta = np.asarray(Theta, dtype=float)
    Theta_dot = np.asarray(Theta_dot, dtype=float)
    if J.shape != Theta.shape or Theta.shape != Theta_dot.shape:
        raise DimensionMismatch("J, Theta, Theta_dot must share one square shape")
    s = np.linalg.svd(Theta, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1.0):
        raise SingularTheta("Theta is numerically singular")
    # F Theta = Theta_dot + Theta J, solved without forming the inverse
    rhs = Theta_dot + Theta @ J
    return np.linalg.solve(Theta.T, rhs.T).T


def uniformly_negative(M, margin):
    """True iff the largest eigenvalue of M + M^T is below -margin."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch("M must be square")
    return bool(np.linalg.eigvalsh(M + M.T).max() < -float(margin))


def symmetric_max_eig(M):
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh(M + M.T).max())


def assemble_F(plant_jacs, transform, policy_jacs, wy_dot=None):
    """Builds the (F1, F2) split of the closed-loop generalized Jacobian.

    ``plant_jacs`` is ``(df/dy, df/du)``; ``policy_jacs`` is the pair of
    per-axis slope vectors ``(d_s1, d_s2)`` (the inner policy is per-axis, so
    both Jacobians are diagonal). ``wy_dot`` feeds F2 and defaults to zero.
    """
    fy, fu = (np.asarray(a, dtype=float) for a in plant_jacs)
    d1, d2 = (np.asarray(a, dtype=float).ravel() for a in policy_jacs)
    m = transform.m
    if fy.shape != (m, m) or fu.shape != (m, m):
        raise DimensionMismatch(f"plant jacobians must be {m}x{m}")
    if d1.size != m or d2.size != m:
        raise DimensionMismatch(f"policy slope vectors must have length {m}")
    A = transform.W_y @ fy @ transform.W_y_inv
    B = transform.W_y @ fu @ transform.W_u_inv
    D1 = np.diag(d1)
    D2 = np.diag(d2)
    F1 = np.block([[A, B], [D1 @ A + D2, D1 @ B]])
    if wy_dot is None:
        F2 = np.zeros((2 * m, 2 * m))
    else:
        wy_dot = np.asarray(wy_dot, dtype=float)
        if wy_dot.shape != (m, m):
            raise DimensionMismatch(f"wy_dot must be {m}x{m}")
        G = wy_dot @ transform.W_y_inv
        F2 = np.block([[G, np.zeros((m, m))], [D1 @ G, np.zeros((m, m))]])
    return F1, F2


@dataclass
class AxisBlockVerdict:
    axis: int
    ok: bool
    margin_s1: float  # d_s1 * b_ii + lambda_i  (must be < -epsilon)
    margin_s2: float  # d_s2 * b_ii             (must be < -epsilon)
    block: np.ndarray
    raw_sym_max_eig: float
    scaled_sym_max_eig: float
    scaling: float


@dataclass
class BlockCheckResult:
    ok: bool
    axes: list

    def __iter__(self):
        return iter(self.axes)


def _best_diagonal_scaling(block):
    """Searches diag(1, t) conjugations for the most negative symmetric part.

    The per-axis block is negative definite in *some* constant metric whenever
    the slope inequalities hold with the projected sign structure; a diagonal
    rescaling of the v-coordinate is enough in that regime. Returns
    (max_eig, t).
    """
    lam, b = block[0]
    c, g = block[1]
    candidates = [1.0]
    if abs(c) > 1e-300 and b * c < 0:
        candidates.append(np.sqrt(-b / c))
    if abs(c) > 1e-300 and b * c > 0:
        candidates.append(np.sqrt(b / c))
    candidates.extend(np.logspace(-6, 6, 121))
    best = (np.inf, 1.0)
    for t in candidates:
        scaled = np.array([[lam, b / t], [t * c, g]])
        mx = symmetric_max_eig(scaled)
        if mx < best[0]:
            best = (mx, float(t))
    return best


def check_hierarchical_blocks(lambdas, b_diag, policy_jacs, epsilon):
    """Per-axis slope inequalities of the hierarchical (block-triangular) form.

    Axis i passes iff ``d_s1[i]*b[i] + lambda[i] < -epsilon`` and
    ``d_s2[i]*b[i] < -epsilon``. Off-diagonal blocks are bounded whenever the
    slopes and coupling entries are finite, which the inputs guarantee.

    Each verdict also carries the symmetric-part margin of the raw 2x2 block
    and of its best diagonally rescaled conjugate: the raw symmetric part may
    be indefinite even for passing axes, while the rescaled one is negative
    whenever the inequalities hold with sign-structured slopes.
    """
    lambdas = np.asarray(lambdas, dtype=float).ravel()
    b_diag = np.asarray(b_diag, dtype=float).ravel()
    d1, d2 = (np.asarray(a, dtype=float).ravel() for a in policy_jacs)
    m = lambdas.size
    if not (b_diag.size == d1.size == d2.size == m):
        raise DimensionMismatch("lambdas, b_diag and slope vectors must share length")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    axes = []
    for i in range(m):
        m1 = d1[i] * b_diag[i] + lambdas[i]
        m2 = d2[i] * b_diag[i]
        block = np.array(
            [
                [lambdas[i], b_diag[i]],
                [d1[i] * lambdas[i] + d2[i], d1[i] * b_diag[i]],
            ]
        )
        raw = symmetric_max_eig(block)
        scaled, t = _best_diagonal_scaling(block)
        axes.append(
            AxisBlockVerdict(
                axis=i,
                ok=bool(m1 < -epsilon and m2 < -epsilon),
                margin_s1=float(m1),
                margin_s2=float(m2),
                block=block,
                raw_sym_max_eig=raw,
                scaled_sym_max_eig=scaled,
                scaling=t,
            )
        )
    return BlockCheckResult(ok=all(a.ok for a in axes), axes=axes)


@dataclass
class RegionGrid:
    """Axis-aligned box over (state, integrator-state) sampled on a grid.

    ``points_per_dim`` defaults to 17. Grid certification is necessary-not-
    sufficient: it samples the region, it does not cover it.
    """

    y_min: np.ndarray
    y_max: np.ndarray
    s2_min: np.ndarray
    s2_max: np.ndarray
    points_per_dim: int = 17
    t: float = 0.0

    def __post_init__(self):
        self.y_min = np.atleast_1d(np.asarray(self.y_min, dtype=float))
        self.y_max = np.atleast_1d(np.asarray(self.y_max, dtype=float))
        self.s2_min = np.atleast_1d(np.asarray(self.s2_min, dtype=float))
        self.s2_max = np.atleast_1d(np.asarray(self.s2_max, dtype=float))
        if self.y_min.shape != self.y_max.shape or self.s2_min.shape != self.s2_max.shape:
            raise DimensionMismatch("box bounds must pair up")
        if self.points_per_dim < 1:
            raise ValueError("points_per_dim must be >= 1")

    @property
    def m(self):
        return self.y_min.size

    def _axis(self, lo, hi):
        if self.points_per_dim == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, self.points_per_dim)

    def points(self):
        """Yields (y, s2) pairs in deterministic C order."""
        axes = [self._axis(lo, hi) for lo, hi in zip(self.y_min, self.y_max)]
        axes += [self._axis(lo, hi) for lo, hi in zip(self.s2_min, self.s2_max)]
        m = self.m
        for combo in itertools.product(*axes):
            arr = np.array(combo)
            yield arr[:m], arr[m:]

    def n_points(self):
        return self.points_per_dim ** (self.m + self.s2_min.size)


@dataclass
class CertificatePoint:
    y: np.ndarray
    s2: np.ndarray
    u: np.ndarray
    t: float
    f1_margin: float
    margin: float
    ok: bool
    error: str = None


@dataclass
class ContractionCertificate:
    """Grid evaluation record: per-sample margins plus the overall verdict.

    The verdict is a pass iff every grid point satisfies
    ``max_eig(F1 + F1^T) < -(epsilon + max(nu_plus, 0))`` with ``nu_plus``
    the grid-wide bound on ``max_eig(F2 + F2^T)``. A pass implies
    ``max_eig(F + F^T) < -epsilon`` at every point, which the ``margin``
    field records.
    """

    epsilon: float
    nu_plus: float
    points: list
    verdict: bool
    mode: str = "rebuild"

    @property
    def margins(self):
        return np.array([p.margin for p in self.points])

    @property
    def f1_margins(self):
        return np.array([p.f1_margin for p in self.points])

    @property
    def samples(self):
        return [(p.y, p.u, p.t) for p in self.points]

    def to_dict(self):
        grid = []
        for p in self.points:
            entry = {
                "point": {
                    "y": np.asarray(p.y).tolist(),
                    "s2": np.asarray(p.s2).tolist(),
                    "u": np.asarray(p.u).tolist() if p.u is not None else None,
                    "t": p.t,
                },
                "f1_margin": p.f1_margin,
                "margin": p.margin,
                "ok": p.ok,
            }
            if p.error:
                entry["error"] = p.error
            grid.append(entry)
        return {
            "epsilon": self.epsilon,
            "nu_plus": self.nu_plus,
            "grid": grid,
            "verdict": "pass" if self.verdict else "fail",
            "mode": self.mode,
        }

    def to_json(self, indent=None):
        return json.dumps(self.to_dict(), indent=indent)


def certify_theorem1(
    plant,
    policy,
    region,
    epsilon,
    transform_builder=None,
    rebuild=True,
    wydot_fn=None,
):
    """Certifies the closed loop (plant + constrained policy) over a region.

    For each grid point the policy action and slopes are evaluated, the
    transform is rebuilt at the local linearization (or the policy's frozen
    transform is reused when ``rebuild`` is False), and the (F1, F2) split is
    scored. Construction failures at individual points are recorded on the
    certificate and fail that point rather than aborting the sweep.

    ``wydot_fn(y, u, t) -> m x m`` optionally supplies a transform-derivative
    estimate; it feeds F2 (hence nu_plus) for diagnostics.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pts = list(region.points())
    if not pts:
        raise ValueError("region grid is empty")
    builder = transform_builder or (lambda jy, ju: build_transform(jy, ju, method="qr"))

    records = []
    f2_bound = 0.0
    for y, s2 in pts:
        t = region.t
        try:
            u = policy.action(y, s2)
            jy = np.asarray(plant.jac_y(y, u, t), dtype=float)
            ju = np.asarray(plant.jac_u(y, u, t), dtype=float)
            tf = builder(jy, ju) if rebuild else policy.transform
            s1 = tf.W_y @ y
            d1, d2 = policy.axis_slopes(s1, s2)
            wy_dot = wydot_fn(y, u, t) if wydot_fn is not None else None
            F1, F2 = assemble_F((jy, ju), tf, (d1, d2), wy_dot=wy_dot)
            f1_margin = symmetric_max_eig(F1)
            f2_margin = symmetric_max_eig(F2) if wy_dot is not None else 0.0
            margin = symmetric_max_eig(F1 + F2)
            f2_bound = max(f2_bound, f2_margin)
            records.append([y, s2, u, t, f1_margin, margin, None])
        except Exception as exc:  # noqa: BLE001 - per-point failures are data
            records.append([y, s2, None, t, np.inf, np.inf, f"{type(exc).__name__}: {exc}"])

    nu_plus = f2_bound
    threshold = -(epsilon + max(nu_plus, 0.0))
    points = []
    for y, s2, u, t, f1_margin, margin, err in records:
        ok = err is None and f1_margin < threshold
        points.append(
            CertificatePoint(
                y=y, s2=s2, u=u, t=t, f1_margin=float(f1_margin), margin=float(margin), ok=ok, error=err
            )
        )
    verdict = all(p.ok for p in points)
    return ContractionCertificate(
        epsilon=float(epsilon),
        nu_plus=float(nu_plus),
        points=points,
        verdict=verdict,
        mode="rebuild" if rebuild else "fixed",
    )
