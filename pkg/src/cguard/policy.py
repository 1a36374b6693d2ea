"""The constrained control-policy architecture.

A policy is a coordinate transform, one small MLP per transformed axis fed
with (z_i, sum z_i dt), and the inverse action transform:

    z = W_y y,   v_i = h_i(z_i, s2_i),   u = clip(W_u^{-1} v)

Because each axis network sees only its own pair of inputs, the inner-policy
Jacobians are diagonal by construction, and clamping the weights (hidden
layers positive, head sign opposite to the coupling diagonal) pins the slope
signs that the per-axis contraction inequalities need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nets import Mlp
from .transforms import CoordinateTransform

POLICY_SCHEMA = "cguard-policy-v1"

# |pre-activation| beyond this counts as saturated: slopes there are
# numerically ~0 and excluded from constraint verification.
SATURATION_LIMIT = 6.0


class NonFiniteInput(ValueError):
    pass


class AxisNetwork(Mlp):
    """Per-axis MLP: two inputs (z_i, integral of z_i), one output."""

    def __init__(self, layers):
        super().__init__(layers)
        if self.in_dim != 2:
            raise ValueError(f"axis network must take 2 inputs, got {self.in_dim}")
        if self.out_dim != 1:
            raise ValueError(f"axis network must emit 1 output, got {self.out_dim}")

    @classmethod
    def create(cls, rng, width=32, depth=3, final_scale=1.0):
        sizes = [2] + [width] * depth + [1]
        return super().create(sizes, rng, final_scale=final_scale)


def axis_jacobian(net, s1i, s2i):
    """Analytic slopes (d h/d s1_i, d h/d s2_i) at one input point.

    The slope is the chain product of layer weights and diagonal tanh
    derivative factors; the linear head contributes its weights unscaled.
    """
    out, cache = net.forward(np.array([[s1i, s2i]], dtype=float))
    J = net.input_jacobian(cache)[0, 0]
    return float(J[0]), float(J[1])


def project_weights(net, coupling_sign, epsilon):
    """Returns a new network inside the contracting weight set.

    Hidden-layer weights are clamped to at least ``epsilon``; head weights w
    are forced to satisfy ``sign(w) = -coupling_sign`` with ``|w| >=
    epsilon``. Biases are untouched (they shift saturation, not slope signs).
    Idempotent by construction.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    sign = float(np.sign(coupling_sign))
    if sign == 0:
        raise ValueError("coupling_sign must be nonzero")
    layers = []
    last = net.n_layers - 1
    for j, (W, b) in enumerate(net.layers):
        W = W.copy()
        if j < last:
            W = np.maximum(W, epsilon)
        else:
            if sign > 0:
                W = np.minimum(W, -epsilon)
            else:
                W = np.maximum(W, epsilon)
        layers.append((W, b.copy()))
    return type(net)(layers)


@dataclass
class InnerPolicyState:
    """Integrator state: s1 mirrors the latest z, s2 accumulates z * dt.

    s2 holds the sum over *past* steps only; the current z joins it after
    the action is computed. Reset to zero at episode boundaries.
    """

    s1: np.ndarray
    s2: np.ndarray
    delta_t: float

    @classmethod
    def zeros(cls, m, delta_t):
        return cls(np.zeros(m), np.zeros(m), float(delta_t))

    def reset(self):
        self.s1[:] = 0.0
        self.s2[:] = 0.0


class ConstrainedPolicy:
    """Coordinate transform + integrator + parallel per-axis networks."""

    def __init__(
        self,
        transform: CoordinateTransform,
        axes,
        delta_t,
        epsilon=1e-3,
        action_clip=5.0,
        log_std=None,
    ):
        if len(axes) != transform.m:
            raise ValueError(f"need {transform.m} axis networks, got {len(axes)}")
        self.transform = transform
        self.axes = list(axes)
        self.epsilon = float(epsilon)
        self.action_clip = float(action_clip)
        self.state = InnerPolicyState.zeros(transform.m, delta_t)
        self.log_std = (
            np.zeros(transform.m) if log_std is None else np.array(log_std, dtype=float)
        )

    # ---- basic structure -------------------------------------------------

    @property
    def m(self):
        return self.transform.m

    @property
    def delta_t(self):
        return self.state.delta_t

    @property
    def coupling_signs(self):
        return self.transform.coupling_signs

    def reset(self):
        self.state.reset()

    def clone(self):
        p = ConstrainedPolicy(
            self.transform,
            [ax.copy() for ax in self.axes],
            self.delta_t,
            epsilon=self.epsilon,
            action_clip=self.action_clip,
            log_std=self.log_std.copy(),
        )
        p.state.s1 = self.state.s1.copy()
        p.state.s2 = self.state.s2.copy()
        return p

    def parameters(self):
        """Trainable arrays: every axis layer plus the exploration log-std."""
        out = []
        for ax in self.axes:
            out.extend(ax.parameters())
        out.append(self.log_std)
        return out

    # ---- evaluation ------------------------------------------------------

    def mean_batch(self, s1, s2, dtype=None):
        """Unclipped action mean for a batch: returns (mu (n, m), cache).

        All axis networks share one shape, so they are evaluated as a single
        batched matmul chain (one slab per axis). ``dtype`` selects the
        compute precision; default double.
        """
        s1 = np.atleast_2d(np.asarray(s1, dtype=float))
        s2 = np.atleast_2d(np.asarray(s2, dtype=float))
        x = np.stack([np.column_stack([s1[:, i], s2[:, i]]) for i in range(self.m)])
        from .nets import stacked_forward

        out, cache = stacked_forward(self.axes, x, dtype=dtype)
        mu = out[:, :, 0].T.astype(float) @ self.transform.W_u_inv.T
        return mu, cache

    def backward_mean(self, cache, grad_mu):
        """Backprop d(loss)/d(mu) into per-axis layer grads (list aligned with
        ``parameters()`` minus the trailing log-std)."""
        from .nets import stacked_backward

        grad_v = np.atleast_2d(grad_mu) @ self.transform.W_u_inv
        per_net = stacked_backward(self.axes, cache, grad_v.T[:, :, None])
        grads = []
        for net_grads in per_net:
            for dW, db in net_grads:
                grads.append(dW)
                grads.append(db)
        return grads

    def slopes_batch(self, s1, s2):
        """Analytic per-axis slopes for a batch.

        Returns (d_s1 (n, m), d_s2 (n, m), max |pre-activation| (n, m)).
        """
        s1 = np.atleast_2d(np.asarray(s1, dtype=float))
        s2 = np.atleast_2d(np.asarray(s2, dtype=float))
        n = s1.shape[0]
        d1 = np.empty((n, self.m))
        d2 = np.empty((n, self.m))
        sat = np.empty((n, self.m))
        for i, ax in enumerate(self.axes):
            _, cache = ax.forward(np.column_stack([s1[:, i], s2[:, i]]))
            J = ax.input_jacobian(cache)
            d1[:, i] = J[:, 0, 0]
            d2[:, i] = J[:, 0, 1]
            sat[:, i] = ax.max_abs_preactivation(cache)
        return d1, d2, sat

    def axis_slopes(self, s1, s2):
        """Slope vectors (d_s1, d_s2), each of length m, at a single point."""
        d1, d2, _ = self.slopes_batch(
            np.asarray(s1, float)[None, :], np.asarray(s2, float)[None, :]
        )
        return d1[0], d2[0]

    def action(self, y, s2):
        """Stateless clipped action at (y, s2) — used by certification."""
        y = np.asarray(y, dtype=float)
        s1 = self.transform.W_y @ y
        mu, _ = self.mean_batch(s1[None, :], np.asarray(s2, float)[None, :])
        return np.clip(mu[0], -self.action_clip, self.action_clip)

    def forward(self, y):
        """Stateful forward pass: transforms, evaluates, clips, integrates.

        Returns ``(u, cache)`` where the cache carries the network
        activations, the unclipped mean, and the (s1, s2) the networks saw.
        Raises NonFiniteInput for non-finite observations.
        """
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise NonFiniteInput(f"non-finite policy input {y}")
        s1 = self.transform.W_y @ y
        s2 = self.state.s2.copy()
        mu, caches = self.mean_batch(s1[None, :], s2[None, :])
        u = np.clip(mu[0], -self.action_clip, self.action_clip)
        self.state.s1 = s1
        self.state.s2 = self.state.s2 + s1 * self.delta_t
        return u, {"caches": caches, "mean": mu[0], "s1": s1, "s2": s2}

    def __call__(self, y):
        return self.forward(y)[0]

    # ---- constraints -----------------------------------------------------

    def project(self):
        """Clamps every axis network into the contracting weight set."""
        signs = self.coupling_signs
        self.axes = [
            project_weights(ax, signs[i], self.epsilon) for i, ax in enumerate(self.axes)
        ]
        return self

    # ---- serialization ---------------------------------------------------

    def to_dict(self):
        return {
            "schema": POLICY_SCHEMA,
            "m": self.m,
            "delta_t": self.delta_t,
            "epsilon": self.epsilon,
            "action_clip": self.action_clip,
            "coupling_signs": self.coupling_signs.tolist(),
            "log_std": self.log_std.tolist(),
            "transform": self.transform.to_dict(),
            "axes": [
                {
                    "shapes": [list(W.shape) for W, _ in ax.layers],
                    "layers": [
                        {"w": W.ravel().tolist(), "b": b.tolist()} for W, b in ax.layers
                    ],
                }
                for ax in self.axes
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != POLICY_SCHEMA:
            raise ValueError(f"unsupported policy schema {d.get('schema')!r}")
        transform = CoordinateTransform.from_dict(d["transform"])
        axes = []
        for ax in d["axes"]:
            layers = []
            for shape, layer in zip(ax["shapes"], ax["layers"]):
                W = np.array(layer["w"], dtype=float).reshape(shape)
                layers.append((W, np.array(layer["b"], dtype=float)))
            axes.append(AxisNetwork(layers))
        return cls(
            transform,
            axes,
            d["delta_t"],
            epsilon=d["epsilon"],
            action_clip=d["action_clip"],
            log_std=np.array(d["log_std"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def policy_forward(policy, y):
    """Module-level alias for the stateful forward pass."""
    return policy.forward(y)


@dataclass
class ConstraintReport:
    ok: bool
    worst_margin_s1: np.ndarray  # per axis: max over grid of d_s1*b + eps'
    worst_margin_s2: np.ndarray
    eps_prime: np.ndarray
    saturated_fraction: float
    n_points: int
    n_saturated: int

    def summary(self):
        return {
            "ok": bool(self.ok),
            "worst_margin_s1": self.worst_margin_s1.tolist(),
            "worst_margin_s2": self.worst_margin_s2.tolist(),
            "eps_prime": self.eps_prime.tolist(),
            "saturated_fraction": self.saturated_fraction,
            "n_points": self.n_points,
            "n_saturated": self.n_saturated,
        }


def verify_constraint_satisfaction(policy, grid_points, epsilon=None):
    """Checks the slope inequalities over a grid of (s1, s2) inputs.

    ``grid_points`` is an (n, 2m) array (s1 columns then s2 columns) or any
    iterable of such rows. Saturated points (any |pre-activation| above
    SATURATION_LIMIT) are excluded from the margins and counted separately.

    The quantitative margin eps' is derived, not assumed: with head width k,
    hidden chain floor eps1 (measured over the non-saturated grid) and weight
    bound eps, each axis must satisfy slope*b < -k*eps1*eps*|b|.
    """
    eps_w = policy.epsilon if epsilon is None else float(epsilon)
    pts = np.atleast_2d(np.asarray(list(grid_points), dtype=float))
    m = policy.m
    if pts.shape[1] != 2 * m:
        raise ValueError(f"grid points must have 2m = {2 * m} columns")
    s1 = pts[:, :m]
    s2 = pts[:, m:]
    b = policy.transform.coupling_diag

    d1, d2, sat = policy.slopes_batch(s1, s2)
    saturated = sat > SATURATION_LIMIT
    n_sat = int(saturated.any(axis=1).sum())

    eps1 = np.zeros(m)
    worst1 = np.full(m, -np.inf)
    worst2 = np.full(m, -np.inf)
    eps_prime = np.zeros(m)
    ok = True
    for i, ax in enumerate(policy.axes):
        mask = ~saturated[:, i]
        if not mask.any():
            # vacuous on a fully saturated grid for this axis
            continue
        _, cache = ax.forward(np.column_stack([s1[mask, i], s2[mask, i]]))
        k = ax.layers[-1][0].shape[1]
        chain = ax.hidden_chain(cache, 0)
        eps1[i] = float(chain.min())
        eps_prime[i] = k * max(eps1[i], 0.0) * eps_w * abs(b[i])
        m1 = d1[mask, i] * b[i]
        m2 = d2[mask, i] * b[i]
        worst1[i] = float((m1 + eps_prime[i]).max())
        worst2[i] = float((m2 + eps_prime[i]).max())
        if worst1[i] >= 0.0 or worst2[i] >= 0.0:
            ok = False
    return ConstraintReport(
        ok=ok,
        worst_margin_s1=worst1,
        worst_margin_s2=worst2,
        eps_prime=eps_prime,
        saturated_fraction=n_sat / len(pts),
        n_points=len(pts),
        n_saturated=n_sat,
    )
