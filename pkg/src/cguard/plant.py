"""First-order plant models with evaluable Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


def finite_difference_jacobian(fn, x, eps=1e-6):
    """Central-difference Jacobian of ``fn`` at ``x`` (both 1-D arrays)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        step = eps * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        J[:, j] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * step)
    return J


@dataclass
class PlantModel:
    """Square first-order system  ydot = f(y, u, t)  with analytic Jacobians.

    ``dim_u`` equals ``dim_y``: the architecture pairs every state axis with
    one action channel.
    """

    dim_y: int
    f: Callable
    jac_y: Callable
    jac_u: Callable
    name: str = ""

    @property
    def dim_u(self):
        return self.dim_y

    def check_jacobians(self, points, rel_tol=1e-5):
        """Compare analytic Jacobians against central differences.

        ``points`` is an iterable of (y, u, t). Returns the worst relative
        error seen; raises ValueError when it exceeds ``rel_tol``.
        """
        worst = 0.0
        for y, u, t in points:
            y = np.asarray(y, dtype=float)
            u = np.asarray(u, dtype=float)
            fy = np.asarray(self.jac_y(y, u, t))
            fu = np.asarray(self.jac_u(y, u, t))
            if fy.shape != (self.dim_y, self.dim_y) or fu.shape != (self.dim_y, self.dim_y):
                raise ValueError("jacobian shape mismatch")
            fy_num = finite_difference_jacobian(lambda yy: self.f(yy, u, t), y)
            fu_num = finite_difference_jacobian(lambda uu: self.f(y, uu, t), u)
            scale_y = max(1.0, np.abs(fy_num).max())
            scale_u = max(1.0, np.abs(fu_num).max())
            worst = max(
                worst,
                np.abs(fy - fy_num).max() / scale_y,
                np.abs(fu - fu_num).max() / scale_u,
            )
        if worst > rel_tol:
            raise ValueError(f"analytic jacobian deviates from finite differences: {worst:.3e}")
        return worst


def linear_plant(A, B, name="linear"):
    """Plant  ydot = A y + B u  with constant Jacobians."""
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float)
    if A.shape != B.shape or A.shape[0] != A.shape[1]:
        raise ValueError("A and B must be square and equally sized")
    m = A.shape[0]
    return PlantModel(
        dim_y=m,
        f=lambda y, u, t: A @ np.asarray(y, float) + B @ np.asarray(u, float),
        jac_y=lambda y, u, t: A,
        jac_u=lambda y, u, t: B,
        name=name,
    )
