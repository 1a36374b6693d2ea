"""Coordinate transforms that diagonalize / triangularize closed-loop dynamics.

``W_y`` diagonalizes the state Jacobian, ``W_u`` triangularizes the coupling
``W_y (df/du) W_u^{-1}``. With both in place, per-axis inequalities on the
inner-policy slopes suffice for whole-system contraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EIG_SEPARATION = 1e-8
DIAGONALIZATION_TOL = 1e-8
TRIANGULARITY_TOL = 1e-10
COUPLING_ZERO_TOL = 1e-10
INVERTIBILITY_TOL = 1e-10


class TransformError(ValueError):
    """Base class for transform-construction failures."""


class NonDiagonalizable(TransformError):
    """Eigenvalues cluster below the separation threshold."""


class ComplexEigenvalues(TransformError):
    """The state Jacobian has complex eigenvalues; only real spectra are handled."""


class SingularInput(TransformError):
    """A matrix that must be invertible is (numerically) rank deficient."""


class ZeroCouplingDiagonal(TransformError):
    """Some action channel has no influence on its axis (b_ii ~ 0)."""


class PivotFailure(TransformError):
    """Pivot-free LU hit a (near) zero pivot."""


def skew_permutation(m):
    """Permutation with ones on the anti-diagonal (its own inverse/transpose)."""
    return np.eye(m)[::-1].copy()


def _min_singular_ratio(A):
    s = np.linalg.svd(A, compute_uv=False)
    return s[-1] / max(s[0], 1e-300)


def build_Wy(jac_y_value):
    """Left eigenvector transform of the state Jacobian.

    Returns ``(W_y, eigenvalues)`` such that ``W_y @ A @ inv(W_y)`` is the
    diagonal eigenvalue matrix. Rows are unit-norm left eigenvectors, ordered
    by descending eigenvalue; each row's sign is fixed so its
    largest-magnitude entry is positive, which pins down the downstream
    coupling signs deterministically.

    Raises ComplexEigenvalues / NonDiagonalizable for spectra outside the
    supported class (real, separated by more than 1e-8).
    """
    A = np.array(jac_y_value, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("jac_y_value must be square")
    w, V = np.linalg.eig(A)
    scale = max(1.0, np.abs(w).max())
    if np.iscomplexobj(w):
        if np.abs(w.imag).max() > EIG_SEPARATION * scale:
            raise ComplexEigenvalues(
                f"complex eigenvalues (max imag {np.abs(w.imag).max():.3e})"
            )
        w = w.real
        V = V.real
    m = A.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            if abs(w[i] - w[j]) < EIG_SEPARATION:
                raise NonDiagonalizable(
                    f"eigenvalues {w[i]:.6g} and {w[j]:.6g} closer than {EIG_SEPARATION}"
                )
    order = np.argsort(-w, kind="stable")
    w = w[order]
    V = V[:, order]
    Wy = np.linalg.inv(V)
    norms = np.linalg.norm(Wy, axis=1)
    Wy = Wy / norms[:, None]
    for i in range(m):
        k = int(np.argmax(np.abs(Wy[i])))
        if Wy[i, k] < 0:
            Wy[i] = -Wy[i]
    return Wy, w


def build_Wu_qr(W_y, jac_u_value):
    """Action transform via QR of the reversed coupling.

    With ``P`` the anti-diagonal permutation and ``X = P (W_y jac_u)``, the
    factorization ``X^T = Q R`` yields ``W_u = P Q^T`` and the coupling
    ``B = W_y jac_u W_u^{-1} = P R^T P``, which is upper triangular. ``R``'s
    diagonal is canonicalized positive so the construction (and hence the
    signs of ``b_ii``) is deterministic.
    """
    W_y = np.asarray(W_y, dtype=float)
    Y = W_y @ np.asarray(jac_u_value, dtype=float)
    m = Y.shape[0]
    if Y.shape != (m, m):
        raise ValueError("W_y @ jac_u must be square")
    if _min_singular_ratio(Y) <= INVERTIBILITY_TOL:
        raise SingularInput("W_y @ jac_u is rank deficient")
    P = skew_permutation(m)
    X = P @ Y
    Q, R = np.linalg.qr(X.T)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    Q = Q * signs[None, :]
    R = R * signs[:, None]
    W_u = P @ Q.T
    B = P @ R.T @ P
    B[np.tril_indices(m, -1)] = np.where(
        np.abs(B[np.tril_indices(m, -1)]) < TRIANGULARITY_TOL,
        0.0,
        B[np.tril_indices(m, -1)],
    )
    if np.abs(np.tril(B, -1)).max(initial=0.0) > TRIANGULARITY_TOL:
        raise TransformError("coupling matrix failed to come out upper triangular")
    if np.abs(np.diag(B)).min() <= COUPLING_ZERO_TOL:
        raise ZeroCouplingDiagonal(
            "coupling diagonal has a ~0 entry: this axis cannot be influenced by the policy"
        )
    return W_u, B


def _lu_no_pivot(A):
    A = np.array(A, dtype=float)
    n = A.shape[0]
    L = np.eye(n)
    U = A.copy()
    scale = max(1.0, np.abs(A).max())
    for k in range(n - 1):
        if abs(U[k, k]) <= 1e-12 * scale:
            raise PivotFailure(f"zero pivot at position {k} (no pivoting is used)")
        factors = U[k + 1 :, k] / U[k, k]
        L[k + 1 :, k] = factors
        U[k + 1 :, :] -= factors[:, None] * U[k, :]
    if abs(U[n - 1, n - 1]) <= 1e-12 * scale:
        raise PivotFailure(f"zero pivot at position {n - 1} (no pivoting is used)")
    return L, np.triu(U)


def build_Wu_lu(W_y, jac_u_value):
    """Action transform via pivot-free LU of the doubly-reversed coupling.

    ``P (W_y jac_u) P = L U`` gives ``W_u = P U P`` and ``B = P L P``. The
    reversal conjugation transposes triangularity, so the resulting B is
    *upper* triangular with unit diagonal (all scale information moves into
    W_u). No row pivoting is performed; a zero pivot raises PivotFailure.
    """
    W_y = np.asarray(W_y, dtype=float)
    Y = W_y @ np.asarray(jac_u_value, dtype=float)
    m = Y.shape[0]
    if _min_singular_ratio(Y) <= INVERTIBILITY_TOL:
        raise SingularInput("W_y @ jac_u is rank deficient")
    P = skew_permutation(m)
    L, U = _lu_no_pivot(P @ Y @ P)
    W_u = P @ U @ P
    B = P @ L @ P
    if np.abs(np.tril(B, -1)).max(initial=0.0) > TRIANGULARITY_TOL:
        raise TransformError("LU coupling matrix failed to come out upper triangular")
    return W_u, B


@dataclass
class CoordinateTransform:
    """Invertible pair (W_y, W_u) plus the derived spectrum and coupling.

    ``coupling_matrix`` is ``B = W_y (df/du) W_u^{-1}``; its diagonal signs
    drive the weight projection of the constrained policy.
    """

    W_y: np.ndarray
    W_u: np.ndarray
    eigenvalues: np.ndarray
    coupling_matrix: np.ndarray
    W_y_inv: np.ndarray = field(default=None, repr=False)
    W_u_inv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.W_y = np.array(self.W_y, dtype=float)
        self.W_u = np.array(self.W_u, dtype=float)
        self.eigenvalues = np.array(self.eigenvalues, dtype=float)
        self.coupling_matrix = np.array(self.coupling_matrix, dtype=float)
        if self.W_y_inv is None:
            self.W_y_inv = np.linalg.inv(self.W_y)
        if self.W_u_inv is None:
            self.W_u_inv = np.linalg.inv(self.W_u)

    @property
    def m(self):
        return self.W_y.shape[0]

    @property
    def coupling_diag(self):
        return np.diag(self.coupling_matrix).copy()

    @property
    def coupling_signs(self):
        return np.sign(self.coupling_diag)

    def validate(self, jac_y_value=None):
        """Checks the structural invariants; returns self for chaining."""
        for name, M in (("W_y", self.W_y), ("W_u", self.W_u)):
            if np.linalg.svd(M, compute_uv=False)[-1] <= INVERTIBILITY_TOL:
                raise SingularInput(f"{name} is numerically singular")
        if jac_y_value is not None:
            D = self.W_y @ np.asarray(jac_y_value, float) @ self.W_y_inv
            off = np.abs(D - np.diag(np.diag(D))).max()
            if off > DIAGONALIZATION_TOL:
                raise TransformError(f"W_y does not diagonalize jac_y (off-diag {off:.2e})")
        if np.abs(np.tril(self.coupling_matrix, -1)).max(initial=0.0) > TRIANGULARITY_TOL:
            raise TransformError("coupling matrix is not upper triangular")
        if np.abs(self.coupling_diag).min() <= COUPLING_ZERO_TOL:
            raise ZeroCouplingDiagonal("coupling diagonal contains a ~0 entry")
        return self

    def to_dict(self):
        return {
            "W_y": self.W_y.tolist(),
            "W_u": self.W_u.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "coupling_matrix": self.coupling_matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            W_y=np.array(d["W_y"]),
            W_u=np.array(d["W_u"]),
            eigenvalues=np.array(d["eigenvalues"]),
            coupling_matrix=np.array(d["coupling_matrix"]),
        )


def build_transform(jac_y_value, jac_u_value, method="qr"):
    """Builds the full transform at one linearization point.

    ``method`` selects the W_u construction: "qr" (default) or "lu".
    """
    Wy, eigs = build_Wy(jac_y_value)
    if method == "qr":
        Wu, B = build_Wu_qr(Wy, jac_u_value)
    elif method == "lu":
        Wu, B = build_Wu_lu(Wy, jac_u_value)
    else:
        raise ValueError(f"unknown method {method!r}")
    return CoordinateTransform(Wy, Wu, eigs, B)


def identity_transform(eigenvalues, coupling_diag):
    """Transform for plants that are already diagonal (W_y = W_u = I).

    Used by the composite-variable pipeline where the reduced model is
    diagonal by construction and the coupling is the diagonal of df/du.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    coupling_diag = np.asarray(coupling_diag, dtype=float)
    m = eigenvalues.size
    if np.abs(coupling_diag).min() <= COUPLING_ZERO_TOL:
        raise ZeroCouplingDiagonal("coupling diagonal contains a ~0 entry")
    return CoordinateTransform(
        W_y=np.eye(m),
        W_u=np.eye(m),
        eigenvalues=eigenvalues,
        coupling_matrix=np.diag(coupling_diag),
    )


def transform_from_plant(plant, y0, u0, t0=0.0, method="qr"):
    """Convenience: build the transform at a nominal operating point."""
    jy = plant.jac_y(np.asarray(y0, float), np.asarray(u0, float), t0)
    ju = plant.jac_u(np.asarray(y0, float), np.asarray(u0, float), t0)
    return build_transform(jy, ju, method=method)
