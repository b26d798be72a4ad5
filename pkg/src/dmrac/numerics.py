"""Small dense linear algebra, fixed-step integration and seeded noise.

Everything here works on plain numpy arrays. Matrices are expected to be
small (n <= ~12), so the Lyapunov solver simply vectorizes the equation and
hands the n^2 x n^2 system to a dense LU solve.
"""

import numpy as np

from .errors import (
    DimensionMismatch,
    NegativeVariance,
    NonFiniteDerivative,
    NotHurwitz,
    NotPositiveDefinite,
    NotSymmetric,
)

HURWITZ_MARGIN = 1e-9
JACOBI_TOL = 1e-12


def as_matrix(a, name="matrix"):
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def _check_square(m, name):
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {m.shape}")


def check_symmetric(S, name="matrix", rtol=1e-10):
    S = as_matrix(S, name)
    _check_square(S, name)
    scale = max(1.0, float(np.max(np.abs(S))))
    if np.max(np.abs(S - S.T)) > rtol * scale:
        raise NotSymmetric(f"{name} is not symmetric")
    return S


def is_hurwitz(A, margin=HURWITZ_MARGIN):
    A = as_matrix(A, "A")
    _check_square(A, "A")
    return bool(np.max(np.linalg.eigvals(A).real) < -margin)


def require_hurwitz(A, name="A_rm"):
    A = as_matrix(A, name)
    _check_square(A, name)
    worst = float(np.max(np.linalg.eigvals(A).real))
    if not worst < -HURWITZ_MARGIN:
        raise NotHurwitz(f"{name} has an eigenvalue with real part {worst:.3g} >= 0")
    return A


def jacobi_eigenvalues(S, tol=JACOBI_TOL, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||S||_F)``. Returns the unsorted diagonal.
    """
    a = np.array(check_symmetric(S, "S"), dtype=float)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    target = tol * max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                h = a[q, q] - a[p, p]
                if abs(h) + 100.0 * abs(apq) == abs(h):
                    t = apq / h  # theta huge: t ~ 1 / (2 theta) without overflow
                else:
                    theta = h / (2.0 * apq)
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p and q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
    return np.diag(a).copy()


def sym_eig_bounds(S):
    """Return ``(lambda_min, lambda_max)`` of a symmetric matrix."""
    w = jacobi_eigenvalues(S)
    return float(np.min(w)), float(np.max(w))


def solve_lyapunov(A_rm, Q):
    """Solve ``A_rm^T P + P A_rm + Q = 0`` for symmetric positive-definite P.

    A_rm must be Hurwitz and Q symmetric positive-definite. The equation is
    vectorized (column-major vec) into
    ``(I kron A^T + A^T kron I) vec(P) = -vec(Q)`` and solved by LU, followed
    by one step of iterative refinement.
    """
    A = require_hurwitz(A_rm)
    Q = check_symmetric(Q, "Q")
    if A.shape != Q.shape:
        raise DimensionMismatch(f"A_rm {A.shape} and Q {Q.shape} differ in shape")
    if sym_eig_bounds(Q)[0] <= 0:
        raise NotPositiveDefinite("Q must be positive definite")

    n = A.shape[0]
    eye = np.eye(n)
    kron = np.kron(eye, A.T) + np.kron(A.T, eye)

    def vec(M):
        return M.reshape(-1, order="F")

    def unvec(v):
        return v.reshape(n, n, order="F")

    P = unvec(np.linalg.solve(kron, -vec(Q)))
    P = 0.5 * (P + P.T)
    resid = A.T @ P + P @ A + Q
    P = P + unvec(np.linalg.solve(kron, -vec(resid)))
    P = 0.5 * (P + P.T)
    if sym_eig_bounds(P)[0] <= 0:
        raise NotPositiveDefinite("Lyapunov solution is not positive definite")
    return P


def lyapunov_residual(A_rm, P, Q):
    """Frobenius norm of ``A_rm^T P + P A_rm + Q``."""
    return float(np.linalg.norm(A_rm.T @ P + P @ A_rm + Q))


def rk4_step(f, x, t, dt):
    """One classical Runge-Kutta step of ``x' = f(t, x)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = _finite(f(t, x))
    k2 = _finite(f(t + 0.5 * dt, x + 0.5 * dt * k1))
    k3 = _finite(f(t + 0.5 * dt, x + 0.5 * dt * k2))
    k4 = _finite(f(t + dt, x + dt * k3))
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _finite(d):
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise NonFiniteDerivative("derivative evaluated to a non-finite value")
    return d


def make_rng(seed):
    """Seeded generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def gaussian_vector(rng, variance, dim):
    """I.i.d. zero-mean Gaussian samples with the given variance.

    Always consumes ``dim`` draws so the stream position does not depend on
    the variance.
    """
    if variance < 0:
        raise NegativeVariance(f"variance must be >= 0, got {variance}")
    z = rng.standard_normal(int(dim))
    if variance == 0:
        return np.zeros(int(dim))
    return np.sqrt(variance) * z
