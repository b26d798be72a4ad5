"""Fast outer-layer adaptation and the total control law.

Conventions: tracking error e = x_rm - x, control u = -K x + K_r r - nu_ad,
nu_ad = W^T Phi(x). With these, the closed-loop error obeys

    e' = A_rm e - B (W* - W)^T Phi(x) - B eps(x)

so the weight law that cancels the cross term in
V = e^T P e + tr(W~^T Gamma^-1 W~) / 2 is

    W' = Gamma proj(W, -2 Phi(x) e^T P B).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite
from .numerics import as_matrix, check_symmetric, solve_lyapunov, sym_eig_bounds


@dataclass(frozen=True)
class OuterWeights:
    W: np.ndarray  # (k, m)
    bound: float = float("inf")
    eps_proj: float = 0.1

    def __post_init__(self):
        W = np.array(np.atleast_2d(self.W), dtype=float)
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        if not self.bound > 0 or not self.eps_proj > 0:
            raise ValueError("projection bound and softness must be positive")

    @property
    def norm(self):
        return float(np.linalg.norm(self.W))

    @property
    def max_norm(self):
        """Largest norm the projection admits (the f(W) = 1 shell)."""
        return self.bound * np.sqrt(1.0 + self.eps_proj)


@dataclass(frozen=True)
class GainSet:
    K: np.ndarray  # (m, n)
    K_r: np.ndarray  # (m, r)
    Gamma: np.ndarray  # (k, k)
    P: np.ndarray  # (n, n)
    Q: np.ndarray  # (n, n)


def make_gains(A_rm, K, K_r, Gamma, Q):
    """GainSet with P solved from ``A_rm^T P + P A_rm + Q = 0``."""
    Gamma = check_symmetric(Gamma, "Gamma")
    if sym_eig_bounds(Gamma)[0] <= 0:
        raise NotPositiveDefinite("Gamma must be positive definite")
    Q = check_symmetric(Q, "Q")
    P = solve_lyapunov(A_rm, Q)
    arrays = [as_matrix(K, "K"), as_matrix(K_r, "K_r"), Gamma, P, Q]
    for a in arrays:
        a.setflags(write=False)
    return GainSet(*arrays)


def tracking_error(x_rm, x):
    x_rm = np.asarray(x_rm, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_rm.shape != x.shape:
        raise DimensionMismatch(f"x_rm {x_rm.shape} vs x {x.shape}")
    return x_rm - x


def adaptive_term(weights, phi):
    W = weights.W if isinstance(weights, OuterWeights) else np.atleast_2d(weights)
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (W.shape[0],):
        raise DimensionMismatch(f"feature size {phi.shape} vs weight rows {W.shape[0]}")
    return W.T @ phi


def total_control(gains, x, r, nu_ad):
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    nu_ad = np.asarray(nu_ad, dtype=float)
    if gains.K.shape[1] != x.shape[0] or gains.K_r.shape[1] != r.shape[0] or nu_ad.shape != (gains.K.shape[0],):
        raise DimensionMismatch("control dimensions disagree with gains")
    return -gains.K @ x + gains.K_r @ r - nu_ad


def raw_update_direction(phi, e, P, B):
    """``Phi (e^T P B)``, a k x m matrix."""
    phi = np.asarray(phi, dtype=float)
    e = np.asarray(e, dtype=float)
    if P.shape != (e.shape[0], e.shape[0]) or B.shape[0] != e.shape[0]:
        raise DimensionMismatch(f"e {e.shape}, P {P.shape}, B {B.shape} incompatible")
    return np.outer(phi, e @ P @ B)


def adaptation_direction(phi, e, P, B):
    """Descent direction of the weight law (before Gamma and projection)."""
    return -2.0 * raw_update_direction(phi, e, P, B)


def _project(W, Y, bound, eps):
    if not np.isfinite(bound):
        return Y
    b2 = bound * bound
    f = (np.sum(W * W) - b2) / (eps * b2)
    if f <= 0:
        return Y
    grad = (2.0 / (eps * b2)) * W
    g_dot_y = float(np.sum(grad * Y))
    if g_dot_y <= 0:
        return Y
    return Y - f * (g_dot_y / float(np.sum(grad * grad))) * grad


def project(weights, Y):
    """Smooth norm projection of an update direction.

    With f(W) = (||W||^2 - W_b^2) / (eps W_b^2): inside the ball or for
    inward directions Y is returned unchanged; otherwise the outward
    component along grad f is scaled down by f, vanishing on the f = 1 shell.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.shape != weights.W.shape:
        raise DimensionMismatch(f"direction {Y.shape} vs weights {weights.W.shape}")
    return _project(weights.W, Y, weights.bound, weights.eps_proj)


def weight_rate(W, phi, e, gains, B, bound, eps_proj):
    """Right-hand side of the weight ODE for a raw (k, m) array W."""
    return gains.Gamma @ _project(W, adaptation_direction(phi, e, gains.P, B), bound, eps_proj)


def clamp(W, bound, eps_proj):
    """Pull W back onto the f(W) = 1 shell if integration overshot it."""
    if not np.isfinite(bound):
        return W
    limit = bound * np.sqrt(1.0 + eps_proj)
    norm = float(np.linalg.norm(W))
    if norm > limit:
        return W * (limit / norm)
    return W


def outer_step(weights, phi, e, gains, B, dt):
    """Explicit Euler step of the projected weight law."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rate = weight_rate(weights.W, phi, e, gains, B, weights.bound, weights.eps_proj)
    W = clamp(weights.W + dt * rate, weights.bound, weights.eps_proj)
    return OuterWeights(W, weights.bound, weights.eps_proj)
