"""Analytic bounds and Lyapunov monitors."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidConfidence, InvalidTolerance, NotPositiveDefinite, UnstructuredScenario
from .numerics import sym_eig_bounds


def _spd_bounds(S, name):
    lo, hi = sym_eig_bounds(S)
    if lo <= 0:
        raise NotPositiveDefinite(f"{name} must be positive definite (lambda_min = {lo:.3g})")
    return lo, hi


def uub_radius(P, Q, eps_bar):
    """Error norm beyond which V decreases: 2 lambda_max(P) eps_bar / lambda_min(Q)."""
    if eps_bar < 0:
        raise ValueError("eps_bar must be >= 0")
    _, p_max = _spd_bounds(P, "P")
    q_min, _ = _spd_bounds(Q, "Q")
    return 2.0 * p_max * eps_bar / q_min


def generalization_tolerance(P, Q, e_norm):
    """Largest generalization error compatible with V' < 0 at ``||e|| = e_norm``.

    Evaluates lambda_max(Q) ||e|| / lambda_min(P).
    """
    if e_norm < 0:
        raise ValueError("e_norm must be >= 0")
    p_min, _ = _spd_bounds(P, "P")
    _, q_max = _spd_bounds(Q, "Q")
    return q_max * e_norm / p_min


def sample_complexity(eps, delta, k_bits, n_weights):
    """Samples sufficient for generalization error eps with confidence 1 - delta.

    ceil((k N ln 2 + ln(2 / delta)) / eps^2) for N weights of k bits each.
    """
    if not eps > 0:
        raise InvalidTolerance(f"eps must be > 0, got {eps}")
    if not 0 < delta <= 2:
        raise InvalidConfidence(f"delta must lie in (0, 2], got {delta}")
    if k_bits < 0 or n_weights < 0:
        raise ValueError("k_bits and n_weights must be nonnegative")
    value = (k_bits * n_weights * math.log(2.0) + math.log(2.0 / delta)) / (eps * eps)
    # keep float noise on exact integers from bumping the ceiling
    return int(math.ceil(value * (1.0 - 1e-12)))


def lyapunov_value(e, W_tilde, P, Gamma=None):
    """e^T P e + tr(W~^T Gamma^-1 W~) / 2; just e^T P e when W_tilde is None."""
    e = np.asarray(e, dtype=float)
    v = float(e @ P @ e)
    if W_tilde is None:
        return v
    if Gamma is None:
        raise ValueError("Gamma is required with W_tilde")
    Wt = np.atleast_2d(np.asarray(W_tilde, dtype=float))
    return v + 0.5 * float(np.sum(Wt * np.linalg.solve(Gamma, Wt)))


def lyapunov_series(trace, P, Gamma, w_star):
    """V at every trace row, using the logged outer weights."""
    W_tilde = np.asarray(w_star, dtype=float)[None, :, :] - trace.W
    v_e = np.einsum("ti,ij,tj->t", trace.e, P, trace.e)
    Gi_W = np.linalg.solve(Gamma, W_tilde)
    return v_e + 0.5 * np.einsum("tij,tij->t", W_tilde, Gi_W)


def vdot_residual(trace, P, Q, Gamma, w_star):
    """Central-difference dV/dt minus (-e^T Q e) on interior trace rows.

    Only meaningful for structured scenarios (known W* and basis, no
    approximation error), where the two agree up to discretization.
    """
    if w_star is None:
        raise UnstructuredScenario("V' monitor needs a structured scenario with known W*")
    if trace.W is None:
        raise UnstructuredScenario("trace carries no outer-weight history")
    V = lyapunov_series(trace, P, Gamma, w_star)
    if V.size < 3:
        return np.zeros(0)
    dt = trace.t[1] - trace.t[0]
    dV = (V[2:] - V[:-2]) / (2.0 * dt)
    e = trace.e[1:-1]
    return dV + np.einsum("ti,ij,tj->t", e, Q, e)


@dataclass(frozen=True)
class BoundReport:
    uub_radius: float
    generalization_tolerance: float
    sample_complexity: int
    lambda_min_P: float
    lambda_max_P: float
    lambda_min_Q: float
    lambda_max_Q: float
    eps_bar: float
    e_norm: float

    def to_dict(self):
        return asdict(self)


def bound_report(P, Q, eps_bar, e_norm, eps, delta, k_bits, n_weights):
    p_lo, p_hi = _spd_bounds(P, "P")
    q_lo, q_hi = _spd_bounds(Q, "Q")
    return BoundReport(
        uub_radius=uub_radius(P, Q, eps_bar),
        generalization_tolerance=generalization_tolerance(P, Q, e_norm),
        sample_complexity=sample_complexity(eps, delta, k_bits, n_weights),
        lambda_min_P=p_lo,
        lambda_max_P=p_hi,
        lambda_min_Q=q_lo,
        lambda_max_Q=q_hi,
        eps_bar=float(eps_bar),
        e_norm=float(e_norm),
    )
