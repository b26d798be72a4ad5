"""Uncertain plant, linear reference model, matched uncertainties and commands.

Plant:      x' = A x + B (u + delta(x))
Reference:  x_rm' = A_rm x_rm + B_rm r(t)
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NotHurwitz, ValidationError
from .numerics import HURWITZ_MARGIN, as_matrix


# --------------------------------------------------------------------------
# Fixed feature bases, used both for structured uncertainties and for the
# fixed-basis MRAC baseline.


def _basis_identity(x):
    return np.asarray(x, dtype=float)


def _basis_affine(x):
    return np.concatenate(([1.0], x))


def _basis_poly3(x):
    # [1, x0, x1, x0^2, x0*x1, x0^3]; 2-state only
    x0, x1 = x[0], x[1]
    return np.array([1.0, x0, x1, x0 * x0, x0 * x1, x0 * x0 * x0])


def _basis_rbf(x):
    # 5x5 grid of unit-width Gaussian bumps on [-2, 2]^2 plus a bias; 2-state only
    d0 = x[0] - _RBF_GRID[:, 0]
    d1 = x[1] - _RBF_GRID[:, 1]
    return np.concatenate(([1.0], np.exp(-0.5 * (d0 * d0 + d1 * d1))))


_g = np.linspace(-2.0, 2.0, 5)
_RBF_GRID = np.array([(a, b) for a in _g for b in _g])

BASES = {
    "identity": (_basis_identity, lambda n: n),
    "affine": (_basis_affine, lambda n: n + 1),
    "poly3": (_basis_poly3, lambda n: 6),
    "rbf25": (_basis_rbf, lambda n: 26),
}


def basis_function(name):
    try:
        return BASES[name][0]
    except KeyError:
        raise ValidationError(f"unknown basis {name!r}; known: {sorted(BASES)}") from None


def basis_dim(name, n):
    if name not in BASES:
        raise ValidationError(f"unknown basis {name!r}; known: {sorted(BASES)}")
    if name in ("poly3", "rbf25") and n != 2:
        raise ValidationError(f"basis {name!r} is defined for 2-state plants only")
    return BASES[name][1](n)


# --------------------------------------------------------------------------
# Uncertainty


@dataclass(frozen=True)
class Term:
    """One additive term ``coef * g(x)``.

    kind "mono": g = prod_i x[i]**powers[i] (empty powers -> constant)
    kind "sin"/"cos": g = sin/cos(freq * x[index] + phase)
    """

    kind: str
    coef: float
    powers: tuple = ()
    index: int = 0
    freq: float = 1.0
    phase: float = 0.0

    def __call__(self, x):
        if self.kind == "mono":
            v = 1.0
            for i, p in enumerate(self.powers):
                if p:
                    v *= x[i] ** p
            return self.coef * v
        arg = self.freq * x[self.index] + self.phase
        return self.coef * (np.sin(arg) if self.kind == "sin" else np.cos(arg))


@dataclass(frozen=True)
class UncertaintySpec:
    """Matched uncertainty delta: R^n -> R^m.

    kind "zero": delta = 0 (``m`` outputs).
    kind "linear-in-basis": delta = W*^T basis(x) (+ optional constant ``offset``).
    kind "polynomial-trig": one list of :class:`Term` per output channel.
    """

    kind: str
    m: int = 1
    w_star: Optional[np.ndarray] = None
    basis: Optional[str] = None
    terms: tuple = ()
    offset: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("zero", "linear-in-basis", "polynomial-trig"):
            raise ValidationError(f"unknown uncertainty kind {self.kind!r}")
        if self.kind == "linear-in-basis":
            if self.w_star is None or self.basis is None:
                raise ValidationError("linear-in-basis needs w_star and basis")
            w = as_matrix(self.w_star, "w_star")
            if w.shape[0] == 1 and w.shape[1] != 1:
                w = w.T
            w.setflags(write=False)
            object.__setattr__(self, "w_star", w)
            object.__setattr__(self, "m", w.shape[1])
            basis_function(self.basis)
        if self.kind == "polynomial-trig":
            object.__setattr__(self, "m", len(self.terms))
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=float).reshape(-1)
            if off.shape != (self.m,):
                raise ValidationError(f"offset must have {self.m} entries")
            off.setflags(write=False)
            object.__setattr__(self, "offset", off)

    @property
    def structured(self):
        return self.kind == "linear-in-basis"


def eval_uncertainty(spec, x):
    x = np.asarray(x, dtype=float)
    if spec.kind == "zero":
        out = np.zeros(spec.m)
    elif spec.kind == "linear-in-basis":
        out = spec.w_star.T @ basis_function(spec.basis)(x)
    else:
        out = np.array([sum(term(x) for term in channel) for channel in spec.terms], dtype=float)
    if spec.offset is not None:
        out = out + spec.offset
    return out


# --------------------------------------------------------------------------
# Plant and reference model


@dataclass(frozen=True)
class PlantModel:
    A: np.ndarray
    B: np.ndarray
    delta: UncertaintySpec = field(default_factory=lambda: UncertaintySpec("zero"))

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        if B.shape[0] != A.shape[0] and B.shape[1] == A.shape[0]:
            B = B.T
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionMismatch(f"A {A.shape} / B {B.shape} incompatible")
        if self.delta.m != B.shape[1]:
            raise DimensionMismatch(f"uncertainty has {self.delta.m} outputs, B has {B.shape[1]} columns")
        for a in (A, B):
            a.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def controllable(self):
        n = self.n
        blocks = [self.B]
        for _ in range(n - 1):
            blocks.append(self.A @ blocks[-1])
        return int(np.linalg.matrix_rank(np.hstack(blocks))) == n


@dataclass(frozen=True)
class ReferenceModel:
    A_rm: np.ndarray
    B_rm: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A_rm, "A_rm")
        B = as_matrix(self.B_rm, "B_rm")
        if B.shape[0] != A.shape[0] and B.shape[1] == A.shape[0]:
            B = B.T
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionMismatch(f"A_rm {A.shape} / B_rm {B.shape} incompatible")
        worst = float(np.max(np.linalg.eigvals(A).real))
        if not worst < -HURWITZ_MARGIN:
            raise NotHurwitz(f"A_rm has an eigenvalue with real part {worst:.3g} >= 0")
        for a in (A, B):
            a.setflags(write=False)
        object.__setattr__(self, "A_rm", A)
        object.__setattr__(self, "B_rm", B)

    @property
    def r_dim(self):
        return self.B_rm.shape[1]


def _vec(v, size, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (size,):
        raise DimensionMismatch(f"{name} must have {size} entries, got {v.shape[0]}")
    return v


def plant_derivative(plant, x, u):
    x = _vec(x, plant.n, "x")
    u = _vec(u, plant.m, "u")
    return plant.A @ x + plant.B @ (u + eval_uncertainty(plant.delta, x))


def reference_derivative(ref, x_rm, r):
    x_rm = _vec(x_rm, ref.A_rm.shape[0], "x_rm")
    r = _vec(r, ref.r_dim, "r")
    return ref.A_rm @ x_rm + ref.B_rm @ r


def build_matched_pair(A, B, K, K_r):
    """Reference model satisfying ``A_rm = A - B K`` and ``B_rm = B K_r``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    K = as_matrix(K, "K")
    K_r = as_matrix(K_r, "K_r")
    if B.shape[0] != A.shape[0] or K.shape != (B.shape[1], A.shape[0]) or K_r.shape[0] != B.shape[1]:
        raise DimensionMismatch(f"A {A.shape}, B {B.shape}, K {K.shape}, K_r {K_r.shape} incompatible")
    return ReferenceModel(A - B @ K, B @ K_r)


def second_order_gains(A, B, omega_n, zeta):
    """K, K_r placing a 2-state companion plant at (omega_n, zeta).

    The plant must have the form A = [[0, 1], [a0, a1]], B = [0; b].
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape != (2, 2) or B.shape != (2, 1) or A[0, 0] != 0 or A[0, 1] != 1 or B[0, 0] != 0 or B[1, 0] == 0:
        raise ValidationError("omega_n/zeta shorthand needs A = [[0, 1], [a0, a1]] and B = [0; b]")
    a0, a1, b = A[1, 0], A[1, 1], B[1, 0]
    w2 = omega_n * omega_n
    K = np.array([[(a0 + w2) / b, (a1 + 2.0 * zeta * omega_n) / b]])
    K_r = np.array([[w2 / b]])
    return K, K_r


# --------------------------------------------------------------------------
# Reference commands


@dataclass(frozen=True)
class SignalComponent:
    kind: str  # step | sinusoid | square | circular-pair
    amplitude: float = 1.0
    frequency: float = 1.0  # rad/s
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("step", "sinusoid", "square", "circular-pair"):
            raise ValidationError(f"unknown reference kind {self.kind!r}")

    @property
    def dim(self):
        return 2 if self.kind == "circular-pair" else 1

    def __call__(self, t):
        arg = self.frequency * t + self.phase
        if self.kind == "step":
            return np.array([self.amplitude])
        if self.kind == "sinusoid":
            return np.array([self.amplitude * np.sin(arg)])
        if self.kind == "square":
            return np.array([self.amplitude if np.sin(arg) >= 0 else -self.amplitude])
        return np.array([self.amplitude * np.cos(arg), self.amplitude * np.sin(arg)])


@dataclass(frozen=True)
class ReferenceSignal:
    """Sum of bounded, piecewise-continuous components."""

    components: tuple

    def __post_init__(self):
        if not self.components:
            raise ValidationError("reference signal needs at least one component")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValidationError("reference components must share a dimension")

    @property
    def dim(self):
        return self.components[0].dim

    def __call__(self, t):
        out = self.components[0](t)
        for c in self.components[1:]:
            out = out + c(t)
        return out
