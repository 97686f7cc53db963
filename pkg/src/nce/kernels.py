"""Closed-form PDE kernels for the two supported physics.

Conduction (randomness in the second-order term): the kernel is the Hessian
of the Laplace Green's function,

    H(r) = (d n n^T - I) / (Omega_d sigma0 r^d),        G(r) = -ln r / (2 pi sigma0).

Waves (randomness in the zeroth-order term): the kernel is the 2D dyadic
Green's function of the curl-curl operator,

    H0_ij(r) = (i / 4 eps0) [ (k0^2 H1_0(k0 r) - (k0/r) H1_1(k0 r)) delta_ij
                              + k0^2 H1_2(k0 r) n_i n_j ],

with H1_nu the Hankel function of the first kind.  The series operator
kernel is T = Omega_d prop0 H in both cases; its conduction form is
(d n n^T - I)/r^d and its k0 -> 0 wave limit reproduces exactly that, which
fixes the wave normalization.

Evaluation at r = 0 always raises CavityError: the origin cavity N(0) is
excluded by callers and its analytic contribution is absorbed into beta.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import CavityError, ParameterError, SingularContrastError
from .special import bessel_j, bessel_y, hankel1  # noqa: F401  (re-exported)


class PropertyKind(enum.Enum):
    CONDUCTION = "conduction"
    WAVE = "wave"


@dataclass(frozen=True)
class MediumSpec:
    """Two-phase medium description.

    prop0/prop1 are sigma0/sigma1 for conduction or eps0/eps1 for waves;
    k0 is the reference-phase wave number in radians per unit domain edge
    (zero for conduction).  Only k0 is stored for the wave case: frequency
    and permeability never appear separately.
    """

    kind: PropertyKind
    prop0: float
    prop1: float
    k0: float = 0.0
    d: int = 2

    def __post_init__(self):
        if self.d != 2:
            raise ParameterError("only d = 2 code paths are supported")
        if not np.real(self.prop0) > 0:
            raise ParameterError("prop0 must be positive")
        if self.kind is PropertyKind.CONDUCTION and self.k0 != 0.0:
            raise ParameterError("conduction requires k0 = 0")
        if self.kind is PropertyKind.WAVE and not self.k0 > 0.0:
            raise ParameterError("wave requires k0 > 0")

    @property
    def omega_d(self):
        """Total solid angle in d dimensions (2 pi for d = 2)."""
        return 2.0 * math.pi


@dataclass(frozen=True)
class ContrastParam:
    """Series expansion parameter beta = (p1 - p0)/(p1 + (d-1) p0)."""

    beta: complex

    def __post_init__(self):
        b = self.beta
        if abs(b.imag) == 0.0 and not (-1.0 - 1e-12 <= b.real < 1.0 + 1e-12):
            raise ParameterError(f"beta = {b} outside [-1/(d-1), 1) for d = 2")


def contrast_beta(spec):
    """Contrast parameter of a medium; raises on the singular denominator."""
    den = spec.prop1 + (spec.d - 1) * spec.prop0
    if den == 0:
        raise SingularContrastError("prop1 + (d-1) prop0 = 0")
    b = (spec.prop1 - spec.prop0) / den
    if np.iscomplexobj(np.asarray(b)) and abs(np.imag(b)) > 0:
        return ContrastParam(complex(b))
    return ContrastParam(float(np.real(b)))


def laplace_green(r, sigma0):
    """Free-space 2D Laplace Green's value -ln(r) / (2 pi sigma0), r > 0."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0.0):
        raise CavityError("laplace_green undefined at r = 0")
    return -np.log(r) / (2.0 * math.pi * sigma0)


def _unit_and_norm(r_vec):
    r_vec = np.asarray(r_vec, dtype=np.float64)
    r = float(np.hypot(r_vec[0], r_vec[1]))
    if r == 0.0:
        raise CavityError("kernel evaluated at r = 0 (cavity)")
    return r_vec / r, r


def conduction_kernel(r_vec, spec):
    """Hessian kernel H(r) = (d nn^T - I) / (Omega_d sigma0 r^d); traceless."""
    if spec.kind is not PropertyKind.CONDUCTION:
        raise ParameterError("conduction_kernel requires a conduction spec")
    n, r = _unit_and_norm(r_vec)
    d = spec.d
    return (d * np.outer(n, n) - np.eye(2)) / (spec.omega_d * spec.prop0 * r**d)


def helmholtz_green(r_vec, spec):
    """2D dyadic Green's function of the curl-curl operator (complex 2x2)."""
    if spec.kind is not PropertyKind.WAVE:
        raise ParameterError("helmholtz_green requires a wave spec")
    n, r = _unit_and_norm(r_vec)
    k0 = spec.k0
    x = k0 * r
    iso = k0**2 * hankel1(0, x) - (k0 / r) * hankel1(1, x)
    quad = k0**2 * hankel1(2, x)
    return (0.25j / spec.prop0) * (iso * np.eye(2) + quad * np.outer(n, n))


def t_kernel(r_vec, spec):
    """Series operator kernel T = Omega_d prop0 H for either physics."""
    if spec.kind is PropertyKind.CONDUCTION:
        return spec.omega_d * spec.prop0 * conduction_kernel(r_vec, spec)
    return spec.omega_d * spec.prop0 * helmholtz_green(r_vec, spec)


def t_kernel_grid(rx, ry, spec):
    """Vectorized T over displacement component arrays.

    rx, ry are physical displacement components of any common shape; entries
    with rx = ry = 0 must be masked out by the caller (values there are set
    to zero, not raised, so assembly loops can apply their cavity mask).
    Returns an array of shape rx.shape + (2, 2).
    """
    rx = np.asarray(rx, dtype=np.float64)
    ry = np.asarray(ry, dtype=np.float64)
    r = np.hypot(rx, ry)
    safe = np.where(r == 0.0, 1.0, r)
    nx, ny = rx / safe, ry / safe
    if spec.kind is PropertyKind.CONDUCTION:
        out = np.empty(rx.shape + (2, 2), dtype=np.float64)
        inv = 1.0 / safe**spec.d
        out[..., 0, 0] = (2.0 * nx * nx - 1.0) * inv
        out[..., 1, 1] = (2.0 * ny * ny - 1.0) * inv
        out[..., 0, 1] = out[..., 1, 0] = 2.0 * nx * ny * inv
    else:
        k0 = spec.k0
        x = k0 * safe
        h0 = bessel_j(0, x) + 1j * bessel_y(0, x)
        h1 = bessel_j(1, x) + 1j * bessel_y(1, x)
        h2 = bessel_j(2, x) + 1j * bessel_y(2, x)
        iso = k0**2 * h0 - (k0 / safe) * h1
        quad = k0**2 * h2
        pref = 0.5j * math.pi  # Omega_d prop0 * (i / 4 prop0)
        out = np.empty(rx.shape + (2, 2), dtype=np.complex128)
        out[..., 0, 0] = pref * (iso + quad * nx * nx)
        out[..., 1, 1] = pref * (iso + quad * ny * ny)
        out[..., 0, 1] = out[..., 1, 0] = pref * quad * nx * ny
    out[r == 0.0] = 0.0
    return out


@dataclass(frozen=True)
class AnalyticKernel:
    """Grid evaluator wrapping the closed-form kernel for a medium."""

    spec: MediumSpec

    def t_grid(self, rx, ry):
        return t_kernel_grid(rx, ry, self.spec)

    def h_grid(self, rx, ry):
        return self.t_grid(rx, ry) / (self.spec.omega_d * self.spec.prop0)
