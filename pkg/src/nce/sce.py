"""Truncated strong-contrast series: term assembly and closed-form solve.

Conventions (shared by every consumer, including sensitivity maps):

* displacements live on the torus in the minimum-image convention, each
  counted once; physical components are cell offsets times cell_size;
* Riemann weights dV = cell_size^2 (cell_size^4 for the double sum);
* the cavity N(0) removes every cell with |r| < cavity_radius_cells * h,
  so the default radius 1 excludes exactly the origin.  The third-order
  sum applies the same cavity to both kernel arguments r1 and r2 - r1 and
  additionally drops r2 inside the cavity;
* assembled terms are symmetrized: the window truncation of the S3 sum
  breaks the exact transpose symmetry of the full lattice sum by a decaying
  tail, which is projected out.

The series solve inverts

    beta^2 phi^2 (S_e - p0 I)^{-1} (S_e + (d-1) p0 I) = R,
    R = beta phi I - sum_n A_n beta^n,

into S_e = p0 (R + (d-1) beta^2 phi^2 I)(R - beta^2 phi^2 I)^{-1}.
"""

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .correlations import displacement_components, total_correlation_2
from .errors import DegenerateContrastError, NearPercolationError, ParameterError
from .kernels import AnalyticKernel, PropertyKind, contrast_beta


class KernelSource(enum.Enum):
    ANALYTIC = "analytic"
    LEARNED = "learned"
    BASELINE = "baseline"


@dataclass
class EffectiveTensor:
    """2x2 effective property tensor (complex-capable)."""

    m: np.ndarray
    kind: PropertyKind

    def __post_init__(self):
        self.m = np.asarray(self.m)
        if self.m.shape != (2, 2):
            raise ParameterError("effective tensor must be 2x2")

    def directional(self, theta):
        u = np.array([math.cos(theta), math.sin(theta)])
        return u @ self.m @ u

    def is_symmetric(self, rtol=1e-8):
        scale = np.linalg.norm(self.m)
        return np.linalg.norm(self.m - self.m.T) <= rtol * max(scale, 1e-300)


@dataclass
class SeriesTerms:
    a2: np.ndarray
    a3: Optional[np.ndarray]
    order: int
    cavity_radius_cells: int

    def __post_init__(self):
        if self.order not in (2, 3):
            raise ParameterError("series order must be 2 or 3")
        if (self.a3 is None) == (self.order == 3):
            raise ParameterError("a3 must be present exactly when order = 3")


def cavity_mask(side, cavity_radius_cells):
    """True on cells kept by the sum: |r| >= cavity_radius_cells cells."""
    if cavity_radius_cells < 1:
        raise ParameterError("cavity radius must be at least one cell")
    rx, ry = displacement_components(side)
    keep = rx**2 + ry**2 >= cavity_radius_cells**2
    if not keep.any():
        raise ParameterError("cavity covers the whole grid")
    return keep


def _symmetrized(a):
    return 0.5 * (a + a.T)


def assemble_a2(chi, kernel, spec, cavity_radius_cells=1):
    """A2 = (d/Omega_d) dV sum_{r not in N(0)} chi(r) T(r)."""
    chi = np.asarray(chi, dtype=np.float64)
    side = chi.shape[0]
    h = 1.0 / side
    keep = cavity_mask(side, cavity_radius_cells)
    rx, ry = displacement_components(side)
    t = kernel.t_grid(rx * h, ry * h)
    w = np.where(keep, chi, 0.0)
    a2 = np.einsum("yx,yxij->ij", w, t) * (spec.d / spec.omega_d) * h * h
    return _symmetrized(a2)


def assemble_a3(cs, kernel, spec, cavity_radius_cells=1):
    """Third-order term from a windowed S3 table.

    A3 = (-1/phi) (d/Omega_d)^2 dV^2
         sum_{r1, r2} Delta_3(r1, r2) T(r1) T(r2 - r1)

    over window pairs with r1, r2 and r2 - r1 all outside the cavity, where
    Delta_3 = S2(r1) S2(r2 - r1) - phi S3(0, r1, r2).
    """
    if cs.s3 is None:
        raise ParameterError("order-3 assembly requires an S3 table")
    side = cs.side
    h = 1.0 / side
    offs = cs.s3.offsets
    cav2 = cavity_radius_cells**2

    # T and S2 gathered on the full displacement grid once
    rx, ry = displacement_components(side)
    t_full = kernel.t_grid(rx * h, ry * h)
    keep_full = rx**2 + ry**2 >= cav2

    t_at = t_full[offs[:, 1] % side, offs[:, 0] % side]
    keep_off = (offs[:, 0]**2 + offs[:, 1]**2 >= cav2)

    # pair difference r2 - r1, wrapped; indexes both T and S2
    dx = (offs[np.newaxis, :, 0] - offs[:, np.newaxis, 0]) % side
    dy = (offs[np.newaxis, :, 1] - offs[:, np.newaxis, 1]) % side
    t_diff = t_full[dy, dx]
    keep_diff = keep_full[dy, dx]

    s2_r1 = cs.s2[offs[:, 1] % side, offs[:, 0] % side]
    s2_diff = cs.s2[dy, dx]
    delta3 = s2_r1[:, np.newaxis] * s2_diff - cs.phi * cs.s3.values

    w = delta3 * (keep_off[:, np.newaxis] & keep_off[np.newaxis, :] & keep_diff)
    pair = np.einsum("ab,aik,abkj->ij", w, t_at, t_diff, optimize=True)
    pref = (-1.0 / cs.phi) * (spec.d / spec.omega_d) ** 2 * h**4
    return _symmetrized(pref * pair)


def d_hat(terms, beta, phi):
    """D_hat = beta phi I - sum_n A_n beta^n (the series right-hand side)."""
    b = beta.beta if hasattr(beta, "beta") else beta
    r = b * phi * np.eye(2) - b**2 * terms.a2
    if terms.order == 3:
        r = r - b**3 * terms.a3
    return r


def d_map(sigma_e, beta, phi, spec):
    """D = beta^2 phi^2 (S_e - p0 I)^{-1} (S_e + p0 I), the d = 2 data map."""
    b = beta.beta if hasattr(beta, "beta") else beta
    m = sigma_e.m if isinstance(sigma_e, EffectiveTensor) else np.asarray(sigma_e)
    p0 = spec.prop0
    diff = m - p0 * np.eye(2)
    if np.linalg.norm(diff) <= 1e-14 * max(abs(p0), np.linalg.norm(m)):
        raise DegenerateContrastError(
            "effective tensor equals prop0 I; use the beta = 0 path")
    return b**2 * phi**2 * np.linalg.solve(diff, m + (spec.d - 1) * p0 * np.eye(2))


def solve_effective(terms, beta, phi, spec):
    """Invert the truncated series for the effective tensor."""
    b = beta.beta if hasattr(beta, "beta") else beta
    if b == 0 or phi == 0.0:
        return EffectiveTensor(spec.prop0 * np.eye(2), spec.kind)
    r = d_hat(terms, b, phi)
    c = b**2 * phi**2
    denom = r - c * np.eye(2)
    cond = np.linalg.cond(denom)
    if not np.isfinite(cond) or cond > 1e12:
        raise NearPercolationError(
            f"series inversion near-singular (cond = {cond:.3e})", condition=cond)
    m = spec.prop0 * (r + (spec.d - 1) * c * np.eye(2)) @ np.linalg.inv(denom)
    m = _symmetrized(m)
    if np.iscomplexobj(m) and np.max(np.abs(m.imag)) <= 1e-10 * np.max(np.abs(m)):
        m = m.real
    return EffectiveTensor(m, spec.kind)


def predict(corrs, spec, kernel=None, order=2, cavity_radius_cells=1):
    """Full pipeline: correlation set -> series terms -> effective tensor.

    `kernel` is any object with a t_grid(rx, ry) method; None selects the
    closed-form kernel for the medium.
    """
    if order not in (2, 3):
        raise ParameterError("order must be 2 or 3")
    if kernel is None:
        kernel = AnalyticKernel(spec)
    beta = contrast_beta(spec)
    chi = total_correlation_2(corrs)
    a2 = assemble_a2(chi, kernel, spec, cavity_radius_cells)
    a3 = None
    if order == 3:
        a3 = assemble_a3(corrs, kernel, spec, cavity_radius_cells)
    terms = SeriesTerms(a2=a2, a3=a3, order=order,
                        cavity_radius_cells=cavity_radius_cells)
    return solve_effective(terms, beta, corrs.phi, spec)
