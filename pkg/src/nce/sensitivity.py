"""Sensitivity maps of directional effective properties and design diagnostics.

The order-2 closed form: with g = u^T S_e u, S_e = p0 (R + c I)(R - c I)^{-1},
R = beta phi I - beta^2 A2 and c = beta^2 phi^2,

    d g / d S2(r) = -beta^2 (d/Omega_d) dV p0 * w^T T(r) v,
    v = (R - c I)^{-1} u,      w = (I - S_e / p0) u,

evaluated per displacement cell outside the cavity (chi = S2 - phi^2 at
fixed phi, so d/dS2 = d/dchi).  Every map entry is checkable against a
central finite difference of the order-2 predictor; that agreement is the
module's defining correctness property.

Fourier-space maps use the same DFT convention as spectral_density: with
chi_k = dV sum_r chi(r) e^{-ik.r} and G dV = 1 on the unit square, the
chain rule gives d g / d chi_k(k) = sum_r map(r) e^{+ik.r}, evaluated
before selecting the real or imaginary part.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .correlations import displacement_components, total_correlation_2
from .errors import ParameterError
from .kernels import AnalyticKernel, contrast_beta
from .sce import KernelSource, assemble_a2, cavity_mask


@dataclass
class SensitivityMap:
    values: np.ndarray
    space: str                 # "real" | "fourier"
    theta: float
    part: str                  # "re" | "im"
    source_kernel: KernelSource
    side: int

    def __post_init__(self):
        if self.space not in ("real", "fourier"):
            raise ParameterError("space must be 'real' or 'fourier'")
        if self.part not in ("re", "im"):
            raise ParameterError("part must be 're' or 'im'")


def _kernel_and_source(kernel, spec):
    if kernel is None or kernel == "analytic":
        return AnalyticKernel(spec), KernelSource.ANALYTIC
    if hasattr(kernel, "t_grid"):
        src = KernelSource.LEARNED if hasattr(kernel, "model") \
            else KernelSource.ANALYTIC
        return kernel, src
    raise ParameterError(f"unusable kernel argument {kernel!r}")


def _sensitivity_complex(kernel, spec, corrs, order, cavity_radius_cells):
    """Complex-valued d(u^T S_e u)/dS2(r) grid before direction/part."""
    if order != 2:
        raise ParameterError("sensitivity maps are defined at order 2 only")
    beta = contrast_beta(spec).beta
    side = corrs.side
    h = 1.0 / side
    chi = total_correlation_2(corrs)
    kern, source = _kernel_and_source(kernel, spec)
    a2 = assemble_a2(chi, kern, spec, cavity_radius_cells)
    c = beta**2 * corrs.phi**2
    r_mat = beta * corrs.phi * np.eye(2) - beta**2 * a2
    m_inv = np.linalg.inv(r_mat - c * np.eye(2))
    sigma = spec.prop0 * (r_mat + (spec.d - 1) * c * np.eye(2)) @ m_inv

    rx, ry = displacement_components(side)
    t_grid = kern.t_grid(rx * h, ry * h)
    keep = cavity_mask(side, cavity_radius_cells)
    pref = -beta**2 * (spec.d / spec.omega_d) * h * h * spec.prop0
    return t_grid, keep, pref, m_inv, sigma, source


def sensitivity_s2(kernel, spec, corrs, theta, part="re", order=2,
                   cavity_radius_cells=1):
    """Real-space sensitivity of the directional property to S2."""
    t_grid, keep, pref, m_inv, sigma, source = _sensitivity_complex(
        kernel, spec, corrs, order, cavity_radius_cells)
    u = np.array([math.cos(theta), math.sin(theta)])
    v = m_inv @ u
    w = u - (sigma @ u) / spec.prop0
    field = pref * np.einsum("i,yxij,j->yx", w, t_grid, v)
    field = np.where(keep, field, 0.0)
    values = field.real if part == "re" else field.imag
    return SensitivityMap(values=values, space="real", theta=theta, part=part,
                          source_kernel=source, side=corrs.side)


def sensitivity_psd(kernel, spec, corrs, theta, part="re", order=2,
                    cavity_radius_cells=1):
    """Fourier-space sensitivity of the directional property to chi_k."""
    t_grid, keep, pref, m_inv, sigma, source = _sensitivity_complex(
        kernel, spec, corrs, order, cavity_radius_cells)
    u = np.array([math.cos(theta), math.sin(theta)])
    v = m_inv @ u
    w = u - (sigma @ u) / spec.prop0
    field = pref * np.einsum("i,yxij,j->yx", w, t_grid, v)
    field = np.where(keep, field, 0.0)
    # d chi(r)/d chi_k(k) = e^{+ik.r} / (G dV) with G dV = 1
    fourier = np.fft.ifft2(field) * field.size
    values = fourier.real if part == "re" else fourier.imag
    return SensitivityMap(values=values, space="fourier", theta=theta,
                          part=part, source_kernel=source, side=corrs.side)


def ridge_sensitivity_map(predictor, theta, part="re", space="real"):
    """Baseline sensitivity: the ridge model's input-gradient map."""
    values = predictor.input_gradient(theta, part)
    if space == "fourier":
        values = (np.fft.ifft2(values) * values.size).real
    return SensitivityMap(values=values, space=space, theta=theta, part=part,
                          source_kernel=KernelSource.BASELINE,
                          side=predictor.side)


def k_magnitude_grid(side):
    rx, ry = displacement_components(side)
    return 2.0 * math.pi * np.hypot(rx.astype(float), ry.astype(float))


def ring_mass(smap, k0, half_width):
    """Fraction of total |map| mass on the annulus |k| in k0 +- half_width."""
    if smap.space != "fourier":
        raise ParameterError("ring_mass needs a Fourier-space map")
    kmag = k_magnitude_grid(smap.side)
    ring = np.abs(kmag - k0) <= half_width
    if not ring.any():
        raise ParameterError(
            f"annulus k0={k0} +- {half_width} holds no bins at side {smap.side}")
    total = float(np.abs(smap.values).sum())
    if total == 0.0:
        return 0.0
    return float(np.abs(smap.values[ring]).sum() / total)


def exclusion_score(sd, k_max):
    """Mean spectral density inside |k| <= k_max over the overall mean.

    Values far below one indicate a stealthy, hyperuniform-like suppression
    of long-wavelength spectral content.
    """
    inside = sd.k_grid <= k_max
    overall = float(np.mean(sd.chi_k))
    if overall == 0.0:
        return 0.0
    return float(np.mean(sd.chi_k[inside]) / overall)


@dataclass
class GammaEstimate:
    value: float
    ci_low: float
    ci_high: float
    successes: int
    samples: int


def connected_fraction(side, r0, n_points, samples, seed):
    """Monte-Carlo fraction of N-point grid configurations forming one
    cluster under |r| <= r0 torus adjacency (first point at the origin).

    The normal-approximation binomial interval is reported alongside the
    point estimate.
    """
    if n_points < 2:
        raise ParameterError("n_points must be at least 2")
    if r0 <= 0:
        raise ParameterError("r0 must be positive")
    if samples < 1:
        raise ParameterError("samples must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = n_points
    hits = 0
    chunk = max(1, min(samples, 4_000_000 // (n * n)))
    done = 0
    thresh = np.float32((r0 * side) ** 2)
    while done < samples:
        b = min(chunk, samples - done)
        pts = rng.integers(0, side, size=(b, n, 2)).astype(np.float32)
        pts[:, 0, :] = 0.0
        diff = np.abs(pts[:, :, np.newaxis, :] - pts[:, np.newaxis, :, :])
        diff = np.minimum(diff, side - diff)
        adj = (diff[..., 0]**2 + diff[..., 1]**2) <= thresh

        # cheap necessary condition first: every point needs a neighbor;
        # full label propagation only on the rare survivors
        deg_ok = (adj.sum(axis=2) > 1).all(axis=1)
        cand = adj[deg_ok]
        if len(cand):
            labels = np.broadcast_to(np.arange(n, dtype=np.float32),
                                     (len(cand), n)).copy()
            for _ in range(n):
                spread = np.where(cand, labels[:, np.newaxis, :], np.inf)
                labels = np.minimum(labels, spread.min(axis=2))
            hits += int(np.count_nonzero((labels == 0.0).all(axis=1)))
        done += b
    p = hits / samples
    half = 1.96 * math.sqrt(max(p * (1.0 - p), 1e-300) / samples)
    return GammaEstimate(value=p, ci_low=max(0.0, p - half),
                         ci_high=min(1.0, p + half),
                         successes=hits, samples=samples)


# ---------------------------------------------------------------------------
# map export

def map_to_csv(smap, path):
    """CSV rows (kx, ky, value) or (rx, ry, value) over the full grid."""
    rx, ry = displacement_components(smap.side)
    scale = 2.0 * math.pi if smap.space == "fourier" else 1.0 / smap.side
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("kx,ky,value\n" if smap.space == "fourier" else "rx,ry,value\n")
        for iy in range(smap.side):
            for ix in range(smap.side):
                fh.write(f"{rx[iy, ix] * scale:.10g},{ry[iy, ix] * scale:.10g},"
                         f"{smap.values[iy, ix]:.12g}\n")


def map_to_pgm(smap, path):
    """8-bit binary PGM heatmap plus a JSON sidecar with the value range."""
    vmin = float(smap.values.min())
    vmax = float(smap.values.max())
    span = vmax - vmin if vmax > vmin else 1.0
    img = np.round(255.0 * (smap.values - vmin) / span).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{smap.side} {smap.side}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    sidecar = {"min": vmin, "max": vmax, "space": smap.space,
               "theta": smap.theta, "part": smap.part,
               "source": smap.source_kernel.value}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
        fh.write("\n")
