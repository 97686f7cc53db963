"""Ground-truth effective-property solvers on the periodic microstructure.

Conduction: finite volumes with per-cell conductivity and harmonic-mean
face conductances.  The potential splits into -E0 . x plus a periodic
fluctuation; the SPD fluctuation system is solved by preconditioned
conjugate gradients and the effective tensor is read off the face-averaged
flux, one column per applied axis, then symmetrized.

Waves: the in-plane (2-component E) curl-curl equation at frequency k0,
discretized on a Yee-staggered grid with Bloch-periodic boundary conditions
at quasimomentum k0 along the propagation axis.  The field is driven by a
transverse plane-wave current source at the same (k0, k0) point,

    (curl curl - k0^2 eps_rel) E = j_t exp(i k0 x_prop),

and the effective permittivity follows from the fundamental Floquet
amplitudes <D> = eps_e <E>; the source amplitude cancels in that ratio.
(A source-free "incident plus scattered" split is degenerate on a torus:
the homogeneous Bloch problem only has the zero solution off resonance.)
The transverse source is divergence-free, so div(eps E) = 0 holds exactly
for every k0 > 0 and the k0 -> 0 limit reproduces the conduction
homogenization; this is the property the static-limit acceptance check
exercises.  The complex system is solved by BiCGSTAB with diagonal
preconditioning, falling back to a sparse direct factorization when the
Krylov iteration stalls (the system is indefinite and lossless).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ParameterError, ResonanceError, SolverError
from .kernels import MediumSpec, PropertyKind
from .sce import EffectiveTensor


@dataclass
class FieldSolution:
    """Raw solver output for one boundary-condition run."""

    field: np.ndarray
    flux_mean: np.ndarray
    mean_field: np.ndarray
    residual_norm: float
    iterations: int


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _conduction_system(sigma):
    """Periodic FV Laplacian (graph Laplacian over face conductances)."""
    side = sigma.shape[0]
    n = side * side
    gx = _harmonic(sigma, np.roll(sigma, -1, axis=1))  # face (iy,ix)-(iy,ix+1)
    gy = _harmonic(sigma, np.roll(sigma, -1, axis=0))  # face (iy,ix)-(iy+1,ix)

    idx = np.arange(n).reshape(side, side)
    right = np.roll(idx, -1, axis=1).ravel()
    up = np.roll(idx, -1, axis=0).ravel()
    rows = np.concatenate([idx.ravel(), right, idx.ravel(), up])
    cols = np.concatenate([right, idx.ravel(), up, idx.ravel()])
    vals = np.concatenate([-gx.ravel(), -gx.ravel(), -gy.ravel(), -gy.ravel()])
    off = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return off + sp.diags(diag), gx, gy


def solve_conduction(m, sigma0, sigma1, e0, tol=1e-9):
    """One conduction run under applied mean field e0 (2-vector)."""
    if sigma0 <= 0 or sigma1 <= 0:
        raise ParameterError("conductivities must be positive")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    side = m.side
    h = 1.0 / side
    sigma = np.where(m.cells == 1, sigma1, sigma0).astype(np.float64)
    a, gx, gy = _conduction_system(sigma)

    # b_c = -h [E0x (g_{+x} - g_{-x}) + E0y (g_{+y} - g_{-y})]
    b = -h * (e0[0] * (gx - np.roll(gx, 1, axis=1))
              + e0[1] * (gy - np.roll(gy, 1, axis=0)))
    b = b.ravel()

    diag = a.diagonal()
    precond = sp.diags(1.0 / diag)
    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    phi, info = spla.cg(a, b, rtol=tol, atol=0.0, maxiter=50 * side,
                        M=precond, callback=count)
    residual = float(np.linalg.norm(b - a @ phi) / max(np.linalg.norm(b), 1e-300))
    if info != 0:
        raise SolverError(f"conduction CG stalled at residual {residual:.3e}",
                          residual=residual, iterations=iters)
    phi = phi.reshape(side, side)
    phi -= phi.mean()

    jx = gx * (e0[0] - (np.roll(phi, -1, axis=1) - phi) / h)
    jy = gy * (e0[1] - (np.roll(phi, -1, axis=0) - phi) / h)
    flux = np.array([jx.mean(), jy.mean()])
    return FieldSolution(field=phi, flux_mean=flux, mean_field=np.asarray(e0, float),
                         residual_norm=residual, iterations=iters)


def effective_conductivity(m, sigma0, sigma1, tol=1e-9):
    """Effective conductivity tensor from two axis runs, symmetrized."""
    cols = [solve_conduction(m, sigma0, sigma1, e0, tol).flux_mean
            for e0 in ((1.0, 0.0), (0.0, 1.0))]
    mat = np.column_stack(cols)
    return EffectiveTensor(0.5 * (mat + mat.T), PropertyKind.CONDUCTION)


def _phased_diff(side, h, phase):
    """1D forward difference with Bloch phase across the periodic seam."""
    main = -np.ones(side) / h
    upper = np.ones(side - 1) / h
    d = sp.lil_matrix((side, side), dtype=np.complex128)
    d.setdiag(main)
    d.setdiag(upper, 1)
    d[side - 1, 0] = phase / h
    return d.tocsr()


def _wave_system(eps_rel, k0, prop_axis):
    """Curl-curl minus k0^2 eps on the staggered grid; Bloch along prop_axis.

    Unknown layout: Ex (side^2, at ((ix+1/2) h, iy h)) then Ey (side^2, at
    (ix h, (iy+1/2) h)); eps_rel lives at cell centers ((ix+1/2) h,
    (iy+1/2) h).  Returns the sparse operator, the per-edge eps, and the
    edge positions needed for Floquet projections.
    """
    side = eps_rel.shape[0]
    h = 1.0 / side
    phase = np.exp(1j * k0) if prop_axis is not None else 1.0
    px = phase if prop_axis == 0 else 1.0
    py = phase if prop_axis == 1 else 1.0

    dxf = _phased_diff(side, h, px)
    dyf = _phased_diff(side, h, py)
    eye = sp.identity(side, dtype=np.complex128, format="csr")
    dx = sp.kron(eye, dxf, format="csr")   # layout iy*side + ix
    dy = sp.kron(dyf, eye, format="csr")

    # curl at cell centers; curl-curl back to edges via the adjoints
    curl_ex = -dy
    curl_ey = dx
    cc_xx = curl_ex.conj().T @ curl_ex
    cc_xy = curl_ex.conj().T @ curl_ey
    cc_yx = curl_ey.conj().T @ curl_ex
    cc_yy = curl_ey.conj().T @ curl_ey

    # tangential-field edges: arithmetic average of the two touching cells
    eps_x = 0.5 * (eps_rel + np.roll(eps_rel, 1, axis=0))   # Ex edge at iy h
    eps_y = 0.5 * (eps_rel + np.roll(eps_rel, 1, axis=1))   # Ey edge at ix h
    eps_edges = np.concatenate([eps_x.ravel(), eps_y.ravel()])

    op = sp.bmat([[cc_xx, cc_xy], [cc_yx, cc_yy]], format="csr")
    op = op - k0**2 * sp.diags(eps_edges)

    ix = np.arange(side)
    ex_pos_x = np.add.outer(np.zeros(side), (ix + 0.5) * h)   # (iy, ix)
    ex_pos_y = np.add.outer(ix * h, np.zeros(side))
    ey_pos_x = np.add.outer(np.zeros(side), ix * h)
    ey_pos_y = np.add.outer((ix + 0.5) * h, np.zeros(side))
    pos = {"ex": (ex_pos_x, ex_pos_y), "ey": (ey_pos_x, ey_pos_y)}
    return op, eps_edges, pos


def _solve_complex(op, rhs, tol, maxiter):
    """BiCGSTAB with diagonal preconditioning, direct factorization fallback.

    The lossless system is indefinite and, near the static limit, severely
    ill-conditioned, so the Krylov attempt is capped and a sparse LU with
    iterative refinement takes over when it stalls.
    """
    diag = op.diagonal()
    precond = spla.LinearOperator(op.shape, matvec=lambda v: v / diag,
                                  dtype=np.complex128)
    sol, info = spla.bicgstab(op, rhs, rtol=tol, atol=0.0,
                              maxiter=min(maxiter, 1500), M=precond)
    used_direct = False
    rhs_norm = max(np.linalg.norm(rhs), 1e-300)
    op_scale = float(np.abs(op).sum(axis=1).max())

    def backward(vec):
        # backward error ||b - A x|| / (||A|| ||x|| + ||b||); the raw
        # relative residual is unusable near the static limit where b is
        # O(k0^2) but A x carries the 1/h^2 curl-curl scale
        return float(np.linalg.norm(rhs - op @ vec)
                     / (op_scale * np.linalg.norm(vec) + rhs_norm))

    if info != 0 or np.linalg.norm(rhs - op @ sol) > tol * rhs_norm:
        try:
            lu = spla.splu(op.tocsc())
            sol = lu.solve(rhs)
            # refine to the roundoff floor: the forward error scales as
            # cond(A) times the backward error, and cond blows up near the
            # static limit, so an early break at tol is not good enough
            best = backward(sol)
            for _ in range(6):
                cand = sol + lu.solve(rhs - op @ sol)
                err = backward(cand)
                if err >= best:
                    break
                sol, best = cand, err
            used_direct = True
        except RuntimeError as exc:
            raise ResonanceError(
                f"wave system singular (factorization failed: {exc})") from exc
    residual = backward(sol)
    if residual > tol:
        raise ResonanceError(
            f"wave solve backward error {residual:.3e} exceeds tolerance; "
            "k0 is at or near a grid resonance", condition=residual)
    return sol, residual, used_direct


def solve_wave(m, eps0, eps1, k0, prop_axis, tol=1e-9, loss=0.0):
    """One driven Bloch run: propagation along prop_axis (0 = x), transverse
    in-plane current source.  Returns the Floquet amplitudes of E and D.

    `loss` adds a uniform absorption i*loss*eps0 to both phases (limiting
    absorption): a lossless finite torus has a discrete resonance spectrum,
    and a small positive loss keeps extractions near k0 resonances usable.
    """
    if np.real(eps0) <= 0 or np.real(eps1) <= 0:
        raise ParameterError("permittivities must have positive real part")
    if k0 <= 0:
        raise ParameterError("k0 must be positive")
    if loss < 0:
        raise ParameterError("loss must be non-negative")
    side = m.side
    eps_rel = np.where(m.cells == 1, eps1 / eps0, 1.0).astype(np.complex128)
    eps_rel += 1j * loss
    op, eps_edges, pos = _wave_system(eps_rel, k0, prop_axis)

    n = side * side
    pol = 1 - prop_axis  # transverse polarization component index
    pol_name = ("ex", "ey")[pol]
    rhs = np.zeros(2 * n, dtype=np.complex128)
    seg = slice(pol * n, (pol + 1) * n)
    rhs[seg] = np.exp(1j * k0 * pos[pol_name][prop_axis]).ravel()

    field, residual, _ = _solve_complex(op, rhs, tol, maxiter=50 * side)

    # fundamental Floquet amplitudes per component; the source amplitude
    # cancels in the <D>/<E> extraction so no normalization is needed
    mean_e = np.empty(2, dtype=np.complex128)
    mean_d = np.empty(2, dtype=np.complex128)
    for comp, name in enumerate(("ex", "ey")):
        carrier = np.exp(-1j * k0 * pos[name][prop_axis]).ravel()
        segc = slice(comp * n, (comp + 1) * n)
        mean_e[comp] = np.mean(field[segc] * carrier)
        mean_d[comp] = eps0 * np.mean(eps_edges[segc] * field[segc] * carrier)
    return FieldSolution(field=field.reshape(2, side, side),
                         flux_mean=mean_d, mean_field=mean_e,
                         residual_norm=residual, iterations=-1)


def effective_permittivity(m, eps0, eps1, k0, tol=1e-9, loss=0.0):
    """Effective dynamic permittivity tensor from the two axis runs.

    <D> = eps_e <E> per run; the two runs give two vector equations that
    determine the 2x2 tensor, which is then symmetrized.
    """
    runs = [solve_wave(m, eps0, eps1, k0, axis, tol, loss) for axis in (0, 1)]
    # per-run scale cancels in <D> = eps_e <E>; normalize for conditioning
    scales = [max(np.linalg.norm(r.mean_field), 1e-300) for r in runs]
    e_cols = np.column_stack([r.mean_field / s for r, s in zip(runs, scales)])
    d_cols = np.column_stack([r.flux_mean / s for r, s in zip(runs, scales)])
    if np.linalg.cond(e_cols) > 1e10:
        raise ResonanceError("mean-field matrix singular; k0 near a resonance",
                             condition=float(np.linalg.cond(e_cols)))
    mat = d_cols @ np.linalg.inv(e_cols)
    mat = 0.5 * (mat + mat.T)
    if np.max(np.abs(mat.imag)) <= 1e-12 * np.max(np.abs(mat)):
        mat = mat.real
    return EffectiveTensor(mat, PropertyKind.WAVE)


def solver_for_spec(spec: MediumSpec, tol=1e-9):
    """Closure computing the ground-truth tensor for a microstructure."""
    if spec.kind is PropertyKind.CONDUCTION:
        return lambda m: effective_conductivity(m, spec.prop0, spec.prop1, tol)
    return lambda m: effective_permittivity(m, spec.prop0, spec.prop1, spec.k0, tol)
