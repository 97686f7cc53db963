"""N-point correlation statistics of periodic binary fields.

S2 grids are indexed by displacement with r = (0, 0) at index [0, 0] and
periodic wraparound, matching numpy's FFT layout: entry [ry, rx] holds
S2(r = (rx, ry) cells).  S3 is restricted to displacement pairs inside a
window radius and stored as a dense table over the window offsets.  Total
correlations and the spectral density follow the conventions

    chi(r)    = S2(r) - phi^2
    chi_k(k)  = dV * sum_r chi(r) exp(-i k . r),   k = 2 pi m (min-image m).

Patch averages are plain arithmetic means; patches are treated as periodic
in their own right (documented approximation).
"""

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError, ParameterError

CORR_MAGIC = b"NCECOR01"


def displacement_components(side):
    """Min-image integer displacement components (rx, ry) for an FFT grid.

    Returns two (side, side) int arrays laid out like the s2 grid: rx varies
    along axis 1, ry along axis 0; each displacement appears exactly once.
    """
    m = (np.fft.fftfreq(side) * side).astype(np.int64)
    return np.broadcast_to(m[np.newaxis, :], (side, side)), \
        np.broadcast_to(m[:, np.newaxis], (side, side))


class S3Table:
    """Windowed three-point function values.

    offsets: (W, 2) int array of (rx, ry) cell displacements inside the
    window, in canonical (ry, rx) sort order.  values[a, b] holds
    S3(0, r_a, r_b).
    """

    def __init__(self, offsets, values, side):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.side = int(side)
        if self.values.shape != (len(self.offsets), len(self.offsets)):
            raise ParameterError("S3 table shape mismatch")
        self._index = {(int(rx), int(ry)): i
                       for i, (rx, ry) in enumerate(self.offsets)}

    def __len__(self):
        return len(self.offsets)

    def lookup(self, r1, r2):
        """S3 value for cell displacements r1 = (rx, ry), r2 = (rx, ry)."""
        try:
            a = self._index[(int(r1[0]), int(r1[1]))]
            b = self._index[(int(r2[0]), int(r2[1]))]
        except KeyError as exc:
            raise LookupError(f"configuration ({r1}, {r2}) outside window") from exc
        return float(self.values[a, b])


@dataclass
class CorrelationSet:
    """Patch-averaged correlation statistics on a side x side grid."""

    s2: np.ndarray
    phi: float
    side: int
    n_patches: int
    s3: Optional[S3Table] = None
    window_radius: Optional[float] = None

    @property
    def order(self):
        return 3 if self.s3 is not None else 2

    @property
    def cell_size(self):
        return 1.0 / self.side


def two_point(m):
    """S2(r) = (1/G) sum_j x_j x_{j+r} via the FFT autocorrelation."""
    x = m.cells.astype(np.float64)
    spec = np.fft.rfft2(x)
    s2 = np.fft.irfft2(spec * np.conj(spec), s=x.shape) / x.size
    return s2


def window_offsets(side, window_radius):
    """Canonically ordered min-image offsets with |r| <= window_radius."""
    if not 0.0 < window_radius <= 0.5:
        raise ParameterError("window_radius must lie in (0, 0.5]")
    rx, ry = displacement_components(side)
    radius_cells = window_radius * side
    mask = rx**2 + ry**2 <= radius_cells**2
    pts = np.column_stack([rx[mask], ry[mask]])
    order = np.lexsort((pts[:, 0], pts[:, 1]))
    return pts[order]


def three_point(m, window_radius):
    """Windowed S3 via one FFT cross-correlation per first displacement.

    For each r1 in the window, S3(0, r1, r2) = (1/G) sum_j x_j x_{j+r1}
    x_{j+r2} is the cross-correlation of y = x * shift(x, r1) with x,
    evaluated at every r2 in the window.
    """
    offsets = window_offsets(m.side, window_radius)
    if len(offsets) > 32768:
        raise ParameterError(
            f"S3 window holds {len(offsets)} offsets; shrink window_radius")
    x = m.cells.astype(np.float64)
    side = m.side
    spec_x = np.fft.rfft2(x)

    # x shifted by r = (rx, ry): value at j equals x[j + r]
    values = np.empty((len(offsets), len(offsets)), dtype=np.float64)
    chunk = max(1, 2**22 // (side * side))
    r2_rows = offsets[:, 1] % side
    r2_cols = offsets[:, 0] % side
    for start in range(0, len(offsets), chunk):
        block = offsets[start:start + chunk]
        shifted = np.stack([np.roll(x, (-ry, -rx), axis=(0, 1))
                            for rx, ry in block])
        corr = np.fft.irfft2(np.conj(np.fft.rfft2(shifted * x)) * spec_x,
                             s=(side, side))
        values[start:start + len(block)] = corr[:, r2_rows, r2_cols] / x.size
    return S3Table(offsets, values, side)


def average_correlations(patches, order=2, window_radius=None):
    """Arithmetic mean of per-patch S2 (and S3 for order = 3)."""
    if not patches:
        raise ParameterError("need at least one patch")
    if order not in (2, 3):
        raise ParameterError("order must be 2 or 3")
    side = patches[0].side
    if any(p.side != side for p in patches):
        raise ParameterError("patches must share a common side")
    s2 = np.zeros((side, side))
    phi = 0.0
    table = None
    for p in patches:
        s2 += two_point(p)
        phi += p.cells.mean()
    s2 /= len(patches)
    phi /= len(patches)
    if order == 3:
        if window_radius is None:
            raise ParameterError("order 3 requires a window_radius")
        for p in patches:
            t = three_point(p, window_radius)
            if table is None:
                table = t
            else:
                table.values += t.values
        table.values /= len(patches)
    return CorrelationSet(s2=s2, phi=float(phi), side=side,
                          n_patches=len(patches), s3=table,
                          window_radius=window_radius)


def total_correlation_2(cs):
    """chi(r) = S2(r) - phi^2."""
    return cs.s2 - cs.phi**2


def total_correlation_3(cs, r1, r2):
    """Third-order total correlation for cell displacements r1, r2.

    Delta_3 = S2(r1) S2(r2 - r1) - phi S3(0, r1, r2), the 2x2 determinant
    over the configuration {0, r1, r2}.
    """
    if cs.s3 is None:
        raise ParameterError("correlation set has no S3 table")
    side = cs.side
    s2_r1 = cs.s2[r1[1] % side, r1[0] % side]
    s2_d = cs.s2[(r2[1] - r1[1]) % side, (r2[0] - r1[0]) % side]
    return float(s2_r1 * s2_d - cs.phi * cs.s3.lookup(r1, r2))


@dataclass
class SpectralDensity:
    chi_k: np.ndarray
    k_grid: np.ndarray
    side: int


def spectral_density(cs):
    """chi_k = dV * DFT(chi), real up to rounding since chi is even."""
    chi = total_correlation_2(cs)
    dv = cs.cell_size**2
    chi_k = np.fft.fft2(chi).real * dv
    rx, ry = displacement_components(cs.side)
    k_grid = 2.0 * np.pi * np.hypot(rx.astype(float), ry.astype(float))
    return SpectralDensity(chi_k=chi_k, k_grid=k_grid, side=cs.side)


def write_correlations(cs, path):
    """NCECOR01 container: magic, u32 LE header length, JSON header,
    float64 LE s2 payload, then (order 3 only) 16-byte records
    (i16 r1x, i16 r1y, i16 r2x, i16 r2y, f64 value) until EOF."""
    header = {
        "side": cs.side,
        "phi": cs.phi,
        "order": cs.order,
        "n_patches": cs.n_patches,
        "window_radius": cs.window_radius,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CORR_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(cs.s2.astype("<f8").tobytes(order="C"))
        if cs.s3 is not None:
            offs = cs.s3.offsets
            n = len(offs)
            rec = np.zeros(n * n, dtype=[("r1x", "<i2"), ("r1y", "<i2"),
                                         ("r2x", "<i2"), ("r2y", "<i2"),
                                         ("v", "<f8")])
            a_idx, b_idx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            rec["r1x"] = offs[a_idx.ravel(), 0]
            rec["r1y"] = offs[a_idx.ravel(), 1]
            rec["r2x"] = offs[b_idx.ravel(), 0]
            rec["r2y"] = offs[b_idx.ravel(), 1]
            rec["v"] = cs.s3.values.ravel()
            fh.write(rec.tobytes())


def read_correlations(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CORR_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CORR_MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError("truncated header length")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise FormatError("truncated header")
        header = json.loads(blob.decode("utf-8"))
        side = int(header["side"])
        s2_bytes = fh.read(side * side * 8)
        if len(s2_bytes) != side * side * 8:
            raise FormatError("truncated s2 payload")
        s2 = np.frombuffer(s2_bytes, dtype="<f8").reshape(side, side).copy()
        table = None
        if int(header["order"]) == 3:
            rest = fh.read()
            if len(rest) % 16 != 0:
                raise FormatError("S3 record section length not a multiple of 16")
            rec = np.frombuffer(rest, dtype=[("r1x", "<i2"), ("r1y", "<i2"),
                                             ("r2x", "<i2"), ("r2y", "<i2"),
                                             ("v", "<f8")])
            offsets = np.unique(np.column_stack([rec["r1x"], rec["r1y"]]), axis=0)
            order = np.lexsort((offsets[:, 0], offsets[:, 1]))
            offsets = offsets[order]
            n = len(offsets)
            if n * n != len(rec):
                raise FormatError("S3 record count is not a full window square")
            index = {(int(rx), int(ry)): i for i, (rx, ry) in enumerate(offsets)}
            values = np.empty((n, n))
            a = [index[(int(x), int(y))] for x, y in zip(rec["r1x"], rec["r1y"])]
            b = [index[(int(x), int(y))] for x, y in zip(rec["r2x"], rec["r2y"])]
            values[a, b] = rec["v"]
            table = S3Table(offsets.astype(np.int64), values, side)
    return CorrelationSet(s2=s2, phi=float(header["phi"]), side=side,
                          n_patches=int(header["n_patches"]), s3=table,
                          window_radius=header.get("window_radius"))
