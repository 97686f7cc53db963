"""Bi-phase microstructures on the periodic unit square.

Fields are binary occupancy grids (1 = contrast phase, 0 = matrix phase)
stored as (side, side) uint8 arrays indexed [iy, ix], row-major y-then-x.
Generation uses a Gaussian level set: filtered white noise thresholded at
the empirical quantile, so the realized volume fraction is exactly
round(phi * G) / G for every seed.  The RNG is numpy's PCG64 keyed by the
64-bit seed; all floating point is IEEE double.
"""

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError, ParameterError

FIELD_MAGIC = b"NCEFLD01"


@dataclass(frozen=True)
class GenerationMeta:
    seed: int
    corr_len_x: float
    corr_len_y: float
    target_phi: float

    def __post_init__(self):
        if not (self.corr_len_x > 0 and self.corr_len_y > 0):
            raise ParameterError("correlation lengths must be positive")
        if not 0.0 < self.target_phi < 1.0:
            raise ParameterError("target_phi must lie in (0, 1)")


@dataclass(frozen=True)
class Microstructure:
    """Binary field on the unit square; cell_size = 1/side."""

    cells: np.ndarray
    meta: Optional[GenerationMeta] = None

    def __post_init__(self):
        c = np.asarray(self.cells)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ParameterError(f"cells must be square 2D, got shape {c.shape}")
        if not np.isin(c, (0, 1)).all():
            raise ParameterError("cell values must be 0 or 1")
        object.__setattr__(self, "cells", c.astype(np.uint8, copy=False))

    @property
    def side(self):
        return self.cells.shape[0]

    @property
    def cell_size(self):
        return 1.0 / self.side


def volume_fraction(m):
    """Contrast-phase volume fraction phi = <x_i>."""
    return float(m.cells.mean())


def _gaussian_filter_spectrum(side, corr_len_x, corr_len_y):
    freq = np.fft.fftfreq(side) * side          # integer frequencies, min-image
    kx = 2.0 * np.pi * freq[np.newaxis, :]      # x along axis 1
    ky = 2.0 * np.pi * freq[:, np.newaxis]
    return np.exp(-0.5 * (kx**2 * corr_len_x**2 + ky**2 * corr_len_y**2))


def generate_gaussian_levelset(seed, side, corr_len_x, corr_len_y, phi):
    """Periodic Gaussian level-set microstructure.

    White noise is smoothed in the Fourier domain with the anisotropic
    filter exp(-(kx^2 Lx^2 + ky^2 Ly^2)/2) and thresholded at the phi
    quantile.  Ties are broken by cell index, so the result is fully
    deterministic for a given seed.
    """
    if side < 4 or side & (side - 1) != 0:
        raise ParameterError("side must be a power of two, side >= 4")
    if not 0.0 < phi < 1.0:
        raise ParameterError("phi must lie in (0, 1)")
    if not (0.0 < corr_len_x <= 0.5 and 0.0 < corr_len_y <= 0.5):
        raise ParameterError("correlation lengths must lie in (0, 0.5]")

    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.standard_normal((side, side))
    spectrum = np.fft.fft2(noise) * _gaussian_filter_spectrum(side, corr_len_x, corr_len_y)
    levelset = np.fft.ifft2(spectrum).real

    count = int(round(phi * side * side))
    order = np.argsort(levelset, axis=None, kind="stable")
    cells = np.zeros(side * side, dtype=np.uint8)
    cells[order[side * side - count:]] = 1
    meta = GenerationMeta(seed=int(seed), corr_len_x=corr_len_x,
                          corr_len_y=corr_len_y, target_phi=phi)
    return Microstructure(cells.reshape(side, side), meta)


def sample_patches(m, patch_side, count, seed):
    """Cut `count` patches of side `patch_side` at random anchors, periodic."""
    if patch_side > m.side:
        raise ParameterError("patch_side exceeds the field side")
    if patch_side < 1 or count < 1:
        raise ParameterError("patch_side and count must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    anchors = rng.integers(0, m.side, size=(count, 2))
    idx = np.arange(patch_side)
    patches = []
    for ay, ax in anchors:
        rows = (ay + idx) % m.side
        cols = (ax + idx) % m.side
        patches.append(Microstructure(m.cells[np.ix_(rows, cols)]))
    return patches


def write_field(m, path, header_extra=None):
    """Write the NCEFLD01 container: magic, u32 LE header length, JSON
    header, then side^2 uint8 cells row-major (y-major then x)."""
    header = {
        "side": m.side,
        "d": 2,
        "phi": volume_fraction(m),
        "seed": m.meta.seed if m.meta else None,
        "corr_len_x": m.meta.corr_len_x if m.meta else None,
        "corr_len_y": m.meta.corr_len_y if m.meta else None,
    }
    if header_extra:
        header.update(header_extra)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(m.cells.tobytes(order="C"))


def read_field(path):
    """Read a field container written by write_field; round-trip exact."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FIELD_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {FIELD_MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError("truncated header length")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise FormatError("truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable header: {exc}") from exc
        side = int(header["side"])
        payload = fh.read()
    if len(payload) != side * side:
        raise FormatError(
            f"payload length {len(payload)} does not match side^2 = {side * side}")
    cells = np.frombuffer(payload, dtype=np.uint8).reshape(side, side)
    meta = None
    if header.get("seed") is not None:
        meta = GenerationMeta(seed=int(header["seed"]),
                              corr_len_x=float(header["corr_len_x"]),
                              corr_len_y=float(header["corr_len_y"]),
                              target_phi=float(header["phi"]))
    return Microstructure(cells.copy(), meta)
