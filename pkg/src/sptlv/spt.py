"""Frequency-domain steerable pyramid (real, self-inverting) and subband organisation.

Conventions
-----------
* Angles are measured counter-clockwise from the +x (column) axis with +y
  pointing *up* the image, i.e. a frequency vector (wx, wy) with
  ``wy = -row_frequency``. A subband oriented at 90 degrees responds to
  horizontal stripes.
* FFTs are orthonormal and downsampling is spectral cropping, so the
  analysis operator A satisfies A^T A = I and synthesis is exactly A^T.
  Boundary handling is therefore circular.
* Level ``l`` subbands live on a grid 2**l times smaller than the input; in
  orthonormal units their amplitude is 2**l times the amplitude of the
  corresponding band-limited image. :func:`organize` undoes that factor.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)


class UnsupportedSizeError(ValueError):
    """Image size cannot be halved ``scales`` times without ambiguity."""


class Variant(str, enum.Enum):
    """Network variants compared in the ablation ladder."""

    BASELINE = "Baseline"
    BASELINE_AUG = "BaselineAug"
    SPT_AC = "SPT_AC"
    SPT_AC_H = "SPT_AC_H"
    SPT_AC_L = "SPT_AC_L"
    SPT_OC_L = "SPT_OC_L"
    SPT_SC_L = "SPT_SC_L"

    @property
    def uses_spt(self) -> bool:
        return self not in (Variant.BASELINE, Variant.BASELINE_AUG)

    @classmethod
    def parse(cls, s) -> "Variant":
        if isinstance(s, cls):
            return s
        key = str(s).replace("-", "_")
        for v in cls:
            if v.value.lower() == key.lower() or v.name.lower() == key.lower():
                return v
        raise ValueError(f"unknown variant {s!r}")


# ---------------------------------------------------------------- filter bank
def _log_raised_cosine(r: np.ndarray, r_lo: float) -> np.ndarray:
    """Lowpass profile: 1 below ``r_lo``, 0 above ``2 r_lo``, cos transition in log2 radius."""
    out = np.zeros_like(r)
    out[r <= r_lo] = 1.0
    band = (r > r_lo) & (r < 2 * r_lo)
    out[band] = np.cos(0.5 * np.pi * np.log2(r[band] / r_lo))
    return out


def _polar_grid(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    wy = -2 * np.pi * np.fft.fftfreq(m)[:, None]
    wx = 2 * np.pi * np.fft.fftfreq(n)[None, :]
    r = np.sqrt(wx ** 2 + wy ** 2)
    theta = np.arctan2(np.broadcast_to(wy, r.shape), np.broadcast_to(wx, r.shape))
    return r, theta


def _angular_norm(order: int) -> float:
    # makes sum_k alpha^2 cos^(2K)(theta - theta_k) == 1 for K+1 equispaced angles
    return math.sqrt((2.0 ** (2 * order)) * math.factorial(order) ** 2
                     / ((order + 1) * math.factorial(2 * order)))


def _crop_index(n: int) -> np.ndarray:
    q = n // 4
    return np.r_[0:q, n - q:n]


@dataclass(frozen=True, eq=False)
class Level:
    shape: tuple
    bands: np.ndarray      # (K+1, m, n) real oriented masks
    lowpass: np.ndarray    # (m, n) real mask feeding the next level
    rows: np.ndarray       # crop indices into this level's spectrum
    cols: np.ndarray


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Fixed analysis/synthesis masks for one image size.

    ``levels[0]`` is Scale 1 (full resolution), ``levels[1]`` Scale 2, ...
    """

    shape: tuple
    scales: int
    orientations: int
    offset: float
    hi0: np.ndarray
    lo0: np.ndarray
    levels: tuple

    @property
    def order(self) -> int:
        return self.orientations - 1

    @property
    def angles(self) -> np.ndarray:
        return self.offset + np.pi * np.arange(self.orientations) / self.orientations

    @property
    def phase(self) -> complex:
        return (-1j) ** self.order


def build_filter_bank(M: int, N: int, scales: int = 2, orientations: int = 3,
                      offset: float = np.pi / 6) -> FilterBank:
    """Construct the tight-frame masks for an M x N image.

    Raises
    ------
    UnsupportedSizeError
        If M or N is smaller than 16 or not divisible by ``2**scales``.
    """
    if orientations < 2:
        raise ValueError("need at least two orientations")
    if scales < 1:
        raise ValueError("need at least one scale")
    div = 2 ** scales
    if M < 16 or N < 16 or M % div or N % div:
        raise UnsupportedSizeError(
            f"image size {M}x{N} must be >= 16 and divisible by {div} for {scales} scales")
    order = orientations - 1
    alpha = _angular_norm(order)
    r, theta = _polar_grid(M, N)
    lo0 = _log_raised_cosine(r, np.pi / 2)
    hi0 = np.sqrt(np.clip(1.0 - lo0 ** 2, 0.0, None))
    levels = []
    m, n = M, N
    for _ in range(scales):
        r, theta = _polar_grid(m, n)
        lo = _log_raised_cosine(r, np.pi / 4)
        hi = np.sqrt(np.clip(1.0 - lo ** 2, 0.0, None))
        ang = offset + np.pi * np.arange(orientations) / orientations
        bands = np.stack([hi * alpha * np.cos(theta - a) ** order for a in ang])
        levels.append(Level((m, n), bands, lo, _crop_index(m), _crop_index(n)))
        m, n = m // 2, n // 2
    return FilterBank((M, N), scales, orientations, float(offset), hi0, lo0, tuple(levels))


# ------------------------------------------------------------------ pyramid
@dataclass
class Pyramid:
    """Subbands of one decomposition (leading batch axes allowed).

    ``oriented[l][k]`` is orientation k at Scale l+1.
    """

    lowpass: np.ndarray
    oriented: list
    highpass: Optional[np.ndarray] = None

    @property
    def lossy(self) -> bool:
        return self.highpass is None

    def subbands(self) -> dict:
        """Flat subband numbering for 2 scales x 3 orientations: x0 lowpass,
        x1..x3 Scale 2, x4..x6 Scale 1, x7 highpass."""
        out = {"x0": self.lowpass}
        idx = 1
        for level in reversed(self.oriented):
            for band in level:
                out[f"x{idx}"] = band
                idx += 1
        if self.highpass is not None:
            out[f"x{idx}"] = self.highpass
        return out


def _fft(x):
    return np.fft.fft2(x, norm="ortho")


def _ifft_real(X):
    return np.fft.ifft2(X, norm="ortho").real


def _check(x: np.ndarray, bank: FilterBank):
    if tuple(x.shape[-2:]) != tuple(bank.shape):
        raise ValueError(f"image shape {x.shape[-2:]} does not match filter bank {bank.shape}")


def decompose(x, bank: FilterBank, keep_highpass: bool = True) -> Pyramid:
    """Analysis: split ``x`` (..., M, N) into highpass, oriented bands and lowpass."""
    x = np.asarray(x, dtype=np.float64)
    _check(x, bank)
    X = _fft(x)
    high = _ifft_real(X * bank.hi0) if keep_highpass else None
    Y = X * bank.lo0
    oriented = []
    for lev in bank.levels:
        oriented.append([_ifft_real(bank.phase * b * Y) for b in lev.bands])
        Y = (Y * lev.lowpass)[..., lev.rows, :][..., :, lev.cols]
    return Pyramid(_ifft_real(Y), oriented, high)


def reconstruct(p: Pyramid, bank: FilterBank) -> tuple[np.ndarray, bool]:
    """Synthesis (adjoint of :func:`decompose`).

    Returns ``(image, lossy)``; ``lossy`` is True when the pyramid carries no
    highpass band, in which case the result omits that band's contribution.
    """
    Y = _fft(p.lowpass)
    for lev, bands in zip(reversed(bank.levels), reversed(p.oriented)):
        up = np.zeros(Y.shape[:-2] + lev.shape, dtype=complex)
        up[..., lev.rows[:, None], lev.cols[None, :]] = Y
        Y = up * lev.lowpass
        conj_phase = np.conj(bank.phase)
        for b, band in zip(lev.bands, bands):
            Y = Y + conj_phase * b * _fft(band)
    X = Y * bank.lo0
    if p.highpass is not None:
        X = X + bank.hi0 * _fft(p.highpass)
    else:
        logger.debug("reconstruction without highpass band is lossy")
    return _ifft_real(X), p.highpass is None


def highpass_synthesis(highpass: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Image-domain contribution of a highpass band to the reconstruction."""
    return _ifft_real(bank.hi0 * _fft(highpass))


# ----------------------------------------------------------------- steering
def steering_weights(order: int, angles, target: float) -> np.ndarray:
    """Weights w with cos^K(t - target) == sum_k w_k cos^K(t - angles[k]) for all t."""
    angles = np.asarray(angles, dtype=float)
    t = np.linspace(0, 2 * np.pi, 8 * (order + 1) + 1)[:-1]
    basis = np.cos(t[:, None] - angles[None, :]) ** order
    w, *_ = np.linalg.lstsq(basis, np.cos(t - target) ** order, rcond=None)
    return w


def steer(responses, angle: float, angles=None, order: Optional[int] = None) -> np.ndarray:
    """Interpolate the oriented responses of one scale to an arbitrary angle.

    ``angles`` defaults to K+1 equispaced angles starting at 0.
    """
    responses = [np.asarray(r) for r in responses]
    shapes = {r.shape for r in responses}
    if len(shapes) != 1:
        raise ValueError(f"steer: subbands have mismatched shapes {shapes}")
    n = len(responses)
    order = n - 1 if order is None else order
    if angles is None:
        angles = np.pi * np.arange(n) / n
    w = steering_weights(order, angles, angle)
    return np.tensordot(w, np.stack(responses), axes=1)


# --------------------------------------------------------------- organise
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear resampling matrix (half-pixel centres, edge clamped)."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    R = np.zeros((n_out, n_in))
    R[np.arange(n_out), lo] += 1 - frac
    R[np.arange(n_out), hi] += frac
    return R


@dataclass(eq=False)
class FrontEnd:
    """Fixed linear map from raw slices (B, M, N) to network input (B*G, C, M, N).

    Linear by construction, so :meth:`adjoint` backpropagates through it.
    """

    variant: Variant
    bank: Optional[FilterBank]
    shape: tuple
    _up: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, variant, M: int = 80, N: int = 80, scales: int = 2, orientations: int = 3):
        variant = Variant.parse(variant)
        bank = build_filter_bank(M, N, scales, orientations) if variant.uses_spt else None
        fe = cls(variant, bank, (M, N))
        if bank is not None:
            if variant in (Variant.SPT_OC_L, Variant.SPT_SC_L) and (scales, orientations) != (2, 3):
                raise ValueError(f"{variant.value} requires 2 scales x 3 orientations")
            for l in range(1, scales + 1):
                fe._up[l] = (bilinear_matrix(M, M >> l), bilinear_matrix(N, N >> l))
        return fe

    @property
    def groups(self) -> int:
        return {Variant.SPT_SC_L: 3, Variant.SPT_OC_L: 2}.get(self.variant, 1)

    @property
    def channels(self) -> int:
        v = self.variant
        if not v.uses_spt:
            return 1
        nb = self.bank.scales * self.bank.orientations
        return {Variant.SPT_AC: nb, Variant.SPT_AC_H: nb + 1, Variant.SPT_AC_L: nb + 1,
                Variant.SPT_OC_L: self.bank.orientations + 1, Variant.SPT_SC_L: self.bank.scales + 1}[v]

    # level-l amplitude correction and upsampling, plus adjoints
    def _lift(self, band, level):
        s = 2.0 ** -level
        if level == 0:
            return band
        Rh, Rw = self._up[level]
        return s * (Rh @ band @ Rw.T)

    def _lift_adj(self, g, level):
        if level == 0:
            return g
        Rh, Rw = self._up[level]
        return 2.0 ** -level * (Rh.T @ g @ Rw)

    def _layout(self):
        """List of groups; each group is a list of (kind, level, orientation) channels."""
        v, bank = self.variant, self.bank
        L = bank.scales
        low = ("low", L, None)
        orient = [[("band", l, k) for k in range(bank.orientations)] for l in range(L)]
        if v is Variant.SPT_SC_L:
            return [[low] + [orient[l][k] for l in reversed(range(L))] for k in range(bank.orientations)]
        if v is Variant.SPT_OC_L:
            return [[low] + orient[l] for l in range(L)]
        flat = [c for l in reversed(range(L)) for c in orient[l]]
        if v is Variant.SPT_AC_H:
            return [flat + [("high", 0, None)]]
        if v is Variant.SPT_AC_L:
            return [[low] + flat]
        return [flat]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        B = x.shape[0]
        if not self.variant.uses_spt:
            return x.reshape(B, 1, *self.shape)
        dtype = x.dtype
        keep_high = self.variant is Variant.SPT_AC_H
        p = decompose(x, self.bank, keep_highpass=keep_high)
        layout = self._layout()
        out = np.empty((B, len(layout), len(layout[0])) + self.shape, dtype=dtype)
        for gi, group in enumerate(layout):
            for ci, (kind, level, k) in enumerate(group):
                if kind == "low":
                    out[:, gi, ci] = self._lift(p.lowpass, level)
                elif kind == "high":
                    out[:, gi, ci] = p.highpass
                else:
                    out[:, gi, ci] = self._lift(p.oriented[level][k], level)
        return out.reshape(B * len(layout), len(layout[0]), *self.shape)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g)
        if not self.variant.uses_spt:
            return g.reshape(g.shape[0], *self.shape)
        dtype = g.dtype
        layout = self._layout()
        B = g.shape[0] // len(layout)
        g = g.reshape(B, len(layout), len(layout[0]), *self.shape).astype(np.float64)
        bank = self.bank
        M, N = self.shape
        L = bank.scales
        low = np.zeros((B, M >> L, N >> L))
        oriented = [[np.zeros((B, M >> l, N >> l)) for _ in range(bank.orientations)] for l in range(L)]
        high = np.zeros((B, M, N))
        for gi, group in enumerate(layout):
            for ci, (kind, level, k) in enumerate(group):
                gg = g[:, gi, ci]
                if kind == "low":
                    low += self._lift_adj(gg, level)
                elif kind == "high":
                    high += gg
                else:
                    oriented[level][k] += self._lift_adj(gg, level)
        img, _ = reconstruct(Pyramid(low, oriented, high), bank)
        return img.astype(dtype)

    def input_shape(self, batch: int = 1) -> tuple:
        """Network input shape for ``batch`` slices: (batch*G, C, M, N)."""
        return (batch * self.groups, self.channels) + tuple(self.shape)


def organize(p: Pyramid, variant, bank: FilterBank) -> tuple[np.ndarray, int]:
    """Arrange a pyramid of (B, M, N) slices as network input.

    Returns ``(array of shape (B*G, C, M, N), G)`` where G is the number of
    groups sharing the CNN (orientations for SPT_SC_L, scales for SPT_OC_L).
    """
    variant = Variant.parse(variant)
    if not variant.uses_spt:
        raise ValueError(f"{variant.value} does not use a pyramid")
    if len(p.oriented) != bank.scales or len(p.oriented[0]) != bank.orientations:
        raise ValueError("pyramid does not match filter bank")
    if variant is Variant.SPT_AC_H and p.highpass is None:
        raise ValueError("SPT_AC_H needs the highpass band")
    M, N = bank.shape
    fe = FrontEnd.build(variant, M, N, bank.scales, bank.orientations)
    lowpass = np.asarray(p.lowpass)
    B = 1 if lowpass.ndim == 2 else lowpass.shape[0]

    def b(a):
        a = np.asarray(a)
        return a.reshape((B,) + a.shape[-2:])

    layout = fe._layout()
    out = np.empty((B, len(layout), len(layout[0]), M, N))
    for gi, group in enumerate(layout):
        for ci, (kind, level, k) in enumerate(group):
            if kind == "low":
                out[:, gi, ci] = fe._lift(b(p.lowpass), level)
            elif kind == "high":
                out[:, gi, ci] = b(p.highpass)
            else:
                out[:, gi, ci] = fe._lift(b(p.oriented[level][k]), level)
    return out.reshape(B * len(layout), len(layout[0]), M, N), len(layout)


# ------------------------------------------------------------------- dump
def dump_pyramid(p: Pyramid, bank: FilterBank, directory) -> Path:
    """Write each subband as raw little-endian f32 plus a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    names = p.subbands()
    L, K1 = bank.scales, bank.orientations
    for i, (sid, arr) in enumerate(names.items()):
        arr = np.asarray(arr, dtype="<f4")
        if sid == "x0":
            scale, deg = L + 1, None
        elif i <= L * K1:
            j = i - 1
            scale = L - j // K1
            deg = float(np.degrees(bank.angles[j % K1]))
        else:
            scale, deg = 0, None
        (d / f"{sid}.f32").write_bytes(arr.tobytes())
        entries.append({"id": sid, "shape": list(arr.shape), "scale": scale,
                        "orientation_deg": deg, "file": f"{sid}.f32"})
    (d / "manifest.json").write_text(json.dumps({"subbands": entries}, indent=2))
    return d
