"""Synthetic cine short-axis LV phantoms with analytic ground truth.

Geometry per frame: an elliptical cavity of semi-axes ``(a, b)`` tilted by
``tilt`` and a myocardial wall of angular thickness profile ``w(θ)`` laid
radially outside it, both centred at ``center``. Angles are measured
counter-clockwise from +x with y pointing up (image row 0 is the top).

Index definitions (mm / mm^2):

* ``A2`` cavity area, ``A1`` myocardium area;
* ``D_i`` length of the cavity chord through the centre at 30/90/150 deg;
* ``T_j`` mean radial wall extent over the 60 deg wedge centred at
  30 + 60 (j-1) deg.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

FRAMES = 20
N_INDICES = 11
D_ANGLES = np.deg2rad([30.0, 90.0, 150.0])
T_ANGLES = np.deg2rad(30.0 + 60.0 * np.arange(6))
WEDGE = np.deg2rad(60.0)

MAGIC = b"PQDS"
VERSION = 1


class PhantomConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class PhantomConfig:
    """Parameters of one synthetic subject (lengths in pixels)."""

    size: tuple = (80, 80)
    frames: int = FRAMES
    spacing: float = 1.5
    center: tuple = (0.0, 0.0)
    radius_ed: float = 13.0
    ellipticity: float = 1.0          # b / a of the cavity
    tilt: float = 0.0                 # radians
    contraction: float = 0.3          # fractional radius reduction at end-systole
    phase: float = 0.0                # radians
    thickness: float = 5.0
    modulation: tuple = (0.0,) * 6    # relative per-segment thickness change
    thickening: float = 0.4           # relative wall thickening at end-systole
    blood: float = 0.85
    myocardium: float = 0.35
    background: float = 0.12
    bias: float = 0.15
    noise: float = 0.02
    seed: int = 0
    subject_id: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.center = tuple(float(c) for c in self.center)
        self.modulation = tuple(float(m) for m in self.modulation)

    @classmethod
    def sample(cls, seed: int, subject_id: int = 0, size=(80, 80)) -> "PhantomConfig":
        """Random but anatomically plausible configuration."""
        rng = np.random.default_rng([seed, subject_id])
        return cls(
            size=tuple(size),
            spacing=float(rng.uniform(1.2, 1.8)),
            center=tuple(rng.uniform(-3.0, 3.0, 2)),
            radius_ed=float(rng.uniform(10.0, 15.0)),
            ellipticity=float(rng.uniform(0.75, 1.0)),
            tilt=float(rng.uniform(0.0, np.pi)),
            contraction=float(rng.uniform(0.2, 0.4)),
            phase=float(rng.uniform(-0.3, 0.3)),
            thickness=float(rng.uniform(4.0, 7.0)),
            modulation=tuple(rng.uniform(-0.25, 0.25, 6)),
            thickening=float(rng.uniform(0.2, 0.6)),
            blood=float(rng.uniform(0.75, 0.9)),
            myocardium=float(rng.uniform(0.3, 0.4)),
            background=float(rng.uniform(0.08, 0.16)),
            bias=float(rng.uniform(0.05, 0.2)),
            noise=0.02,
            seed=int(seed),
            subject_id=int(subject_id),
        )

    def validate(self) -> None:
        if not (self.blood > self.myocardium > self.background >= 0):
            raise PhantomConfigError("intensities must satisfy blood > myocardium > background >= 0")
        if self.radius_ed <= 0 or self.thickness <= 0 or self.spacing <= 0:
            raise PhantomConfigError("radii, thickness and spacing must be positive")
        if not 0 < self.ellipticity <= 1:
            raise PhantomConfigError("ellipticity must lie in (0, 1]")
        if not 0 <= self.contraction < 1:
            raise PhantomConfigError("contraction must lie in [0, 1)")
        if any(abs(m) >= 1 for m in self.modulation):
            raise PhantomConfigError("modulation amplitudes must lie in (-1, 1)")
        for t in range(self.frames):
            g = frame_geometry(self, t)
            if g.max_outer_radius() + np.hypot(*g.center) > min(self.size) / 2 - 1.0:
                raise PhantomConfigError(f"frame {t}: myocardium leaves the field of view")


@dataclass(frozen=True)
class Geometry:
    """Cavity ellipse and wall profile of a single frame (pixel units)."""

    center: tuple
    a: float
    b: float
    tilt: float
    thickness: float
    modulation: tuple
    rotation: float = 0.0   # extra rotation applied to the whole shape

    def inner_radius(self, theta) -> np.ndarray:
        phi = np.asarray(theta) - self.tilt - self.rotation
        return self.a * self.b / np.sqrt((self.b * np.cos(phi)) ** 2 + (self.a * np.sin(phi)) ** 2)

    def wall(self, theta) -> np.ndarray:
        """Smooth periodic thickness profile interpolating the segment values."""
        phi = np.asarray(theta, dtype=float) - self.rotation
        vals = self.thickness * (1.0 + np.asarray(self.modulation))
        # trigonometric interpolation through the 6 segment centres
        c = np.fft.rfft(vals) / 6
        out = np.full(phi.shape, c[0].real)
        for k in (1, 2):
            out = out + 2 * np.real(c[k] * np.exp(1j * k * (phi - T_ANGLES[0])))
        out = out + np.real(c[3]) * np.cos(3 * (phi - T_ANGLES[0]))
        return out

    def outer_radius(self, theta) -> np.ndarray:
        return self.inner_radius(theta) + self.wall(theta)

    def max_outer_radius(self) -> float:
        th = np.linspace(0, 2 * np.pi, 721)
        return float(self.outer_radius(th).max())

    def moved(self, shift=(0.0, 0.0), rotation: float = 0.0, pivot=(0.0, 0.0)) -> "Geometry":
        """Rotate about ``pivot`` (counter-clockwise) and then translate by ``shift``."""
        c, s = np.cos(rotation), np.sin(rotation)
        x, y = self.center[0] - pivot[0], self.center[1] - pivot[1]
        center = (c * x - s * y + pivot[0] + shift[0], s * x + c * y + pivot[1] + shift[1])
        return replace(self, center=center, rotation=self.rotation + rotation)


def frame_geometry(cfg: PhantomConfig, t: int) -> Geometry:
    # contraction-relaxation cycle: 1 at end-diastole, 1 - contraction at end-systole
    s = 1.0 - cfg.contraction * 0.5 * (1.0 - np.cos(2 * np.pi * t / cfg.frames + cfg.phase))
    a = cfg.radius_ed
    b = cfg.radius_ed * cfg.ellipticity
    squeeze = (1.0 - s) / cfg.contraction if cfg.contraction > 0 else 0.0
    thick = cfg.thickness * (1.0 + cfg.thickening * squeeze)
    return Geometry(cfg.center, a * s, b * s, cfg.tilt, thick, cfg.modulation)


def analytic_indices(g: Geometry, spacing: float, n_quad: int = 4096) -> np.ndarray:
    """Exact indices of a frame geometry (periodic quadrature for the wall)."""
    th = np.arange(n_quad) * (2 * np.pi / n_quad)
    r_in = g.inner_radius(th)
    r_out = r_in + g.wall(th)
    a2 = np.pi * g.a * g.b
    a1 = 0.5 * np.mean(r_out ** 2 - r_in ** 2) * 2 * np.pi
    dims = 2.0 * g.inner_radius(D_ANGLES)
    thick = []
    for phi in T_ANGLES:
        u = phi - WEDGE / 2 + (np.arange(n_quad // 6) + 0.5) * (WEDGE / (n_quad // 6))
        thick.append(g.wall(u).mean())
    sp = spacing
    return np.concatenate([[a1 * sp * sp, a2 * sp * sp], dims * sp, np.asarray(thick) * sp])


# ------------------------------------------------------------------ rendering
def _grid(size, supersample: int = 1):
    M, N = size
    ss = supersample
    ys = (M - 1) / 2 - (np.arange(M * ss) + 0.5) / ss + 0.5
    xs = (np.arange(N * ss) + 0.5) / ss - 0.5 - (N - 1) / 2
    return np.meshgrid(xs, ys)


def masks(g: Geometry, size=(80, 80), supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (cavity, myocardium) masks sampled at sub-pixel centres."""
    X, Y = _grid(size, supersample)
    dx, dy = X - g.center[0], Y - g.center[1]
    rho = np.hypot(dx, dy)
    th = np.arctan2(dy, dx)
    r_in = g.inner_radius(th)
    cavity = rho < r_in
    myo = (rho >= r_in) & (rho < r_in + g.wall(th))
    return cavity, myo


def _smooth_field(rng, size, scale: float, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(size), sigma, mode="wrap")
    return scale * f / (f.std() + 1e-12)


def render(cfg: PhantomConfig, geoms: Sequence[Geometry], rng: np.random.Generator,
           supersample: int = 4) -> np.ndarray:
    M, N = cfg.size
    X, Y = _grid(cfg.size)
    # low-order multiplicative bias field
    cx, cy = rng.uniform(-1, 1, 2)
    bias = 1.0 + cfg.bias * (cx * X / (N / 2) + cy * Y / (M / 2))
    texture = _smooth_field(rng, (M, N), 0.03, 1.5)
    frames = np.empty((len(geoms), M, N))
    ss = supersample
    for t, g in enumerate(geoms):
        cav, myo = masks(g, cfg.size, ss)
        img = np.where(cav, cfg.blood, np.where(myo, cfg.myocardium, cfg.background))
        img = img.reshape(M, ss, N, ss).mean(axis=(1, 3))
        img = img * bias + texture * (img > 0) + rng.normal(0.0, cfg.noise, (M, N))
        frames[t] = img
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


@dataclass
class CineSequence:
    frames: np.ndarray          # (T, M, N) float32 in [0, 1]
    truth: np.ndarray           # (T, 11) float32, mm and mm^2
    spacing: float
    subject_id: int = 0
    config: Optional[PhantomConfig] = field(default=None, repr=False)
    geometries: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        if self.frames.shape[0] != FRAMES or self.truth.shape != (FRAMES, N_INDICES):
            raise DatasetError(f"expected {FRAMES} frames with {N_INDICES} indices")

    @property
    def shape(self) -> tuple:
        return self.frames.shape[1:]

    def with_frames(self, frames: np.ndarray) -> "CineSequence":
        return replace(self, frames=np.asarray(frames, dtype=np.float32))


def generate_subject(cfg: PhantomConfig) -> CineSequence:
    cfg.validate()
    geoms = [frame_geometry(cfg, t) for t in range(cfg.frames)]
    rng = np.random.default_rng([cfg.seed, cfg.subject_id, 1])
    frames = render(cfg, geoms, rng)
    truth = np.stack([analytic_indices(g, cfg.spacing) for g in geoms]).astype(np.float32)
    return CineSequence(frames, truth, float(np.float32(cfg.spacing)), cfg.subject_id, cfg, geoms)


def generate_dataset(n_subjects: int, seed: int, size=(80, 80)) -> list[CineSequence]:
    return [generate_subject(PhantomConfig.sample(seed, i, size)) for i in range(n_subjects)]


# ------------------------------------------------------------- rasterization
def _first_crossing(field_img: np.ndarray, origin, angles, spacing_px: float, r_max: float) -> np.ndarray:
    """Distance (mask pixels) from ``origin`` to the first 0.5 crossing along each ray."""
    steps = np.arange(0.0, r_max, 0.25)
    ang = np.asarray(angles)[:, None]
    xs = origin[0] + steps[None, :] * np.cos(ang)
    ys = origin[1] + steps[None, :] * np.sin(ang)
    M, N = field_img.shape
    rows = (M - 1) / 2 - ys
    cols = xs + (N - 1) / 2
    vals = ndimage.map_coordinates(field_img, [rows.ravel(), cols.ravel()], order=1,
                                   mode="constant", cval=0.0).reshape(xs.shape)
    out = np.empty(len(ang))
    for k, v in enumerate(vals):
        below = np.nonzero(v < 0.5)[0]
        if below.size == 0:
            out[k] = r_max
            continue
        j = below[0]
        if j == 0:
            out[k] = 0.0
            continue
        v0, v1 = v[j - 1], v[j]
        out[k] = steps[j - 1] + (v0 - 0.5) / (v0 - v1) * (steps[j] - steps[j - 1])
    return out


def rasterize_indices(cavity: np.ndarray, myocardium: np.ndarray, spacing: float,
                      rays_per_wedge: int = 61) -> np.ndarray:
    """Measure the 11 indices from boolean masks (``spacing`` is mm per mask pixel).

    Areas are pixel counts; chords and wall extents are 0.5-level crossings
    of the bilinearly interpolated masks along rays from the cavity centroid.
    """
    cavity = np.asarray(cavity, dtype=bool)
    myocardium = np.asarray(myocardium, dtype=bool)
    if not cavity.any() or not myocardium.any():
        raise ValueError("cavity and myocardium masks must be non-empty")
    epi = cavity | myocardium
    ring = epi & ~cavity
    M, N = cavity.shape
    rr, cc = np.nonzero(cavity)
    origin = (cc.mean() - (N - 1) / 2, (M - 1) / 2 - rr.mean())
    r_max = float(np.hypot(M, N))
    cav_f, epi_f = cavity.astype(float), epi.astype(float)
    dims = []
    for phi in D_ANGLES:
        fwd, back = _first_crossing(cav_f, origin, [phi, phi + np.pi], 1.0, r_max)
        dims.append(fwd + back)
    thick = []
    for phi in T_ANGLES:
        u = phi - WEDGE / 2 + (np.arange(rays_per_wedge) + 0.5) * (WEDGE / rays_per_wedge)
        r_in = _first_crossing(cav_f, origin, u, 1.0, r_max)
        r_out = _first_crossing(epi_f, origin, u, 1.0, r_max)
        thick.append(np.mean(r_out - r_in))
    sp = spacing
    return np.concatenate([[ring.sum() * sp * sp, cavity.sum() * sp * sp],
                           np.asarray(dims) * sp, np.asarray(thick) * sp])


def raster_truth(seq: CineSequence, supersample: int = 6) -> np.ndarray:
    """Oracle indices of every frame from supersampled analytic masks."""
    if seq.geometries is None:
        raise ValueError("sequence carries no geometry")
    out = [rasterize_indices(*masks(g, seq.shape, supersample), seq.spacing / supersample)
           for g in seq.geometries]
    return np.stack(out)


# --------------------------------------------------------------- normalisation
def index_scale(spacing: float, size) -> np.ndarray:
    """Per-index divisors mapping mm / mm^2 to the normalised training targets."""
    M, N = size
    scale = np.full(N_INDICES, spacing * max(M, N))
    scale[:2] = spacing * spacing * M * N
    return scale


def normalize(truth: np.ndarray, spacing: float, size) -> np.ndarray:
    return np.asarray(truth) / index_scale(spacing, size)


def denormalize(values: np.ndarray, spacing: float, size) -> np.ndarray:
    return np.asarray(values) * index_scale(spacing, size)


# --------------------------------------------------------------- augmentation
@dataclass(frozen=True)
class AugmentParams:
    crop: tuple = (0, 0, 0, 0)      # pixels removed from top, bottom, left, right
    pad_shift: tuple = (0, 0)       # (rows, cols) offset of the crop in the zero canvas
    shift: tuple = (0.0, 0.0)       # (x, y) translation in pixels, y up
    rotation: float = 0.0           # radians, counter-clockwise
    contrast: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator, size) -> "AugmentParams":
        M, N = size
        my, mx = int(0.1 * M), int(0.1 * N)
        top, bottom = rng.integers(0, my // 2 + 1, 2)
        left, right = rng.integers(0, mx // 2 + 1, 2)
        pr = int(rng.integers(-(top + bottom) // 2, (top + bottom) // 2 + 1)) if top + bottom else 0
        pc = int(rng.integers(-(left + right) // 2, (left + right) // 2 + 1)) if left + right else 0
        return cls(crop=(int(top), int(bottom), int(left), int(right)), pad_shift=(pr, pc),
                   shift=tuple(rng.uniform(-0.1, 0.1, 2) * np.array([N, M]) / 2),
                   rotation=float(np.deg2rad(rng.uniform(-15.0, 15.0))),
                   contrast=float(np.exp(rng.uniform(np.log(0.8), np.log(1.25)))))

    @property
    def neutral(self) -> bool:
        return (not any(self.crop) and not any(self.pad_shift) and not any(self.shift)
                and self.rotation == 0.0 and self.contrast == 1.0)


def _apply_image(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    M, N = img.shape
    out = img
    if p.rotation:
        out = ndimage.rotate(out, np.rad2deg(p.rotation), reshape=False, order=1, mode="constant")
    dx, dy = p.shift
    dr = -dy + p.pad_shift[0]
    dc = dx + p.pad_shift[1]
    if dr or dc:
        out = ndimage.shift(out, (dr, dc), order=1, mode="constant")
    top, bottom, left, right = p.crop
    if any(p.crop):
        keep = np.zeros_like(out, dtype=bool)
        keep[top + p.pad_shift[0]:M - bottom + p.pad_shift[0], left + p.pad_shift[1]:N - right + p.pad_shift[1]] = True
        out = np.where(keep, out, 0.0)
    return np.clip(out * p.contrast, 0.0, 1.0)


def _moved_geometry(g: Geometry, p: AugmentParams) -> Geometry:
    dx, dy = p.shift
    return g.moved(shift=(dx + p.pad_shift[1], dy - p.pad_shift[0]), rotation=p.rotation)


def _fits(geoms, p: AugmentParams, size) -> bool:
    M, N = size
    top, bottom, left, right = p.crop
    # visible box in centred coordinates after the crop has been shifted
    x_lo = left + p.pad_shift[1] - (N - 1) / 2 + 1
    x_hi = N - 1 - right + p.pad_shift[1] - (N - 1) / 2 - 1
    y_hi = (M - 1) / 2 - (top + p.pad_shift[0]) - 1
    y_lo = (M - 1) / 2 - (M - 1 - bottom + p.pad_shift[0]) + 1
    for g in geoms:
        h = _moved_geometry(g, p)
        r = h.max_outer_radius()
        cx, cy = h.center
        if cx - r < x_lo or cx + r > x_hi or cy - r < y_lo or cy + r > y_hi:
            return False
    return True


def augment(seq: CineSequence, seed: int, params: Optional[AugmentParams] = None,
            supersample: int = 4) -> CineSequence:
    """Random crop + zero-pad, translation, rotation and contrast change.

    The truth is re-measured on supersampled masks of the transformed
    geometry. Draws that would push the heart out of the visible area are
    redrawn.
    """
    if seq.geometries is None:
        raise ValueError("augmentation needs the generating geometry")
    rng = np.random.default_rng(seed)
    if params is None:
        for _ in range(50):
            params = AugmentParams.draw(rng, seq.shape)
            if _fits(seq.geometries, params, seq.shape):
                break
        else:
            params = AugmentParams()
    if params.neutral:
        return replace(seq, frames=seq.frames.copy(), truth=seq.truth.copy())
    frames = np.stack([_apply_image(f.astype(np.float64), params) for f in seq.frames]).astype(np.float32)
    geoms = [_moved_geometry(g, params) for g in seq.geometries]
    ss = supersample
    truth = np.stack([rasterize_indices(*masks(g, seq.shape, ss), seq.spacing / ss) for g in geoms])
    return replace(seq, frames=frames, truth=truth.astype(np.float32), geometries=geoms)


# ---------------------------------------------------------------- container
_REC = struct.Struct("<IfHHH")


def _record(seq: CineSequence) -> bytes:
    T, M, N = seq.frames.shape
    body = (_REC.pack(seq.subject_id, seq.spacing, T, M, N)
            + np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
            + np.ascontiguousarray(seq.truth, dtype="<f4").tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_size(n_subjects: int, frames: int = FRAMES, size=(80, 80)) -> int:
    M, N = size
    return 12 + n_subjects * (_REC.size + frames * M * N * 4 + frames * N_INDICES * 4 + 4)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_dataset(subjects: Sequence[CineSequence], path, meta: Optional[dict] = None) -> None:
    path = Path(path)
    blob = [MAGIC, struct.pack("<II", VERSION, len(subjects))]
    blob.extend(_record(s) for s in subjects)
    path.write_bytes(b"".join(blob))
    side = {"format": "PQDS", "version": VERSION, "count": len(subjects), **(meta or {}),
            "subjects": [{"id": s.subject_id, "spacing": s.spacing, "frames": int(s.frames.shape[0]),
                          "size": list(s.shape),
                          "config": None if s.config is None else asdict(s.config)}
                         for s in subjects]}
    sidecar_path(path).write_text(json.dumps(side, indent=1, sort_keys=True))


def load_dataset(path, with_geometry: bool = True) -> list[CineSequence]:
    """Read a PQDS file; geometry is rebuilt from the sidecar when available."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise DatasetError(f"{path}: not a PQDS dataset")
    if len(buf) < 12:
        raise DatasetError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    configs = {}
    side = sidecar_path(path)
    if with_geometry and side.exists():
        for entry in json.loads(side.read_text()).get("subjects", []):
            if entry.get("config"):
                configs[entry["id"]] = PhantomConfig(**entry["config"])
    pos = 12
    out = []
    for k in range(count):
        if pos + _REC.size > len(buf):
            raise DatasetError(f"{path}: truncated at subject record {k}")
        sid, spacing, T, M, N = _REC.unpack_from(buf, pos)
        n_body = _REC.size + 4 * T * M * N + 4 * T * N_INDICES
        if pos + n_body + 4 > len(buf):
            raise DatasetError(f"{path}: truncated payload for subject {sid}")
        body = buf[pos:pos + n_body]
        (crc,) = struct.unpack_from("<I", buf, pos + n_body)
        if zlib.crc32(body) != crc:
            raise DatasetError(f"{path}: checksum failure for subject {sid}")
        off = _REC.size
        frames = np.frombuffer(body, "<f4", T * M * N, off).reshape(T, M, N).astype(np.float32)
        off += 4 * T * M * N
        truth = np.frombuffer(body, "<f4", T * N_INDICES, off).reshape(T, N_INDICES).astype(np.float32)
        cfg = configs.get(sid)
        geoms = [frame_geometry(cfg, t) for t in range(cfg.frames)] if cfg is not None else None
        out.append(CineSequence(frames, truth, float(spacing), sid, cfg, geoms))
        pos += n_body + 4
    if pos != len(buf):
        raise DatasetError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
