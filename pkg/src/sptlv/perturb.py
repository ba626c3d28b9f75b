"""Input perturbations: spatial transforms, graded image distortions and PGD.

Every perturbation of a subject is applied identically to all of its frames:
the same shift/angle sign and, for noise kinds, the same noise realisation.
Images are float arrays in [0, 1].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .tensor import Graph, NumericError, Tensor


class PerturbationError(ValueError):
    pass


class Kind(str, enum.Enum):
    NONE = "None"
    TRANSLATE_H = "TranslateH"
    TRANSLATE_V = "TranslateV"
    ROTATE = "Rotate"
    GAUSSIAN = "GaussianNoise"
    IMPULSE = "ImpulseNoise"
    RICIAN = "RicianNoise"
    BLUR = "GaussianBlur"
    JPEG = "Jpeg"
    PGD = "PGD"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        for k in cls:
            if k.value.lower() == str(value).lower() or k.name.lower() == str(value).lower():
                return k
        raise PerturbationError(f"unknown perturbation kind {value!r}")


GAUSSIAN_SIGMA = (0.08, 0.12, 0.18, 0.26, 0.38)
IMPULSE_AMOUNT = (0.03, 0.06, 0.09, 0.17, 0.27)
BLUR_SIGMA = (1.0, 2.0, 3.0, 4.0, 6.0)
JPEG_QUALITY = (25, 18, 15, 10, 7)
PGD_ALPHAS = tuple(a / 255 for a in (1, 2, 4, 8, 16, 24, 32, 48))
PGD_ITERS = (50, 100)
ROTATION_STEP = 3.0  # degrees per level

MAX_LEVEL = {Kind.NONE: 0, Kind.TRANSLATE_H: 8, Kind.TRANSLATE_V: 8, Kind.ROTATE: 10,
             Kind.GAUSSIAN: 5, Kind.IMPULSE: 5, Kind.RICIAN: 5, Kind.BLUR: 5, Kind.JPEG: 5,
             Kind.PGD: len(PGD_ALPHAS) * len(PGD_ITERS)}
SPATIAL = (Kind.TRANSLATE_H, Kind.TRANSLATE_V, Kind.ROTATE)
DISTORTIONS = (Kind.GAUSSIAN, Kind.IMPULSE, Kind.RICIAN, Kind.BLUR, Kind.JPEG)

# IJG baseline luminance quantisation table
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: Kind = Kind.NONE
    level: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        lo = 0 if self.kind is Kind.NONE else 1
        if not lo <= self.level <= MAX_LEVEL[self.kind]:
            raise PerturbationError(f"level {self.level} outside 1..{MAX_LEVEL[self.kind]} for {self.kind.value}")

    @classmethod
    def pgd(cls, alpha: float, iters: int) -> "PerturbationSpec":
        k = int(np.argmin([abs(a - alpha) for a in PGD_ALPHAS]))
        if not np.isclose(PGD_ALPHAS[k], alpha) or iters not in PGD_ITERS:
            raise PerturbationError(f"PGD ({alpha}, {iters}) is not on the ladder")
        return cls(Kind.PGD, PGD_ITERS.index(iters) * len(PGD_ALPHAS) + k + 1)

    @property
    def pgd_params(self) -> tuple[float, int]:
        if self.kind is not Kind.PGD:
            raise PerturbationError("not a PGD spec")
        i = self.level - 1
        return PGD_ALPHAS[i % len(PGD_ALPHAS)], PGD_ITERS[i // len(PGD_ALPHAS)]

    @property
    def magnitude(self) -> float:
        """Physical strength of the level (pixels, degrees, sigma, amount, quality, alpha)."""
        k, lv = self.kind, self.level
        if k is Kind.NONE:
            return 0.0
        if k in (Kind.TRANSLATE_H, Kind.TRANSLATE_V):
            return float(lv)
        if k is Kind.ROTATE:
            return ROTATION_STEP * lv
        if k in (Kind.GAUSSIAN, Kind.RICIAN):
            return GAUSSIAN_SIGMA[lv - 1]
        if k is Kind.IMPULSE:
            return IMPULSE_AMOUNT[lv - 1]
        if k is Kind.BLUR:
            return BLUR_SIGMA[lv - 1]
        if k is Kind.JPEG:
            return float(JPEG_QUALITY[lv - 1])
        return self.pgd_params[0]

    def label(self) -> str:
        return f"{self.kind.value}:{self.level}"


def ladder(kind) -> list[PerturbationSpec]:
    kind = Kind.parse(kind)
    if kind is Kind.NONE:
        return [PerturbationSpec()]
    return [PerturbationSpec(kind, lv) for lv in range(1, MAX_LEVEL[kind] + 1)]


# ------------------------------------------------------------------ spatial
def _shift_int(x: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(x)
    M, N = x.shape[-2:]
    src_r = slice(max(0, -dr), M - max(0, dr))
    dst_r = slice(max(0, dr), M - max(0, -dr))
    src_c = slice(max(0, -dc), N - max(0, dc))
    dst_c = slice(max(0, dc), N - max(0, -dc))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the image centre, bilinear, zero fill."""
    if degrees == 0:
        return x.copy()
    return ndimage.rotate(x, degrees, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)


def apply_spatial(x: np.ndarray, kind, level: int, rng: np.random.Generator) -> np.ndarray:
    """Shift by ``level`` pixels or rotate by 3 deg per level; the sign is drawn from ``rng``.

    ``x`` may hold a stack of frames along leading axes; all share the sign.
    """
    spec = PerturbationSpec(kind, level)
    x = np.asarray(x)
    if spec.kind is Kind.NONE:
        return x.copy()
    if spec.kind not in SPATIAL:
        raise PerturbationError(f"{spec.kind.value} is not a spatial transform")
    sign = 1 if rng.random() < 0.5 else -1
    if spec.kind is Kind.TRANSLATE_H:
        return _shift_int(x, 0, sign * level)
    if spec.kind is Kind.TRANSLATE_V:
        return _shift_int(x, sign * level, 0)
    return rotate(x, sign * ROTATION_STEP * level)


# --------------------------------------------------------------- distortions
def jpeg_table(quality: int) -> np.ndarray:
    quality = int(np.clip(quality, 1, 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((JPEG_LUMA * scale + 50) / 100), 1, 255)


def jpeg_compress(x: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise 8x8 DCT quantise/dequantise of a [0, 1] image (no entropy coding)."""
    M, N = x.shape
    pm, pn = -M % 8, -N % 8
    img = np.pad(x * 255.0, ((0, pm), (0, pn)), mode="edge") - 128.0
    Mb, Nb = img.shape
    blocks = img.reshape(Mb // 8, 8, Nb // 8, 8).transpose(0, 2, 1, 3)
    coef = sfft.dctn(blocks, type=2, norm="ortho", axes=(2, 3))
    q = jpeg_table(quality)
    coef = np.round(coef / q) * q
    rec = sfft.idctn(coef, type=2, norm="ortho", axes=(2, 3))
    rec = rec.transpose(0, 2, 1, 3).reshape(Mb, Nb)[:M, :N]
    return np.round(rec + 128.0).clip(0, 255) / 255.0


def apply_distortion(x: np.ndarray, kind, level: int, rng: np.random.Generator) -> np.ndarray:
    """Graded corruption of ``x`` (last two axes are the image plane).

    Noise fields are drawn once with the image shape and broadcast over any
    leading frame axes, so a whole sequence shares one realisation.
    """
    spec = PerturbationSpec(kind, level)
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    k = spec.kind
    if k is Kind.NONE:
        return x
    if k not in DISTORTIONS:
        raise PerturbationError(f"{k.value} is not an image distortion")
    plane = x.shape[-2:]
    if k is Kind.GAUSSIAN:
        out = x + rng.normal(0.0, spec.magnitude, plane)
    elif k is Kind.RICIAN:
        n1 = rng.normal(0.0, spec.magnitude, plane)
        n2 = rng.normal(0.0, spec.magnitude, plane)
        out = np.sqrt((x + n1) ** 2 + n2 ** 2)
    elif k is Kind.IMPULSE:
        hit = rng.random(plane) < spec.magnitude
        salt = rng.random(plane) < 0.5
        out = np.where(hit, salt.astype(float), x)
    elif k is Kind.BLUR:
        s = spec.magnitude
        sig = (0,) * (x.ndim - 2) + (s, s)
        out = ndimage.gaussian_filter(x, sig, truncate=3.0, mode="nearest")
    else:
        q = int(spec.magnitude)
        flat = x.reshape(-1, *plane)
        out = np.stack([jpeg_compress(f, q) for f in flat]).reshape(x.shape)
    return np.clip(out, 0.0, 1.0)


def apply(x: np.ndarray, spec: PerturbationSpec, rng: np.random.Generator) -> np.ndarray:
    """Dispatch a non-adversarial spec to the spatial or distortion branch."""
    if spec.kind is Kind.NONE:
        return np.asarray(x).copy()
    if spec.kind in SPATIAL:
        return apply_spatial(x, spec.kind, spec.level, rng)
    if spec.kind in DISTORTIONS:
        return apply_distortion(x, spec.kind, spec.level, rng)
    raise PerturbationError("PGD needs a model; use pgd_attack")


# ----------------------------------------------------------------------- PGD
def input_gradient(model, frames: np.ndarray, targets: np.ndarray, loss_fn=None) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the raw input slices (eval mode)."""
    from .objective import mae_loss

    loss_fn = loss_fn or mae_loss
    x = Tensor(np.asarray(frames, dtype=model.dtype), requires_grad=True)
    with Graph() as g:
        pred = model.forward(x, train=False)
        loss = loss_fn(pred, targets)
    g.backward(loss)
    if x.grad is None or not np.all(np.isfinite(x.grad)):
        raise NumericError(f"non-finite input gradient (loss={loss.item():.4g})")
    return loss.item(), x.grad


def pgd_attack(model, frames: np.ndarray, targets: np.ndarray, alpha: float, iters: int,
               snapshots: Sequence[int] = (), loss_fn=None, batch_subjects: int = 8):
    """Unconstrained sign-gradient ascent on the MAE, clipped to [0, 1].

    ``frames`` is (S, 20, M, N) and ``targets`` (S, 20, 11) in the model's
    normalised units. Each step takes one gradient of the loss over whole
    sequences. Returns the attacked frames, or ``(frames, {k: frames_k})``
    when intermediate ``snapshots`` are requested.
    """
    x = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    targets = np.asarray(targets)
    snaps = {}
    if alpha == 0 or iters == 0:
        snaps = {k: x.copy() for k in snapshots}
        return (x, snaps) if snapshots else x
    for it in range(1, iters + 1):
        grad = np.empty_like(x)
        for s in range(0, len(x), batch_subjects):
            _, g = input_gradient(model, x[s:s + batch_subjects], targets[s:s + batch_subjects], loss_fn)
            grad[s:s + batch_subjects] = g
        x = np.clip(x + alpha * np.sign(grad), 0.0, 1.0)
        if it in snapshots:
            snaps[it] = x.copy()
    return (x, snaps) if snapshots else x
