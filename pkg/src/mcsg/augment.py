"""On-the-fly geometric augmentation of (image, mask) slice pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import SlicePair

_NO_RANGE = (0.0, 0.0)


@dataclass(frozen=True)
class AugmentPolicy:
    flip_lr: bool = True
    rotate_deg: tuple[float, float] = (-1.0, 1.0)
    shift_frac: tuple[float, float] = (-0.05, 0.05)
    zoom: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for name in ("rotate_deg", "shift_frac", "zoom"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.zoom[0] <= 0:
            raise ValueError("zoom factors must be positive")

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls(flip_lr=False, rotate_deg=_NO_RANGE, shift_frac=_NO_RANGE, zoom=(1.0, 1.0))

    @classmethod
    def for_dataset(cls, name: str) -> AugmentPolicy:
        """Per-dataset toggles; only left-right flipping differs between datasets."""
        key = name.lower()
        if key not in DATASET_FLIP:
            raise KeyError(f"no augmentation profile for dataset {name!r}")
        return cls(flip_lr=DATASET_FLIP[key])


# rotation, shift and zoom are enabled everywhere
DATASET_FLIP = {
    "brats": True,
    "kits": False,
    "ibsr": True,
    "prostate": True,
    "heart": False,
    "spleen": False,
    "synthetic": True,
}


@dataclass(frozen=True)
class AugmentParams:
    do_flip: bool = False
    angle: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.do_flip and self.angle == 0 and self.dx == 0 and self.dy == 0 and self.scale == 1


def sample_augmentation(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentParams:
    do_flip = bool(policy.flip_lr and rng.random() < 0.5)
    return AugmentParams(
        do_flip=do_flip,
        angle=float(rng.uniform(*policy.rotate_deg)),
        dx=float(rng.uniform(*policy.shift_frac)),
        dy=float(rng.uniform(*policy.shift_frac)),
        scale=float(rng.uniform(*policy.zoom)),
    )


def _inverse_affine(shape: tuple[int, int], params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Output->input coordinate map (matrix, offset) for rotation, zoom and shift.

    Rotation and zoom act about the image centre; the shift is quantized to
    whole pixels so image and mask move identically.
    """
    h, w = shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([np.rint(params.dy * h), np.rint(params.dx * w)])
    theta = math.radians(params.angle)
    c, s = math.cos(theta), math.sin(theta)
    # forward: out = R * scale * (in - centre) + centre + shift
    inv = np.array([[c, s], [-s, c]]) / params.scale
    offset = centre - inv @ (centre + shift)
    return inv, offset


def warp_channels(
    channels: np.ndarray, params: AugmentParams, order: int, fill: np.ndarray | float
) -> np.ndarray:
    """Apply the geometric part of ``params`` to every (H, W) channel of ``channels``."""
    out = channels[..., ::-1] if params.do_flip else channels
    rest = AugmentParams(angle=params.angle, dx=params.dx, dy=params.dy, scale=params.scale)
    if rest.is_identity:
        return np.array(out, copy=True)
    matrix, offset = _inverse_affine(channels.shape[-2:], rest)
    fills = np.broadcast_to(np.asarray(fill, dtype=np.float64), channels.shape[:-2])
    warped = np.empty_like(channels)
    flat_in = out.reshape(-1, *channels.shape[-2:])
    flat_out = warped.reshape(-1, *channels.shape[-2:])
    for i, (chan, cval) in enumerate(zip(flat_in, fills.reshape(-1))):
        flat_out[i] = ndimage.affine_transform(
            chan, matrix, offset=offset, order=order, mode="constant", cval=float(cval)
        )
    return warped


def apply_augmentation(pair: SlicePair, params: AugmentParams) -> SlicePair:
    """Warp image (bilinear) and mask (nearest) with one shared transform.

    Out-of-bounds image pixels take the per-modality slice minimum; mask
    pixels become background.
    """
    if params.is_identity:
        return SlicePair(pair.patient_id, pair.slice_index, pair.image.copy(), pair.mask.copy())
    fill = pair.image.reshape(pair.image.shape[0], -1).min(axis=1)
    image = warp_channels(pair.image, params, order=1, fill=fill)
    mask = warp_channels(pair.mask, params, order=0, fill=0)
    return SlicePair(pair.patient_id, pair.slice_index, image, mask)
