"""Volume ingestion, normalization, slicing, patient-level splits and the
built-in synthetic shapes dataset."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class DataError(ValueError):
    """Raised for malformed volumes, containers or dataset requests."""


class DegenerateInputError(DataError):
    pass


@dataclass
class Volume:
    patient_id: str
    image: np.ndarray  # (modalities, depth, height, width)
    mask: np.ndarray  # (depth, height, width)
    num_classes: int
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] < 1:
            raise DataError(f"image must be (M, D, H, W) with M >= 1, got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DataError(
                f"mask shape {self.mask.shape} != image spatial shape {self.image.shape[1:]}"
            )
        _check_labels(self.mask, self.num_classes)

    @property
    def num_modalities(self) -> int:
        return self.image.shape[0]

    @property
    def depth(self) -> int:
        return self.image.shape[1]


@dataclass
class SlicePair:
    patient_id: str
    slice_index: int
    image: np.ndarray  # (modalities, H, W), float32
    mask: np.ndarray  # (H, W), uint8 labels


@dataclass
class Dataset:
    pairs: list[SlicePair]
    num_classes: int
    num_modalities: int
    patients: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.patients:
            self.patients = tuple(dict.fromkeys(p.patient_id for p in self.pairs))
        known = set(self.patients)
        for p in self.pairs:
            if p.patient_id not in known:
                raise DataError(f"pair patient {p.patient_id!r} not in patient list")

    def __len__(self) -> int:
        return len(self.pairs)

    def restrict(self, patients: Iterable[str]) -> Dataset:
        keep = set(patients)
        ordered = tuple(p for p in self.patients if p in keep)
        return Dataset(
            [p for p in self.pairs if p.patient_id in keep],
            self.num_classes,
            self.num_modalities,
            ordered,
        )

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.pairs]).astype(np.float32, copy=False)

    def masks(self) -> np.ndarray:
        return np.stack([p.mask for p in self.pairs])

    def slices_per_patient(self) -> dict[str, int]:
        counts = dict.fromkeys(self.patients, 0)
        for p in self.pairs:
            counts[p.patient_id] += 1
        return counts


@dataclass
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset

    def __post_init__(self):
        a, b, c = (set(d.patients) for d in (self.train, self.validation, self.test))
        if a & b or a & c or b & c:
            raise DataError("split patient sets overlap")


def _check_labels(mask: np.ndarray, num_classes: int) -> None:
    if mask.size and (mask.min() < 0 or mask.max() > num_classes):
        raise DataError(
            f"mask labels must lie in [0, {num_classes}], found [{mask.min()}, {mask.max()}]"
        )


# -- volume container -------------------------------------------------------


def load_volume(path: str | Path) -> Volume:
    """Read a volume container directory (``header.json``, ``image.bin``, ``mask.bin``)."""
    path = Path(path)
    header_file = path / "header.json"
    if not header_file.is_file():
        raise FileNotFoundError(f"no volume header at {header_file}")
    header = json.loads(header_file.read_text())
    if header.get("byte_order", "little") != "little":
        raise DataError(f"unsupported byte order {header['byte_order']!r}")
    try:
        dtype = _DTYPES[header.get("dtype", "f32")]
    except KeyError:
        raise DataError(f"unsupported dtype {header['dtype']!r}") from None
    m, d, h, w = (int(header[k]) for k in ("modalities", "depth", "height", "width"))
    num_classes = int(header["num_classes"])

    image_bytes = (path / "image.bin").read_bytes()
    mask_bytes = (path / "mask.bin").read_bytes()
    expected = m * d * h * w * dtype.itemsize
    if len(image_bytes) != expected:
        raise DataError(f"image.bin holds {len(image_bytes)} bytes, header implies {expected}")
    if len(mask_bytes) != d * h * w:
        raise DataError(f"mask.bin holds {len(mask_bytes)} bytes, header implies {d * h * w}")

    image = np.frombuffer(image_bytes, dtype=dtype).reshape(m, d, h, w).astype(np.float32)
    mask = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(d, h, w).copy()
    spacing = header.get("spacing")
    return Volume(
        patient_id=str(header["patient_id"]),
        image=image,
        mask=mask,
        num_classes=num_classes,
        spacing=tuple(spacing) if spacing else None,
    )


def save_volume(volume: Volume, path: str | Path, dtype: str = "f32") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m, d, h, w = volume.image.shape
    header = {
        "patient_id": volume.patient_id,
        "modalities": m,
        "depth": d,
        "height": h,
        "width": w,
        "num_classes": volume.num_classes,
        "dtype": dtype,
        "byte_order": "little",
    }
    if volume.spacing is not None:
        header["spacing"] = list(volume.spacing)
    (path / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True))
    (path / "image.bin").write_bytes(np.ascontiguousarray(volume.image, dtype=_DTYPES[dtype]).tobytes())
    (path / "mask.bin").write_bytes(np.ascontiguousarray(volume.mask, dtype=np.uint8).tobytes())
    return path


def save_volume_dataset(
    volumes: Sequence[Volume], root: str | Path, extra: dict | None = None
) -> Path:
    """Write volumes as sibling containers plus a ``dataset.json`` manifest."""
    if not volumes:
        raise DataError("cannot save an empty dataset")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        save_volume(v, root / v.patient_id)
    meta = {
        "num_classes": volumes[0].num_classes,
        "modalities": volumes[0].num_modalities,
        "patients": [v.patient_id for v in volumes],
    }
    meta.update(extra or {})
    (root / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


def load_volume_dataset(root: str | Path) -> tuple[list[Volume], dict]:
    root = Path(root)
    manifest = root / "dataset.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    meta = json.loads(manifest.read_text())
    names = meta.get("patients") or sorted(p.name for p in root.iterdir() if (p / "header.json").is_file())
    volumes = [load_volume(root / name) for name in names]
    for v in volumes:
        if v.num_classes != meta["num_classes"] or v.num_modalities != meta["modalities"]:
            raise DataError(f"volume {v.patient_id} disagrees with dataset.json")
    return volumes, meta


# -- preprocessing ---------------------------------------------------------


def normalize_volume(v: Volume, mode: str = "zscore") -> Volume:
    """Per-volume, per-modality intensity normalization over the whole volume.

    ``zscore`` yields zero mean / unit variance, ``minmax`` maps to [-1, 1].
    """
    if mode not in ("zscore", "minmax"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = np.empty(v.image.shape, dtype=np.float32)
    for m, chan in enumerate(v.image.astype(np.float64)):
        if mode == "zscore":
            mean, std = chan.mean(), chan.std()
            if not std > 0:
                raise DegenerateInputError(f"modality {m} has zero intensity variance")
            out[m] = (chan - mean) / std
        else:
            lo, hi = chan.min(), chan.max()
            if not hi > lo:
                raise DegenerateInputError(f"modality {m} has constant intensity")
            out[m] = 2.0 * (chan - lo) / (hi - lo) - 1.0
    return Volume(v.patient_id, out, v.mask.copy(), v.num_classes, v.spacing)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def resize_image(image: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize of a (channels, H, W) array."""
    if image.shape[-2:] == (resolution, resolution):
        return image.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    t = F.interpolate(t, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return t[0].numpy()


def resize_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbour resize of an (H, W) label map; never invents labels."""
    if mask.shape == (resolution, resolution):
        return mask.copy()
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.uint8))[None, None]
    t = F.interpolate(t, size=(resolution, resolution), mode="nearest-exact")
    return t[0, 0].numpy()


def extract_slices(v: Volume, resolution: int, keep_empty: bool = False) -> list[SlicePair]:
    """Axial slices of ``v`` resized to ``resolution`` x ``resolution``."""
    if not _is_power_of_two(resolution) or resolution < 32:
        raise DataError(f"resolution must be a power of two >= 32, got {resolution}")
    pairs = []
    for d in range(v.depth):
        mask = v.mask[d]
        if not keep_empty and not mask.any():
            continue
        pairs.append(
            SlicePair(
                v.patient_id,
                d,
                resize_image(v.image[:, d], resolution),
                resize_mask(mask, resolution).astype(np.uint8),
            )
        )
    return pairs


def volumes_to_dataset(
    volumes: Sequence[Volume], resolution: int, keep_empty: bool = False
) -> Dataset:
    if not volumes:
        raise DataError("no volumes")
    pairs = []
    for v in volumes:
        pairs.extend(extract_slices(v, resolution, keep_empty))
    if not pairs:
        raise DataError("no slices retained")
    return Dataset(
        pairs,
        volumes[0].num_classes,
        volumes[0].num_modalities,
        tuple(v.patient_id for v in volumes if any(p.patient_id == v.patient_id for p in pairs)),
    )


def split_dataset(
    ds: Dataset, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> DatasetSplit:
    """Seeded patient-level train/validation/test split.

    Validation and test receive ``floor(ratio * n)`` patients (at least one
    each); the remainder goes to training.
    """
    n = len(ds.patients)
    if n < 3:
        raise DataError(f"need at least 3 patients to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise DataError(f"invalid split ratios {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ds.patients[i] for i in order]
    n_val = max(1, math.floor(ratios[1] * n + 1e-9))
    n_test = max(1, math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError(f"split leaves no training patients for n={n}")
    return DatasetSplit(
        train=ds.restrict(shuffled[:n_train]),
        validation=ds.restrict(shuffled[n_train : n_train + n_val]),
        test=ds.restrict(shuffled[n_train + n_val :]),
    )


def subsample_patients(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Keep ``n`` uniformly chosen patients (and all their slices)."""
    if not 1 <= n <= len(ds.patients):
        raise DataError(f"n={n} outside [1, {len(ds.patients)}]")
    chosen = np.random.default_rng(seed).choice(len(ds.patients), size=n, replace=False)
    return ds.restrict(ds.patients[i] for i in chosen)


def one_hot_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W) labels -> ((C + 1), H, W) float32 one-hot channels."""
    mask = np.asarray(mask)
    _check_labels(mask, num_classes)
    return (np.arange(num_classes + 1).reshape(-1, 1, 1) == mask[None]).astype(np.float32)


# -- synthetic shapes ------------------------------------------------------


@dataclass
class ShapesSpec:
    """Geometry and intensity profile of the synthetic organ phantom.

    ``class_intensity[k - 1][m]`` is the noiseless intensity of class ``k`` in
    modality ``m``; background sits at 0.  Class 1 is a large ellipse, class 2
    a rectangle and class 3 a small ellipse nested inside class 1.
    """

    resolution: int = 64
    modalities: int = 1
    num_classes: int = 3
    slices_per_patient: int = 8
    noise_sigma: float = 0.1
    class_intensity: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if not 1 <= self.modalities <= 4:
            raise DataError("modalities must be in 1..4")
        if not 1 <= self.num_classes <= 3:
            raise DataError("num_classes must be in 1..3")
        if not _is_power_of_two(self.resolution) or self.resolution < 32:
            raise DataError("resolution must be a power of two >= 32")
        if self.class_intensity is None:
            levels = (1.0, -1.0, 2.0, -2.0)
            self.class_intensity = tuple(
                tuple(levels[(k + m) % len(levels)] for m in range(self.modalities))
                for k in range(self.num_classes)
            )
        if len(self.class_intensity) != self.num_classes or any(
            len(row) != self.modalities for row in self.class_intensity
        ):
            raise DataError("class_intensity must be num_classes x modalities")


def _render_patient(pid: str, spec: ShapesSpec, rng: np.random.Generator) -> Volume:
    r = spec.resolution
    depth = spec.slices_per_patient
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64) + 0.5

    # patient-level anatomy, in units of the field of view
    c1 = rng.uniform(0.35, 0.6, size=2) * r
    a1 = rng.uniform(0.16, 0.24, size=2) * r
    rect_c = rng.uniform(0.7, 0.8, size=2) * r
    rect_h = rng.uniform(0.06, 0.1, size=2) * r
    c3_off = rng.uniform(-0.3, 0.3, size=2)
    a3_frac = rng.uniform(0.3, 0.45)

    mask = np.zeros((depth, r, r), dtype=np.uint8)
    for d in range(depth):
        # organs swell towards the middle slice, never vanish
        t = (d + 0.5) / depth - 0.5
        scale = 0.7 + 0.3 * math.sqrt(max(0.0, 1 - 4 * t * t))
        ax = a1 * scale
        inside1 = ((yy - c1[0]) / ax[0]) ** 2 + ((xx - c1[1]) / ax[1]) ** 2 <= 1.0
        mask[d][inside1] = 1
        if spec.num_classes >= 2:
            hh = rect_h * scale
            inside2 = (np.abs(yy - rect_c[0]) <= hh[0]) & (np.abs(xx - rect_c[1]) <= hh[1])
            mask[d][inside2] = 2
        if spec.num_classes >= 3:
            c3 = c1 + c3_off * ax
            a3 = ax * a3_frac
            inside3 = ((yy - c3[0]) / a3[0]) ** 2 + ((xx - c3[1]) / a3[1]) ** 2 <= 1.0
            mask[d][inside3] = 3

    levels = np.zeros((spec.num_classes + 1, spec.modalities))
    levels[1:] = np.asarray(spec.class_intensity)
    image = levels[mask].transpose(3, 0, 1, 2)  # (M, D, H, W)
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return Volume(pid, image.astype(np.float32), mask, spec.num_classes)


def generate_synthetic_volumes(n_patients: int, spec: ShapesSpec, seed: int = 0) -> list[Volume]:
    children = np.random.SeedSequence(seed).spawn(n_patients)
    return [
        _render_patient(f"syn{i:04d}", spec, np.random.default_rng(ss))
        for i, ss in enumerate(children)
    ]


def generate_synthetic_dataset(n_patients: int, spec: ShapesSpec | None = None, seed: int = 0) -> Dataset:
    """Phantom dataset with exact masks, already on a standardized intensity scale."""
    spec = spec or ShapesSpec()
    volumes = generate_synthetic_volumes(n_patients, spec, seed)
    return volumes_to_dataset(volumes, spec.resolution, keep_empty=True)
