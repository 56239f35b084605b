"""Synthetic (image, mask) pair generation: joint B-SG sampling and the
two-stage MC-SG pipeline (mask generator followed by the mask-conditional
image generator)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Dataset, SlicePair, Volume, load_volume_dataset, save_volume_dataset
from .gan.networks import Variant
from .gan.training import GanState, one_hot_tensor


class PipelineError(ValueError):
    pass


@dataclass
class GeneratedSample:
    synthetic_patient_id: str
    slice_index: int
    image: np.ndarray  # (modalities, H, W)
    mask: np.ndarray  # (H, W) uint8
    provenance: str  # "BSG" or "MCSG"


def discretize_mask(channels) -> np.ndarray:
    """Per-pixel argmax over the class axis (axis -3); ties resolve to the lowest class."""
    arr = channels.detach().cpu().numpy() if isinstance(channels, torch.Tensor) else np.asarray(channels)
    return np.argmax(arr, axis=-3).astype(np.uint8)


def _patient_generators(n_patients: int, seed: int) -> list[torch.Generator]:
    # per-patient sub-seeds make each patient reproducible on its own
    seqs = np.random.SeedSequence(seed).spawn(n_patients)
    return [torch.Generator().manual_seed(int(s.generate_state(1, dtype=np.uint64)[0] >> 1)) for s in seqs]


def _sample_latents(state: GanState, n: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(n, state.config.latent_dim, generator=gen)


def _require(state: GanState, variant: Variant, role: str):
    if state.config.variant is not variant:
        raise PipelineError(f"{role} must be a {variant.value} model, got {state.config.variant.value}")


@torch.no_grad()
def generate_bsg(
    state: GanState,
    n_patients: int,
    slices_per_patient: int,
    seed: int = 0,
    truncation_psi: float = 1.0,
    prefix: str = "bsg",
) -> list[GeneratedSample]:
    """Sample joint (image, mask) pairs from a B-SG model's EMA generator."""
    _require(state, Variant.BSG, "generator")
    cfg = state.config
    G = state.G_ema.eval()
    out = []
    for p, gen in enumerate(_patient_generators(n_patients, seed)):
        z = _sample_latents(state, slices_per_patient, gen)
        raw = G(z, truncation_psi=truncation_psi, generator=gen).float()
        images = raw[:, : cfg.image_channels].numpy()
        masks = discretize_mask(raw[:, cfg.image_channels :])
        pid = f"{prefix}{p:04d}"
        out.extend(
            GeneratedSample(pid, s, images[s].copy(), masks[s], "BSG") for s in range(slices_per_patient)
        )
    return out


def _stage1_masks(mask_state, G_m, n_slices, gen, truncation_psi):
    z_mask = _sample_latents(mask_state, n_slices, gen)
    return discretize_mask(G_m(z_mask, truncation_psi=truncation_psi, generator=gen))


@torch.no_grad()
def sample_msg_masks(
    mask_state: GanState, n_patients: int, slices_per_patient: int, seed: int = 0, truncation_psi: float = 1.0
) -> np.ndarray:
    """Stage-1 masks alone, drawn exactly as :func:`generate_mcsg` draws them.

    Returns ``(n_patients, slices_per_patient, H, W)`` labels.
    """
    _require(mask_state, Variant.MSG, "mask generator")
    G_m = mask_state.G_ema.eval()
    return np.stack(
        [
            _stage1_masks(mask_state, G_m, slices_per_patient, gen, truncation_psi)
            for gen in _patient_generators(n_patients, seed)
        ]
    )


@torch.no_grad()
def generate_mcsg(
    mask_state: GanState,
    image_state: GanState,
    n_patients: int,
    slices_per_patient: int,
    seed: int = 0,
    truncation_psi: float = 1.0,
    prefix: str = "mcsg",
) -> list[GeneratedSample]:
    """Stage 1 samples masks from the M-SG model; stage 2 renders each mask with C-SG."""
    _require(mask_state, Variant.MSG, "mask generator")
    _require(image_state, Variant.CSG, "image generator")
    mc, ic = mask_state.config, image_state.config
    if mc.mask_channels != ic.mask_channels or mc.resolution != ic.resolution:
        raise PipelineError(
            f"stage mismatch: M-SG ({mc.mask_channels} ch, {mc.resolution}px) vs "
            f"C-SG ({ic.mask_channels} ch, {ic.resolution}px)"
        )
    G_m = mask_state.G_ema.eval()
    G_c = image_state.G_ema.eval()
    out = []
    for p, gen in enumerate(_patient_generators(n_patients, seed)):
        masks = _stage1_masks(mask_state, G_m, slices_per_patient, gen, truncation_psi)
        cond = one_hot_tensor(torch.from_numpy(masks.astype(np.int64)), ic.mask_channels)
        z_img = _sample_latents(image_state, slices_per_patient, gen)
        images = G_c(z_img, cond, truncation_psi=truncation_psi, generator=gen).float().numpy()
        pid = f"{prefix}{p:04d}"
        out.extend(
            GeneratedSample(pid, s, images[s].copy(), masks[s], "MCSG") for s in range(slices_per_patient)
        )
    return out


def samples_to_dataset(samples: Sequence[GeneratedSample], num_classes: int) -> Dataset:
    if not samples:
        raise PipelineError("no generated samples")
    pairs = [SlicePair(s.synthetic_patient_id, s.slice_index, s.image, s.mask) for s in samples]
    return Dataset(pairs, num_classes, samples[0].image.shape[0])


def save_generated(samples: Sequence[GeneratedSample], root: str | Path, num_classes: int) -> Path:
    """Persist samples in the volume-container layout, one volume per synthetic patient."""
    by_patient: dict[str, list[GeneratedSample]] = {}
    for s in samples:
        by_patient.setdefault(s.synthetic_patient_id, []).append(s)
    volumes = []
    for pid, group in by_patient.items():
        group.sort(key=lambda s: s.slice_index)
        image = np.stack([s.image for s in group], axis=1)
        mask = np.stack([s.mask for s in group])
        volumes.append(Volume(pid, image, mask, num_classes))
    provenance = samples[0].provenance
    return save_volume_dataset(volumes, root, {"normalized": True, "provenance": provenance})


def load_generated(root: str | Path) -> list[GeneratedSample]:
    volumes, meta = load_volume_dataset(root)
    provenance = meta.get("provenance", "unknown")
    return [
        GeneratedSample(v.patient_id, d, v.image[:, d].copy(), v.mask[d].copy(), provenance)
        for v in volumes
        for d in range(v.depth)
    ]
