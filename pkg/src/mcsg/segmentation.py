"""2-D U-Net segmenter, soft Dice loss, Dice metric, training and evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentPolicy, apply_augmentation, sample_augmentation
from .data import Dataset, SlicePair
from .gan.training import load_tensors, save_tensors

log = logging.getLogger(__name__)

# epochs per dataset
DATASET_EPOCHS = {"brats": 70, "kits": 70, "ibsr": 150, "prostate": 70, "heart": 150, "spleen": 150}


class SegmentationDivergenceError(RuntimeError):
    pass


@dataclass
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 4  # C + 1, background included
    base_width: int = 8
    depth: int = 3
    batch_norm: bool = True
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 70
    steps_per_epoch: int | None = None  # None: full pass over the training set
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("U-Net depth must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes counts background and must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(ch: int, enabled: bool) -> nn.Module:
    return nn.BatchNorm2d(ch) if enabled else nn.Identity()


class DoubleConv(nn.Module):
    def __init__(self, cin, cout, bn):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=not bn), _norm(cout, bn), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=not bn), _norm(cout, bn), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class Down(nn.Module):
    """Transition block: normalization, rectifier, strided convolution."""

    def __init__(self, cin, cout, bn):
        super().__init__()
        self.body = nn.Sequential(_norm(cin, bn), nn.ReLU(), nn.Conv2d(cin, cout, 3, stride=2, padding=1))

    def forward(self, x):
        return self.body(x)


class Up(nn.Module):
    """Transition block: normalization, rectifier, transposed convolution."""

    def __init__(self, cin, cout, bn):
        super().__init__()
        self.body = nn.Sequential(_norm(cin, bn), nn.ReLU(), nn.ConvTranspose2d(cin, cout, 2, stride=2))

    def forward(self, x):
        return self.body(x)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        bn = cfg.batch_norm
        self.stem = DoubleConv(cfg.in_channels, widths[0], bn)
        self.downs = nn.ModuleList()
        self.encoders = nn.ModuleList()
        for i in range(cfg.depth):
            self.downs.append(Down(widths[i], widths[i + 1], bn))
            self.encoders.append(DoubleConv(widths[i + 1], widths[i + 1], bn))
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.ups.append(Up(widths[i + 1], widths[i], bn))
            self.decoders.append(DoubleConv(2 * widths[i], widths[i], bn))
        self.head = nn.Conv2d(widths[0], cfg.num_classes, 1)

    def logits(self, x):
        f = 2**self.cfg.depth
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {f}")
        x = self.stem(x)
        skips = [x]
        for down, enc in zip(self.downs, self.encoders):
            x = enc(down(x))
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)

    def bottleneck(self, x):
        x = self.stem(x)
        for down, enc in zip(self.downs, self.encoders):
            x = enc(down(x))
        return x


def build_unet(cfg: UNetConfig) -> UNet:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return UNet(cfg)


def unet_forward(model: UNet, image) -> np.ndarray:
    """Class probabilities for one (modalities, H, W) image."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
    model.eval()
    with torch.no_grad():
        return model(x)[0].numpy()


# -- Dice ------------------------------------------------------------------


def soft_dsc_loss(probs: torch.Tensor, onehot: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Negative soft Dice averaged over foreground classes.

    ``probs``/``onehot`` are ``(C+1, ...)`` or ``(N, C+1, ...)``; sums run
    over every axis but the class axis.  A class absent from both prediction
    and target scores exactly -1.
    """
    probs = torch.as_tensor(probs)
    onehot = torch.as_tensor(onehot, dtype=probs.dtype)
    if probs.shape != onehot.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(onehot.shape)}")
    class_axis = 1 if probs.ndim == 4 else 0
    p = probs.movedim(class_axis, 0).flatten(1)[1:]
    m = onehot.movedim(class_axis, 0).flatten(1)[1:]
    per_class = -(2 * (p * m).sum(1) + eps) / (p.sum(1) + m.sum(1) + eps)
    return per_class.mean()


def dsc_score(pred_labels, true_labels, c: int) -> float:
    """Hard Dice of class ``c``; 1.0 when the class is absent from both maps."""
    pred = np.asarray(pred_labels) == c
    true = np.asarray(true_labels) == c
    if pred.shape != true.shape:
        raise ValueError("label maps differ in shape")
    denom = int(pred.sum()) + int(true.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, true).sum()) / denom


# -- evaluation ----------------------------------------------------------------


@dataclass
class MetricReport:
    per_patient_dsc: dict[str, list[float]]  # patient -> per-foreground-class DSC
    mean_dsc: float
    standard_error: float
    meta: dict = field(default_factory=dict)

    def patient_means(self) -> dict[str, float]:
        return {p: float(np.mean(v)) for p, v in self.per_patient_dsc.items()}

    @classmethod
    def from_per_patient(cls, per_patient: dict[str, list[float]], meta: dict | None = None) -> MetricReport:
        means = np.array([np.mean(v) for v in per_patient.values()], dtype=np.float64)
        if means.size == 0:
            raise ValueError("no patients to report")
        se = float(means.std(ddof=1) / math.sqrt(means.size)) if means.size > 1 else 0.0
        meta = {"empty_class_convention": "absent in both prediction and truth scores 1", **(meta or {})}
        return cls({p: list(map(float, v)) for p, v in per_patient.items()}, float(means.mean()), se, meta)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        n_cls = len(next(iter(self.per_patient_dsc.values())))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", *[f"dsc_class{c + 1}" for c in range(n_cls)], "mean"])
            for pid, vals in self.per_patient_dsc.items():
                w.writerow([pid, *map(repr, vals), repr(float(np.mean(vals)))])
        return path


def predict_labels(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if hasattr(model, "eval"):
        model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size], dtype=np.float32))
            out.append(model(x).argmax(1).numpy().astype(np.uint8))
    return np.concatenate(out)


def evaluate_model(model, test: Dataset, batch_size: int = 64) -> MetricReport:
    """Per-patient Dice (mean over slices and foreground classes), then mean and SE over patients."""
    if len(test) == 0:
        raise ValueError("empty test set")
    preds = predict_labels(model, test.images(), batch_size)
    per_slice: dict[str, list[list[float]]] = {p: [] for p in test.patients}
    for pair, pred in zip(test.pairs, preds):
        per_slice[pair.patient_id].append(
            [dsc_score(pred, pair.mask, c) for c in range(1, test.num_classes + 1)]
        )
    per_patient = {p: list(np.mean(v, axis=0)) for p, v in per_slice.items() if v}
    return MetricReport.from_per_patient(per_patient)


# -- training ------------------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_dsc: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _batch_arrays(pairs: Sequence[SlicePair], num_classes: int, policy, rng):
    if policy is not None:
        pairs = [apply_augmentation(p, sample_augmentation(policy, rng)) for p in pairs]
    x = torch.from_numpy(np.stack([p.image for p in pairs]).astype(np.float32))
    m = torch.from_numpy(np.stack([p.mask for p in pairs]).astype(np.int64))
    y = F.one_hot(m, num_classes).permute(0, 3, 1, 2).float()
    return x, y


def train_unet(
    cfg: UNetConfig,
    train: Dataset,
    val: Dataset,
    generated: Dataset | None = None,
    augment: AugmentPolicy | None = None,
) -> tuple[UNet, TrainHistory]:
    """Adam training on real (+ optional generated) slices; returns the best-validation snapshot.

    With ``steps_per_epoch`` set, each epoch draws that many batches from a
    fresh shuffle of the combined pool instead of a full pass.
    """
    pool = list(train.pairs) + (list(generated.pairs) if generated is not None else [])
    if not pool:
        raise ValueError("empty training set")
    model = build_unet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    best_state, best_dsc = copy.deepcopy(model.state_dict()), -math.inf
    full_steps = math.ceil(len(pool) / cfg.batch_size)
    steps = full_steps if cfg.steps_per_epoch is None else min(cfg.steps_per_epoch, full_steps)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(pool))
        losses = []
        for s in range(steps):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            x, y = _batch_arrays([pool[i] for i in idx], cfg.num_classes, augment, rng)
            loss = soft_dsc_loss(model(x), y)
            if not torch.isfinite(loss):
                raise SegmentationDivergenceError(f"non-finite loss at epoch {epoch}, step {s}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        hist.train_loss.append(float(np.mean(losses)))
        val_dsc = evaluate_model(model, val).mean_dsc
        hist.val_dsc.append(val_dsc)
        if val_dsc > best_dsc:
            best_dsc, hist.best_epoch = val_dsc, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch %d loss=%.4f val_dsc=%.4f", epoch, hist.train_loss[-1], val_dsc)
    model.load_state_dict(best_state)
    model.eval()
    return model, hist


def save_unet(model: UNet, path: str | Path) -> Path:
    tensors = {k: v.float() for k, v in model.state_dict().items()}
    return save_tensors(path, {"kind": "unet", "config": model.cfg.to_dict()}, tensors)


def load_unet(path: str | Path) -> UNet:
    header, tensors = load_tensors(path)
    if header.get("kind") != "unet":
        raise ValueError(f"{path} is not a U-Net checkpoint")
    model = UNet(UNetConfig(**header["config"]))
    sd = model.state_dict()
    model.load_state_dict({k: tensors[k].to(sd[k].dtype) for k in sd})
    return model.eval()
