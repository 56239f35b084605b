"""Alternating discriminator/generator updates, EMA tracking and checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..data import Dataset, SlicePair
from .losses import gan_losses, path_length_penalty, r1_penalty
from .networks import Discriminator, GanConfig, Generator, Variant, build_networks

log = logging.getLogger(__name__)

STEPLOG_FIELDS = ("step", "loss_d", "loss_g", "r1", "seconds")


class GanDivergenceError(RuntimeError):
    pass


@dataclass
class StepLog:
    step: int
    loss_d: float
    loss_g: float
    r1: float
    seconds: float
    d_accuracy: float

    def row(self) -> list:
        return [self.step, repr(self.loss_d), repr(self.loss_g), repr(self.r1), f"{self.seconds:.4f}"]


@dataclass
class GanState:
    config: GanConfig
    G: Generator
    D: Discriminator
    G_ema: Generator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    pl_mean: torch.Tensor | None = None

    @property
    def variant(self) -> Variant:
        return self.config.variant


def init_state(cfg: GanConfig) -> GanState:
    G, D = build_networks(cfg)
    G_ema = copy.deepcopy(G).eval().requires_grad_(False)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=cfg.adam_betas, eps=1e-8)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=cfg.adam_betas, eps=1e-8)
    return GanState(cfg, G, D, G_ema, opt_g, opt_d, 0, torch.zeros([]))


def state_to_double(state: GanState) -> GanState:
    """Cast a (fresh) state to float64, rebuilding optimizers."""
    cfg = state.config
    G, D, G_ema = state.G.double(), state.D.double(), state.G_ema.double()
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=cfg.adam_betas, eps=1e-8)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=cfg.adam_betas, eps=1e-8)
    return GanState(cfg, G, D, G_ema, opt_g, opt_d, state.step, torch.zeros([], dtype=torch.float64))


# -- batches ---------------------------------------------------------------


@dataclass
class GanBatch:
    sample: torch.Tensor  # what the discriminator judges as "real"
    cond: torch.Tensor | None  # one-hot {0, 1} masks for CSG


def one_hot_tensor(masks: torch.Tensor, num_channels: int) -> torch.Tensor:
    return F.one_hot(masks.long(), num_channels).permute(0, 3, 1, 2).float()


def make_batch(cfg: GanConfig, pairs: Sequence[SlicePair]) -> GanBatch:
    """Arrange slice pairs into the variant's real-sample layout.

    Mask channels that are modelled (BSG, MSG) are one-hot scaled to [-1, 1];
    CSG conditions stay in {0, 1}.
    """
    if not pairs:
        raise ValueError("empty batch")
    masks = torch.from_numpy(np.stack([p.mask for p in pairs]).astype(np.int64))
    onehot = one_hot_tensor(masks, cfg.mask_channels)
    images = None
    if cfg.image_channels:
        images = torch.from_numpy(np.stack([p.image for p in pairs]).astype(np.float32))
        if images.shape[1] != cfg.image_channels:
            raise ValueError(f"pairs have {images.shape[1]} modalities, config expects {cfg.image_channels}")
    if cfg.variant is Variant.BSG:
        return GanBatch(torch.cat([images, onehot * 2 - 1], dim=1), None)
    if cfg.variant is Variant.MSG:
        return GanBatch(onehot * 2 - 1, None)
    return GanBatch(images, onehot)


# -- training step -----------------------------------------------------------


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


@torch.no_grad()
def update_ema(G_ema: torch.nn.Module, G: torch.nn.Module, decay: float) -> None:
    for p_ema, p in zip(G_ema.parameters(), G.parameters()):
        p_ema.copy_(p.lerp(p_ema, decay))
    for b_ema, b in zip(G_ema.buffers(), G.buffers()):
        b_ema.copy_(b)


def _check_finite(state: GanState, **losses):
    bad = {k: v for k, v in losses.items() if not np.isfinite(v)}
    if bad:
        raise GanDivergenceError(
            f"non-finite loss at step {state.step} ({state.variant.value}): {bad}"
        )


def gan_train_step(state: GanState, batch: GanBatch, rng: torch.Generator) -> StepLog:
    """One discriminator update (with lazy R1) followed by one generator update.

    Mutates ``state`` in place and returns the step's telemetry.
    """
    t0 = time.perf_counter()
    cfg = state.config
    G, D = state.G, state.D
    real = batch.sample.to(next(D.parameters()).dtype)
    cond = None if batch.cond is None else batch.cond.to(real.dtype)
    n = real.shape[0]
    if n == 0:
        raise ValueError("empty batch")

    # discriminator
    _set_requires_grad(G, False)
    _set_requires_grad(D, True)
    z = torch.randn(n, cfg.latent_dim, generator=rng, dtype=real.dtype)
    with torch.no_grad():
        fake = G(z, cond, generator=rng, mixing_prob=cfg.style_mixing_prob)
    do_r1 = cfg.r1_gamma > 0 and state.step % cfg.r1_interval == 0
    if do_r1:
        r1, real_logits = r1_penalty(D, real, cfg.r1_gamma, cond, return_logits=True)
    else:
        real_logits = D(real, cond)
        r1 = real_logits.new_zeros([])
    fake_logits = D(fake, cond)
    loss_d, _ = gan_losses(real_logits, fake_logits)
    state.opt_d.zero_grad(set_to_none=True)
    (loss_d + r1 * cfg.r1_interval).backward()
    _check_finite(state, loss_d=loss_d.item(), r1=r1.item())
    state.opt_d.step()
    d_acc = 0.5 * ((real_logits.detach() > 0).float().mean() + (fake_logits.detach() < 0).float().mean())

    # generator
    _set_requires_grad(D, False)
    _set_requires_grad(G, True)
    z = torch.randn(n, cfg.latent_dim, generator=rng, dtype=real.dtype)
    fake = G(z, cond, generator=rng, update_w_avg=True, mixing_prob=cfg.style_mixing_prob)
    _, loss_g = gan_losses(real_logits.detach(), D(fake, cond))
    total_g = loss_g
    if cfg.path_length_weight > 0 and state.step % cfg.path_length_interval == 0:
        m = max(1, n // 2)
        pz = torch.randn(m, cfg.latent_dim, generator=rng, dtype=real.dtype)
        pl, state.pl_mean = path_length_penalty(
            G, pz, None if cond is None else cond[:m], state.pl_mean.to(real.dtype), generator_rng=rng
        )
        total_g = total_g + pl * cfg.path_length_weight * cfg.path_length_interval
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()
    _check_finite(state, loss_g=loss_g.item())
    state.opt_g.step()
    _set_requires_grad(D, True)

    update_ema(state.G_ema, G, cfg.ema_decay)
    state.step += 1
    return StepLog(
        step=state.step,
        loss_d=float(loss_d.item()),
        loss_g=float(loss_g.item()),
        r1=float(r1.item()),
        seconds=time.perf_counter() - t0,
        d_accuracy=float(d_acc.item()),
    )


def train_gan(
    cfg: GanConfig,
    data: Dataset,
    steps: int | None = None,
    state: GanState | None = None,
    steplog_path: str | Path | None = None,
    log_every: int = 100,
) -> tuple[GanState, list[StepLog]]:
    """Train ``cfg.total_steps`` (or ``steps``) adversarial steps on ``data``.

    Batches are drawn by a seeded permutation sampler so the whole run is
    reproducible from ``cfg.seed``.
    """
    if len(data) == 0:
        raise ValueError("cannot train a GAN on an empty dataset")
    state = state or init_state(cfg)
    steps = cfg.total_steps if steps is None else steps
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    order_rng = np.random.default_rng(cfg.seed + 2)
    order: list[int] = []
    logs = []
    writer = None
    fh = None
    if steplog_path is not None:
        steplog_path = Path(steplog_path)
        new = not steplog_path.exists()
        fh = open(steplog_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(STEPLOG_FIELDS)
    try:
        for _ in range(steps):
            idx = []
            while len(idx) < min(cfg.batch_size, len(data)):
                if not order:
                    order = list(order_rng.permutation(len(data)))
                idx.append(order.pop())
            batch = make_batch(cfg, [data.pairs[i] for i in idx])
            try:
                entry = gan_train_step(state, batch, rng)
            except GanDivergenceError:
                tail = logs[-5:]
                log.error("GAN diverged; last steps: %s", tail)
                raise
            logs.append(entry)
            if writer is not None:
                writer.writerow(entry.row())
            if log_every and entry.step % log_every == 0:
                log.info("%s step %d loss_d=%.4f loss_g=%.4f", cfg.variant.value, entry.step, entry.loss_d, entry.loss_g)
    finally:
        if fh is not None:
            fh.close()
    return state, logs


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"MCSGCKPT"


def save_tensors(path: str | Path, header: dict, tensors: dict[str, torch.Tensor]) -> Path:
    """Binary container: magic, u32 header length, JSON header, little-endian float32 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4").copy(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**header, "tensors": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return path


def load_tensors(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[len(_MAGIC) : len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    header = json.loads(raw[start : start + hlen])
    data = raw[start + hlen :]
    tensors = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return header, tensors


def _opt_tensors(prefix, opt, module):
    out = {}
    names = {id(p): n for n, p in module.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            out[f"{prefix}.{names[id(p)]}.exp_avg"] = st["exp_avg"]
            out[f"{prefix}.{names[id(p)]}.exp_avg_sq"] = st["exp_avg_sq"]
    return out


def save_checkpoint(state: GanState, path: str | Path) -> Path:
    tensors = {}
    for prefix, module in (("G", state.G), ("D", state.D), ("G_ema", state.G_ema)):
        for name, t in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = t
    tensors.update(_opt_tensors("opt_g", state.opt_g, state.G))
    tensors.update(_opt_tensors("opt_d", state.opt_d, state.D))
    tensors["pl_mean"] = state.pl_mean if state.pl_mean is not None else torch.zeros([])
    header = {"kind": "gan", "config": state.config.to_dict(), "step": state.step}
    return save_tensors(path, header, tensors)


def load_checkpoint(path: str | Path) -> GanState:
    header, tensors = load_tensors(path)
    if header.get("kind") != "gan":
        raise ValueError(f"{path} is not a GAN checkpoint")
    cfg = GanConfig.from_dict(header["config"])
    state = init_state(cfg)
    for prefix, module in (("G", state.G), ("D", state.D), ("G_ema", state.G_ema)):
        sd = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        module.load_state_dict(sd)
    for prefix, opt, module in (("opt_g", state.opt_g, state.G), ("opt_d", state.opt_d, state.D)):
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}.exp_avg"
            if key in tensors:
                opt.state[p] = {
                    "step": torch.tensor(float(header["step"])),
                    "exp_avg": tensors[key].clone(),
                    "exp_avg_sq": tensors[f"{prefix}.{name}.exp_avg_sq"].clone(),
                }
    state.step = int(header["step"])
    state.pl_mean = tensors["pl_mean"]
    return state
