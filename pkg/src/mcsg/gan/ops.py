"""Resampling and modulated-convolution primitives."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F


def _as_kernel2d(kernel, like: torch.Tensor) -> torch.Tensor:
    k = torch.as_tensor(kernel, dtype=like.dtype, device=like.device)
    if k.ndim == 1:
        k = k[:, None] * k[None, :]
    if k.ndim != 2 or k.numel() == 0:
        raise ValueError("kernel must be a non-empty 1-D (separable) or 2-D array")
    return k


def upfirdn2d(
    x: torch.Tensor,
    kernel,
    up: int = 1,
    down: int = 1,
    pad: Sequence[int] = (0, 0, 0, 0),
) -> torch.Tensor:
    """Zero-stuff by ``up``, pad, convolve with ``kernel``, keep every ``down``-th sample.

    ``x`` is ``(H, W)`` or ``(..., H, W)``. ``kernel`` is either separable 1-D
    taps (applied along both axes) or a full 2-D kernel. ``pad`` is
    ``(top, bottom, left, right)``; negative values crop.
    """
    if up < 1 or down < 1:
        raise ValueError("up and down must be >= 1")
    k = _as_kernel2d(kernel, x)
    kh, kw = k.shape
    top, bottom, left, right = (int(p) for p in pad)
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    out_h = (h * up + top + bottom - kh) // down + 1
    out_w = (w * up + left + right - kw) // down + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"upfirdn2d output size {out_h}x{out_w} is empty")

    c = lead[-1] if lead else 1
    y = x.reshape(-1, c, h, 1, w, 1)
    if up > 1:
        y = F.pad(y, [0, up - 1, 0, 0, 0, up - 1])
    y = y.reshape(-1, c, h * up, w * up)
    y = F.pad(y, [max(left, 0), max(right, 0), max(top, 0), max(bottom, 0)])
    y = y[
        :,
        :,
        max(-top, 0) : y.shape[2] - max(-bottom, 0),
        max(-left, 0) : y.shape[3] - max(-right, 0),
    ]
    # true convolution (conv2d correlates, so flip the taps), depthwise over channels
    y = F.conv2d(y, k.flip([0, 1]).expand(c, 1, kh, kw), groups=c)
    y = y[:, :, ::down, ::down]
    return y.reshape(*lead, out_h, out_w)


def setup_filter(taps: Sequence[float] = (1, 3, 3, 1)) -> torch.Tensor:
    f = torch.as_tensor(taps, dtype=torch.float32)
    return f / f.sum()


def upsample2d(x: torch.Tensor, f: torch.Tensor, factor: int = 2) -> torch.Tensor:
    p = f.numel() - factor
    pad0, pad1 = (p + 1) // 2 + factor - 1, p // 2
    return upfirdn2d(x, f * factor, up=factor, pad=(pad0, pad1, pad0, pad1))


def downsample2d(x: torch.Tensor, f: torch.Tensor, factor: int = 2) -> torch.Tensor:
    p = f.numel() - factor
    pad0, pad1 = (p + 1) // 2, p // 2
    return upfirdn2d(x, f, down=factor, pad=(pad0, pad1, pad0, pad1))


def demodulated_weights(
    weight: torch.Tensor, styles: torch.Tensor, demodulate: bool = True, eps: float = 1e-8
) -> torch.Tensor:
    """Per-sample effective weights ``(N, O, I, k, k)``.

    Each input channel ``j`` is scaled by ``styles[:, j]``; with
    ``demodulate`` every output channel is then divided by its L2 norm.
    """
    if weight.ndim != 4:
        raise ValueError(f"weight must be (O, I, k, k), got {tuple(weight.shape)}")
    if styles.ndim != 2 or styles.shape[1] != weight.shape[1]:
        raise ValueError(
            f"styles shape {tuple(styles.shape)} does not match {weight.shape[1]} input channels"
        )
    w = weight[None] * styles[:, None, :, None, None]
    if demodulate:
        w = w * torch.rsqrt(w.square().sum(dim=[2, 3, 4], keepdim=True) + eps)
    return w


def modulated_conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    styles: torch.Tensor,
    demodulate: bool = True,
    eps: float = 1e-8,
    padding: int | None = None,
) -> torch.Tensor:
    """Convolve each sample of ``x`` with its own modulated (and demodulated) kernel."""
    n, c, h, w = x.shape
    if c != weight.shape[1]:
        raise ValueError(f"input has {c} channels, weight expects {weight.shape[1]}")
    wts = demodulated_weights(weight, styles, demodulate, eps)
    o, k = weight.shape[0], weight.shape[-1]
    if padding is None:
        padding = k // 2
    y = F.conv2d(x.reshape(1, n * c, h, w), wts.reshape(n * o, c, k, k), padding=padding, groups=n)
    return y.reshape(n, o, *y.shape[-2:])
