"""Rotation about the image center, used for training augmentation and test-time blending."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

BLEND_ANGLES = tuple(36.0 * k for k in range(10))


def disc_mask(size: int, dtype=torch.float32) -> torch.Tensor:
    c = (size - 1) / 2.0
    yy, xx = torch.meshgrid(torch.arange(size, dtype=torch.float64), torch.arange(size, dtype=torch.float64), indexing="ij")
    return ((yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2).to(dtype)


def rotate_batch(x: torch.Tensor, angles_deg) -> torch.Tensor:
    """Rotate each ``[C, H, W]`` sample of ``x`` by its angle (degrees, counter-clockwise).

    Bilinear interpolation; everything outside the inscribed disc is zeroed so
    that every angle sees the same support. Samples that land a fraction of a
    pixel past the grid edge take the border value rather than zero, which
    keeps the disc rim free of padding artifacts.
    """
    if x.dim() != 4:
        raise ValueError("rotate_batch expects [B, C, H, W]")
    b, _, h, w = x.shape
    if h != w:
        raise ValueError("rotation needs square frames")
    angles = torch.as_tensor(angles_deg, dtype=torch.float64).reshape(-1)
    if angles.numel() == 1:
        angles = angles.expand(b)
    mask = disc_mask(h, x.dtype)
    if torch.all(angles == 0):
        return x * mask
    rad = angles * (math.pi / 180.0)
    cos, sin = torch.cos(rad), torch.sin(rad)
    theta = torch.zeros(b, 2, 3, dtype=torch.float64)
    theta[:, 0, 0], theta[:, 0, 1] = cos, -sin
    theta[:, 1, 0], theta[:, 1, 1] = sin, cos
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out * mask
