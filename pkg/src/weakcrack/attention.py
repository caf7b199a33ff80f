"""Attention over the concatenated classifier/encoder features feeding the
detector: a directional spatial branch for thin elongated structures, then a
squeeze-excite channel branch.

The spatial branch convolves with four line-shaped kernels (0, 45, 90, 135
degrees). Kernel support is a hard structural constraint: off-line taps are
zero at init, are masked in every forward, and receive zero gradient, so they
stay exactly zero through arbitrary optimizer steps (weight decay included,
since decay of a zero stays zero).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def directional_masks(kernel_size: int) -> torch.Tensor:
    """(4,1,k,k) 0/1 masks: horizontal, vertical, diagonal, anti-diagonal."""
    k = kernel_size
    if k % 2 != 1 or k < 3:
        raise ValueError("kernel_size must be odd and >= 3")
    m = torch.zeros(4, 1, k, k)
    c = k // 2
    idx = torch.arange(k)
    m[0, 0, c, :] = 1.0
    m[1, 0, :, c] = 1.0
    m[2, 0, idx, idx] = 1.0
    m[3, 0, idx, k - 1 - idx] = 1.0
    return m


class DirectionalKernelBank(nn.Module):
    """Four single-output convolutions restricted to line supports."""

    def __init__(self, in_channels: int, kernel_size: int = 5):
        super().__init__()
        self.kernel_size = kernel_size
        weight = torch.empty(4, in_channels, kernel_size, kernel_size)
        nn.init.kaiming_uniform_(weight, a=5 ** 0.5)
        self.register_buffer("masks", directional_masks(kernel_size))
        with torch.no_grad():
            weight *= self.masks
        self.weight = nn.Parameter(weight)

    def remask(self):
        """Force off-support entries back to zero (after loading foreign weights)."""
        with torch.no_grad():
            self.weight.mul_(self.masks)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        w = self.weight * self.masks
        return F.conv2d(z, w, padding=self.kernel_size // 2)  # (N,4,h,w)


class PathAttention(nn.Module):
    """Directional spatial attention followed by channel attention.

    spatial: A = sigmoid(sum_theta |D_theta(z)|), then relu(bn(1x1(z * A))).
    channel: squeeze-excite on the spatially attended features.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 kernel_size: int = 5, reduction: int = 16):
        super().__init__()
        self.bank = DirectionalKernelBank(in_channels, kernel_size)
        self.fuse = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        hidden = max(out_channels // reduction, 4)
        self.fc1 = nn.Linear(out_channels, hidden)
        self.fc2 = nn.Linear(hidden, out_channels)
        self.out_channels = out_channels

    def spatial(self, z: torch.Tensor):
        r = self.bank(z).abs().sum(dim=1, keepdim=True)
        a = torch.sigmoid(r)
        zs = F.relu(self.norm(self.fuse(z * a)), inplace=True)
        return a, zs

    def channel(self, zs: torch.Tensor):
        s = zs.mean(dim=(2, 3))
        a = torch.sigmoid(self.fc2(F.relu(self.fc1(s), inplace=True)))
        return a, zs * a[:, :, None, None]

    def forward(self, z: torch.Tensor) -> dict:
        a_sp, zs = self.spatial(z)
        a_ch, zf = self.channel(zs)
        return {"features": zf, "spatial": a_sp, "channel": a_ch}


class PlainFusion(nn.Module):
    """Attention-free stand-in with the same interface: relu(bn(1x1(z)))."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.fuse = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        self.out_channels = out_channels

    def forward(self, z: torch.Tensor) -> dict:
        zf = F.relu(self.norm(self.fuse(z)), inplace=True)
        return {"features": zf, "spatial": None, "channel": None}
