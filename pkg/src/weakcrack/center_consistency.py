"""Center-enhanced CAM consistency.

Adversarial alternation can make the two crack CAMs drift apart or smear.
This term re-weights each CAM by a Gaussian placed at its own activation
center of mass and penalizes the L1 gap between the two re-weighted maps,
pulling the classifier and encoder activations into spatial agreement around
the crack body.
"""

from __future__ import annotations

import torch


def cam_center(m: torch.Tensor, eps: float = 1e-8):
    """Activation center of mass of a single nonnegative map (h,w).

    Returns (mu_x, mu_y) as 0-dim tensors, or None when the map has no mass
    (all-zero CAM: there is no meaningful center, callers skip the term).
    """
    if m.dim() != 2:
        raise ValueError(f"expected a single (h,w) map, got {tuple(m.shape)}")
    total = m.sum()
    if float(total.detach()) <= eps:
        return None
    h, w = m.shape
    xs = torch.arange(w, dtype=m.dtype, device=m.device)
    ys = torch.arange(h, dtype=m.dtype, device=m.device)
    mu_x = (m.sum(dim=0) * xs).sum() / total
    mu_y = (m.sum(dim=1) * ys).sum() / total
    return mu_x, mu_y


def gaussian_prior(center, shape, sigma: float, dtype=torch.float32,
                   device=None) -> torch.Tensor:
    """Isotropic Gaussian bump exp(-(d^2)/(2*sigma^2)) on an (h,w) grid."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu_x, mu_y = center
    h, w = shape
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    yy = (ys[:, None] - mu_y) ** 2
    xx = (xs[None, :] - mu_x) ** 2
    return torch.exp(-(yy + xx) / (2.0 * sigma * sigma))


def center_enhance(m: torch.Tensor, sigma: float, detach_prior: bool = True):
    """Re-weight a CAM by a Gaussian at its own center of mass.

    Returns None for an all-zero map. With detach_prior the center and prior
    are treated as constants, so gradients only flow through the CAM values.
    """
    src = m.detach() if detach_prior else m
    center = cam_center(src)
    if center is None:
        return None
    g = gaussian_prior(center, m.shape, sigma, dtype=m.dtype, device=m.device)
    return m * g


def auto_sigma(shape) -> float:
    return 0.25 * min(shape[-2], shape[-1])


def consistency_loss(m_cls: torch.Tensor, m_rec: torch.Tensor,
                     sigma: float = 0.0, detach_prior: bool = True):
    """Mean L1 gap between the two center-enhanced crack CAMs.

    Inputs are normalized (h,w) crack CAMs from the classifier and the
    encoder. Returns a 0-dim tensor, or None when either map is all-zero.
    """
    if m_cls.shape != m_rec.shape:
        raise ValueError("CAM shapes differ")
    if sigma <= 0:
        sigma = auto_sigma(m_cls.shape)
    e_cls = center_enhance(m_cls, sigma, detach_prior)
    e_rec = center_enhance(m_rec, sigma, detach_prior)
    if e_cls is None or e_rec is None:
        return None
    return (e_cls - e_rec).abs().mean()
