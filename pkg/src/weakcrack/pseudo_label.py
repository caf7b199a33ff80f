"""Crack CAM -> pixel pseudo label via a fully-connected pairwise CRF.

The CAM (stride-8 grid, values in [0,1]) is bilinearly upsampled to image
resolution, clamped, and turned into a two-class unary -log p. Mean-field
inference then sharpens it with two Potts-coupled Gaussian kernels: a spatial
one and a bilateral (position + color) one. Color features are measured in
8-bit units so the classic sigma values keep their meaning on [0,1] inputs.

Two deliberately independent implementations of the same update exist:

 - ``exact``: dense O(N^2) kernel matrices in numpy float64. Trustworthy and
   slow; refuses images above 4096 pixels.
 - ``fast``: separable truncated-Gaussian convolution for the spatial kernel
   and a windowed shift-and-accumulate for the bilateral kernel (torch).
   The truncation radius is chosen so the neglected tail mass is below
   ``trunc_eps``; when the radius reaches the image size the window covers
   every pixel pair and the message equals the exact one up to float
   reordering.

Per mean-field iteration, with k(i,i)=1 and self-messages excluded:

    msg_k(l) = sum_{j != i} k(i,j) Q_j(l)
    E_i(l)   = U_i(l) + compat * sum_{l' != l} (w_s msg_s(l') + w_b msg_b(l'))
    Q_i      = softmax_l(-E_i)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

EXACT_PIXEL_CAP = 4096


@dataclass
class PseudoMask:
    mask: np.ndarray   # (H,W) uint8 in {0,1}
    valid: bool        # False when the selection rule rejected the mask
    source_step: int   # trainer step whose CAM produced it


# ---------------------------------------------------------------- CAM -> unary

def bilinear_upsample(arr: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resize with corner-aligned lattices (float64).

    Output corners coincide with input corners, so any output position that
    lands exactly on an input lattice point reproduces that input value.
    """
    h_in, w_in = arr.shape
    h_out, w_out = out_hw
    arr = arr.astype(np.float64)

    def src_coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = src_coords(h_in, h_out)
    xs = src_coords(w_in, w_out)
    y0 = np.minimum(np.floor(ys).astype(int), h_in - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w_in - 1)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    v00 = arr[np.ix_(y0, x0)]
    v01 = arr[np.ix_(y0, x1)]
    v10 = arr[np.ix_(y1, x0)]
    v11 = arr[np.ix_(y1, x1)]
    return (v00 * (1 - ty) * (1 - tx) + v01 * (1 - ty) * tx
            + v10 * ty * (1 - tx) + v11 * ty * tx)


def cam_to_unary(cam: np.ndarray, image_hw, clamp: float = 1e-5) -> np.ndarray:
    """(h,w) CAM in [0,1] -> (2,H,W) float64 unary energies -log p."""
    if cam.ndim != 2:
        raise ValueError("cam must be a single (h,w) map")
    p = np.clip(bilinear_upsample(cam, image_hw), clamp, 1.0 - clamp)
    return np.stack([-np.log(1.0 - p), -np.log(p)])


# --------------------------------------------------------------- exact route

def _color_features(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H,W,3) in [0,1]")
    return image.astype(np.float64) * 255.0


def mean_field_exact(unary: np.ndarray, image: np.ndarray, params,
                     return_trajectory: bool = False):
    """Dense-matrix mean field, numpy float64. O(N^2) memory and time."""
    _, h, w = unary.shape
    n = h * w
    if n > EXACT_PIXEL_CAP:
        raise ValueError(f"exact mode is quadratic; {n} pixels exceeds the "
                         f"{EXACT_PIXEL_CAP} cap")
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    k_spatial = np.exp(-d2 / (2.0 * params.spatial_sigma ** 2))
    col = _color_features(image).reshape(n, 3)
    c2 = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    k_bilateral = np.exp(-d2 / (2.0 * params.bilateral_sigma_xy ** 2)
                         - c2 / (2.0 * params.bilateral_sigma_rgb ** 2))

    u = unary.reshape(2, n).astype(np.float64)
    q = _softmax0(-u)
    traj = [q.reshape(2, h, w).copy()]
    for _ in range(params.iterations):
        msg_s = q @ k_spatial.T - q    # k symmetric; diagonal 1 removed
        msg_b = q @ k_bilateral.T - q
        pair = params.spatial_weight * msg_s + params.bilateral_weight * msg_b
        energy = u + params.compat * pair[::-1]  # other label's message
        q = _softmax0(-energy)
        traj.append(q.reshape(2, h, w).copy())
    out = q.reshape(2, h, w)
    return (out, traj) if return_trajectory else out


def _softmax0(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=0, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=0, keepdims=True)


# ----------------------------------------------------------------- fast route

def _trunc_radius(sigma: float, eps: float, limit: int) -> int:
    r = int(np.ceil(sigma * np.sqrt(2.0 * np.log(1.0 / eps))))
    return max(1, min(r, limit))


def _gauss_taps(sigma: float, radius: int, dtype, device=None) -> torch.Tensor:
    t = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    return torch.exp(-(t * t) / (2.0 * sigma * sigma))


def _spatial_message(q: torch.Tensor, sigma: float, eps: float) -> torch.Tensor:
    """Separable unnormalized Gaussian filtering minus the center tap."""
    l, h, w = q.shape
    r = _trunc_radius(sigma, eps, max(h, w) - 1)
    taps = _gauss_taps(sigma, r, q.dtype, q.device)
    x = q.unsqueeze(1)  # (L,1,H,W)
    x = F.conv2d(x, taps.view(1, 1, 1, -1), padding=(0, r))
    x = F.conv2d(x, taps.view(1, 1, -1, 1), padding=(r, 0))
    return x.squeeze(1) - q


class BilateralWindow:
    """Precomputed windowed bilateral weights for one image.

    The weights do not depend on Q, so one instance serves every label and
    every mean-field iteration. Work is chunked over pixels to bound memory.
    """

    def __init__(self, image: np.ndarray, sigma_xy: float, sigma_rgb: float,
                 eps: float, dtype=torch.float64, device=None):
        h, w = image.shape[:2]
        self.h, self.w = h, w
        self.radius = _trunc_radius(sigma_xy, eps, max(h, w) - 1)
        k = 2 * self.radius + 1
        self.k = k
        feats = torch.from_numpy(_color_features(image)).to(dtype)
        feats = feats.permute(2, 0, 1).unsqueeze(0)  # (1,3,H,W)
        if device is not None:
            feats = feats.to(device)
        n = h * w
        unf = F.unfold(feats, k, padding=self.radius).view(3, k * k, n)
        center = feats.view(3, 1, n)
        c2 = ((unf - center) ** 2).sum(0)  # (k*k, n)
        dy, dx = torch.meshgrid(torch.arange(-self.radius, self.radius + 1),
                                torch.arange(-self.radius, self.radius + 1),
                                indexing="ij")
        s2 = (dy * dy + dx * dx).to(dtype).reshape(k * k, 1)
        if device is not None:
            s2 = s2.to(device)
        self.weights = torch.exp(-s2 / (2.0 * sigma_xy ** 2)
                                 - c2 / (2.0 * sigma_rgb ** 2))  # (k*k, n)

    def message(self, q: torch.Tensor) -> torch.Tensor:
        """(L,H,W) -> (L,H,W): windowed weighted sum minus the center tap."""
        l = q.shape[0]
        unf = F.unfold(q.unsqueeze(1), self.k, padding=self.radius)  # (L,k*k,N)
        out = torch.empty(l, self.h * self.w, dtype=q.dtype, device=q.device)
        chunk = max(1, int(32_000_000 // max(self.k * self.k, 1)))
        for s in range(0, self.h * self.w, chunk):
            e = min(s + chunk, self.h * self.w)
            out[:, s:e] = (self.weights[:, s:e].unsqueeze(0)
                           * unf[:, :, s:e]).sum(dim=1)
        return out.view(l, self.h, self.w) - q


def mean_field_fast(unary: np.ndarray, image: np.ndarray, params,
                    return_trajectory: bool = False, dtype=torch.float64):
    """Windowed/truncated mean field in torch; float64 by default."""
    _, h, w = unary.shape
    eps = getattr(params, "trunc_eps", 1e-9)
    u = torch.from_numpy(np.asarray(unary, dtype=np.float64)).to(dtype)
    bilateral = BilateralWindow(image, params.bilateral_sigma_xy,
                                params.bilateral_sigma_rgb, eps, dtype=dtype)
    q = torch.softmax(-u, dim=0)
    traj = [q.numpy().copy()]
    for _ in range(params.iterations):
        msg = (params.spatial_weight
               * _spatial_message(q, params.spatial_sigma, eps)
               + params.bilateral_weight * bilateral.message(q))
        energy = u + params.compat * msg.flip(0)  # two labels: swap rows
        q = torch.softmax(-energy, dim=0)
        traj.append(q.numpy().copy())
    out = q.numpy().astype(np.float64)
    return (out, traj) if return_trajectory else out


# ---------------------------------------------------------------- entry points

def refine_cam(cam: np.ndarray, image: np.ndarray, params, mode: str = None,
               dtype=torch.float64) -> np.ndarray:
    """CAM (h,w) + image (H,W,3 in [0,1]) -> (2,H,W) refined marginals."""
    unary = cam_to_unary(cam, image.shape[:2], clamp=params.unary_clamp)
    mode = mode or params.mode
    if mode == "exact":
        return mean_field_exact(unary, image, params)
    if mode == "fast":
        return mean_field_fast(unary, image, params, dtype=dtype)
    raise ValueError(f"unknown CRF mode {mode!r}")


def binarize_and_select(marginals: np.ndarray, step: int,
                        min_pixels: int = 1) -> PseudoMask:
    """Argmax over the two labels; reject masks with too few crack pixels.

    Rejected (all-black or near-empty) masks are returned with valid=False and
    must not supervise the detector.
    """
    mask = (marginals[1] > marginals[0]).astype(np.uint8)
    valid = int(mask.sum()) >= max(min_pixels, 1)
    return PseudoMask(mask=mask, valid=valid, source_step=step)
