"""Backbones and the four network roles: classifier, reconstruction
encoder/decoder, and pixel detector.

Two backbone presets share one interface (stride 8, skip features at /2 and /4,
a final dilated stage):

 - ``tiny_test``: a 6-conv residual stack sized for CPU-scale experiments
 - ``resnet38_wide``: a wide dilated residual network

Class evidence maps come from a 1x1 conv head on the final feature map; global
average pooling of those maps gives the image-level logits, so the pooled score
and the spatial map are the same linear classifier.
"""

from __future__ import annotations

import pickle
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError

WEIGHTS_FORMAT_VERSION = 1


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.proj = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride,
                                                bias=False),
                                      nn.BatchNorm2d(cout))
        else:
            self.proj = None

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        short = x if self.proj is None else self.proj(x)
        return F.relu(out + short, inplace=True)


class BottleneckDrop(nn.Module):
    """Pre-activation bottleneck with dropout, used in the wide net's head stages."""

    def __init__(self, cin, cmid, cout, dilation, p_drop):
        super().__init__()
        self.bn_in = nn.BatchNorm2d(cin)
        self.reduce = nn.Conv2d(cin, cmid, 1, bias=False)
        self.bn_mid = nn.BatchNorm2d(cmid)
        self.conv = nn.Conv2d(cmid, cmid, 3, padding=dilation,
                              dilation=dilation, bias=False)
        self.bn_out = nn.BatchNorm2d(cmid)
        self.drop = nn.Dropout2d(p_drop)
        self.expand = nn.Conv2d(cmid, cout, 1, bias=False)
        self.proj = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        h = F.relu(self.bn_in(x), inplace=True)
        short = self.proj(h)
        h = F.relu(self.bn_mid(self.reduce(h)), inplace=True)
        h = F.relu(self.bn_out(self.conv(h)), inplace=True)
        h = self.drop(h)
        return self.expand(h) + short


class TinyBackbone(nn.Module):
    stride = 8

    def __init__(self, width=16):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, stride=2, padding=1,
                                            bias=False),
                                  nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        self.block1 = ResBlock(w, 2 * w, stride=2)
        self.block2 = ResBlock(2 * w, 4 * w, stride=2)
        self.block3 = ResBlock(4 * w, 4 * w, dilation=2)
        self.skip_channels = (w, 2 * w)
        self.pre_channels = 4 * w
        self.feature_channels = 4 * w

    def forward(self, x):
        s2 = self.stem(x)
        s4 = self.block1(s2)
        pre = self.block2(s4)
        feat = self.block3(pre)
        return {"skip2": s2, "skip4": s4, "pre": pre, "feature": feat}


class WideBackbone(nn.Module):
    """Wide dilated residual network (38-conv layout), stride 8."""

    stride = 8

    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(3, 64, 3, padding=1, bias=False)
        self.b2 = nn.Sequential(ResBlock(64, 128, stride=2),
                                ResBlock(128, 128), ResBlock(128, 128))
        self.b3 = nn.Sequential(ResBlock(128, 256, stride=2),
                                ResBlock(256, 256), ResBlock(256, 256))
        self.b4 = nn.Sequential(ResBlock(256, 512, stride=2),
                                *[ResBlock(512, 512) for _ in range(5)])
        self.b5 = nn.Sequential(ResBlock(512, 1024, dilation=2),
                                ResBlock(1024, 1024, dilation=2),
                                ResBlock(1024, 1024, dilation=2))
        self.b6 = BottleneckDrop(1024, 512, 2048, dilation=4, p_drop=0.3)
        self.b7 = BottleneckDrop(2048, 1024, 4096, dilation=4, p_drop=0.5)
        self.skip_channels = (128, 256)
        self.pre_channels = 2048
        self.feature_channels = 4096

    def forward(self, x):
        s1 = self.stem(x)
        s2 = self.b2(s1)
        s4 = self.b3(s2)
        h = self.b4(s4)
        h = self.b5(h)
        pre = self.b6(h)
        feat = self.b7(pre)
        return {"skip2": s2, "skip4": s4, "pre": pre, "feature": feat}


def make_backbone(name: str, width: int = 16) -> nn.Module:
    if name == "tiny_test":
        return TinyBackbone(width)
    if name == "resnet38_wide":
        return WideBackbone()
    raise ValueError(f"unknown backbone {name!r}")


def default_z_channels(name: str, width: int = 16) -> int:
    return 4 * width if name == "tiny_test" else 512


# ------------------------------------------------------------------ CAM utils

def normalize_cam(cam_raw: torch.Tensor) -> torch.Tensor:
    """ReLU then per-map max normalization over the last two dims, into [0,1]."""
    m = F.relu(cam_raw)
    peak = m.amax(dim=(-2, -1), keepdim=True)
    return m / (peak + 1e-5)


def decompose_features(z: torch.Tensor, cam_crack: torch.Tensor):
    """Split features into crack part z*M and complement z*(1-M).

    z: (N,C,h,w); cam_crack: (N,h,w) in [0,1] at the same spatial size.
    """
    if z.shape[-2:] != cam_crack.shape[-2:]:
        raise ValueError(f"feature {tuple(z.shape)} and CAM "
                         f"{tuple(cam_crack.shape)} spatial sizes differ")
    m = cam_crack.unsqueeze(1)
    return z * m, z * (1.0 - m)


# -------------------------------------------------------------------- networks

class ClassifierNet(nn.Module):
    def __init__(self, backbone="tiny_test", width=16):
        super().__init__()
        self.backbone = make_backbone(backbone, width)
        self.head = nn.Conv2d(self.backbone.feature_channels, 2, 1, bias=False)
        self.feature_channels = self.backbone.feature_channels

    def forward(self, x):
        f = self.backbone(x)
        cam_raw = self.head(f["feature"])
        logits = cam_raw.mean(dim=(2, 3))
        return {"cam_raw": cam_raw, "logits": logits, "feature": f["feature"]}


class RecEncoder(nn.Module):
    """Classifier-shaped encoder that also emits a fused feature map Z.

    Z concatenates the last two stride-8 stage outputs through a 1x1 conv, so
    the decoder sees both the pre-head and head-level representations.
    """

    def __init__(self, backbone="tiny_test", width=16, z_channels=0):
        super().__init__()
        self.backbone = make_backbone(backbone, width)
        self.head = nn.Conv2d(self.backbone.feature_channels, 2, 1, bias=False)
        if z_channels <= 0:
            z_channels = default_z_channels(backbone, width)
        self.z_channels = z_channels
        cat = self.backbone.pre_channels + self.backbone.feature_channels
        self.fuse = nn.Sequential(nn.Conv2d(cat, z_channels, 1, bias=False),
                                  nn.BatchNorm2d(z_channels),
                                  nn.ReLU(inplace=True))

    def forward(self, x):
        f = self.backbone(x)
        cam_raw = self.head(f["feature"])
        logits = cam_raw.mean(dim=(2, 3))
        z = self.fuse(torch.cat([f["pre"], f["feature"]], dim=1))
        return {"cam_raw": cam_raw, "logits": logits, "z": z,
                "skip2": f["skip2"], "skip4": f["skip4"]}


class RecDecoder(nn.Module):
    """Upsampling decoder from stride 8 back to pixels, with encoder skips.

    Skips come from the undecomposed encoder pass; only the bottleneck input
    carries the crack/background split. Output is sigmoid RGB in [0,1].
    """

    def __init__(self, z_channels, skip_channels):
        super().__init__()
        c = z_channels
        c2, c4 = skip_channels
        self.up1 = nn.Sequential(nn.ConvTranspose2d(c, c // 2, 4, 2, 1,
                                                    bias=False),
                                 nn.BatchNorm2d(c // 2), nn.ReLU(inplace=True))
        self.mix1 = nn.Sequential(nn.Conv2d(c // 2 + c4, c // 2, 3, padding=1,
                                            bias=False),
                                  nn.BatchNorm2d(c // 2), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(c // 2, c // 4, 4, 2, 1,
                                                    bias=False),
                                 nn.BatchNorm2d(c // 4), nn.ReLU(inplace=True))
        self.mix2 = nn.Sequential(nn.Conv2d(c // 4 + c2, c // 4, 3, padding=1,
                                            bias=False),
                                  nn.BatchNorm2d(c // 4), nn.ReLU(inplace=True))
        self.up3 = nn.Sequential(nn.ConvTranspose2d(c // 4, c // 8, 4, 2, 1,
                                                    bias=False),
                                 nn.BatchNorm2d(c // 8), nn.ReLU(inplace=True))
        self.out = nn.Conv2d(c // 8, 3, 1)

    def forward(self, z, skip2, skip4):
        h = self.mix1(torch.cat([self.up1(z), skip4], dim=1))
        h = self.mix2(torch.cat([self.up2(h), skip2], dim=1))
        h = self.up3(h)
        return torch.sigmoid(self.out(h))


class Detector(nn.Module):
    """Conv / transposed-conv stack mapping stride-8 features to pixel logits."""

    def __init__(self, in_channels):
        super().__init__()
        chans = [in_channels]
        for _ in range(3):
            chans.append(max(chans[-1] // 2, 16))
        stages = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            stages += [nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
                       nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                       nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*stages)
        self.out = nn.Conv2d(chans[-1], 1, 1)

    def forward(self, z):
        return self.out(self.body(z))  # (N,1,H,W) logits


# ------------------------------------------------------------- weight archives

def export_weights(module: nn.Module, path) -> None:
    """Single-file weight archive: parameter/buffer name -> float array."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    blob = {"format_version": WEIGHTS_FORMAT_VERSION, "arrays": arrays}
    Path(path).write_bytes(pickle.dumps(blob, protocol=4))


def load_weights(module: nn.Module, path, strict=True):
    """Load an archive written by export_weights. With strict=False, entries
    whose name or shape does not match are skipped (partial backbone init)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"weight file not found: {path}")
    try:
        blob = pickle.loads(path.read_bytes())
        version = blob["format_version"]
        arrays = blob["arrays"]
    except Exception as e:
        raise CheckpointError(f"unreadable weight file {path}: {e}") from e
    if version != WEIGHTS_FORMAT_VERSION:
        raise CheckpointError(f"weight format version {version} unsupported")
    state = module.state_dict()
    loaded, skipped = [], []
    for k, arr in arrays.items():
        if k in state and tuple(state[k].shape) == tuple(arr.shape):
            state[k] = torch.from_numpy(arr.copy()).to(state[k].dtype)
            loaded.append(k)
        else:
            skipped.append(k)
    if strict and skipped:
        raise CheckpointError(f"{len(skipped)} entries do not match the module: "
                              f"{skipped[:4]}...")
    module.load_state_dict(state)
    return loaded, skipped
