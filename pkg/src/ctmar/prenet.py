"""Stage-1 artifact suppression: slice-wise wavelet denoising with adaptive fusion.

Each axial slice goes through a two-level orthonormal Haar decomposition; every
sub-band is cleaned by a small squeeze-and-excitation style denoiser; the
inverse transform rebuilds a refined slice which is blended with the raw slice
through a learned per-pixel mixing map.

Band convention (fixed here, since "LH"/"HL" naming varies in the wild):
lh holds vertical detail (differences across rows), hl horizontal detail
(differences across columns).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError
from .volume import Volume

FAD_WIDTH = 16
FAD_REDUCTION = 4
FUSION_WIDTH = 16

# Order is level-major: level-1 bands then level-2 bands.
BAND_KEYS = ("l1_ll", "l1_lh", "l1_hl", "l1_hh", "l2_ll", "l2_lh", "l2_hl", "l2_hh")


@dataclass
class SubbandSet:
    """The four sub-bands of one 2D Haar decomposition level."""

    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.ll, self.lh, self.hl, self.hh)}
        if len(shapes) != 1:
            raise ConfigError(f"sub-band shapes differ: {shapes}")

    def bands(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.ll, self.lh, self.hl, self.hh


def haar_dwt2(x: torch.Tensor) -> SubbandSet:
    """Orthonormal 2D Haar analysis of the trailing (H, W) axes.

    Separable filters [1/sqrt(2), 1/sqrt(2)] and [1/sqrt(2), -1/sqrt(2)] at
    stride 2; energy is preserved exactly up to float rounding.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ConfigError(f"Haar DWT needs even dims, got ({h}, {w})")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a + b - c - d) * 0.5
    hl = (a - b + c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return SubbandSet(ll, lh, hl, hh)


def haar_idwt2(bands: SubbandSet) -> torch.Tensor:
    """Exact inverse of haar_dwt2."""
    ll, lh, hl, hh = bands.bands()
    a = (ll + lh + hl + hh) * 0.5
    b = (ll + lh - hl - hh) * 0.5
    c = (ll - lh + hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    h2, w2 = ll.shape[-2], ll.shape[-1]
    out = ll.new_empty(ll.shape[:-2] + (2 * h2, 2 * w2))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


class FrequencyAwareDenoiser(nn.Module):
    """Residual sub-band denoiser gated by channel statistics.

    features = relu(conv_in(band)); the gate squeezes those features to a
    per-channel scale in (0,1); the output adds a projection of the gated
    features back onto the band. conv_out starts at zero so the module is the
    identity at initialization.
    """

    def __init__(self, width: int = FAD_WIDTH, reduction: int = FAD_REDUCTION):
        super().__init__()
        hidden = max(width // reduction, 1)
        self.conv_in = nn.Conv2d(1, width, 3, padding=1)
        self.gate = nn.Sequential(
            nn.Linear(width, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, width),
            nn.Sigmoid(),
        )
        self.conv_out = nn.Conv2d(width, 1, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def gate_weights(self, band: torch.Tensor) -> torch.Tensor:
        feats = torch.relu(self.conv_in(band))
        z = feats.mean(dim=(-2, -1))
        return self.gate(z)

    def forward(self, band: torch.Tensor) -> torch.Tensor:
        if band.ndim != 4 or band.shape[1] != 1:
            raise ConfigError(f"expected (N,1,h,w) band, got {tuple(band.shape)}")
        feats = torch.relu(self.conv_in(band))
        z = feats.mean(dim=(-2, -1))
        s = self.gate(z)
        gated = feats * s[:, :, None, None]
        return band + self.conv_out(gated)


class SliceFusion(nn.Module):
    """Per-pixel mixing map from the (raw, refined) slice pair; values in (0,1)."""

    def __init__(self, width: int = FUSION_WIDTH):
        super().__init__()
        self.conv1 = nn.Conv2d(2, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, raw: torch.Tensor, refined: torch.Tensor) -> torch.Tensor:
        x = torch.cat([raw, refined], dim=1)
        x = torch.relu(self.conv1(x))
        return torch.sigmoid(self.conv2(x))


class WaveletPreNet(nn.Module):
    """Two-level Haar decomposition, per-band denoising, adaptive recomposition.

    The level-1 LL band is refined indirectly: its own four level-2 sub-bands
    are denoised, reassembled, and the reassembly passed through the level-1
    LL denoiser, so all eight band denoisers sit in the gradient path.

    shared_denoiser collapses the eight instances into one (config switch for
    the weight-sharing variant).
    """

    def __init__(self, width: int = FAD_WIDTH, reduction: int = FAD_REDUCTION,
                 fusion_width: int = FUSION_WIDTH, shared_denoiser: bool = False):
        super().__init__()
        if shared_denoiser:
            shared = FrequencyAwareDenoiser(width, reduction)
            self.fads = nn.ModuleDict({k: shared for k in BAND_KEYS})
        else:
            self.fads = nn.ModuleDict({k: FrequencyAwareDenoiser(width, reduction) for k in BAND_KEYS})
        self.fusion = SliceFusion(fusion_width)

    def denoise_slices(self, xs: torch.Tensor) -> torch.Tensor:
        """Wavelet-refined version of a batch of slices (N,1,H,W)."""
        b1 = haar_dwt2(xs)
        b2 = haar_dwt2(b1.ll)
        b2_star = SubbandSet(
            self.fads["l2_ll"](b2.ll),
            self.fads["l2_lh"](b2.lh),
            self.fads["l2_hl"](b2.hl),
            self.fads["l2_hh"](b2.hh),
        )
        ll_rebuilt = haar_idwt2(b2_star)
        b1_star = SubbandSet(
            self.fads["l1_ll"](ll_rebuilt),
            self.fads["l1_lh"](b1.lh),
            self.fads["l1_hl"](b1.hl),
            self.fads["l1_hh"](b1.hh),
        )
        return haar_idwt2(b1_star)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, 1, D, H, W) normalized volume batch -> (suppressed, mixing maps)."""
        if x.ndim != 5 or x.shape[1] != 1:
            raise ConfigError(f"expected (B,1,D,H,W), got {tuple(x.shape)}")
        bsz, _, d, h, w = x.shape
        if h % 4 or w % 4:
            raise ConfigError(f"H and W must be divisible by 4, got ({h}, {w})")
        xs = x.permute(0, 2, 1, 3, 4).reshape(bsz * d, 1, h, w)
        refined = self.denoise_slices(xs)
        mix = self.fusion(xs, refined)
        out = mix * xs + (1.0 - mix) * refined
        out = out.reshape(bsz, d, 1, h, w).permute(0, 2, 1, 3, 4)
        mix = mix.reshape(bsz, d, 1, h, w).permute(0, 2, 1, 3, 4)
        return out, mix


def prenet_forward(v: Volume, model: WaveletPreNet) -> tuple[Volume, np.ndarray]:
    """Run the suppressor over a normalized Volume; returns (output, mixing maps)."""
    if not v.normalized:
        raise ConfigError("stage-1 input must be normalized")
    with torch.no_grad():
        x = torch.from_numpy(v.data[None])
        out, mix = model(x)
    out_v = Volume(out[0].numpy(), v.modality, v.hu_window, v.voxel_id + "_syn", normalized=True)
    return out_v, mix[0].numpy()
