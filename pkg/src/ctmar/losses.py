"""Supervision terms: metal-weighted L1, SSIM, perceptual distance, and the
stage-combining objective with its ablation variants.

All terms are pure functions of (pred, target) and are exactly zero on
identical inputs. Losses operate on normalized intensities (range 2.0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 2.0  # normalized intensities live in [-1, 1]

METAL_THRESHOLD_HU = 2000.0
METAL_WEIGHT_BETA = 4.0
METAL_WEIGHT_RHO = 3

# Supervision-term combinations selectable per run; "l6" is the default
# objective, the rest exist for the loss-ablation matrix.
LOSS_VARIANTS: dict[str, tuple[str, ...]] = {
    "l1": ("l1w",),
    "l2": ("l1w", "ssim"),
    "l3": ("l1w", "ms_ssim"),
    "l4": ("l1w", "mse"),
    "l5": ("l1w", "ssim", "ffl"),
    "l6": ("l1w", "ssim", "percep"),
}
DEFAULT_VARIANT = "l6"


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 1.0
    lambda_ssim: float = 0.5
    lambda_percep: float = 0.5
    lambda_pre: float = 1.0
    lambda_trans: float = 1.0
    lambda_deep: float = 0.5

    def validate(self) -> None:
        if any(
            v < 0
            for v in (
                self.lambda_l1,
                self.lambda_ssim,
                self.lambda_percep,
                self.lambda_pre,
                self.lambda_trans,
                self.lambda_deep,
            )
        ):
            raise ConfigError("loss weights must be >= 0")


# ---------------------------------------------------------------------------
# Pixel terms
# ---------------------------------------------------------------------------

def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def weighted_l1(pred: torch.Tensor, target: torch.Tensor, w: torch.Tensor | None = None) -> torch.Tensor:
    """mean(w * |pred - target|) / mean(w); plain L1 when w is uniform/None."""
    _check_shapes(pred, target)
    err = (pred - target).abs()
    if w is None:
        return err.mean()
    return (w * err).mean() / w.mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, target)
    return ((pred - target) ** 2).mean()


def build_metal_weight_map(
    kvct_hu: np.ndarray,
    threshold: float = METAL_THRESHOLD_HU,
    beta: float = METAL_WEIGHT_BETA,
    rho: int = METAL_WEIGHT_RHO,
) -> np.ndarray:
    """1 + beta inside the rho-dilated (in-plane, disk) metal neighborhood.

    Input is HU-valued, (D,H,W) or (C,D,H,W); output has the same shape.
    """
    arr = np.asarray(kvct_hu)
    squeeze = False
    if arr.ndim == 3:
        arr = arr[None]
        squeeze = True
    if arr.ndim != 4:
        raise ConfigError(f"expected rank-3/4 HU array, got rank {arr.ndim}")
    mask = arr > threshold
    if beta != 0 and mask.any():
        yy, xx = np.mgrid[-rho : rho + 1, -rho : rho + 1]
        disk = (yy**2 + xx**2 <= rho**2)[None]  # (1, 2r+1, 2r+1): no dilation across slices
        dilated = np.stack([ndimage.binary_dilation(m, structure=disk) for m in mask])
        weights = (1.0 + beta * dilated).astype(np.float32)
    else:
        weights = np.ones(arr.shape, dtype=np.float32)
    return weights[0] if squeeze else weights


# ---------------------------------------------------------------------------
# SSIM family
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
                    dtype=torch.float32, device=None) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).reshape(1, 1, size, size)


def _fold_slices(x: torch.Tensor) -> torch.Tensor:
    """Any (..., H, W) tensor to a 2D-slice batch (N, 1, H, W)."""
    h, w = x.shape[-2], x.shape[-1]
    return x.reshape(-1, 1, h, w)


def ssim_parts(
    x: torch.Tensor, y: torch.Tensor, data_range: float = DATA_RANGE
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-window (luminance*cs, cs) maps via valid Gaussian-window statistics."""
    _check_shapes(x, y)
    xs, ys = _fold_slices(x), _fold_slices(y)
    h, w = xs.shape[-2], xs.shape[-1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigError(f"slice ({h},{w}) smaller than the {SSIM_WINDOW}-tap window")
    kernel = gaussian_window(dtype=xs.dtype, device=xs.device)
    mu_x = F.conv2d(xs, kernel)
    mu_y = F.conv2d(ys, kernel)
    xx = F.conv2d(xs * xs, kernel) - mu_x * mu_x
    yy = F.conv2d(ys * ys, kernel) - mu_y * mu_y
    xy = F.conv2d(xs * ys, kernel) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    cs = (2 * xy + c2) / (yy + xx + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return lum * cs, cs


def ssim_map(x: torch.Tensor, y: torch.Tensor, data_range: float = DATA_RANGE) -> torch.Tensor:
    return ssim_parts(x, y, data_range)[0]


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = DATA_RANGE) -> torch.Tensor:
    """Mean structural similarity, computed per depth slice and averaged."""
    return ssim_map(x, y, data_range).mean()


def ssim_loss(x: torch.Tensor, y: torch.Tensor, data_range: float = DATA_RANGE) -> torch.Tensor:
    return 1.0 - ssim(x, y, data_range)


_MS_WEIGHTS = (0.0448, 0.2856, 0.3001)  # leading standard exponents, renormalized below
MS_SSIM_WEIGHTS = tuple(w / sum(_MS_WEIGHTS) for w in _MS_WEIGHTS)


def ms_ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = DATA_RANGE) -> torch.Tensor:
    """Three-scale multi-scale SSIM (ablation alternative to single-scale)."""
    _check_shapes(x, y)
    xs, ys = _fold_slices(x), _fold_slices(y)
    values = []
    for i, weight in enumerate(MS_SSIM_WEIGHTS):
        full, cs = ssim_parts(xs, ys, data_range)
        term = full.mean() if i == len(MS_SSIM_WEIGHTS) - 1 else cs.mean()
        values.append(term.clamp(min=1e-6) ** weight)
        if i < len(MS_SSIM_WEIGHTS) - 1:
            xs = F.avg_pool2d(xs, 2)
            ys = F.avg_pool2d(ys, 2)
    out = values[0]
    for v in values[1:]:
        out = out * v
    return out


def ms_ssim_loss(x: torch.Tensor, y: torch.Tensor, data_range: float = DATA_RANGE) -> torch.Tensor:
    return 1.0 - ms_ssim(x, y, data_range)


def focal_frequency_loss(pred: torch.Tensor, target: torch.Tensor,
                         weight_matrix: torch.Tensor | None = None) -> torch.Tensor:
    """Spectrum-magnitude weighted squared error over per-slice 2D spectra.

    The weighting matrix is the normalized error magnitude and is treated as
    a constant (no gradient through it); pass weight_matrix to freeze it
    explicitly.
    """
    _check_shapes(pred, target)
    fp = torch.fft.fft2(_fold_slices(pred), norm="ortho")
    ft = torch.fft.fft2(_fold_slices(target), norm="ortho")
    diff = fp - ft
    mag2 = diff.real**2 + diff.imag**2
    if weight_matrix is None:
        weight = mag2.sqrt()
        peak = weight.amax(dim=(-2, -1), keepdim=True).clamp(min=1e-12)
        weight_matrix = (weight / peak).detach()
    return (weight_matrix * mag2).mean()


def focal_frequency_weight(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """The frozen spectral weight matrix used by focal_frequency_loss."""
    with torch.no_grad():
        fp = torch.fft.fft2(_fold_slices(pred), norm="ortho")
        ft = torch.fft.fft2(_fold_slices(target), norm="ortho")
        diff = fp - ft
        weight = (diff.real**2 + diff.imag**2).sqrt()
        peak = weight.amax(dim=(-2, -1), keepdim=True).clamp(min=1e-12)
        return weight / peak


# ---------------------------------------------------------------------------
# Perceptual distance
# ---------------------------------------------------------------------------

class PerceptualExtractor(nn.Module):
    """Frozen four-stage conv stack applied slice-wise to 3-channel input.

    Stands in for a pretrained feature network: random (seeded) projections
    keep the "different features => positive loss" contract without any
    external weights. Pass a custom module exposing .features() to swap in a
    genuinely pretrained extractor.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = (16, 32, 64, 64),
                 feature_stages: tuple[int, ...] = (2, 3)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            nn.init.normal_(conv.weight, std=0.2, generator=gen)
            nn.init.zeros_(conv.bias)
            stages.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.feature_stages = feature_stages
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        xs = _fold_slices(x).repeat(1, 3, 1, 1)
        feats = []
        h = xs
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return [feats[i] for i in self.feature_stages]


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    """Mean squared feature distance, averaged over the extractor's stages."""
    _check_shapes(pred, target)
    fp = extractor.features(pred)
    ft = extractor.features(target)
    terms = [((a - b) ** 2).mean() for a, b in zip(fp, ft)]
    return sum(terms) / len(terms)


# ---------------------------------------------------------------------------
# Stage objectives
# ---------------------------------------------------------------------------

def combine_supervision(l1_term, ssim_term, percep_term, weights: LossWeights = LossWeights()):
    return (
        weights.lambda_l1 * l1_term
        + weights.lambda_ssim * ssim_term
        + weights.lambda_percep * percep_term
    )


def supervision_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    w: torch.Tensor | None,
    weights: LossWeights = LossWeights(),
    extractor: PerceptualExtractor | None = None,
) -> torch.Tensor:
    """Default per-stage supervision: weighted L1 + SSIM + perceptual."""
    if extractor is None:
        extractor = _default_extractor(pred.device)
    return combine_supervision(
        weighted_l1(pred, target, w),
        ssim_loss(pred, target),
        perceptual_loss(pred, target, extractor),
        weights,
    )


def deep_supervision_loss(preds: list[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of per-scale L1 against average-pooled ground truth."""
    total = None
    for pred in preds:
        fh = target.shape[-2] // pred.shape[-2]
        fw = target.shape[-1] // pred.shape[-1]
        if target.shape[-2] != fh * pred.shape[-2] or target.shape[-1] != fw * pred.shape[-1]:
            raise ConfigError(
                f"prediction {tuple(pred.shape)} is not an integer downscale of {tuple(target.shape)}"
            )
        pooled = F.avg_pool3d(target, (1, fh, fw)) if (fh, fw) != (1, 1) else target
        term = (pred - pooled).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("deep supervision needs at least one prediction")
    return total


_EXTRACTOR_CACHE: dict[tuple, PerceptualExtractor] = {}


def _default_extractor(device) -> PerceptualExtractor:
    key = (str(device),)
    if key not in _EXTRACTOR_CACHE:
        _EXTRACTOR_CACHE[key] = PerceptualExtractor().to(device)
    return _EXTRACTOR_CACHE[key]


class SupervisionCriterion:
    """Per-stage objective configured by loss-variant key (l1..l6)."""

    def __init__(self, variant: str = DEFAULT_VARIANT, weights: LossWeights = LossWeights(),
                 extractor: PerceptualExtractor | None = None):
        if variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss variant {variant!r}")
        weights.validate()
        self.variant = variant
        self.weights = weights
        self.extractor = extractor

    def _term(self, name: str, pred, target, w):
        if name == "l1w":
            return weighted_l1(pred, target, w)
        if name == "ssim":
            return ssim_loss(pred, target)
        if name == "ms_ssim":
            return ms_ssim_loss(pred, target)
        if name == "mse":
            return mse_loss(pred, target)
        if name == "ffl":
            return focal_frequency_loss(pred, target)
        if name == "percep":
            ext = self.extractor or _default_extractor(pred.device)
            return perceptual_loss(pred, target, ext)
        raise ConfigError(f"unknown loss term {name!r}")

    def __call__(self, pred, target, w=None):
        terms = LOSS_VARIANTS[self.variant]
        slot_weights = (self.weights.lambda_l1, self.weights.lambda_ssim, self.weights.lambda_percep)
        total = None
        breakdown = {}
        for name, lam in zip(terms, slot_weights):
            val = self._term(name, pred, target, w)
            breakdown[name] = float(val.detach())
            total = lam * val if total is None else total + lam * val
        return total, breakdown


def total_loss(
    stage1_pred: torch.Tensor,
    pseudo_clean: torch.Tensor,
    stage2_preds: list[torch.Tensor],
    mvct_target: torch.Tensor,
    w: torch.Tensor | None = None,
    weights: LossWeights = LossWeights(),
    criterion: SupervisionCriterion | None = None,
    include_final_in_deepsup: bool = False,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total objective: both stage supervisions plus auxiliary-head terms.

    stage2_preds is [V1, V2, V3] from coarse to full resolution; the final
    prediction carries the stage-2 supervision while the auxiliary heads feed
    the deep-supervision sum (the final head joins it only when requested).
    """
    weights.validate()
    if criterion is None:
        criterion = SupervisionCriterion(weights=weights)
    pre, pre_terms = criterion(stage1_pred, pseudo_clean, w)
    trans, trans_terms = criterion(stage2_preds[-1], mvct_target, w)
    aux = stage2_preds if include_final_in_deepsup else stage2_preds[:-1]
    deep = deep_supervision_loss(aux, mvct_target)
    # Aggregate in float64 so the reported breakdown recomposes exactly.
    total = (
        weights.lambda_pre * pre.double()
        + weights.lambda_trans * trans.double()
        + weights.lambda_deep * deep.double()
    )
    breakdown = {
        "pre": float(pre.detach()),
        "trans": float(trans.detach()),
        "deep": float(deep.detach()),
        "total": float(total.detach()),
    }
    breakdown.update({f"pre_{k}": v for k, v in pre_terms.items()})
    breakdown.update({f"trans_{k}": v for k, v in trans_terms.items()})
    return total, breakdown
