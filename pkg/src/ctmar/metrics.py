"""Evaluation protocol: PSNR/SSIM (optionally ROI-masked), voxel-wise HU
correlation, histogram statistics, and the per-patient report container.

Unless stated otherwise metrics treat arrays slice-wise along the depth axis
and are computed on normalized intensities (data range 2.0); HU-domain
analyses (correlation, histograms, difference maps) take HU-valued input.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .losses import SSIM_WINDOW, ssim_map
from .volume import Volume, classify_artifact_slices, denormalize_hu

ROI_DIFF_CLIP_HU = 250.0


def psnr(pred: np.ndarray, target: np.ndarray, max_val: float) -> float:
    """10*log10(max_val^2 / MSE); +inf on identical inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def ssim_index(pred: np.ndarray, target: np.ndarray, data_range: float = 2.0) -> float:
    """Structural similarity averaged over all slices (torch-backed, no grad)."""
    with torch.no_grad():
        value = ssim_map(
            torch.from_numpy(np.ascontiguousarray(pred, dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(target, dtype=np.float32)),
            data_range,
        ).mean()
    return float(value)


def _window_center_crop(mask: np.ndarray) -> np.ndarray:
    """Restrict a slice mask to positions that are valid SSIM window centers."""
    half = SSIM_WINDOW // 2
    return mask[..., half:-half, half:-half]


def roi_metrics(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    data_range: float = 2.0,
    per_slice: bool = False,
) -> tuple[float, float]:
    """(PSNR, SSIM) restricted to mask voxels.

    MSE pools masked voxels; SSIM averages windows whose centers fall inside
    the mask. per_slice=True averages per-slice values instead of pooling
    (slices with an empty mask are skipped).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != pred.shape:
        raise ConfigError("pred/target/mask shapes must match")
    if not mask.any():
        raise ConfigError("empty ROI mask")

    if per_slice:
        flat_p = pred.reshape(-1, *pred.shape[-2:])
        flat_t = target.reshape(-1, *target.shape[-2:])
        flat_m = mask.reshape(-1, *mask.shape[-2:])
        psnrs, ssims = [], []
        for p, t, m in zip(flat_p, flat_t, flat_m):
            if not m.any():
                continue
            ps, ss = roi_metrics(p, t, m, data_range, per_slice=False)
            psnrs.append(ps)
            ssims.append(ss)
        return float(np.mean(psnrs)), float(np.mean(ssims))

    mse = float(np.mean((pred[mask] - target[mask]) ** 2))
    psnr_val = math.inf if mse == 0.0 else 10.0 * math.log10(data_range**2 / mse)

    with torch.no_grad():
        smap = ssim_map(
            torch.from_numpy(np.ascontiguousarray(pred, dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(target, dtype=np.float32)),
            data_range,
        ).numpy()
    centers = _window_center_crop(mask).reshape(smap.shape)
    if not centers.any():
        raise ConfigError("ROI mask contains no valid SSIM window centers")
    ssim_val = float(smap[centers].mean())
    return psnr_val, ssim_val


SUBSET_ALL = "all"
SUBSET_CLEAN = "clean"
SUBSET_ARTIFACT = "artifact"


def hu_correlation(
    kvct: Volume,
    mvct: Volume,
    subset: str = SUBSET_ALL,
    body_mask: np.ndarray | None = None,
) -> float:
    """R^2 of the voxel-wise OLS fit of MVCT HU on kVCT HU.

    The subset picks depth slices by the kVCT artifact classification; the
    optional body mask restricts the fitted voxels.
    """
    if kvct.shape != mvct.shape:
        raise ConfigError("volumes must share shape")
    kv = denormalize_hu(kvct) if kvct.normalized else kvct
    mv = denormalize_hu(mvct) if mvct.normalized else mvct
    artifact = set(classify_artifact_slices(kv))
    depth = kv.depth
    if subset == SUBSET_ALL:
        keep = list(range(depth))
    elif subset == SUBSET_CLEAN:
        keep = [i for i in range(depth) if i not in artifact]
    elif subset == SUBSET_ARTIFACT:
        keep = sorted(artifact)
    else:
        raise ConfigError(f"unknown subset {subset!r}")
    if not keep:
        raise ConfigError(f"subset {subset!r} selects no slices")

    x = kv.data[0][keep].astype(np.float64)
    y = mv.data[0][keep].astype(np.float64)
    if body_mask is not None:
        m = np.asarray(body_mask, dtype=bool)[keep]
        x = x[m]
        y = y[m]
    else:
        x = x.ravel()
        y = y.ravel()
    if x.size < 2:
        raise ConfigError("too few voxels for a fit")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    sst = float(((y - ym) ** 2).sum())
    if sxx == 0.0 or sst == 0.0:
        return 0.0
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    resid = y - (ym + slope * (x - xm))
    return 1.0 - float((resid**2).sum()) / sst


@dataclass
class HistogramStats:
    mean: float
    std: float
    skewness: float
    bin_edges: np.ndarray
    counts: np.ndarray


def histogram_stats(v: Volume, mask: np.ndarray | None = None, bins: int = 256) -> HistogramStats:
    """Third-moment skewness plus a fixed-bin HU histogram over masked voxels."""
    hu = denormalize_hu(v) if v.normalized else v
    values = hu.data[0]
    if mask is not None:
        values = values[np.asarray(mask, dtype=bool)]
    values = values.astype(np.float64).ravel()
    if values.size == 0:
        raise ConfigError("mask selects no voxels")
    mean = float(values.mean())
    std = float(values.std())
    skew = 0.0 if std == 0.0 else float(np.mean((values - mean) ** 3) / std**3)
    lo, hi = hu.hu_window
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return HistogramStats(mean, std, skew, edges, counts)


def roi_difference_map(
    pred_hu: np.ndarray,
    target_hu: np.ndarray,
    roi_box: tuple[int, int, int, int, int, int] | None = None,
    clip_hu: float = ROI_DIFF_CLIP_HU,
) -> np.ndarray:
    """Absolute HU difference inside a (z0,z1,y0,y1,x0,x1) box, clipped for display."""
    pred_hu = np.asarray(pred_hu, dtype=np.float64)
    target_hu = np.asarray(target_hu, dtype=np.float64)
    if pred_hu.shape != target_hu.shape:
        raise ConfigError("shape mismatch")
    if roi_box is not None:
        z0, z1, y0, y1, x0, x1 = roi_box
        pred_hu = pred_hu[..., z0:z1, y0:y1, x0:x1]
        target_hu = target_hu[..., z0:z1, y0:y1, x0:x1]
    return np.clip(np.abs(pred_hu - target_hu), 0.0, clip_hu)


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

CSV_HEADER = [
    "patient_id",
    "psnr_all",
    "ssim_all",
    "psnr_art",
    "ssim_art",
    "r2_all",
    "r2_clean",
    "r2_artifact",
    "skew_kvct_art",
    "skew_mvct_art",
]


@dataclass
class PatientMetrics:
    patient_id: str
    psnr_all: float
    ssim_all: float
    psnr_art: float | None = None
    ssim_art: float | None = None
    r2_all: float | None = None
    r2_clean: float | None = None
    r2_artifact: float | None = None
    skew_kvct_art: float | None = None
    skew_mvct_art: float | None = None

    def row(self) -> list[str]:
        return [self.patient_id] + [_fmt(getattr(self, k)) for k in CSV_HEADER[1:]]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.6f}"


@dataclass
class EvalReport:
    """Per-patient metrics, patient-mean aggregates, and pooled full-set values."""

    patients: list[PatientMetrics]
    aggregate: dict[str, float] = field(default_factory=dict)
    fullset: dict[str, float] = field(default_factory=dict)

    def compute_aggregate(self) -> None:
        self.aggregate = {}
        for key in CSV_HEADER[1:]:
            vals = [getattr(p, key) for p in self.patients if getattr(p, key) is not None]
            if vals:
                self.aggregate[key] = float(np.mean(vals))

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.aggregate):
            lines.append(f"aggregate.{key}={_fmt(self.aggregate[key])}")
        for key in sorted(self.fullset):
            lines.append(f"fullset.{key}={_fmt(self.fullset[key])}")
        for p in self.patients:
            for key in CSV_HEADER[1:]:
                v = getattr(p, key)
                if v is not None:
                    lines.append(f"patient.{p.patient_id}.{key}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "eval_report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path = out_dir / f"{stem}.txt"
        csv_path = out_dir / f"{stem}.csv"
        text_path.write_text(self.to_text())
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            for p in self.patients:
                writer.writerow(p.row())
        return text_path, csv_path
