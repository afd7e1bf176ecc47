"""Synthetic paired kVCT/MVCT patient generation, splitting, and augmentation.

The generator stands in for clinical acquisition: it emits pre-aligned pairs
with an artifact-free kVCT ground truth, so the stage-1 supervision target is
available by construction. Streaks are a geometric model (alternating-sign
angular lobes with 1/r decay around each metal insert), not a physics
simulation; they are only required to reproduce the qualitative HU-histogram
behaviour of metal-contaminated kVCT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError
from .volume import (
    Modality,
    Volume,
    classify_artifact_slices,
    read_volume,
    write_volume,
)

AIR_HU = -1024.0
MVCT_METAL_CAP_HU = 1500.0  # high-energy scans saturate well below the kVCT metal value


@dataclass(frozen=True)
class PhantomConfig:
    d: int = 16
    h: int = 64
    w: int = 64
    n_metal: int = 2
    metal_hu: float = 3000.0
    streak_amplitude: float = 800.0
    streak_count: int = 12  # rays per sign around each insert
    mvct_blur_sigma: float = 1.0
    mvct_noise_sigma: float = 20.0
    tissue_hu: float = 40.0
    bone_hu: float = 800.0
    artifact_frac: float = 0.1478  # target fraction of metal-bearing slices
    seed: int = 0

    def validate(self) -> None:
        if self.d < 1 or self.h < 16 or self.w < 16:
            raise ConfigError(f"bad dims ({self.d}, {self.h}, {self.w})")
        if self.h % 2 or self.w % 2:
            raise ConfigError("h and w must be even")
        if self.n_metal < 0:
            raise ConfigError("n_metal must be >= 0")
        if self.mvct_blur_sigma < 0 or self.mvct_noise_sigma < 0:
            raise ConfigError("sigmas must be >= 0")
        if not 0.0 < self.artifact_frac <= 1.0:
            raise ConfigError("artifact_frac must be in (0, 1]")


@dataclass
class PatientCase:
    """One paired volume set: contaminated kVCT, its clean ground truth, MVCT."""

    kvct: Volume
    kvct_clean: Volume
    mvct: Volume
    metal_mask: np.ndarray
    body_mask: np.ndarray
    artifact_slices: list[int]
    patient_id: str

    def validate(self) -> None:
        shapes = {self.kvct.shape, self.kvct_clean.shape, self.mvct.shape}
        if len(shapes) != 1:
            raise ConfigError(f"volume shapes differ: {shapes}")
        if self.metal_mask.shape != self.kvct.shape[1:] or self.body_mask.shape != self.kvct.shape[1:]:
            raise ConfigError("mask shape mismatch")
        if np.any(self.metal_mask & ~self.body_mask):
            raise ConfigError("metal mask leaks outside body mask")
        if self.artifact_slices != classify_artifact_slices(self.kvct):
            raise ConfigError("artifact_slices inconsistent with kvct contents")


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _streak_field(h, w, cy, cx, amplitude, n_rays, phase, r0=10.0):
    """Alternating-sign angular lobes decaying as r0/(r0+r) from the centroid."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    r = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx)
    lobes = np.cos(n_rays * (phi - phase))
    return amplitude * lobes * (r0 / (r0 + r))


def generate_patient_case(cfg: PhantomConfig) -> PatientCase:
    """Build one deterministic synthetic patient from the config seed.

    The clean kVCT is an elliptical head phantom (air background, soft-tissue
    interior with a few low-contrast ellipsoids, bone ring). Metal inserts are
    short cylinders covering ~artifact_frac of the slices; radial streaks are
    added on those slices only. MVCT is the blurred clean anatomy plus noise,
    with metal capped at 1500 HU.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, h, w = cfg.d, cfg.h, cfg.w

    cy, cx = h / 2.0, w / 2.0
    ry, rx = 0.44 * h, 0.40 * w
    body2d = _ellipse_mask(h, w, cy, cx, ry, rx)
    inner2d = _ellipse_mask(h, w, cy, cx, 0.80 * ry, 0.80 * rx)
    ring2d = body2d & ~inner2d

    base = np.full((h, w), AIR_HU, dtype=np.float32)
    base[inner2d] = cfg.tissue_hu
    base[ring2d] = cfg.bone_hu

    clean = np.repeat(base[None], d, axis=0)

    # Low-contrast ellipsoidal structures give the anatomy some 3D texture.
    n_struct = rng.integers(2, 5)
    for _ in range(n_struct):
        scy = cy + rng.uniform(-0.4, 0.4) * ry
        scx = cx + rng.uniform(-0.4, 0.4) * rx
        scz = rng.uniform(0, d - 1)
        sry = rng.uniform(0.08, 0.22) * ry
        srx = rng.uniform(0.08, 0.22) * rx
        srz = rng.uniform(0.15, 0.5) * max(d, 2)
        delta = rng.uniform(-50.0, 70.0)
        zz, yy, xx = np.mgrid[0:d, 0:h, 0:w]
        blob = (((zz - scz) / srz) ** 2 + ((yy - scy) / sry) ** 2 + ((xx - scx) / srx) ** 2) <= 1.0
        blob &= inner2d[None]
        clean[blob] += delta

    metal_mask = np.zeros((d, h, w), dtype=bool)
    kvct = clean.copy()
    if cfg.n_metal > 0:
        span = max(1, round(cfg.artifact_frac * d))
        span = min(span, d)
        z0 = int(rng.integers(0, d - span + 1))
        zs = slice(z0, z0 + span)
        centers = []
        for _ in range(cfg.n_metal):
            mcy = cy + rng.uniform(-0.45, 0.45) * ry
            mcx = cx + rng.uniform(-0.45, 0.45) * rx
            mr = rng.uniform(1.5, 3.5)
            disk = _ellipse_mask(h, w, mcy, mcx, mr, mr) & inner2d
            metal_mask[zs] |= disk[None]
            centers.append((mcy, mcx, rng.uniform(0, 2 * math.pi)))

        streaks = np.zeros((h, w), dtype=np.float32)
        for mcy, mcx, phase in centers:
            streaks += _streak_field(h, w, mcy, mcx, cfg.streak_amplitude, cfg.streak_count, phase)
        streaks[~body2d] = 0.0

        kvct[zs] += streaks[None]
        kvct[metal_mask] = cfg.metal_hu
        np.maximum(kvct, AIR_HU, out=kvct)

    mvct = clean.copy()
    mvct[metal_mask] = min(cfg.metal_hu, MVCT_METAL_CAP_HU)
    mvct = ndimage.gaussian_filter(mvct, sigma=(0.0, cfg.mvct_blur_sigma, cfg.mvct_blur_sigma))
    if cfg.mvct_noise_sigma > 0:
        mvct = mvct + rng.normal(0.0, cfg.mvct_noise_sigma, size=mvct.shape)
    mvct = mvct.astype(np.float32)

    body_mask = np.repeat(body2d[None], d, axis=0)
    pid = f"patient_{cfg.seed:05d}"
    kv = Volume(kvct[None], Modality.KVCT, voxel_id=f"{pid}/kvct")
    kv_clean = Volume(clean[None], Modality.KVCT, voxel_id=f"{pid}/kvct_clean")
    mv = Volume(mvct[None], Modality.MVCT, voxel_id=f"{pid}/mvct")
    case = PatientCase(
        kvct=kv,
        kvct_clean=kv_clean,
        mvct=mv,
        metal_mask=metal_mask,
        body_mask=body_mask,
        artifact_slices=classify_artifact_slices(kv),
        patient_id=pid,
    )
    case.validate()
    return case


def split_dataset(
    cases: list[PatientCase], train_frac: float, seed: int
) -> tuple[list[PatientCase], list[PatientCase]]:
    """Patient-wise split; round(train_frac * N) cases go to the training set."""
    if not 0.0 < train_frac < 1.0:
        raise ConfigError(f"train_frac must be in (0,1), got {train_frac}")
    if len(cases) < 2:
        raise ConfigError("need at least 2 cases to split")
    by_id: dict[str, list[PatientCase]] = {}
    for c in cases:
        by_id.setdefault(c.patient_id, []).append(c)
    ids = sorted(by_id)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_train = int(round(train_frac * len(cases)))
    train: list[PatientCase] = []
    test: list[PatientCase] = []
    for pid in ids:
        bucket = train if len(train) < n_train else test
        bucket.extend(by_id[pid])
    return train, test


# ---------------------------------------------------------------------------
# Paired augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    ssr_prob: float = 0.8
    shift_limit: float = 0.0625
    scale_limit: float = 0.1
    rotate_limit: float = 5.0

    def validate(self) -> None:
        if not (0 <= self.flip_prob <= 1 and 0 <= self.ssr_prob <= 1):
            raise ConfigError("probabilities must lie in [0,1]")
        if self.shift_limit < 0 or self.scale_limit < 0 or self.rotate_limit < 0:
            raise ConfigError("limits must be >= 0")


@dataclass(frozen=True)
class _Transform:
    flip: bool
    shift_y: float  # fraction of H
    shift_x: float  # fraction of W
    scale: float
    angle_deg: float


def draw_transform(params: AugmentParams, rng: np.random.Generator) -> _Transform:
    """One random in-plane transform draw (shared by every stack of a pair)."""
    params.validate()
    flip = rng.random() < params.flip_prob
    if rng.random() < params.ssr_prob:
        sy = rng.uniform(-params.shift_limit, params.shift_limit)
        sx = rng.uniform(-params.shift_limit, params.shift_limit)
        sc = 1.0 + rng.uniform(-params.scale_limit, params.scale_limit)
        ang = rng.uniform(-params.rotate_limit, params.rotate_limit)
    else:
        sy = sx = 0.0
        sc = 1.0
        ang = 0.0
    return _Transform(flip, sy, sx, sc, ang)


def apply_transform(stack: np.ndarray, t: _Transform, order: int = 1) -> np.ndarray:
    """Apply a transform to the trailing (H, W) axes of an array.

    order=1 resamples bilinearly (images); order=0 nearest (masks). Border
    values replicate the edge.
    """
    out = np.asarray(stack)
    if t.flip:
        out = out[..., ::-1]
    if t.shift_y == 0.0 and t.shift_x == 0.0 and t.scale == 1.0 and t.angle_deg == 0.0:
        return np.ascontiguousarray(out)
    h, w = out.shape[-2], out.shape[-1]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(t.angle_deg)
    # Output->input map: undo translation, then inverse rotation/scale about center.
    inv = np.array(
        [
            [math.cos(theta), -math.sin(theta)],
            [math.sin(theta), math.cos(theta)],
        ]
    ) / t.scale
    center = np.array([cy, cx])
    shift = np.array([t.shift_y * h, t.shift_x * w])
    # input_coord = inv @ (output_coord - center - shift) + center
    offset = center - inv @ (center + shift)

    flat = out.reshape(-1, h, w)
    warped = np.empty_like(flat, dtype=np.float32 if order else flat.dtype)
    for i in range(flat.shape[0]):
        warped[i] = ndimage.affine_transform(
            flat[i].astype(np.float32 if order else flat.dtype),
            inv,
            offset=offset,
            order=order,
            mode="nearest",
            output=warped.dtype,
        )
    return warped.reshape(out.shape)


def augment_pair(
    kvct_stack: np.ndarray,
    mvct_stack: np.ndarray,
    params: AugmentParams,
    seed: int,
    masks: tuple[np.ndarray, ...] | None = None,
):
    """Apply one shared random in-plane transform to a paired stack.

    Images resample bilinearly, masks (optional) with nearest-neighbor.
    Returns (kvct, mvct) or (kvct, mvct, masks) when masks are supplied.
    """
    kvct_stack = np.asarray(kvct_stack)
    mvct_stack = np.asarray(mvct_stack)
    if kvct_stack.shape != mvct_stack.shape:
        raise ConfigError(f"paired stacks differ in shape: {kvct_stack.shape} vs {mvct_stack.shape}")
    rng = np.random.default_rng(seed)
    t = draw_transform(params, rng)
    k = apply_transform(kvct_stack, t, order=1)
    m = apply_transform(mvct_stack, t, order=1)
    if masks is None:
        return k, m
    warped_masks = tuple(apply_transform(msk, t, order=0) for msk in masks)
    return k, m, warped_masks


# ---------------------------------------------------------------------------
# On-disk patient layout
# ---------------------------------------------------------------------------

def save_patient_case(case: PatientCase, out_dir: str | Path) -> Path:
    """Write one patient directory: three H3DV volumes, two masks, meta.txt."""
    out = Path(out_dir) / case.patient_id
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "kvct.h3dv", case.kvct)
    write_volume(out / "kvct_clean.h3dv", case.kvct_clean)
    write_volume(out / "mvct.h3dv", case.mvct)
    for name, mask in (("metal_mask", case.metal_mask), ("body_mask", case.body_mask)):
        mv = Volume(mask[None].astype(np.float32), Modality.KVCT, hu_window=(0.0, 1.0))
        write_volume(out / f"{name}.h3dv", mv)
    d = case.kvct.depth
    frac = len(case.artifact_slices) / d
    lines = [
        f"patient_id={case.patient_id}",
        f"artifact_slices={','.join(str(i) for i in case.artifact_slices)}",
        f"artifact_fraction={frac:.6f}",
        f"depth={d}",
    ]
    (out / "meta.txt").write_text("\n".join(lines) + "\n")
    return out


def load_patient_case(case_dir: str | Path) -> PatientCase:
    case_dir = Path(case_dir)
    try:
        kv = read_volume(case_dir / "kvct.h3dv")
        kv_clean = read_volume(case_dir / "kvct_clean.h3dv")
        mv = read_volume(case_dir / "mvct.h3dv")
        metal = read_volume(case_dir / "metal_mask.h3dv").data[0] > 0.5
        body = read_volume(case_dir / "body_mask.h3dv").data[0] > 0.5
    except FileNotFoundError as e:
        raise FormatError(f"incomplete patient directory {case_dir}: {e}") from e
    meta = {}
    for line in (case_dir / "meta.txt").read_text().splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            meta[key.strip()] = val.strip()
    sl = meta.get("artifact_slices", "")
    artifact_slices = [int(s) for s in sl.split(",") if s != ""]
    case = PatientCase(
        kvct=kv,
        kvct_clean=kv_clean,
        mvct=mv,
        metal_mask=metal,
        body_mask=body,
        artifact_slices=artifact_slices,
        patient_id=meta.get("patient_id", case_dir.name),
    )
    case.validate()
    return case


def load_dataset(root: str | Path) -> list[PatientCase]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "kvct.h3dv").exists())
    return [load_patient_case(p) for p in dirs]
