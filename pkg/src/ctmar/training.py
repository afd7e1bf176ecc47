"""Two-stage training harness: teacher targets, optimization schedule, early
stopping, ablation assembly, checkpointing, and evaluation runs.

Volumes are consumed as overlapping depth-3 windows (stride 1, edge slices
replicated); at inference the center slice of every window is kept and the
volume reassembled, so outputs always match input depth.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from .errors import ConfigError, NumericalError
from .losses import (
    LossWeights,
    PerceptualExtractor,
    SupervisionCriterion,
    build_metal_weight_map,
    deep_supervision_loss,
)
from .metrics import (
    EvalReport,
    PatientMetrics,
    SUBSET_ALL,
    SUBSET_ARTIFACT,
    SUBSET_CLEAN,
    histogram_stats,
    hu_correlation,
    roi_metrics,
)
from .phantom import AugmentParams, PatientCase, apply_transform, draw_transform
from .prenet import WaveletPreNet
from .transnet import DomainTransNet, desk_scale, full_scale
from .volume import Modality, Volume, normalize_hu

ABLATIONS = ("v1", "v2", "v3", "v4", "v5")
TEACHER_ORACLE = "oracle"
TEACHER_LEARNED = "learned"

LOG_HEADER = "epoch,step,loss_total,loss_pre,loss_trans,loss_deep,lr,val_psnr"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epochs: int = 200
    lr0: float = 1e-4
    lr_half_every: int = 20
    weight_decay: float = 5e-4
    early_stop_patience: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    input_depth: int = 3
    resolution: int = 64
    model_scale: str = "desk"  # desk | full
    loss_variant: str = "l6"
    ablation: str = "v1"
    teacher_mode: str = TEACHER_ORACLE
    seed: int = 0
    detach_stages: bool = False
    include_final_in_deepsup: bool = False
    fad_shared: bool = False
    fusion_literal: bool = False
    augment: bool = True
    flip_prob: float = 0.5
    ssr_prob: float = 0.8
    shift_limit: float = 0.0625
    scale_limit: float = 0.1
    rotate_limit: float = 5.0
    val_every: int = 1

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1 or self.lr0 <= 0:
            raise ConfigError("batch_size, epochs, lr0 must be positive")
        if self.lr_half_every < 1 or self.early_stop_patience < 1:
            raise ConfigError("lr_half_every and early_stop_patience must be positive")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.teacher_mode not in (TEACHER_ORACLE, TEACHER_LEARNED):
            raise ConfigError(f"unknown teacher mode {self.teacher_mode!r}")
        if self.model_scale not in ("desk", "full"):
            raise ConfigError(f"unknown model scale {self.model_scale!r}")
        if self.input_depth < 1 or self.input_depth % 2 == 0:
            raise ConfigError("input_depth must be odd and >= 1")

    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            self.flip_prob, self.ssr_prob, self.shift_limit, self.scale_limit, self.rotate_limit
        )

    def to_flat_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_flat_dict(cls, d: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type == "bool":
                kwargs[f.name] = raw.lower() in ("1", "true", "yes")
            elif f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def lr_at(epoch: int, lr0: float = 1e-4, half_every: int = 20) -> float:
    """Step schedule: the initial rate halves every `half_every` epochs."""
    return lr0 * 0.5 ** (epoch // half_every)


# ---------------------------------------------------------------------------
# Model assembly / ablations
# ---------------------------------------------------------------------------

@dataclass
class ModelAssembly:
    """The trainable stack for one ablation: optional stage 1 plus stage 2."""

    prenet: WaveletPreNet | None
    transnet: DomainTransNet
    ablation: str

    def modules(self) -> list[nn.Module]:
        return [m for m in (self.prenet, self.transnet) if m is not None]

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()

    def train(self):
        for m in self.modules():
            m.train()

    def eval(self):
        for m in self.modules():
            m.eval()

    def forward(self, x: torch.Tensor, detach_stages: bool = False):
        """Returns (stage1 output or None, mixing maps or None, stage2 preds)."""
        if self.prenet is not None:
            x_syn, mix = self.prenet(x)
        else:
            x_syn, mix = None, None
        stage2_in = x if x_syn is None else (x_syn.detach() if detach_stages else x_syn)
        preds = self.transnet(stage2_in)
        return x_syn, mix, preds


def build_ablation(cfg: TrainConfig) -> ModelAssembly:
    """Assemble models per the component-ablation matrix.

    v1 full stack; v2 drops stage 1 and swaps fusion for plain concatenation;
    v3 drops stage 1 only; v4 additionally uses the plain (ungated) decoder;
    v5 keeps only the CNN branch.
    """
    cfg.validate()
    scale_fn = desk_scale if cfg.model_scale == "desk" else full_scale
    kw = dict(depth=cfg.input_depth, height=cfg.resolution, width=cfg.resolution,
              fusion_literal=cfg.fusion_literal)
    if cfg.ablation == "v2":
        kw["fusion"] = "concat"
    elif cfg.ablation == "v4":
        kw["attention_gates"] = False
    elif cfg.ablation == "v5":
        kw["use_transformer"] = False
        kw["fusion"] = "none"
    torch.manual_seed(cfg.seed)
    transnet = DomainTransNet(scale_fn(**kw))
    prenet = WaveletPreNet(shared_denoiser=cfg.fad_shared) if cfg.ablation == "v1" else None
    return ModelAssembly(prenet, transnet, cfg.ablation)


# ---------------------------------------------------------------------------
# Teacher / pseudo-clean targets
# ---------------------------------------------------------------------------

class TeacherNet(nn.Module):
    """Small slice-wise residual CNN mapping contaminated kVCT toward clean."""

    def __init__(self, width: int = 32, layers: int = 4):
        super().__init__()
        convs: list[nn.Module] = [nn.Conv2d(1, width, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(layers - 2):
            convs += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True)]
        convs.append(nn.Conv2d(width, 1, 3, padding=1))
        self.net = nn.Sequential(*convs)

    def forward(self, x):
        return x + self.net(x)


def train_teacher(cases: list[PatientCase], steps: int = 1500, lr: float = 2e-3,
                  batch_size: int = 8, seed: int = 0) -> TeacherNet:
    """Overfit a teacher on (kvct, kvct_clean) slices of the given cases."""
    if not cases:
        raise ConfigError("no cases for teacher training")
    torch.manual_seed(seed)
    teacher = TeacherNet()
    xs, ys = [], []
    for case in cases:
        xs.append(normalize_hu(case.kvct).data[0])
        ys.append(normalize_hu(case.kvct_clean).data[0])
    x = torch.from_numpy(np.concatenate(xs))[:, None]
    y = torch.from_numpy(np.concatenate(ys))[:, None]
    opt = torch.optim.AdamW(teacher.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        pred = teacher(x[idx])
        loss = (pred - y[idx]).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    teacher.eval()
    return teacher


def make_pseudo_clean(case: PatientCase, mode: str = TEACHER_ORACLE,
                      teacher: TeacherNet | None = None) -> Volume:
    """Stage-1 supervision target: generator ground truth or teacher output."""
    if mode == TEACHER_ORACLE:
        return case.kvct_clean
    if mode == TEACHER_LEARNED:
        if teacher is None:
            raise ConfigError("learned teacher mode requires a trained teacher")
        kv = normalize_hu(case.kvct)
        with torch.no_grad():
            pred = teacher(torch.from_numpy(kv.data[0])[:, None])[:, 0].numpy()
        norm = Volume(pred[None], Modality.KVCT, kv.hu_window,
                      case.patient_id + "/pseudo_clean", normalized=True)
        from .volume import denormalize_hu

        return denormalize_hu(norm)
    raise ConfigError(f"unknown teacher mode {mode!r}")


# ---------------------------------------------------------------------------
# Window plumbing
# ---------------------------------------------------------------------------

def pad_depth(data: np.ndarray, half: int) -> np.ndarray:
    """Edge-replicate the depth axis of a (D,H,W) array by `half` slices."""
    return np.concatenate([data[:1]] * half + [data] + [data[-1:]] * half, axis=0)


def window_at(data: np.ndarray, z: int, depth: int) -> np.ndarray:
    """Depth window centered on slice z of a (D,H,W) array (edges replicated)."""
    half = depth // 2
    idx = np.clip(np.arange(z - half, z + half + 1), 0, data.shape[0] - 1)
    return data[idx]


def _norm_window(hu_window: np.ndarray, modality: Modality) -> np.ndarray:
    v = Volume(hu_window[None].astype(np.float32), modality)
    return normalize_hu(v).data[0]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named parameter arrays plus the config snapshot and run metadata."""

    config: TrainConfig
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    best_val_psnr: float = float("-inf")

    def save(self, path: str | Path) -> None:
        meta = dict(self.arrays)
        meta["meta/epoch"] = np.array(self.epoch, dtype=np.int64)
        meta["meta/best_val_psnr"] = np.array(self.best_val_psnr, dtype=np.float64)
        cfg_text = "\n".join(f"{k}={v}" for k, v in self.config.to_flat_dict().items())
        ckpt_io.save_arrays(path, meta, cfg_text)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, cfg_text = ckpt_io.load_arrays(path)
        pairs = dict(line.split("=", 1) for line in cfg_text.splitlines() if "=" in line)
        config = TrainConfig.from_flat_dict(pairs)
        epoch = int(arrays.pop("meta/epoch", np.array(0)))
        best = float(arrays.pop("meta/best_val_psnr", np.array(float("-inf"))))
        return cls(config, arrays, epoch, best)

    @classmethod
    def from_assembly(cls, cfg: TrainConfig, assembly: ModelAssembly,
                      optimizer: torch.optim.Optimizer | None = None,
                      epoch: int = 0, best_val_psnr: float = float("-inf"),
                      history: dict[str, list[float]] | None = None) -> "Checkpoint":
        arrays: dict[str, np.ndarray] = {}
        named: list[tuple[str, torch.Tensor]] = []
        if assembly.prenet is not None:
            named += [(f"prenet/{k}", p) for k, p in assembly.prenet.named_parameters()]
        named += [(f"transnet/{k}", p) for k, p in assembly.transnet.named_parameters()]
        for key, p in named:
            arrays[key] = p.detach().cpu().numpy().copy()
        if optimizer is not None:
            param_names = {id(p): key for key, p in named}
            for group in optimizer.param_groups:
                for p in group["params"]:
                    state = optimizer.state.get(p)
                    if not state or id(p) not in param_names:
                        continue
                    base = f"optim/{param_names[id(p)]}"
                    arrays[f"{base}/exp_avg"] = state["exp_avg"].cpu().numpy().copy()
                    arrays[f"{base}/exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy().copy()
                    arrays[f"{base}/step"] = np.array(float(state["step"]), dtype=np.float64)
        if history:
            for col, vals in history.items():
                arrays[f"history/{col}"] = np.asarray(vals, dtype=np.float64)
        return cls(cfg, arrays, epoch, best_val_psnr)

    def build_assembly(self) -> ModelAssembly:
        assembly = build_ablation(self.config)
        self.load_into(assembly)
        return assembly

    def load_into(self, assembly: ModelAssembly) -> None:
        def restore(module: nn.Module, prefix: str):
            with torch.no_grad():
                for key, p in module.named_parameters():
                    arr = self.arrays.get(f"{prefix}/{key}")
                    if arr is None:
                        raise ConfigError(f"checkpoint missing entry {prefix}/{key}")
                    p.copy_(torch.from_numpy(arr.astype(np.float32)))

        if assembly.prenet is not None:
            restore(assembly.prenet, "prenet")
        restore(assembly.transnet, "transnet")


def _batch_tensors(cases, pseudo_cleans, picks, cfg, epoch, base_step):
    """Assemble one training batch (augmented, weighted, normalized)."""
    depth = cfg.input_depth
    params = cfg.augment_params()
    kv_list, cl_list, mv_list, w_list = [], [], [], []
    for j, (ci, z) in enumerate(picks):
        case = cases[ci]
        kv = window_at(case.kvct.data[0], z, depth)
        cl = window_at(pseudo_cleans[ci].data[0], z, depth)
        mv = window_at(case.mvct.data[0], z, depth)
        if cfg.augment:
            rng = np.random.default_rng([cfg.seed, epoch, base_step + j])
            t = draw_transform(params, rng)
            kv = apply_transform(kv, t, order=1)
            cl = apply_transform(cl, t, order=1)
            mv = apply_transform(mv, t, order=1)
        w_list.append(build_metal_weight_map(kv))
        kv_list.append(_norm_window(kv, Modality.KVCT))
        cl_list.append(_norm_window(cl, Modality.KVCT))
        mv_list.append(_norm_window(mv, Modality.MVCT))
    to = lambda arrs: torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))
    return to(kv_list), to(cl_list), to(mv_list), to(w_list)


def train(cfg: TrainConfig, train_cases: list[PatientCase],
          val_cases: list[PatientCase] | None = None,
          log_path: str | Path | None = None,
          teacher: TeacherNet | None = None) -> Checkpoint:
    """Optimize the two-stage objective; returns the best checkpoint seen.

    Deterministic for a fixed config seed: init, shuffling, and augmentation
    draws all derive from it. Raises NumericalError when the loss goes
    non-finite.
    """
    cfg.validate()
    if not train_cases:
        raise ConfigError("empty training dataset")
    val_cases = val_cases or train_cases

    if cfg.teacher_mode == TEACHER_LEARNED and teacher is None:
        teacher = train_teacher(train_cases, seed=cfg.seed)
    pseudo_cleans = [make_pseudo_clean(c, cfg.teacher_mode, teacher) for c in train_cases]

    assembly = build_ablation(cfg)
    weights = LossWeights()
    extractor = PerceptualExtractor(seed=cfg.seed)
    criterion = SupervisionCriterion(cfg.loss_variant, weights, extractor)

    opt = torch.optim.AdamW(
        list(assembly.parameters()),
        lr=cfg.lr0,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )

    windows = [(ci, z) for ci, case in enumerate(train_cases) for z in range(case.kvct.depth)]
    shuffle_rng = np.random.default_rng([cfg.seed, 0xC0FFEE])

    log_lines = [LOG_HEADER]
    history: dict[str, list[float]] = {k: [] for k in
                                       ("epoch", "loss_total", "loss_pre", "loss_trans", "loss_deep", "val_psnr")}
    best_state: Checkpoint | None = None
    best_val = float("-inf")
    epochs_since_best = 0
    val_psnr = float("nan")
    step = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_half_every)
        for group in opt.param_groups:
            group["lr"] = lr
        order = shuffle_rng.permutation(len(windows))
        assembly.train()
        epoch_terms = {"loss_total": 0.0, "loss_pre": 0.0, "loss_trans": 0.0, "loss_deep": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            picks = [windows[i] for i in order[start : start + cfg.batch_size]]
            kv, cl, mv, w = _batch_tensors(train_cases, pseudo_cleans, picks, cfg, epoch, start)
            x_syn, _, preds = assembly.forward(kv, cfg.detach_stages)
            if x_syn is not None:
                pre, _ = criterion(x_syn, cl, w)
            else:
                pre = torch.zeros(())
            trans, _ = criterion(preds[-1], mv, w)
            aux = preds if cfg.include_final_in_deepsup else preds[:-1]
            deep = deep_supervision_loss(aux, mv)
            loss = weights.lambda_pre * pre + weights.lambda_trans * trans + weights.lambda_deep * deep
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            vals = dict(loss_total=float(loss.detach()), loss_pre=float(pre.detach()),
                        loss_trans=float(trans.detach()), loss_deep=float(deep.detach()))
            for k, v in vals.items():
                epoch_terms[k] += v
            n_batches += 1
            log_lines.append(
                f"{epoch},{step},{vals['loss_total']:.6f},{vals['loss_pre']:.6f},"
                f"{vals['loss_trans']:.6f},{vals['loss_deep']:.6f},{lr:.6g},{val_psnr:.4f}"
            )
            step += 1

        improved = False
        if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            val_psnr = validation_psnr(assembly, val_cases, cfg)
            if val_psnr > best_val:
                best_val = val_psnr
                improved = True
                best_state = Checkpoint.from_assembly(cfg, assembly, opt, epoch, best_val, history)
        # patience counts epochs, not validations
        epochs_since_best = 0 if improved else epochs_since_best + 1

        history["epoch"].append(float(epoch))
        history["val_psnr"].append(val_psnr)
        for k in ("loss_total", "loss_pre", "loss_trans", "loss_deep"):
            history[k].append(epoch_terms[k] / max(n_batches, 1))

        if epochs_since_best >= cfg.early_stop_patience:
            break

    if best_state is None:
        best_state = Checkpoint.from_assembly(cfg, assembly, opt, cfg.epochs - 1, best_val, history)
    else:
        # refresh history so the checkpoint carries the full curve
        best_state.arrays.update(
            {f"history/{col}": np.asarray(vals, dtype=np.float64) for col, vals in history.items()}
        )
    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n")
    return best_state


# ---------------------------------------------------------------------------
# Inference / evaluation
# ---------------------------------------------------------------------------

def predict_volume(assembly: ModelAssembly, kvct: Volume, batch_size: int = 8,
                   input_depth: int = 3) -> tuple[Volume | None, Volume]:
    """Slide depth windows over a kVCT volume; returns (stage1 volume, MVCT prediction).

    Both outputs are normalized volumes; the stage-1 volume is None for
    assemblies without the suppression stage.
    """
    kv = kvct if kvct.normalized else normalize_hu(kvct)
    data = kv.data[0]
    depth = data.shape[0]
    wins = np.stack([window_at(data, z, input_depth) for z in range(depth)])[:, None]
    assembly.eval()
    outs, synths = [], []
    center = input_depth // 2
    with torch.no_grad():
        for start in range(0, depth, batch_size):
            chunk = torch.from_numpy(wins[start : start + batch_size].astype(np.float32))
            x_syn, _, preds = assembly.forward(chunk)
            outs.append(preds[-1][:, :, center].numpy())
            if x_syn is not None:
                synths.append(x_syn[:, :, center].numpy())
    pred = np.concatenate(outs)[:, 0]  # (D, H, W)
    pred_vol = Volume(pred[None], Modality.MVCT, voxel_id=kv.voxel_id + "_pred",
                      normalized=True)
    syn_vol = None
    if synths:
        syn = np.concatenate(synths)[:, 0]
        syn_vol = Volume(syn[None], Modality.KVCT, kv.hu_window,
                         kv.voxel_id + "_syn", normalized=True)
    return syn_vol, pred_vol


def validation_psnr(assembly: ModelAssembly, cases: list[PatientCase], cfg: TrainConfig) -> float:
    """Mean body-ROI PSNR of MVCT predictions over all slices of the cases."""
    vals = []
    for case in cases:
        _, pred = predict_volume(assembly, case.kvct, input_depth=cfg.input_depth)
        target = normalize_hu(case.mvct)
        p, _s = roi_metrics(pred.data[0], target.data[0], case.body_mask, per_slice=True)
        vals.append(p)
    return float(np.mean(vals))


def evaluate(assembly: ModelAssembly | Checkpoint, test_cases: list[PatientCase],
             input_depth: int = 3,
             predict_fn=None) -> EvalReport:
    """Full evaluation protocol over a test set.

    predict_fn overrides model inference (case -> normalized (D,H,W) MVCT
    prediction); used for harness plumbing checks.
    """
    if isinstance(assembly, Checkpoint):
        input_depth = assembly.config.input_depth
        assembly = assembly.build_assembly()
    patients = []
    slice_psnr_all: list[float] = []
    slice_ssim_all: list[float] = []
    slice_psnr_art: list[float] = []
    slice_ssim_art: list[float] = []
    for case in test_cases:
        if predict_fn is not None:
            pred = np.asarray(predict_fn(case), dtype=np.float32)
        else:
            _, pred_vol = predict_volume(assembly, case.kvct, input_depth=input_depth)
            pred = pred_vol.data[0]
        target = normalize_hu(case.mvct).data[0]
        mask = case.body_mask
        art = case.artifact_slices
        p_all, s_all, p_art, s_art = [], [], [], []
        for z in range(pred.shape[0]):
            if not mask[z].any():
                continue
            p, s = roi_metrics(pred[z], target[z], mask[z])
            p_all.append(p)
            s_all.append(s)
            if z in art:
                p_art.append(p)
                s_art.append(s)
        slice_psnr_all += p_all
        slice_ssim_all += s_all
        slice_psnr_art += p_art
        slice_ssim_art += s_art
        psnr_art = float(np.mean(p_art)) if p_art else None
        ssim_art = float(np.mean(s_art)) if s_art else None
        skew_kv = skew_mv = None
        r2_clean = r2_art = None
        if art:
            art_mask = np.zeros_like(mask)
            art_mask[art] = mask[art]
            skew_kv = histogram_stats(case.kvct, art_mask).skewness
            skew_mv = histogram_stats(case.mvct, art_mask).skewness
            r2_art = hu_correlation(case.kvct, case.mvct, SUBSET_ARTIFACT, case.body_mask)
        if len(art) < case.kvct.depth:
            r2_clean = hu_correlation(case.kvct, case.mvct, SUBSET_CLEAN, case.body_mask)
        r2_all = hu_correlation(case.kvct, case.mvct, SUBSET_ALL, case.body_mask)
        patients.append(
            PatientMetrics(case.patient_id, float(np.mean(p_all)), float(np.mean(s_all)),
                           psnr_art, ssim_art, r2_all, r2_clean, r2_art, skew_kv, skew_mv)
        )
    report = EvalReport(patients)
    report.compute_aggregate()
    report.fullset = {
        "psnr_all": float(np.mean(slice_psnr_all)) if slice_psnr_all else float("nan"),
        "ssim_all": float(np.mean(slice_ssim_all)) if slice_ssim_all else float("nan"),
    }
    if slice_psnr_art:
        report.fullset["psnr_art"] = float(np.mean(slice_psnr_art))
        report.fullset["ssim_art"] = float(np.mean(slice_ssim_art))
    return report
