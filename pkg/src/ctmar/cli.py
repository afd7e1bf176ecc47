"""Command-line entry point tying generation, training, and evaluation together.

Configuration is a flat key=value file (one pair per line, '#' comments);
`--set key=value` overrides win over file values, and every run writes its
resolved configuration next to its outputs. Exit codes: 0 success, 1 usage
error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError, FormatError, NumericalError
from .losses import LOSS_VARIANTS
from .metrics import roi_metrics
from .phantom import PhantomConfig, generate_patient_case, load_dataset, save_patient_case, split_dataset
from .training import (
    ABLATIONS,
    Checkpoint,
    TrainConfig,
    build_ablation,
    evaluate,
    predict_volume,
    train,
)
from .transnet import REFERENCE_FULL_SCALE_PARAMS, count_parameters
from .volume import normalize_hu


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line: {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def resolve_config(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    # Dedicated flags win over file/--set values.
    for flag in ("seed", "ablation", "loss_variant", "teacher_mode", "resolution"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = str(v)
    if getattr(args, "detach_stages", False):
        values["detach_stages"] = "true"
    return values


def write_resolved_config(values: dict[str, str], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={values[k]}" for k in sorted(values)]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _coerce(cls, values: dict[str, str]):
    """Build a dataclass from string values, keeping unknown keys out."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.type in ("int",):
            kwargs[f.name] = int(raw)
        elif f.type in ("float",):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool",):
            kwargs[f.name] = raw.lower() in ("1", "true", "yes")
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    values = resolve_config(args)
    out_dir = Path(args.out)
    write_resolved_config(values, out_dir)
    n = args.n_patients
    base_seed = int(values.get("seed", "0"))
    rows = ["patient_id,n_slices,n_artifact_slices,artifact_fraction"]
    total_slices = 0
    total_art = 0
    for i in range(n):
        cfg = _coerce(PhantomConfig, {**values, "seed": str(base_seed + i)})
        case = generate_patient_case(cfg)
        save_patient_case(case, out_dir)
        d = case.kvct.depth
        a = len(case.artifact_slices)
        total_slices += d
        total_art += a
        rows.append(f"{case.patient_id},{d},{a},{a / d:.6f}")
    frac = total_art / total_slices if total_slices else 0.0
    rows.append(f"aggregate,{total_slices},{total_art},{frac:.6f}")
    (out_dir / "manifest.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {n} patients to {out_dir} (artifact fraction {frac:.4f})")
    return 0


def _train_config(values: dict[str, str]) -> TrainConfig:
    cfg = _coerce(TrainConfig, values)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    values = resolve_config(args)
    out_dir = Path(args.out)
    cfg = _train_config(values)
    cases = load_dataset(args.dataset)
    if not cases:
        raise ConfigError(f"no patients found under {args.dataset}")
    write_resolved_config(values, out_dir)
    train_frac = float(values.get("train_frac", "0.7"))
    if len(cases) >= 2 and 0.0 < train_frac < 1.0:
        train_cases, val_cases = split_dataset(cases, train_frac, cfg.seed)
        if not val_cases:
            val_cases = train_cases
    else:
        train_cases, val_cases = cases, cases
    ckpt = train(cfg, train_cases, val_cases, log_path=out_dir / "train_log.csv")
    ckpt.save(out_dir / "checkpoint.h3dc")
    n_epochs = len(ckpt.arrays.get("history/epoch", ()))
    print(
        f"trained {cfg.ablation} for {n_epochs} epochs; best val PSNR "
        f"{ckpt.best_val_psnr:.2f} dB at epoch {ckpt.epoch}; "
        f"checkpoint at {out_dir / 'checkpoint.h3dc'}"
    )
    return 0


def _annotate(ax, img, title):
    ax.imshow(img, cmap="gray", vmin=-1.0, vmax=1.0)
    ax.set_title(title, fontsize=7)
    ax.axis("off")


def write_patient_grid(path: Path, case, syn_vol, pred_vol, max_slices: int = 4) -> None:
    """Slice grid: input / stage-1 / prediction / target, metric-annotated."""
    target = normalize_hu(case.mvct).data[0]
    kv = normalize_hu(case.kvct).data[0]
    pred = pred_vol.data[0]
    syn = syn_vol.data[0] if syn_vol is not None else None
    depth = kv.shape[0]
    picks = list(case.artifact_slices[:max_slices])
    if not picks:
        picks = [depth // 2]
    cols = 4 if syn is not None else 3
    fig, axes = plt.subplots(len(picks), cols, figsize=(2.2 * cols, 2.2 * len(picks)), squeeze=False)
    for row, z in enumerate(picks):
        mask = case.body_mask[z]
        p, s = roi_metrics(pred[z], target[z], mask) if mask.any() else (float("nan"), float("nan"))
        col = 0
        _annotate(axes[row][col], kv[z], f"kVCT in (z={z})")
        col += 1
        if syn is not None:
            _annotate(axes[row][col], syn[z], "stage 1")
            col += 1
        _annotate(axes[row][col], pred[z], f"pred {p:.2f} dB / {s:.3f}")
        col += 1
        _annotate(axes[row][col], target[z], "MVCT target")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_eval(args) -> int:
    values = resolve_config(args)
    out_dir = Path(args.out)
    ckpt = Checkpoint.load(args.checkpoint)
    cases = load_dataset(args.dataset)
    if not cases:
        raise ConfigError(f"no patients found under {args.dataset}")
    write_resolved_config(values, out_dir)
    assembly = ckpt.build_assembly()
    report = evaluate(assembly, cases, input_depth=ckpt.config.input_depth)
    text_path, csv_path = report.write(out_dir)
    grids = out_dir / "grids"
    grids.mkdir(exist_ok=True)
    for case in cases:
        syn_vol, pred_vol = predict_volume(assembly, case.kvct, input_depth=ckpt.config.input_depth)
        write_patient_grid(grids / f"{case.patient_id}.png", case, syn_vol, pred_vol)
    agg = report.aggregate
    print(f"evaluated {len(cases)} patients; reports at {text_path} / {csv_path}")
    print(
        "PSNR/SSIM all: "
        f"{agg.get('psnr_all', float('nan')):.2f} / {agg.get('ssim_all', float('nan')):.3f}"
    )
    return 0


def cmd_analyze(args) -> int:
    values = resolve_config(args)
    out_dir = Path(args.out)
    cases = load_dataset(args.dataset)
    if not cases:
        raise ConfigError(f"no patients found under {args.dataset}")
    write_resolved_config(values, out_dir)
    report = evaluate(None, cases, predict_fn=lambda c: normalize_hu(c.mvct).data[0])
    lines = []
    for p in report.patients:
        for key in ("r2_all", "r2_clean", "r2_artifact", "skew_kvct_art", "skew_mvct_art"):
            v = getattr(p, key)
            if v is not None:
                lines.append(f"{p.patient_id}.{key}={v:.6f}")
    for key in ("r2_all", "r2_clean", "r2_artifact", "skew_kvct_art", "skew_mvct_art"):
        if key in report.aggregate:
            lines.append(f"aggregate.{key}={report.aggregate[key]:.6f}")
    path = out_dir / "analyze_report.txt"
    path.write_text("\n".join(lines) + "\n")
    print(f"analysis written to {path}")
    return 0


def cmd_ablate(args) -> int:
    values = resolve_config(args)
    out_dir = Path(args.out)
    write_resolved_config(values, out_dir)
    rows = ["ablation,prenet_params,transnet_params,total_params"]
    for ab in ABLATIONS:
        cfg = _train_config({**values, "ablation": ab})
        assembly = build_ablation(cfg)
        pre = count_parameters(assembly.prenet)
        trans = count_parameters(assembly.transnet)
        rows.append(f"{ab},{pre},{trans},{pre + trans}")
    (out_dir / "ablation_params.csv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))
    return 0


def cmd_info(args) -> int:
    values = resolve_config(args)
    if getattr(args, "out", None):
        write_resolved_config(values, Path(args.out))
    for scale, res in (("desk", int(values.get("resolution", "64"))), ("full", 512)):
        cfg = _train_config({**values, "model_scale": scale, "resolution": str(res)})
        assembly = build_ablation(cfg)
        total = count_parameters(assembly.prenet, assembly.transnet)
        line = f"{scale} scale ({res}x{res}): {total:,} trainable parameters"
        if scale == "full":
            ratio = total / REFERENCE_FULL_SCALE_PARAMS
            line += f" (reference target 22.6M, ratio {ratio:.2f})"
        print(line)
    print(f"loss variants: {', '.join(sorted(LOSS_VARIANTS))}")
    print(f"ablations: {', '.join(ABLATIONS)}")
    return 0


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctmar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="emit a synthetic paired dataset")
    _common(g)
    g.add_argument("--n-patients", type=int, default=8)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    _common(t)
    t.add_argument("dataset", help="dataset directory from `generate`")
    t.add_argument("--ablation", choices=ABLATIONS, default=None)
    t.add_argument("--loss-variant", dest="loss_variant", choices=sorted(LOSS_VARIANTS), default=None)
    t.add_argument("--teacher-mode", dest="teacher_mode", choices=("oracle", "learned"), default=None)
    t.add_argument("--detach-stages", dest="detach_stages", action="store_true")
    t.add_argument("--resolution", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(e)
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="HU correlation and histogram analysis of a dataset")
    _common(a)
    a.add_argument("dataset")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("ablate", help="report per-ablation parameter budgets")
    _common(b)
    b.add_argument("--resolution", type=int, default=None)
    b.set_defaults(func=cmd_ablate)

    i = sub.add_parser("info", help="print model and configuration info")
    i.add_argument("--config", help="flat key=value config file")
    i.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    i.add_argument("--seed", type=int, default=None)
    i.add_argument("--out", default=None, help="optional directory for the resolved config")
    i.add_argument("--resolution", type=int, default=None)
    i.set_defaults(func=cmd_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (ConfigError, FormatError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
