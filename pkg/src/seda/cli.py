"""Command line front end for the full pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime failure. `SEDA_RUNS_DIR`
overrides the default output root (./runs).
"""

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import torch

from . import evalkit, toy_domains
from .config import RunConfig
from .evalkit import (EDGE_LAYER, FEATURE_LAYERS, SEM_LAYER, a_distance,
                      ablation_arms, collect_domain_features, evaluate_checkpoint,
                      evaluation_report, export_features, run_arm,
                      sl_threshold_baseline)
from .losses import PseudoLabelBundle
from .trainer import generate_pseudo_labels, load_checkpoint, train_stage1, train_stage3

log = logging.getLogger(__name__)

ALPHA_GRID = (0.0, 1.0, 5.0, 10.0, 15.0, 20.0, 30.0)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 instead of argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _runs_root() -> Path:
    return Path(os.environ.get("SEDA_RUNS_DIR", "runs"))


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else _runs_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        if args.command == "gen-data":
            cfg.data.seed = seed
        else:
            cfg.train.seed = seed
    iters = getattr(args, "iters", None)
    if iters is not None:
        if getattr(args, "stage", 1) == 3:
            cfg.train.iters_stage3 = iters
        else:
            cfg.train.iters_stage1 = iters
    alpha = getattr(args, "alpha", None)
    if alpha is not None and args.command != "sweep-alpha":
        cfg.train.weights.alpha = alpha
    cfg.validate()
    return cfg


def _echo_config(cfg: RunConfig, out: Path) -> None:
    cfg.save(out / "config.json")


def _load_manifest(data_arg) -> toy_domains.DatasetManifest:
    path = Path(data_arg)
    probe = path / "manifest.json" if path.is_dir() else path
    if not probe.exists():
        raise FileNotFoundError(f"dataset manifest not found at {probe}")
    return toy_domains.DatasetManifest.load(probe)


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_json_safe(payload), sort_keys=True, indent=2) + "\n")


def _markdown_table(rows, columns) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(columns) + " |",
             "|" + "|".join(" --- " for _ in columns) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(fmt(row[c]) for c in columns) + " |")
    return "\n".join(lines)


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "data")
    _echo_config(cfg, out)
    manifest = toy_domains.generate_dataset(cfg.data, out)
    print(manifest.root / "manifest.json")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.data)
    if args.stage == 1:
        out = _out_dir(args, "stage1")
        _echo_config(cfg, out)
        final = train_stage1(cfg.train, manifest, out, resume=args.resume)
    else:
        if not args.resume:
            raise ValueError("stage 3 needs --resume <stage-1 checkpoint>")
        bundle_dir = Path(args.bundle) if args.bundle else None
        if bundle_dir is None or not (bundle_dir / "index.json").exists():
            where = bundle_dir if bundle_dir else "(--bundle not given)"
            raise FileNotFoundError(
                f"missing pseudo-label bundle: {where}; run `seda pseudo-label` first")
        bundle = PseudoLabelBundle.load(bundle_dir)
        out = _out_dir(args, "stage3")
        _echo_config(cfg, out)
        final = train_stage3(args.resume, bundle, cfg.train, manifest, out)
    print(final)
    return 0


def cmd_pseudo_label(args) -> int:
    manifest = _load_manifest(args.data)
    out = _out_dir(args, "pseudo")
    generate_pseudo_labels(args.ckpt, manifest, out)
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.data)
    out = _out_dir(args, "eval")
    report = evaluation_report(args.ckpt, manifest, split=cfg.eval.split,
                               n_feats=cfg.eval.n_feats)
    _write_json(out / "report.json", report)
    print(json.dumps(_json_safe(report), sort_keys=True, indent=2))
    return 0


def cmd_a_distance(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.data)
    out = _out_dir(args, "a_distance")
    loaded = load_checkpoint(args.ckpt)
    result = {}
    for tag, layer in (("semantic", SEM_LAYER), ("edge", EDGE_LAYER)):
        feats = collect_domain_features(loaded.model, manifest, layer, cfg.eval.n_feats)
        result[tag] = a_distance(feats["source"][1], feats["target"][1], tag=tag).to_dict()
    _write_json(out / "a_distance.json", result)
    print(json.dumps(_json_safe(result), sort_keys=True, indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.data)
    out = _out_dir(args, "ablation")
    _echo_config(cfg, out)
    rows = [run_arm(name, arm_cfg, s3, manifest, out)
            for name, arm_cfg, s3 in ablation_arms(cfg.train)]
    _write_json(out / "ablation.json", rows)
    table = _markdown_table(rows, ("name", "miou"))
    (out / "ablation.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.data)
    out = _out_dir(args, "alpha_sweep")
    _echo_config(cfg, out)
    grid = (args.alpha,) if args.alpha is not None else ALPHA_GRID
    rows = []
    for alpha in grid:
        arm_cfg = evalkit._variant(cfg.train, alpha=float(alpha))
        final = train_stage1(arm_cfg, manifest, out / f"alpha_{alpha:g}")
        report = evaluate_checkpoint(final, manifest)
        rows.append({"alpha": float(alpha), "miou": report["miou"]})
        log.info("alpha %g: mIoU %.4f", alpha, report["miou"])
    _write_json(out / "sweep.json", rows)
    table = _markdown_table(rows, ("alpha", "miou"))
    (out / "sweep.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_sl_baseline(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.data)
    out = _out_dir(args, "sl_baseline")
    _echo_config(cfg, out)
    thresholds = args.threshold if args.threshold else cfg.eval.sl_thresholds
    rows = []
    for t in thresholds:
        ckpt = sl_threshold_baseline(args.ckpt, cfg.train, manifest,
                                     out / f"T{t:g}", threshold=float(t))
        report = evaluate_checkpoint(ckpt, manifest)
        rows.append({"threshold": float(t), "miou": report["miou"]})
        log.info("threshold %g: mIoU %.4f", t, report["miou"])
    _write_json(out / "sl_baseline.json", rows)
    table = _markdown_table(rows, ("threshold", "miou"))
    (out / "sl_baseline.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_export_features(args) -> int:
    cfg = _resolve_config(args)
    manifest = _load_manifest(args.data)
    out = _out_dir(args, "features")
    n = args.n if args.n is not None else cfg.eval.n_feats
    path = export_features(args.ckpt, manifest, args.layer, n,
                           out / f"{args.layer}.tsv")
    print(path)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    metrics = run_dir / "metrics.jsonl"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.jsonl under {run_dir}")
    records = [json.loads(line) for line in metrics.read_text().splitlines()]
    if not records:
        raise ValueError(f"{metrics} is empty")
    out = Path(args.out) if args.out else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    keys = sorted({k for r in records for k in r if k.startswith("loss_")})
    if keys:
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in keys:
            pts = [(r["iter"], r[key]) for r in records if key in r]
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    label=key.removeprefix("loss_"))
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=120)
        plt.close(fig)
        written.append(out / "losses.png")
    lr_keys = sorted({k for r in records for k in r if k.startswith("lr_")})
    if lr_keys:
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in lr_keys:
            pts = [(r["iter"], r[key]) for r in records if key in r]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("learning rate")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "schedule.png", dpi=120)
        plt.close(fig)
        written.append(out / "schedule.png")
    for path in written:
        print(path)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="seda", description="desk-scale semantic-edge domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_msg, *, data=False, ckpt=False):
        p = sub.add_parser(name, help=help_msg)
        p.add_argument("--config", help="JSON run config file")
        p.add_argument("--out", help="output directory (default: under SEDA_RUNS_DIR)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", required=True,
                           help="dataset directory or manifest.json")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint directory")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "render the two-domain dataset")

    p = add("train", cmd_train, "run a training stage", data=True)
    p.add_argument("--stage", type=int, choices=(1, 3), default=1)
    p.add_argument("--resume", help="checkpoint to resume (stage 1) or start from (stage 3)")
    p.add_argument("--bundle", help="pseudo-label bundle directory (stage 3)")
    p.add_argument("--iters", type=int, help="override the stage's iteration count")
    p.add_argument("--alpha", type=float, help="override the entropy reweighting factor")

    add("pseudo-label", cmd_pseudo_label, "write pseudo-labels for target-train",
        data=True, ckpt=True)
    add("evaluate", cmd_evaluate, "mIoU, boundary F1, and A-distance report",
        data=True, ckpt=True)
    add("a-distance", cmd_a_distance, "proxy A-distance on both feature layers",
        data=True, ckpt=True)

    p = add("ablate", cmd_ablate, "train and score the cumulative ablation arms", data=True)
    p.add_argument("--iters", type=int, help="override stage-1 iterations per arm")

    p = add("sweep-alpha", cmd_sweep_alpha, "stage-1 sweep over the reweighting factor",
            data=True)
    p.add_argument("--alpha", type=float, help="run a single alpha instead of the grid")
    p.add_argument("--iters", type=int, help="override stage-1 iterations per arm")

    p = add("sl-baseline", cmd_sl_baseline, "thresholded self-training comparison",
            data=True, ckpt=True)
    p.add_argument("--threshold", type=float, nargs="+",
                   help="confidence thresholds to run (default from config)")

    p = add("export-features", cmd_export_features, "pooled feature vectors as TSV",
            data=True, ckpt=True)
    p.add_argument("--layer", choices=FEATURE_LAYERS, default=SEM_LAYER)
    p.add_argument("--n", type=int, help="images per domain (default from config)")

    p = add("report", cmd_report, "render metrics logs into plot images")
    p.add_argument("run", help="run directory containing metrics.jsonl")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except Exception as e:  # CLI boundary: every runtime failure maps to exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
