"""Batch command-line front end: scene generation, training runs, and
run-to-run comparison reports.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .gating import GatingConfig
from .renderer import render
from .scene import (
    SceneSpec,
    generate_scene,
    init_training_scene,
    load_scene_dir,
    save_scene_dir,
    write_ppm,
)
from .trainer import (
    TrainConfig,
    save_checkpoint,
    train,
    write_report,
    write_train_log,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_size(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")


def _parse_switch(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {text!r}")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skipgs", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene and targets")
    g.add_argument("--gaussians", type=int, default=64)
    g.add_argument("--cams", type=int, default=13)
    g.add_argument("--size", type=_parse_size, default=(64, 64))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--extent", type=float, default=1.0)
    g.add_argument("--init-mode", choices=("perturbed_gt", "random_volume"), default="perturbed_gt")
    g.add_argument("--init-count", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train on a generated scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    t.add_argument("--skipgs", type=_parse_switch, default=None)
    t.add_argument("--budget", type=_parse_switch, default=None)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--td", type=int, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--eval-every", type=int, default=None)
    t.add_argument("--threads", type=int, default=None)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="diff two training reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_compare)
    return p


def cmd_gen_scene(args) -> int:
    spec = SceneSpec(
        num_gt_gaussians=args.gaussians,
        extent=args.extent,
        num_cams=args.cams,
        image_size=tuple(args.size),
        seed=args.seed,
        init_mode=args.init_mode,
        init_count=args.init_count,
        noise_sigma=args.noise_sigma,
    )
    gt, cams, targets = generate_scene(spec)
    out = Path(args.out)
    save_scene_dir(out, gt, cams, targets)
    with open(out / "spec.json", "w") as f:
        json.dump(asdict(spec), f, indent=1)
    print(
        f"wrote {out / 'scene.json'} ({gt.count} gaussians) "
        f"and {len(cams)} target views ({spec.image_size[0]}x{spec.image_size[1]})"
    )
    return 0


def _scene_dir_hash(scene_dir: Path) -> str:
    h = hashlib.sha256()
    h.update((scene_dir / "scene.json").read_bytes())
    for ppm in sorted(scene_dir.glob("view_*.ppm")):
        h.update(ppm.read_bytes())
    return h.hexdigest()


def _build_train_config(args) -> TrainConfig:
    base: dict = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    gating_kw = dict(base.pop("gating", {}))
    gating_kw.setdefault("warmup_len", 150)
    flag_map = {
        "skipgs": ("skipgs_enabled", args.skipgs),
        "iters": ("total_iters", args.iters),
        "td": ("densify_end", args.td),
        "seed": ("seed", args.seed),
        "eval_every": ("eval_every", args.eval_every),
        "threads": ("threads", args.threads),
    }
    for _, (key, val) in flag_map.items():
        if val is not None:
            base[key] = val
    if args.warmup is not None:
        gating_kw["warmup_len"] = args.warmup
    if args.budget is not None:
        gating_kw["budget_enabled"] = args.budget
    nested = {}
    for key, cls in (("loss", None), ("densify", None), ("lrs", None)):
        if key in base:
            nested[key] = base.pop(key)
    cfg = TrainConfig(gating=GatingConfig(**gating_kw), **base)
    if "loss" in nested:
        from .losses import LossConfig

        cfg.loss = LossConfig(**nested["loss"])
    if "densify" in nested:
        from .densify import DensifyConfig

        cfg.densify = DensifyConfig(**nested["densify"])
        cfg.densify.t_d = cfg.densify_end
    if "lrs" in nested:
        from .optim import LearningRates

        cfg.lrs = LearningRates(**nested["lrs"])
    return cfg


def cmd_train(args) -> int:
    scene_dir = Path(args.scene)
    cfg = _build_train_config(args)
    gt, cams, targets = load_scene_dir(scene_dir)
    spec_path = scene_dir / "spec.json"
    if not spec_path.exists():
        raise FileNotFoundError(f"no spec.json in {scene_dir}; run gen-scene first")
    with open(spec_path) as f:
        spec = SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in json.load(f).items()})
    init = init_training_scene(spec, gt)

    arm = "skipgs-on" if cfg.skipgs_enabled else "skipgs-off"
    if cfg.skipgs_enabled and not cfg.gating.budget_enabled:
        arm += "_budget-off"
    out = Path(args.out) if args.out else scene_dir / f"run_{arm}_seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)

    result = train(init, cams, targets, cfg, scene_hash=_scene_dir_hash(scene_dir))
    write_train_log(result.report, out / "train_log.csv")
    write_report(result.report, out / "report.json")
    save_checkpoint(out / "checkpoint.json", result.scene, cams, result.adam, result.gate)

    eval_idx = cfg.eval_view if cfg.eval_view >= 0 else len(cams) + cfg.eval_view
    cam = cams[eval_idx]
    img = render(result.scene, cam).image
    write_ppm(out / f"eval_view_{cam.view_id:04d}.ppm", np.clip(img, 0.0, 1.0))

    agg = result.report.aggregates
    fm = next(iter(result.report.final_metrics.values()))
    print(
        f"run {out}: final PSNR {fm['psnr']:.2f} dB, SSIM {fm['ssim']:.4f}, "
        f"backward ratio post-densification {agg['backward_ratio_post']:.3f}, "
        f"T_post {agg['t_post_us'] / 1e6:.1f}s"
    )
    return 0


def _as_float(v):
    if isinstance(v, str):
        return float(v)
    return float(v)


_PLOT_TEMPLATE = '''#!/usr/bin/env python3
"""Render comparison plots for two training runs (emitted by skipgs compare)."""
import csv
import json

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

RUN_A = {run_a!r}
RUN_B = {run_b!r}
T_D = {t_d}


def load_evals(report_path):
    with open(report_path) as f:
        rep = json.load(f)
    ev = rep["evals"]
    return (
        [e["wall_us_cum"] / 1e6 for e in ev],
        [float(e["psnr"]) if e["psnr"] != "inf" else float("inf") for e in ev],
    )


def load_ratio(csv_path):
    ts, ratio, execd, total = [], [], 0, 0
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            t = int(row["t"])
            if t <= T_D:
                continue
            total += 1
            execd += int(row["executed"])
            ts.append(t)
            ratio.append(execd / total)
    return ts, ratio


fig, axes = plt.subplots(1, 2, figsize=(11, 4))
for name, run in (("A", RUN_A), ("B", RUN_B)):
    xs, ys = load_evals(run + "/report.json")
    axes[0].plot(xs, ys, marker="o", label=name + ": " + run)
    ts, ratio = load_ratio(run + "/train_log.csv")
    axes[1].plot(ts, ratio, label=name)
axes[0].set_xlabel("wall time (s)")
axes[0].set_ylabel("held-out PSNR (dB)")
axes[0].legend(fontsize=7)
axes[1].set_xlabel("iteration")
axes[1].set_ylabel("cumulative executed-backward ratio")
axes[1].legend(fontsize=7)
fig.tight_layout()
fig.savefig("compare.png", dpi=140)
print("wrote compare.png")
'''


def cmd_compare(args) -> int:
    with open(args.report_a) as f:
        rep_a = json.load(f)
    with open(args.report_b) as f:
        rep_b = json.load(f)

    warnings = []
    if rep_a.get("scene_hash") != rep_b.get("scene_hash"):
        warnings.append("scene hashes differ; runs trained on different data")
    if rep_a["config"].get("seed") != rep_b["config"].get("seed"):
        warnings.append("seeds differ; view sequences are not aligned")
    if rep_a["config"].get("total_iters") != rep_b["config"].get("total_iters"):
        warnings.append("iteration counts differ")

    def mean_metric(rep, key):
        vals = [_as_float(m[key]) for m in rep["final_metrics"].values()]
        return sum(vals) / len(vals)

    delta = {
        "psnr": mean_metric(rep_b, "psnr") - mean_metric(rep_a, "psnr"),
        "ssim": mean_metric(rep_b, "ssim") - mean_metric(rep_a, "ssim"),
        "t_post_s": (rep_b["aggregates"]["t_post_us"] - rep_a["aggregates"]["t_post_us"]) / 1e6,
        "backward_count_post": rep_b["aggregates"]["backward_count_post"]
        - rep_a["aggregates"]["backward_count_post"],
    }
    doc = {
        "report_a": str(args.report_a),
        "report_b": str(args.report_b),
        "delta_b_minus_a": delta,
        "incomparable": bool(warnings),
        "warnings": warnings,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.json", "w") as f:
        json.dump(doc, f, indent=1)
    script = _PLOT_TEMPLATE.format(
        run_a=str(Path(args.report_a).parent),
        run_b=str(Path(args.report_b).parent),
        t_d=rep_a["config"].get("densify_end", 0),
    )
    plot_path = out / "plot_compare.py"
    plot_path.write_text(script)
    print(f"wrote {out / 'compare.json'} and {plot_path}")
    if warnings:
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
