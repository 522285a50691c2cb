"""Two-phase training loop: vanilla densification until densify_end, then
gated refinement where the backward pass runs only when the gate says so.

Every iteration is instrumented (per-stage wall clock, gate decision,
gradient/update norms, Gaussian count) and the full log can be written as
CSV alongside a JSON report of aggregates and held-out metrics.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import gating
from .densify import DensifyConfig, GradStats, densify_and_prune
from .gating import GateDecision, GatingConfig, GatingState
from .losses import LossConfig, combined_loss, l1_loss, psnr, ssim
from .optim import AdamState, LearningRates, adam_step, reshape_after_densify
from .renderer import (
    GradBuffer,
    RenderSettings,
    SceneModel,
    render,
    render_backward,
)
from .scene import scene_from_dict, scene_to_dict

CSV_HEADER = (
    "t,phase,view_id,loss,score,proposed,forced_warmup,forced_budget,executed,"
    "rho_cum,rho_min,t_forward_us,t_loss_us,t_backward_us,t_optim_us,"
    "grad_norm,update_norm,gaussian_count"
)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 3000
    densify_end: int = 1500
    gating: GatingConfig = field(default_factory=lambda: GatingConfig(warmup_len=150))
    skipgs_enabled: bool = True
    seed: int = 0
    eval_every: int = 200
    loss: LossConfig = field(default_factory=LossConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    lrs: LearningRates = field(default_factory=LearningRates)
    threads: int = 1
    eval_view: int = -1  # index into the camera list; negative counts from the end
    gate_loss: str = "combined"  # which loss feeds the gate: "combined" or "l1"

    def __post_init__(self):
        if self.densify_end >= self.total_iters:
            raise TrainError(
                f"densify_end {self.densify_end} must be < total_iters {self.total_iters}"
            )
        if self.gating.warmup_len >= self.total_iters - self.densify_end:
            raise TrainError(
                f"warmup_len {self.gating.warmup_len} must be < post-densification "
                f"length {self.total_iters - self.densify_end}"
            )
        if self.eval_every < 1:
            raise TrainError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.gate_loss not in ("combined", "l1"):
            raise TrainError(f"gate_loss must be 'combined' or 'l1', got {self.gate_loss!r}")
        self.densify.t_d = self.densify_end


@dataclass
class IterationRecord:
    t: int
    phase: str  # densify | warmup | gated
    view_id: int
    loss: float
    score: Optional[float]
    proposed: Optional[bool]
    forced_warmup: Optional[bool]
    forced_budget: Optional[bool]
    executed: bool
    rho_cum: Optional[float]
    rho_min: Optional[float]
    t_forward_us: int
    t_loss_us: int
    t_backward_us: int
    t_optim_us: int
    grad_norm: float
    update_norm: float
    gaussian_count: int


@dataclass
class TrainReport:
    records: list
    evals: list
    final_metrics: dict
    aggregates: dict
    config: dict
    scene_hash: Optional[str]
    iter_wall_us: list
    profiling: dict


class TrainResult(NamedTuple):
    report: TrainReport
    scene: SceneModel
    adam: AdamState
    gate: Optional[GatingState]


def sample_view(rng: np.random.Generator, num_views: int, epoch_state: dict) -> int:
    """Draw views as shuffled epochs without replacement; deterministic
    under the generator's seed."""
    if num_views < 1:
        raise TrainError("need at least one training view")
    queue = epoch_state.get("queue")
    if not queue:
        queue = list(rng.permutation(num_views))
        epoch_state["queue"] = queue
    return int(queue.pop())


def profile_norms(grads: GradBuffer, update_norms: np.ndarray):
    """Mean over Gaussians of the per-Gaussian gradient and update norms."""
    return float(grads.per_gaussian_norms().mean()), float(update_norms.mean())


def _scene_extent(cams) -> float:
    centers = np.stack(
        [-(cam.rotation.T @ cam.translation) for cam in cams]
    )
    centroid = centers.mean(axis=0)
    return float(np.linalg.norm(centers - centroid, axis=1).max())


def _eval_metrics(scene, cam, target, settings):
    out = render(scene, cam, settings)
    pred = np.clip(out.image.astype(np.float64), 0.0, 1.0)
    targ = np.clip(np.asarray(target, dtype=np.float64), 0.0, 1.0)
    return psnr(pred, targ), float(ssim(pred, targ).value)


def train(
    scene0: SceneModel,
    cams,
    targets,
    cfg: TrainConfig,
    scene_hash: Optional[str] = None,
    iteration_hook=None,
) -> TrainResult:
    """Run the full two-phase loop and return the instrumented report plus
    the final model and optimizer/gate state."""
    if len(cams) != len(targets):
        raise TrainError(f"{len(cams)} cameras but {len(targets)} targets")
    if len(cams) < 2:
        raise TrainError("need at least 2 views (1 train + 1 eval)")
    eval_idx = cfg.eval_view if cfg.eval_view >= 0 else len(cams) + cfg.eval_view
    if not 0 <= eval_idx < len(cams):
        raise TrainError(f"eval_view {cfg.eval_view} out of range for {len(cams)} cameras")
    train_idx = [i for i in range(len(cams)) if i != eval_idx]

    settings = RenderSettings(threads=cfg.threads)
    dt = np.dtype(settings.dtype).type
    scene = scene0.astype(dt)
    targets = [np.asarray(tg, dtype=dt) for tg in targets]
    adam = AdamState.init(scene)
    stats = GradStats(scene.count)
    extent = _scene_extent(cams)

    ss = np.random.SeedSequence(cfg.seed)
    rng_views, rng_densify = [np.random.default_rng(s) for s in ss.spawn(2)]
    epoch_state: dict = {}

    gate_cfg = cfg.gating
    gate: Optional[GatingState] = None

    records = []
    iter_wall = []
    evals = []
    t_d = cfg.densify_end
    warm_end = t_d + gate_cfg.warmup_len
    run_t0 = time.perf_counter_ns()

    for t in range(1, cfg.total_iters + 1):
        it0 = time.perf_counter_ns()
        vi = train_idx[sample_view(rng_views, len(train_idx), epoch_state)]
        cam, target = cams[vi], targets[vi]

        s0 = time.perf_counter_ns()
        out = render(scene, cam, settings)
        s1 = time.perf_counter_ns()
        loss_res = combined_loss(out.image, target, cfg.loss)
        s2 = time.perf_counter_ns()
        loss_val = loss_res.value
        if not math.isfinite(loss_val):
            raise TrainError(f"non-finite loss at iteration {t}")

        decision: Optional[GateDecision] = None
        if t <= t_d:
            phase = "densify"
            executed = True
        else:
            phase = "warmup" if t <= warm_end else "gated"
            if cfg.skipgs_enabled:
                if gate is None:  # fresh state at the start of the gated phase
                    gate = GatingState()
                gate_input = loss_val
                if cfg.gate_loss == "l1":
                    gate_input = l1_loss(out.image, target).value
                decision = gating.step(gate, gate_cfg, cam.view_id, gate_input)
                executed = decision.execute_backward
            else:
                executed = True

        grad_norm = 0.0
        update_norm = 0.0
        bwd_us = 0
        opt_us = 0
        if executed:
            s3 = time.perf_counter_ns()
            grads = render_backward(scene, cam, out, loss_res.grad, settings)
            s4 = time.perf_counter_ns()
            unorms = adam_step(
                adam, scene, grads, cfg.lrs,
                cfg.lrs.position_at(t, cfg.total_iters),
            )
            s5 = time.perf_counter_ns()
            bwd_us = (s4 - s3) // 1000
            opt_us = (s5 - s4) // 1000
            grad_norm, update_norm = profile_norms(grads, unorms)
            if t <= t_d:
                stats.accumulate(grads)

        if t <= t_d and t % cfg.densify.interval == 0:
            index_map = densify_and_prune(scene, stats, cfg.densify, extent, t, rng_densify)
            reshape_after_densify(adam, index_map)

        it1 = time.perf_counter_ns()
        rec = IterationRecord(
            t=t,
            phase=phase,
            view_id=cam.view_id,
            loss=float(loss_val),
            score=None if decision is None else decision.score,
            proposed=None if decision is None else decision.proposed,
            forced_warmup=None if decision is None else decision.forced_warmup,
            forced_budget=None if decision is None else decision.forced_budget,
            executed=executed,
            rho_cum=None if decision is None else decision.rho_cum_before,
            rho_min=None if gate is None else gate.rho_min,
            t_forward_us=(s1 - s0) // 1000,
            t_loss_us=(s2 - s1) // 1000,
            t_backward_us=bwd_us,
            t_optim_us=opt_us,
            grad_norm=grad_norm,
            update_norm=update_norm,
            gaussian_count=scene.count,
        )
        records.append(rec)
        iter_wall.append((it1 - it0) // 1000)

        if t % cfg.eval_every == 0 or t == cfg.total_iters:
            p, s = _eval_metrics(scene, cams[eval_idx], targets[eval_idx], settings)
            evals.append(
                {
                    "t": t,
                    "view_id": cams[eval_idx].view_id,
                    "psnr": p,
                    "ssim": s,
                    "wall_us_cum": (time.perf_counter_ns() - run_t0) // 1000,
                }
            )

        if iteration_hook is not None:
            iteration_hook(t, scene, adam, gate, decision, executed)

    p, s = _eval_metrics(scene, cams[eval_idx], targets[eval_idx], settings)
    final_metrics = {str(cams[eval_idx].view_id): {"psnr": p, "ssim": s}}

    report = TrainReport(
        records=records,
        evals=evals,
        final_metrics=final_metrics,
        aggregates=_aggregates(records, iter_wall, t_d, gate),
        config=asdict(cfg),
        scene_hash=scene_hash,
        iter_wall_us=iter_wall,
        profiling=_profiling_series(records, t_d),
    )
    return TrainResult(report, scene, adam, gate)


def _aggregates(records, iter_wall, t_d, gate) -> dict:
    post = [r for r in records if r.t > t_d]
    executed_post = sum(1 for r in post if r.executed)
    skipped_post = len(post) - executed_post
    wall = np.asarray(iter_wall, dtype=np.int64)
    t_idx = np.asarray([r.t for r in records])
    t_post_us = int(wall[t_idx > t_d].sum())
    t_densify_us = int(wall[t_idx <= t_d].sum())
    exec_cost = [r.t_backward_us + r.t_optim_us for r in post if r.executed]
    mean_exec_cost = float(np.mean(exec_cost)) if exec_cost else 0.0
    comp = np.asarray(
        [r.t_forward_us + r.t_loss_us + r.t_backward_us + r.t_optim_us for r in records],
        dtype=np.int64,
    )
    whole_mean = float(wall.mean()) if len(wall) else 0.0
    comp_mean = float(comp.mean()) if len(comp) else 0.0
    return {
        "backward_ratio_post": executed_post / len(post) if post else 0.0,
        "backward_count_post": executed_post,
        "skip_count_post": skipped_post,
        "t_total_us": int(wall.sum()),
        "t_densify_phase_us": t_densify_us,
        "t_post_us": t_post_us,
        "t_post_full_estimate_us": int(t_post_us + skipped_post * mean_exec_cost),
        "timing_whole_mean_us": whole_mean,
        "timing_component_mean_us": comp_mean,
        "timing_consistency_ratio": abs(comp_mean - whole_mean) / whole_mean
        if whole_mean > 0
        else 0.0,
        "rho_min": None if gate is None else gate.rho_min,
        "gaussian_count_final": records[-1].gaussian_count if records else 0,
    }


def _profiling_series(records, t_d) -> dict:
    base = next((r for r in records if r.t == t_d), None)
    if base is None or base.grad_norm == 0 or base.update_norm == 0:
        return {"normalizer_t": t_d, "t": [], "grad_norm": [], "update_norm": []}
    return {
        "normalizer_t": t_d,
        "t": [r.t for r in records],
        "grad_norm": [r.grad_norm / base.grad_norm for r in records],
        "update_norm": [r.update_norm / base.update_norm for r in records],
    }


# ---------------------------------------------------------------------------
# report / log / checkpoint files

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_train_log(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as f:
        f.write(CSV_HEADER + "\n")
        w = csv.writer(f, lineterminator="\n")
        for r in report.records:
            w.writerow(
                [
                    _fmt(v)
                    for v in (
                        r.t, r.phase, r.view_id, r.loss, r.score, r.proposed,
                        r.forced_warmup, r.forced_budget, r.executed, r.rho_cum,
                        r.rho_min, r.t_forward_us, r.t_loss_us, r.t_backward_us,
                        r.t_optim_us, r.grad_norm, r.update_norm, r.gaussian_count,
                    )
                ]
            )


def _json_safe(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
        return obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    if isinstance(obj, type):
        return obj.__name__
    return obj


def report_to_dict(report: TrainReport) -> dict:
    return _json_safe(
        {
            "aggregates": report.aggregates,
            "final_metrics": report.final_metrics,
            "evals": report.evals,
            "config": report.config,
            "scene_hash": report.scene_hash,
            "profiling": report.profiling,
        }
    )


def write_report(report: TrainReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report_to_dict(report), f, indent=1)


def save_checkpoint(path, scene: SceneModel, cams, adam: AdamState, gate) -> None:
    doc = {
        "scene": scene_to_dict(scene, cams),
        "adam": adam.to_dict(),
        "gate": None if gate is None else gate.to_dict(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path, dtype=np.float32):
    with open(path) as f:
        doc = json.load(f)
    scene, cams = scene_from_dict(doc["scene"], dtype=dtype)
    adam = AdamState.from_dict(doc["adam"], dtype=dtype)
    gate = None if doc["gate"] is None else GatingState.from_dict(doc["gate"])
    return scene, cams, adam, gate
