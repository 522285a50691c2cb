"""Adam with per-parameter-group learning rates for the splat trainer.

The optimizer is only invoked on iterations that actually execute a
backward pass; skipped iterations leave the moment buffers and the step
counter untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .renderer import GradBuffer, SceneModel

GROUPS = ("mu", "rot", "log_scale", "opacity_logit", "color")


class OptimError(ValueError):
    pass


@dataclass
class LearningRates:
    """Per-group step sizes. The position rate decays exponentially from
    ``position`` to ``position_final`` over the run; the others are flat."""

    position: float = 1.6e-4
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3

    def position_at(self, t: int, total_iters: int) -> float:
        frac = min(max(t / max(total_iters, 1), 0.0), 1.0)
        return self.position * (self.position_final / self.position) ** frac

    def group_lrs(self, position_lr: float) -> dict:
        return {
            "mu": position_lr,
            "rot": self.rotation,
            "log_scale": self.scale,
            "opacity_logit": self.opacity,
            "color": self.color,
        }


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15

    @classmethod
    def init(cls, scene: SceneModel) -> "AdamState":
        dtype = scene.mu.dtype
        m = {g: np.zeros_like(getattr(scene, g), dtype=dtype) for g in GROUPS}
        v = {g: np.zeros_like(getattr(scene, g), dtype=dtype) for g in GROUPS}
        return cls(m=m, v=v)

    def to_dict(self) -> dict:
        return {
            "m": {g: self.m[g].tolist() for g in GROUPS},
            "v": {g: self.v[g].tolist() for g in GROUPS},
            "step": self.step,
            "betas": list(self.betas),
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict, dtype=np.float32) -> "AdamState":
        return cls(
            m={g: np.asarray(d["m"][g], dtype=dtype) for g in GROUPS},
            v={g: np.asarray(d["v"][g], dtype=dtype) for g in GROUPS},
            step=int(d["step"]),
            betas=tuple(d["betas"]),
            eps=float(d["eps"]),
        )


def adam_step(
    state: AdamState,
    scene: SceneModel,
    grads: GradBuffer,
    lrs: LearningRates,
    position_lr: float | None = None,
) -> np.ndarray:
    """One bias-corrected Adam update, applied in place per group.

    Returns the per-Gaussian L2 norm of the concatenated update vector,
    for profiling.
    """
    ggrads = grads.param_groups()
    for g in GROUPS:
        bad = ~np.isfinite(ggrads[g])
        if bad.any():
            idx = int(np.nonzero(bad.reshape(bad.shape[0], -1).any(axis=1))[0][0])
            raise OptimError(f"non-finite gradient in group '{g}' at index {idx}")

    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    group_lrs = lrs.group_lrs(lrs.position if position_lr is None else position_lr)

    update_sq = np.zeros(scene.count, dtype=np.float64)
    for g in GROUPS:
        grad = ggrads[g]
        m = state.m[g]
        v = state.v[g]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        delta = (group_lrs[g] / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        param = getattr(scene, g)
        param -= delta
        if delta.ndim == 1:
            update_sq += delta.astype(np.float64) ** 2
        else:
            update_sq += (delta.astype(np.float64) ** 2).sum(axis=1)
    return np.sqrt(update_sq)


def reshape_after_densify(state: AdamState, index_map: np.ndarray) -> None:
    """Rebuild moment buffers after clone/split/prune.

    ``index_map`` maps each new row to its old index, or -1 for rows that
    were just created (clones and split children), which start with zeroed
    moments. Surviving rows keep theirs.
    """
    index_map = np.asarray(index_map, dtype=np.int64)
    old_n = state.m["mu"].shape[0]
    if index_map.size and index_map.max() >= old_n:
        raise OptimError(
            f"index_map references row {int(index_map.max())} "
            f"but optimizer has {old_n}"
        )
    fresh = index_map < 0
    src = np.where(fresh, 0, index_map)
    for g in GROUPS:
        for buf_name in ("m", "v"):
            buf = getattr(state, buf_name)
            new = buf[g][src].copy()
            new[fresh] = 0
            buf[g] = new
