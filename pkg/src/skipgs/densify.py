"""Adaptive density control: clone under-reconstructed Gaussians, split
over-reconstructed ones, prune near-transparent ones.

Runs only during the densification phase (t <= t_d) at a fixed interval;
afterwards the Gaussian set is frozen, which is the structure the backward
gate relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .renderer import GradBuffer, SceneModel


class DensifyError(ValueError):
    pass


@dataclass
class DensifyConfig:
    interval: int = 100
    grad_threshold: float = 2e-4
    size_threshold: float = 0.01  # fraction of scene extent separating clone/split
    split_factor: float = 1.6
    opacity_prune_eps: float = 0.005
    t_d: int = 1500

    def __post_init__(self):
        if self.interval < 1:
            raise DensifyError(f"interval must be >= 1, got {self.interval}")
        for name in ("grad_threshold", "size_threshold", "split_factor", "opacity_prune_eps"):
            if getattr(self, name) <= 0:
                raise DensifyError(f"{name} must be > 0")


class GradStats:
    """Running mean of per-Gaussian positional gradient norms since the
    last densify event."""

    def __init__(self, count: int):
        self.sum = np.zeros(count, dtype=np.float64)
        self.n = 0

    def accumulate(self, buffer: GradBuffer) -> None:
        self.sum += buffer.pos_grad_norm2d
        self.n += 1

    def mean(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(self.sum)
        return self.sum / self.n

    def reset(self, count: int) -> None:
        self.sum = np.zeros(count, dtype=np.float64)
        self.n = 0


def densify_and_prune(
    scene: SceneModel,
    stats: GradStats,
    cfg: DensifyConfig,
    extent: float,
    t: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Apply one density-control event in place; returns the index map for
    the optimizer reshape (-1 marks freshly created rows).

    New-row order: kept originals first (original order), then clones in
    source order, then split children (two per parent, in parent order).
    """
    if t > cfg.t_d:
        raise DensifyError(f"densify called at t={t} after t_d={cfg.t_d}")
    if t % cfg.interval != 0:
        raise DensifyError(f"densify called at t={t}, not a multiple of {cfg.interval}")

    mean_grad = stats.mean()
    alpha = expit(scene.opacity_logit.astype(np.float64))
    scales = np.exp(scene.log_scale.astype(np.float64))
    max_scale = scales.max(axis=1)

    hot = mean_grad > cfg.grad_threshold
    big = max_scale > cfg.size_threshold * extent
    transparent = alpha < cfg.opacity_prune_eps
    clone = hot & ~big & ~transparent
    split = hot & big & ~transparent
    keep = ~transparent & ~split

    if not keep.any() and not clone.any():
        raise DensifyError("density control would prune the whole scene")

    keep_idx = np.nonzero(keep)[0]
    clone_idx = np.nonzero(clone)[0]
    split_idx = np.nonzero(split)[0]

    parts_map = [keep_idx, np.full(clone_idx.size, -1, dtype=np.int64)]
    mu_parts = [scene.mu[keep_idx], scene.mu[clone_idx]]
    rot_parts = [scene.rot[keep_idx], scene.rot[clone_idx]]
    ls_parts = [scene.log_scale[keep_idx], scene.log_scale[clone_idx]]
    op_parts = [scene.opacity_logit[keep_idx], scene.opacity_logit[clone_idx]]
    col_parts = [scene.color[keep_idx], scene.color[clone_idx]]

    if split_idx.size:
        dtype = scene.mu.dtype
        from .renderer import _build_cov3d  # parent orientation for child sampling

        _, _, _, rmats, s_par, _ = _build_cov3d(
            scene.rot[split_idx].astype(np.float64),
            scene.log_scale[split_idx].astype(np.float64),
        )
        # two children per parent, means drawn from the parent's own density
        z = rng.standard_normal((split_idx.size, 2, 3))
        offsets = np.einsum("nij,nkj->nki", rmats, z * s_par[:, None, :])
        child_mu = (scene.mu[split_idx][:, None, :] + offsets.astype(dtype)).reshape(-1, 3)
        child_ls = np.repeat(
            scene.log_scale[split_idx] - dtype.type(math.log(cfg.split_factor)), 2, axis=0
        )
        parts_map.append(np.full(child_mu.shape[0], -1, dtype=np.int64))
        mu_parts.append(child_mu)
        rot_parts.append(np.repeat(scene.rot[split_idx], 2, axis=0))
        ls_parts.append(child_ls)
        op_parts.append(np.repeat(scene.opacity_logit[split_idx], 2, axis=0))
        col_parts.append(np.repeat(scene.color[split_idx], 2, axis=0))

    scene.mu = np.concatenate(mu_parts)
    scene.rot = np.concatenate(rot_parts)
    scene.log_scale = np.concatenate(ls_parts)
    scene.opacity_logit = np.concatenate(op_parts)
    scene.color = np.concatenate(col_parts)

    index_map = np.concatenate(parts_map)
    stats.reset(scene.count)
    return index_map
