"""Differentiable CPU splatting renderer for anisotropic 3D Gaussians.

Forward: per-Gaussian projection to screen space (local affine
approximation of the pinhole mapping), depth-sorted front-to-back alpha
compositing with per-pixel transmittance. Backward: hand-derived adjoint
of the whole pipeline, including quaternion normalization, exp(log_scale)
and sigmoid(opacity_logit), validated against finite differences.

The per-pixel compositing loops are numba kernels; everything per-Gaussian
is vectorized numpy. Pixels sit at integer coordinates (0..W-1, 0..H-1).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from numba import njit
from scipy.special import expit

ALPHA_MIN = 1.0 / 255.0  # contributions below this are dropped
ALPHA_CLAMP = 0.99
T_MIN = 1e-4  # stop compositing a pixel once transmittance falls below this


class RenderError(ValueError):
    """Invalid scene, camera, or renderer input."""


@dataclass(frozen=True)
class RenderSettings:
    znear: float = 0.01
    dilation: float = 0.3  # added to both cov2d diagonal entries, in px^2
    alpha_min: float = ALPHA_MIN
    alpha_clamp: float = ALPHA_CLAMP
    t_min: float = T_MIN
    sigma_cutoff: float = 3.0  # contributions beyond this Mahalanobis radius drop
    dtype: type = np.float32
    threads: int = 1


@dataclass
class Gaussian3D:
    """One splat: center, orientation quaternion (w,x,y,z), per-axis
    log standard deviations, opacity logit, and RGB color."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray


@dataclass
class SceneModel:
    """Collection of Gaussians as parallel arrays, plus a background color."""

    mu: np.ndarray          # (N, 3)
    rot: np.ndarray         # (N, 4) quaternions, renormalized each forward
    log_scale: np.ndarray   # (N, 3)
    opacity_logit: np.ndarray  # (N,)
    color: np.ndarray       # (N, 3)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu))
        self.rot = np.atleast_2d(np.asarray(self.rot))
        self.log_scale = np.atleast_2d(np.asarray(self.log_scale))
        self.opacity_logit = np.atleast_1d(np.asarray(self.opacity_logit))
        self.color = np.atleast_2d(np.asarray(self.color))
        self.background = np.asarray(self.background)
        n = self.mu.shape[0]
        if (
            self.mu.shape != (n, 3)
            or self.rot.shape != (n, 4)
            or self.log_scale.shape != (n, 3)
            or self.opacity_logit.shape != (n,)
            or self.color.shape != (n, 3)
            or self.background.shape != (3,)
        ):
            raise RenderError("inconsistent scene array shapes")

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def astype(self, dtype) -> "SceneModel":
        return SceneModel(
            self.mu.astype(dtype),
            self.rot.astype(dtype),
            self.log_scale.astype(dtype),
            self.opacity_logit.astype(dtype),
            self.color.astype(dtype),
            self.background.astype(dtype),
        )

    def copy(self) -> "SceneModel":
        return self.astype(self.mu.dtype)

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.mu[i].copy(),
            self.rot[i].copy(),
            self.log_scale[i].copy(),
            float(self.opacity_logit[i]),
            self.color[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0)) -> "SceneModel":
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.stack([g.rot for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.asarray(background, dtype=np.float64),
        )


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics."""

    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    focal: tuple             # (fx, fy) pixels
    principal: tuple         # (cx, cy) pixels
    size: tuple              # (width, height) pixels
    view_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise RenderError("camera transform must be 3x3 rotation + 3-vector")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise RenderError(f"camera rotation not orthonormal (err {err:.2e})")
        fx, fy = self.focal
        if fx <= 0 or fy <= 0:
            raise RenderError(f"focal lengths must be positive, got {self.focal}")
        w, h = self.size
        if w < 4 or h < 4:
            raise RenderError(f"image size must be at least 4x4, got {self.size}")

    def to_dict(self) -> dict:
        return {
            "world_to_cam": {
                "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist(),
            },
            "focal": list(self.focal),
            "principal": list(self.principal),
            "size": list(self.size),
            "view_id": self.view_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.array(d["world_to_cam"]["rotation"], dtype=np.float64),
            translation=np.array(d["world_to_cam"]["translation"], dtype=np.float64),
            focal=tuple(d["focal"]),
            principal=tuple(d["principal"]),
            size=tuple(int(v) for v in d["size"]),
            view_id=int(d["view_id"]),
        )


@dataclass
class GradBuffer:
    """Gradients of a scalar loss wrt every SceneModel parameter, plus the
    per-Gaussian screen-space positional gradient magnitude used by
    densification."""

    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    pos_grad_norm2d: np.ndarray

    @classmethod
    def zeros(cls, n: int, dtype=np.float32) -> "GradBuffer":
        return cls(
            np.zeros((n, 3), dtype),
            np.zeros((n, 4), dtype),
            np.zeros((n, 3), dtype),
            np.zeros(n, dtype),
            np.zeros((n, 3), dtype),
            np.zeros(n, dtype),
        )

    def param_groups(self) -> dict:
        return {
            "mu": self.mu,
            "rot": self.rot,
            "log_scale": self.log_scale,
            "opacity_logit": self.opacity_logit,
            "color": self.color,
        }

    def per_gaussian_norms(self) -> np.ndarray:
        """L2 norm of each Gaussian's concatenated parameter gradient."""
        sq = (
            (self.mu ** 2).sum(axis=1)
            + (self.rot ** 2).sum(axis=1)
            + (self.log_scale ** 2).sum(axis=1)
            + self.opacity_logit ** 2
            + (self.color ** 2).sum(axis=1)
        )
        return np.sqrt(sq)


class Projection(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


@dataclass
class RenderOutput:
    image: np.ndarray          # (H, W, 3)
    mean2d: np.ndarray         # (N, 2)
    cov2d: np.ndarray          # (N, 2, 2) dilated screen-space covariance
    depth: np.ndarray          # (N,) camera-space z
    visible: np.ndarray        # (N,) bool after culling
    transmittance: np.ndarray  # (H, W) leftover T after compositing
    weight_sum: np.ndarray     # (H, W) sum of composited alpha * T
    ctx: Optional["_ForwardCtx"] = None


# ---------------------------------------------------------------------------
# quaternion / covariance math

def _normalize_quats(rot: np.ndarray):
    norms = np.sqrt((rot ** 2).sum(axis=1))
    if np.any(norms == 0):
        idx = int(np.nonzero(norms == 0)[0][0])
        raise RenderError(f"zero quaternion at gaussian {idx}")
    return rot / norms[:, None], norms


def _quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    r = np.empty((n, 3, 3), dtype=q.dtype)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_grad_to_quat(dR: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Pull a rotation-matrix gradient back to the unit quaternion."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    dq = np.empty_like(q)
    dq[:, 0] = 2 * (
        -z * dR[:, 0, 1] + y * dR[:, 0, 2] + z * dR[:, 1, 0]
        - x * dR[:, 1, 2] - y * dR[:, 2, 0] + x * dR[:, 2, 1]
    )
    dq[:, 1] = 2 * (
        y * dR[:, 0, 1] + z * dR[:, 0, 2] + y * dR[:, 1, 0]
        - 2 * x * dR[:, 1, 1] - w * dR[:, 1, 2] + z * dR[:, 2, 0]
        + w * dR[:, 2, 1] - 2 * x * dR[:, 2, 2]
    )
    dq[:, 2] = 2 * (
        -2 * y * dR[:, 0, 0] + x * dR[:, 0, 1] + w * dR[:, 0, 2]
        + x * dR[:, 1, 0] + z * dR[:, 1, 2] - w * dR[:, 2, 0]
        + z * dR[:, 2, 1] - 2 * y * dR[:, 2, 2]
    )
    dq[:, 3] = 2 * (
        -2 * z * dR[:, 0, 0] - w * dR[:, 0, 1] + x * dR[:, 0, 2]
        + w * dR[:, 1, 0] - 2 * z * dR[:, 1, 1] + y * dR[:, 1, 2]
        + x * dR[:, 2, 0] + y * dR[:, 2, 1]
    )
    return dq


def _build_cov3d(rot: np.ndarray, log_scale: np.ndarray):
    qn, qnorm = _normalize_quats(rot)
    rmats = _quats_to_rotmats(qn)
    scales = np.exp(log_scale)
    lmat = rmats * scales[:, None, :]  # R @ diag(s)
    sigma3 = np.einsum("nij,nkj->nik", lmat, lmat)
    return sigma3, qn, qnorm, rmats, scales, lmat


def covariance_3d(rot: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """R S S^T R^T for one Gaussian; symmetric PSD by construction."""
    sigma3 = _build_cov3d(
        np.asarray(rot, dtype=np.float64)[None, :],
        np.asarray(log_scale, dtype=np.float64)[None, :],
    )[0]
    return sigma3[0]


def _project_batch(mu, sigma3, cam: Camera, znear: float, dilation: float):
    dt = mu.dtype.type
    rc = cam.rotation.astype(dt)
    tc = cam.translation.astype(dt)
    fx, fy = (dt(cam.focal[0]), dt(cam.focal[1]))
    cx, cy = (dt(cam.principal[0]), dt(cam.principal[1]))

    t_cam = mu @ rc.T + tc
    tz = t_cam[:, 2]
    visible = tz > znear
    safe_z = np.where(visible, tz, dt(1.0))
    inv_z = 1.0 / safe_z
    tx, ty = t_cam[:, 0], t_cam[:, 1]

    mean2d = np.empty((mu.shape[0], 2), dtype=dt)
    mean2d[:, 0] = fx * tx * inv_z + cx
    mean2d[:, 1] = fy * ty * inv_z + cy

    j = np.zeros((mu.shape[0], 2, 3), dtype=dt)
    j[:, 0, 0] = fx * inv_z
    j[:, 0, 2] = -fx * tx * inv_z * inv_z
    j[:, 1, 1] = fy * inv_z
    j[:, 1, 2] = -fy * ty * inv_z * inv_z

    m = j @ rc  # (N, 2, 3)
    cov = np.einsum("nij,njk,nlk->nil", m, sigma3, m)
    a = cov[:, 0, 0] + dt(dilation)
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + dt(dilation)
    return {
        "t_cam": t_cam,
        "visible": visible,
        "mean2d": mean2d,
        "m": m,
        "cov_abc": np.stack([a, b, c], axis=1),
        "inv_z": inv_z,
        "fx": fx,
        "fy": fy,
        "rc": rc,
    }


def project(
    mu: np.ndarray,
    cov3d: np.ndarray,
    cam: Camera,
    znear: float = RenderSettings.znear,
    dilation: float = RenderSettings.dilation,
) -> Projection:
    """Screen-space mean, dilated 2x2 covariance, and depth of one Gaussian."""
    mu = np.asarray(mu, dtype=np.float64)[None, :]
    sigma3 = np.asarray(cov3d, dtype=np.float64)[None, :, :]
    p = _project_batch(mu, sigma3, cam, znear, dilation)
    a, b, c = p["cov_abc"][0]
    cov2d = np.array([[a, b], [b, c]])
    return Projection(
        mean2d=p["mean2d"][0],
        cov2d=cov2d,
        depth=float(p["t_cam"][0, 2]),
        visible=bool(p["visible"][0]),
    )


def effective_opacity(
    alpha: float,
    delta: np.ndarray,
    cov2d: np.ndarray,
    clamp: float = ALPHA_CLAMP,
) -> float:
    """Opacity attenuated by the 2D Mahalanobis falloff at a pixel offset.

    Callers drop results below ALPHA_MIN (1/255).
    """
    a, b, c = float(cov2d[0, 0]), float(cov2d[0, 1]), float(cov2d[1, 1])
    det = a * c - b * b
    if det <= 0:
        raise RenderError(f"singular 2D covariance (det {det:.3e})")
    dx, dy = float(delta[0]), float(delta[1])
    m2 = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return min(alpha * math.exp(-0.5 * m2), clamp)


def composite_pixel(
    contributions,
    background,
    alpha_min: float = ALPHA_MIN,
    t_min: float = T_MIN,
) -> np.ndarray:
    """Front-to-back alpha blending of (color, alpha_eff) pairs over a
    background; early-terminates when transmittance drops below t_min."""
    color = np.zeros(3, dtype=np.float64)
    t = 1.0
    for c, a_eff in contributions:
        if t < t_min:
            break
        if a_eff < alpha_min:
            continue
        color += (a_eff * t) * np.asarray(c, dtype=np.float64)
        t *= 1.0 - a_eff
    return color + t * np.asarray(background, dtype=np.float64)


# ---------------------------------------------------------------------------
# compositing kernels

@njit(cache=True, nogil=True)
def _forward_kernel(
    order, mx, my, ca, cb, cc, alpha, color,
    bx0, bx1, by0, by1, band_lo, band_hi,
    image, trans, wsum,
    alpha_min, alpha_clamp, t_min, m2_max, w_img,
    rec_pix, rec_alpha, rec_t, rec_g, rec_off,
):
    k = 0
    n = order.shape[0]
    for oi in range(n):
        g = order[oi]
        rec_off[oi] = k
        acon = ca[g]
        bcon = cb[g]
        ccon = cc[g]
        gmx = mx[g]
        gmy = my[g]
        al = alpha[g]
        cr = color[g, 0]
        cg = color[g, 1]
        cb2 = color[g, 2]
        ylo = by0[g] if by0[g] > band_lo else band_lo
        yhi = by1[g] if by1[g] < band_hi else band_hi
        for py in range(ylo, yhi + 1):
            dy = py - gmy
            for px in range(bx0[g], bx1[g] + 1):
                tp = trans[py, px]
                if tp < t_min:
                    continue
                dx = px - gmx
                m2 = acon * dx * dx + 2.0 * bcon * dx * dy + ccon * dy * dy
                if m2 > m2_max:
                    continue
                gv = math.exp(-0.5 * m2)
                a_eff = al * gv
                if a_eff > alpha_clamp:
                    a_eff = alpha_clamp
                if a_eff < alpha_min:
                    continue
                w = a_eff * tp
                image[py, px, 0] += w * cr
                image[py, px, 1] += w * cg
                image[py, px, 2] += w * cb2
                wsum[py, px] += w
                trans[py, px] = tp * (1.0 - a_eff)
                rec_pix[k] = py * w_img + px
                rec_alpha[k] = a_eff
                rec_t[k] = tp
                rec_g[k] = gv
                k += 1
    rec_off[n] = k
    return k


@njit(cache=True, nogil=True)
def _backward_kernel(
    order, mx, my, ca, cb, cc, alpha, color,
    rec_pix, rec_alpha, rec_t, rec_g, rec_off,
    dl_img, suffix, w_img, alpha_clamp,
    d_color, d_alpha, d_mean2d, d_conic,
):
    n = order.shape[0]
    for oi in range(n - 1, -1, -1):
        g = order[oi]
        acon = ca[g]
        bcon = cb[g]
        ccon = cc[g]
        gmx = mx[g]
        gmy = my[g]
        al = alpha[g]
        cr = color[g, 0]
        cg = color[g, 1]
        cb2 = color[g, 2]
        for k in range(rec_off[oi], rec_off[oi + 1]):
            p = rec_pix[k]
            py = p // w_img
            px = p - py * w_img
            a_eff = rec_alpha[k]
            tent = rec_t[k]
            gv = rec_g[k]
            d0 = dl_img[py, px, 0]
            d1 = dl_img[py, px, 1]
            d2 = dl_img[py, px, 2]
            w = a_eff * tent
            d_color[g, 0] += w * d0
            d_color[g, 1] += w * d1
            d_color[g, 2] += w * d2
            c_dot = cr * d0 + cg * d1 + cb2 * d2
            s_dot = (
                suffix[py, px, 0] * d0
                + suffix[py, px, 1] * d1
                + suffix[py, px, 2] * d2
            )
            d_aeff = tent * c_dot - s_dot / (1.0 - a_eff)
            suffix[py, px, 0] += w * cr
            suffix[py, px, 1] += w * cg
            suffix[py, px, 2] += w * cb2
            if al * gv <= alpha_clamp:  # clamped contributions pass no gradient
                d_alpha[g] += gv * d_aeff
                dm2 = -0.5 * gv * (al * d_aeff)
                dx = px - gmx
                dy = py - gmy
                d_mean2d[g, 0] -= dm2 * (2.0 * acon * dx + 2.0 * bcon * dy)
                d_mean2d[g, 1] -= dm2 * (2.0 * bcon * dx + 2.0 * ccon * dy)
                d_conic[g, 0] += dm2 * dx * dx
                d_conic[g, 1] += dm2 * 2.0 * dx * dy
                d_conic[g, 2] += dm2 * dy * dy


# ---------------------------------------------------------------------------
# render / render_backward

@dataclass
class _BandRecords:
    lo: int
    hi: int
    rec_pix: np.ndarray
    rec_alpha: np.ndarray
    rec_t: np.ndarray
    rec_g: np.ndarray
    rec_off: np.ndarray


@dataclass
class _ForwardCtx:
    order: np.ndarray
    bands: list
    alpha: np.ndarray
    conic_abc: np.ndarray
    cov_abc: np.ndarray
    mean2d: np.ndarray
    m: np.ndarray
    sigma3: np.ndarray
    t_cam: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    rmats: np.ndarray
    scales: np.ndarray
    lmat: np.ndarray
    inv_z: np.ndarray
    rc: np.ndarray
    fx: float
    fy: float
    settings: RenderSettings


def _validate_scene_finite(scene: SceneModel) -> None:
    for name, arr in (
        ("mu", scene.mu),
        ("rot", scene.rot),
        ("log_scale", scene.log_scale),
        ("opacity_logit", scene.opacity_logit),
        ("color", scene.color),
    ):
        finite = np.isfinite(arr)
        if not finite.all():
            rows = finite.reshape(arr.shape[0], -1).all(axis=1)
            idx = int(np.nonzero(~rows)[0][0])
            raise RenderError(f"non-finite {name} at gaussian {idx}")


def _band_bounds(h: int, threads: int):
    nb = max(1, min(int(threads), h))
    edges = np.linspace(0, h, nb + 1, dtype=np.int64)
    return [(int(edges[i]), int(edges[i + 1]) - 1) for i in range(nb)]


def render(scene: SceneModel, cam: Camera, settings: RenderSettings | None = None) -> RenderOutput:
    """Render the scene; deterministic for fixed inputs and settings."""
    settings = settings or RenderSettings()
    dt = np.dtype(settings.dtype).type
    _validate_scene_finite(scene)
    w, h = int(cam.size[0]), int(cam.size[1])
    n = scene.count
    bg = scene.background.astype(dt)

    image = np.zeros((h, w, 3), dtype=dt)
    trans = np.ones((h, w), dtype=dt)
    wsum = np.zeros((h, w), dtype=dt)

    if n == 0:
        image += bg
        return RenderOutput(
            image, np.zeros((0, 2), dt), np.zeros((0, 2, 2), dt), np.zeros(0, dt),
            np.zeros(0, bool), trans, wsum, None,
        )

    mu = scene.mu.astype(dt, copy=False)
    sigma3, qn, qnorm, rmats, scales, lmat = _build_cov3d(
        scene.rot.astype(dt, copy=False), scene.log_scale.astype(dt, copy=False)
    )
    proj = _project_batch(mu, sigma3, cam, settings.znear, settings.dilation)
    alpha = expit(scene.opacity_logit.astype(dt, copy=False))
    color = np.ascontiguousarray(scene.color.astype(dt, copy=False))

    a, b, c = proj["cov_abc"][:, 0], proj["cov_abc"][:, 1], proj["cov_abc"][:, 2]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    cut = dt(settings.sigma_cutoff)
    rx = cut * np.sqrt(a)
    ry = cut * np.sqrt(c)
    mx, my = proj["mean2d"][:, 0], proj["mean2d"][:, 1]
    bx0 = np.maximum(np.floor(mx - rx), 0).astype(np.int64)
    bx1 = np.minimum(np.ceil(mx + rx), w - 1).astype(np.int64)
    by0 = np.maximum(np.floor(my - ry), 0).astype(np.int64)
    by1 = np.minimum(np.ceil(my + ry), h - 1).astype(np.int64)

    visible = proj["visible"] & (bx0 <= bx1) & (by0 <= by1)
    depth = proj["t_cam"][:, 2].copy()

    drawn = np.nonzero(visible)[0]
    # stable sort keeps index order on depth ties
    order = drawn[np.argsort(depth[drawn], kind="stable")]

    mxc = np.ascontiguousarray(mx)
    myc = np.ascontiguousarray(my)
    ca = np.ascontiguousarray(conic[:, 0])
    cbn = np.ascontiguousarray(conic[:, 1])
    cc = np.ascontiguousarray(conic[:, 2])
    m2_max = float(settings.sigma_cutoff) ** 2

    bands = []
    band_bounds = _band_bounds(h, settings.threads)

    def run_band(bounds):
        lo, hi = bounds
        rows = np.minimum(by1[order], hi) - np.maximum(by0[order], lo) + 1
        cols = bx1[order] - bx0[order] + 1
        cap = int(np.maximum(rows, 0) @ np.maximum(cols, 0))
        rec_pix = np.empty(cap, dtype=np.int64)
        rec_alpha = np.empty(cap, dtype=dt)
        rec_t = np.empty(cap, dtype=dt)
        rec_g = np.empty(cap, dtype=dt)
        rec_off = np.empty(order.shape[0] + 1, dtype=np.int64)
        k = _forward_kernel(
            order, mxc, myc, ca, cbn, cc, alpha, color,
            bx0, bx1, by0, by1, lo, hi,
            image, trans, wsum,
            dt(settings.alpha_min), dt(settings.alpha_clamp), dt(settings.t_min),
            dt(m2_max), w,
            rec_pix, rec_alpha, rec_t, rec_g, rec_off,
        )
        return _BandRecords(lo, hi, rec_pix[:k], rec_alpha[:k], rec_t[:k], rec_g[:k], rec_off)

    if len(band_bounds) == 1:
        bands.append(run_band(band_bounds[0]))
    else:
        with ThreadPoolExecutor(max_workers=len(band_bounds)) as pool:
            bands = list(pool.map(run_band, band_bounds))

    image += bg * trans[:, :, None]

    cov2d = np.empty((n, 2, 2), dtype=dt)
    cov2d[:, 0, 0] = a
    cov2d[:, 0, 1] = b
    cov2d[:, 1, 0] = b
    cov2d[:, 1, 1] = c

    ctx = _ForwardCtx(
        order=order, bands=bands, alpha=alpha, conic_abc=conic,
        cov_abc=proj["cov_abc"], mean2d=proj["mean2d"], m=proj["m"],
        sigma3=sigma3, t_cam=proj["t_cam"], qn=qn, qnorm=qnorm, rmats=rmats,
        scales=scales, lmat=lmat, inv_z=proj["inv_z"], rc=proj["rc"],
        fx=float(proj["fx"]), fy=float(proj["fy"]), settings=settings,
    )
    return RenderOutput(image, proj["mean2d"], cov2d, depth, visible, trans, wsum, ctx)


def render_backward(
    scene: SceneModel,
    cam: Camera,
    output: RenderOutput,
    dL_dimage: np.ndarray,
    settings: RenderSettings | None = None,
) -> GradBuffer:
    """Analytic gradients of a scalar loss with image gradient dL_dimage."""
    if dL_dimage.shape != output.image.shape:
        raise RenderError(
            f"dL_dimage shape {dL_dimage.shape} != image shape {output.image.shape}"
        )
    n = scene.count
    ctx = output.ctx
    if n == 0:
        return GradBuffer.zeros(0)
    if ctx is None:
        raise RenderError("output carries no forward context; re-render first")
    settings = settings or ctx.settings
    dt = np.dtype(settings.dtype).type
    w = int(cam.size[0])

    dl_img = np.ascontiguousarray(dL_dimage.astype(dt, copy=False))
    # Suffix starts at the background term: bg * T_final per pixel.
    suffix = np.ascontiguousarray(
        scene.background.astype(dt) * output.transmittance[:, :, None]
    )
    color = np.ascontiguousarray(scene.color.astype(dt, copy=False))

    mxc = np.ascontiguousarray(ctx.mean2d[:, 0])
    myc = np.ascontiguousarray(ctx.mean2d[:, 1])
    ca = np.ascontiguousarray(ctx.conic_abc[:, 0])
    cbn = np.ascontiguousarray(ctx.conic_abc[:, 1])
    cc = np.ascontiguousarray(ctx.conic_abc[:, 2])

    def run_band(band: _BandRecords):
        d_color = np.zeros((n, 3), dtype=dt)
        d_alpha = np.zeros(n, dtype=dt)
        d_mean2d = np.zeros((n, 2), dtype=dt)
        d_conic = np.zeros((n, 3), dtype=dt)
        _backward_kernel(
            ctx.order, mxc, myc, ca, cbn, cc, ctx.alpha, color,
            band.rec_pix, band.rec_alpha, band.rec_t, band.rec_g, band.rec_off,
            dl_img, suffix, w, dt(settings.alpha_clamp),
            d_color, d_alpha, d_mean2d, d_conic,
        )
        return d_color, d_alpha, d_mean2d, d_conic

    if len(ctx.bands) == 1:
        parts = [run_band(ctx.bands[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(ctx.bands)) as pool:
            parts = list(pool.map(run_band, ctx.bands))

    d_color = np.zeros((n, 3), dtype=dt)
    d_alpha = np.zeros(n, dtype=dt)
    d_mean2d = np.zeros((n, 2), dtype=dt)
    d_conic = np.zeros((n, 3), dtype=dt)
    for pc, pa, pm, pk in parts:  # fixed band order keeps reduction deterministic
        d_color += pc
        d_alpha += pa
        d_mean2d += pm
        d_conic += pk

    # conic -> cov2d coefficients (a, b, c), closed-form inverse adjoint
    a = ctx.cov_abc[:, 0]
    b = ctx.cov_abc[:, 1]
    c = ctx.cov_abc[:, 2]
    det = a * c - b * b
    inv_det2 = 1.0 / (det * det)
    dca, dcb, dcc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    da = (dca * (-c * c) + dcb * (b * c) + dcc * (-b * b)) * inv_det2
    db = (dca * (2 * b * c) + dcb * (-det - 2 * b * b) + dcc * (2 * a * b)) * inv_det2
    dc = (dca * (-b * b) + dcb * (a * b) + dcc * (-a * a)) * inv_det2

    # cov2d = M Sigma3 M^T + dilation*I; forward read entries (0,0), (0,1), (1,1)
    dy_full = np.zeros((n, 2, 2), dtype=dt)
    dy_full[:, 0, 0] = da
    dy_full[:, 0, 1] = db
    dy_full[:, 1, 1] = dc
    dy_sym = dy_full + np.transpose(dy_full, (0, 2, 1))
    dm = np.einsum("nij,njk,nkl->nil", dy_sym, ctx.m, ctx.sigma3)
    d_sigma3 = np.einsum("nji,njk,nkl->nil", ctx.m, dy_full, ctx.m)

    # M = J @ Rc
    dj = np.einsum("nij,kj->nik", dm, ctx.rc)

    # mean2d and J both depend on the camera-space point
    fx, fy = dt(ctx.fx), dt(ctx.fy)
    inv_z = ctx.inv_z
    inv_z2 = inv_z * inv_z
    tx, ty = ctx.t_cam[:, 0], ctx.t_cam[:, 1]
    dmx, dmy = d_mean2d[:, 0], d_mean2d[:, 1]
    dtx = dmx * fx * inv_z + dj[:, 0, 2] * (-fx * inv_z2)
    dty = dmy * fy * inv_z + dj[:, 1, 2] * (-fy * inv_z2)
    dtz = (
        dmx * (-fx * tx * inv_z2)
        + dmy * (-fy * ty * inv_z2)
        + dj[:, 0, 0] * (-fx * inv_z2)
        + dj[:, 1, 1] * (-fy * inv_z2)
        + dj[:, 0, 2] * (2 * fx * tx * inv_z2 * inv_z)
        + dj[:, 1, 2] * (2 * fy * ty * inv_z2 * inv_z)
    )
    d_tcam = np.stack([dtx, dty, dtz], axis=1)
    d_mu = d_tcam @ ctx.rc

    # Sigma3 = L L^T with L = R diag(s)
    dl_mat = np.einsum("nij,njk->nik", d_sigma3 + np.transpose(d_sigma3, (0, 2, 1)), ctx.lmat)
    d_log_scale = np.einsum("nij,nij->nj", dl_mat, ctx.rmats) * ctx.scales
    d_rmat = dl_mat * ctx.scales[:, None, :]
    dqn = _rotmat_grad_to_quat(d_rmat, ctx.qn)
    # through quaternion normalization
    proj_coeff = np.einsum("ni,ni->n", ctx.qn, dqn)
    d_rot = (dqn - ctx.qn * proj_coeff[:, None]) / ctx.qnorm[:, None]

    alpha = ctx.alpha
    d_logit = d_alpha * alpha * (1.0 - alpha)

    grads = GradBuffer(
        mu=d_mu.astype(dt),
        rot=d_rot.astype(dt),
        log_scale=d_log_scale.astype(dt),
        opacity_logit=d_logit.astype(dt),
        color=d_color,
        pos_grad_norm2d=np.sqrt((d_mean2d ** 2).sum(axis=1)).astype(dt),
    )
    return grads
