"""Synthetic ground-truth scenes, ring camera rigs, training initialization,
and file I/O (binary PPM images, JSON scene documents).

Targets are rendered from the ground-truth Gaussians themselves, so the
optimum of the training problem is exactly representable and scheduler
effects are not confounded by model capacity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logit

from .renderer import Camera, RenderSettings, SceneModel, render


class SceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    num_gt_gaussians: int = 64
    extent: float = 1.0
    num_cams: int = 13
    image_size: tuple = (64, 64)
    cam_radius: float = 2.8  # in units of extent
    cam_elevation: float = 0.35  # radians above the equator
    seed: int = 0
    init_mode: str = "perturbed_gt"
    init_count: int = 0  # 0 = match num_gt_gaussians
    noise_sigma: float = 0.05  # world units, for perturbed_gt
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.num_cams < 3:
            raise SceneError(f"need at least 3 cameras (2 train + 1 eval), got {self.num_cams}")
        if self.num_gt_gaussians < 1 or self.extent <= 0:
            raise SceneError("scene must have >= 1 gaussian and positive extent")
        if min(self.image_size) < 4:
            raise SceneError(f"image size too small: {self.image_size}")
        if self.init_mode not in ("perturbed_gt", "random_volume"):
            raise SceneError(f"unknown init_mode {self.init_mode!r}")


def _look_at_camera(position, target, w, h, view_id) -> Camera:
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera x, y, z in world coords
    trans = -rot @ np.asarray(position, dtype=np.float64)
    focal = 1.2 * w
    return Camera(
        rotation=rot,
        translation=trans,
        focal=(focal, focal),
        principal=((w - 1) / 2.0, (h - 1) / 2.0),
        size=(w, h),
        view_id=view_id,
    )


def ring_cameras(spec: SceneSpec) -> list:
    """Cameras evenly spaced on a ring, all looking at the origin."""
    w, h = spec.image_size
    radius = spec.cam_radius * spec.extent
    z = radius * math.tan(spec.cam_elevation)
    cams = []
    for k in range(spec.num_cams):
        theta = 2.0 * math.pi * k / spec.num_cams
        pos = (radius * math.cos(theta), radius * math.sin(theta), z)
        cams.append(_look_at_camera(pos, (0.0, 0.0, 0.0), w, h, view_id=k))
    return cams


def _random_unit_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def generate_scene(spec: SceneSpec, settings: RenderSettings | None = None):
    """Sample a ground-truth scene, build the camera ring, render targets.

    Returns (gt_scene, cams, targets); targets are float images produced by
    this package's own renderer, hence exactly representable.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_gt_gaussians
    # positions uniform in the extent ball
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = spec.extent * rng.random(n) ** (1.0 / 3.0)
    mu = d * r[:, None]
    rot = _random_unit_quats(rng, n)
    log_scale = rng.uniform(
        math.log(0.04 * spec.extent), math.log(0.18 * spec.extent), size=(n, 3)
    )
    opacity = rng.uniform(0.5, 0.95, size=n)
    color = rng.uniform(0.05, 0.95, size=(n, 3))
    gt = SceneModel(
        mu=mu.astype(np.float32),
        rot=rot.astype(np.float32),
        log_scale=log_scale.astype(np.float32),
        opacity_logit=logit(opacity).astype(np.float32),
        color=color.astype(np.float32),
        background=np.asarray(spec.background, dtype=np.float32),
    )
    cams = ring_cameras(spec)
    settings = settings or RenderSettings()
    targets = [render(gt, cam, settings).image.copy() for cam in cams]
    return gt, cams, targets


def init_training_scene(spec: SceneSpec, gt: SceneModel) -> SceneModel:
    """Build the initial model: perturbed GT means or a uniform volume,
    with scales, opacities and colors reset to neutral values."""
    rng = np.random.default_rng(spec.seed + 1)
    count = spec.init_count if spec.init_count > 0 else spec.num_gt_gaussians
    if spec.init_mode == "perturbed_gt":
        if count > gt.count:
            raise SceneError(
                f"init_count {count} exceeds available GT gaussians {gt.count}"
            )
        mu = gt.mu[:count].astype(np.float64) + spec.noise_sigma * rng.standard_normal(
            (count, 3)
        )
    else:
        d = rng.standard_normal((count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = spec.extent * rng.random(count) ** (1.0 / 3.0)
        mu = d * r[:, None]
    rot = np.zeros((count, 4))
    rot[:, 0] = 1.0
    log_scale = np.full((count, 3), math.log(0.09 * spec.extent))
    opacity_logit = np.full(count, float(logit(0.1)))
    color = np.full((count, 3), 0.5)
    return SceneModel(
        mu=mu.astype(np.float32),
        rot=rot.astype(np.float32),
        log_scale=log_scale.astype(np.float32),
        opacity_logit=opacity_logit.astype(np.float32),
        color=color.astype(np.float32),
        background=gt.background.astype(np.float32),
    )


# ---------------------------------------------------------------------------
# PPM image I/O (binary P6, maxval 255)

def write_ppm(path, image: np.ndarray) -> None:
    """Write an image on [0,1] as binary P6, rounding half to even."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SceneError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary P6 back to float64 on [0,1]; values are exact k/255."""
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise SceneError(f"truncated PPM header in {path}")
        ch = raw[i : i + 1]
        if ch == b"#":  # comment to end of line
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if tokens[0] != b"P6":
        raise SceneError(f"not a binary PPM (P6): magic {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise SceneError(f"malformed PPM header in {path}") from e
    if maxval != 255:
        raise SceneError(f"unsupported PPM maxval {maxval}, expected 255")
    i += 1  # single whitespace after maxval
    payload = raw[i : i + w * h * 3]
    if len(payload) != w * h * 3:
        raise SceneError(
            f"truncated PPM payload in {path}: got {len(payload)}, want {w * h * 3}"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# scene document (JSON)

def scene_to_dict(scene: SceneModel, cams) -> dict:
    return {
        "gaussians": [
            {
                "mu": [float(v) for v in scene.mu[i]],
                "rot": [float(v) for v in scene.rot[i]],
                "log_scale": [float(v) for v in scene.log_scale[i]],
                "opacity_logit": float(scene.opacity_logit[i]),
                "color": [float(v) for v in scene.color[i]],
            }
            for i in range(scene.count)
        ],
        "background": [float(v) for v in scene.background],
        "cameras": [cam.to_dict() for cam in cams],
    }


def scene_from_dict(d: dict, dtype=np.float32):
    gs = d["gaussians"]
    scene = SceneModel(
        mu=np.array([g["mu"] for g in gs], dtype=dtype),
        rot=np.array([g["rot"] for g in gs], dtype=dtype),
        log_scale=np.array([g["log_scale"] for g in gs], dtype=dtype),
        opacity_logit=np.array([g["opacity_logit"] for g in gs], dtype=dtype),
        color=np.array([g["color"] for g in gs], dtype=dtype),
        background=np.array(d["background"], dtype=dtype),
    )
    cams = [Camera.from_dict(c) for c in d["cameras"]]
    return scene, cams


def save_scene_dir(out_dir, scene: SceneModel, cams, targets) -> None:
    """Write scene.json plus one view_####.ppm target per camera."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scene.json", "w") as f:
        json.dump(scene_to_dict(scene, cams), f, indent=1)
    for cam, img in zip(cams, targets):
        write_ppm(out / f"view_{cam.view_id:04d}.ppm", img)


def load_scene_dir(scene_dir, dtype=np.float32):
    """Read scene.json and the target images back."""
    scene_dir = Path(scene_dir)
    path = scene_dir / "scene.json"
    if not path.exists():
        raise SceneError(f"no scene.json in {scene_dir}")
    with open(path) as f:
        scene, cams = scene_from_dict(json.load(f), dtype=dtype)
    targets = [
        read_ppm(scene_dir / f"view_{cam.view_id:04d}.ppm").astype(dtype) for cam in cams
    ]
    return scene, cams, targets
