"""Procedural synthetic subjects with analytic ground truth, plus
auto-decoder pretraining of the conditional field.

Subjects are smooth superellipsoid blobs with Gaussian bumps or
indentations; density is softplus of a negated signed-distance-like
function, so analytic normals exist everywhere near the surface. Ground
truth rendering is a separate numpy ray marcher, independent of the
learned-field code path by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .field import FieldParams
from .gradcore import backward, mean, square
from .optim import Adam
from .priors import Condition
from .render import Camera, RaySamplingSpec, camera_rays, render_rays, save_png

DENSITY_SHARPNESS = 40.0


@dataclass(frozen=True)
class Feature:
    center: tuple          # on-surface position, world units
    radius: float          # gaussian footprint
    amplitude: float       # > 0 bump, < 0 indentation


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    axes: tuple                    # ellipsoid semi-axes
    exponent: float = 2.0          # p-norm; 2 round, ~8 boxy
    features: tuple = ()
    base_color: tuple = (0.7, 0.5, 0.4)
    stripe_dir: tuple = (1.0, 0.8, 0.3)
    stripe_freq: float = 6.0
    stripe_amp: float = 0.15
    tint: tuple = (0.1, 0.1, 0.1)
    sharpness: float = DENSITY_SHARPNESS


@dataclass
class VariationRanges:
    axis: tuple = (0.26, 0.4)
    n_features: tuple = (2, 6)      # inclusive bounds
    feature_radius: tuple = (0.08, 0.2)
    feature_amplitude: tuple = (-0.08, 0.12)
    stripe_freq: tuple = (3.0, 9.0)
    stripe_amp: tuple = (0.05, 0.25)


SPHERE_VARIATION = VariationRanges(axis=(0.33, 0.33), n_features=(0, 0),
                                   stripe_amp=(0.0, 0.0))


def gen_subject(seed: int, variation: VariationRanges | None = None) -> SceneSpec:
    """Deterministic subject from a seed. With all variation ranges
    collapsed (SPHERE_VARIATION) the density is exactly the analytic
    sphere softplus(k * (r - |x|))."""
    v = variation if variation is not None else VariationRanges()
    rng = np.random.default_rng(seed)
    axes = tuple(np.round(rng.uniform(*v.axis, size=3), 6))
    n_feat = int(rng.integers(v.n_features[0], v.n_features[1] + 1))
    feats = []
    for _ in range(n_feat):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        surface = tuple(np.round(np.asarray(axes) * d, 6))
        feats.append(Feature(center=surface,
                             radius=float(rng.uniform(*v.feature_radius)),
                             amplitude=float(rng.uniform(*v.feature_amplitude))))
    base = rng.uniform(0.25, 0.85, size=3)
    sdir = rng.normal(size=3)
    sdir /= np.linalg.norm(sdir)
    return SceneSpec(
        seed=seed, axes=axes, exponent=2.0, features=tuple(feats),
        base_color=tuple(np.round(base, 6)), stripe_dir=tuple(np.round(sdir, 6)),
        stripe_freq=float(rng.uniform(*v.stripe_freq)),
        stripe_amp=float(rng.uniform(*v.stripe_amp)),
        tint=tuple(np.round(rng.uniform(-0.25, 0.25, size=3), 6)))


# ------------------------------------------------- analytic field of one subject

def _sdf_like(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Signed-distance-like function, negative inside."""
    x = np.asarray(pts, np.float64)
    a = np.asarray(spec.axes)
    p = spec.exponent
    scaled = np.abs(x / a) + 1e-12
    dp = np.power(np.sum(np.power(scaled, p), axis=-1), 1.0 / p)
    f = (dp - 1.0) * float(np.min(a))
    for feat in spec.features:
        c = np.asarray(feat.center)
        g = np.exp(-np.sum((x - c) ** 2, axis=-1) / (2.0 * feat.radius ** 2))
        f = f - feat.amplitude * g
    return f


def _sdf_gradient(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    x = np.asarray(pts, np.float64)
    a = np.asarray(spec.axes)
    p = spec.exponent
    scaled = np.abs(x / a) + 1e-12
    ssum = np.sum(np.power(scaled, p), axis=-1, keepdims=True)
    dp = np.power(ssum, 1.0 / p)
    # d/dx_i of (sum |x_i/a_i|^p)^(1/p)
    grad = np.power(ssum, 1.0 / p - 1.0) * np.power(scaled, p - 1.0) * np.sign(x / a) / a
    grad = grad * float(np.min(a))
    for feat in spec.features:
        c = np.asarray(feat.center)
        diff = x - c
        g = np.exp(-np.sum(diff ** 2, axis=-1, keepdims=True) / (2.0 * feat.radius ** 2))
        grad = grad + feat.amplitude * g * diff / (feat.radius ** 2)
    return grad


def subject_density(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """sigma_gt(x) = softplus(-k * sdf(x)); smooth and nonnegative."""
    return np.logaddexp(0.0, -spec.sharpness * _sdf_like(spec, pts))


def subject_normal(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Analytic outward unit normals (-grad sigma direction == grad sdf)."""
    g = _sdf_gradient(spec, pts)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-30)


def subject_albedo(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    x = np.asarray(pts, np.float64)
    phase = x @ np.asarray(spec.stripe_dir) * spec.stripe_freq
    color = (np.asarray(spec.base_color)
             + spec.stripe_amp * np.sin(phase)[..., None] * np.asarray(spec.tint) * 4.0)
    return np.clip(color, 0.02, 0.98)


# --------------------------------------------------- independent ray marcher

def analytic_ray_march(spec: SceneSpec, camera: Camera, n_samples: int = 160,
                       near: float = 0.9, far: float = 3.1,
                       background=(1.0, 1.0, 1.0)):
    """Ground-truth renderer: plain numpy quadrature of the analytic
    density/albedo. Shares no code with the differentiable renderer."""
    o, d = camera_rays(camera)
    tvals = near + (np.arange(n_samples) + 0.5) * (far - near) / n_samples
    pts = o[:, None, :] + tvals[None, :, None] * d[:, None, :]
    flat = pts.reshape(-1, 3)
    sigma = subject_density(spec, flat).reshape(len(o), n_samples)
    rgb = subject_albedo(spec, flat).reshape(len(o), n_samples, 3)
    delta = np.full_like(sigma, (far - near) / n_samples)
    tau = sigma * delta
    alpha = 1.0 - np.exp(-tau)
    transmit = np.exp(-np.concatenate(
        [np.zeros((len(o), 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    w = transmit * alpha
    acc = w.sum(axis=1)
    color = (w[..., None] * rgb).sum(axis=1) + (1 - acc)[:, None] * np.asarray(background)
    depth = (w * tvals[None, :]).sum(axis=1) / np.maximum(acc, 1e-12)
    h, wpx = camera.height, camera.width
    hit = o + depth[:, None] * d
    normal = subject_normal(spec, hit)
    normal_img = 0.5 * (normal + 1.0)
    normal_img[acc < 0.05] = 0.5
    return {
        "color": color.reshape(h, wpx, 3),
        "acc": acc.reshape(h, wpx),
        "depth": depth.reshape(h, wpx),
        "normal": normal_img.reshape(h, wpx, 3),
    }


# ------------------------------------------------------------------ dataset

RIG_ANGLES = [
    # 13 frontal-hemisphere cameras, fixed across subjects (degrees)
    (0, 0), (-25, 0), (25, 0), (-50, 0), (50, 0),
    (-30, 22), (0, 22), (30, 22), (-30, -18), (0, -18), (30, -18),
    (0, 45), (0, -38),
]
HELD_OUT_CAMERA = 12  # last rig position reserved for evaluation


def rig_cameras(resolution: int, radius: float = 1.9,
                fov: float = 0.52) -> list:
    cams = []
    for az_deg, el_deg in RIG_ANGLES:
        az, el = np.radians(az_deg), np.radians(el_deg)
        pos = radius * np.array([np.sin(az) * np.cos(el), np.sin(el),
                                 np.cos(az) * np.cos(el)])
        cams.append(Camera(pos, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], fov,
                           resolution, resolution))
    return cams


@dataclass
class MultiViewDataset:
    subjects: list
    cameras: list
    images: np.ndarray           # [n_subjects, n_cameras, H, W, 3]
    normals: np.ndarray | None = None
    seed: int = 0

    def held_out(self, camera_index: int = HELD_OUT_CAMERA):
        return self.images[:, camera_index]


def gen_dataset(n_subjects: int, n_cameras: int = 13, resolution: int = 64,
                seed: int = 0, variation: VariationRanges | None = None,
                with_normals: bool = False, n_samples: int = 160) -> MultiViewDataset:
    if n_subjects < 1 or n_cameras < 1:
        raise ValueError("counts must be >= 1")
    if n_cameras > len(RIG_ANGLES):
        raise ValueError(f"rig has {len(RIG_ANGLES)} positions")
    subjects = [gen_subject(seed * 1000 + i, variation) for i in range(n_subjects)]
    cameras = rig_cameras(resolution)[:n_cameras]
    images = np.zeros((n_subjects, n_cameras, resolution, resolution, 3))
    normals = np.zeros_like(images) if with_normals else None
    for si, spec in enumerate(subjects):
        for ci, cam in enumerate(cameras):
            out = analytic_ray_march(spec, cam, n_samples=n_samples)
            images[si, ci] = out["color"]
            if with_normals:
                normals[si, ci] = out["normal"]
    return MultiViewDataset(subjects, cameras, images, normals, seed)


def save_dataset(root, ds: MultiViewDataset) -> None:
    """One directory per subject: PNGs, raw float dumps, and a JSON
    manifest carrying camera parameters, seed and the SceneSpec."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    top = {"seed": ds.seed, "n_subjects": len(ds.subjects),
           "n_cameras": len(ds.cameras),
           "resolution": ds.images.shape[2],
           "with_normals": ds.normals is not None}
    (root / "dataset.json").write_text(json.dumps(top, indent=2))
    for si, spec in enumerate(ds.subjects):
        sub = root / f"subject_{si:03d}"
        sub.mkdir(exist_ok=True)
        manifest = {
            "scene_spec": asdict(spec),
            "cameras": [{
                "position": c.position.tolist(), "look_at": c.look_at.tolist(),
                "up": c.up.tolist(), "vertical_fov": c.vertical_fov,
                "width": c.width, "height": c.height} for c in ds.cameras],
        }
        (sub / "manifest.json").write_text(json.dumps(manifest, indent=2))
        for ci in range(len(ds.cameras)):
            save_png(sub / f"color_{ci:02d}.png", ds.images[si, ci])
            np.save(sub / f"color_{ci:02d}.npy", ds.images[si, ci].astype("<f4"))
            if ds.normals is not None:
                save_png(sub / f"normal_{ci:02d}.png", ds.normals[si, ci])
                np.save(sub / f"normal_{ci:02d}.npy", ds.normals[si, ci].astype("<f4"))


def load_dataset(root) -> MultiViewDataset:
    root = Path(root)
    top = json.loads((root / "dataset.json").read_text())
    subjects, cameras, images, normals = [], [], [], []
    for si in range(top["n_subjects"]):
        sub = root / f"subject_{si:03d}"
        manifest = json.loads((sub / "manifest.json").read_text())
        ss = manifest["scene_spec"]
        ss["features"] = tuple(Feature(tuple(f["center"]), f["radius"], f["amplitude"])
                               for f in ss["features"])
        for key in ("axes", "base_color", "stripe_dir", "tint"):
            ss[key] = tuple(ss[key])
        subjects.append(SceneSpec(**ss))
        if si == 0:
            cameras = [Camera(c["position"], c["look_at"], c["up"],
                              c["vertical_fov"], c["width"], c["height"])
                       for c in manifest["cameras"]]
        images.append([np.load(sub / f"color_{ci:02d}.npy")
                       for ci in range(top["n_cameras"])])
        if top["with_normals"]:
            normals.append([np.load(sub / f"normal_{ci:02d}.npy")
                            for ci in range(top["n_cameras"])])
    return MultiViewDataset(subjects, cameras, np.asarray(images, np.float64),
                            np.asarray(normals, np.float64) if normals else None,
                            top["seed"])


# ----------------------------------------------------------------- pretrain

class _SubjectBatchScene:
    """Renderer adapter routing each ray to its subject's latent row, so
    one batch mixes rays across all subjects and cameras."""

    def __init__(self, params: FieldParams, subject_per_ray: np.ndarray,
                 n_samples: int):
        from .field import query_batch
        self._query = query_batch
        self.params = params
        self.point_subjects = np.repeat(subject_per_ray, n_samples)

    def query(self, positions, directions):
        table = self.params.store.leaf("latent_table")
        latent = gc.gather(table, self.point_subjects, axis=0)
        return self._query(self.params, positions, directions, latent)


def pretrain(params: FieldParams, dataset: MultiViewDataset, epochs: int,
             lr: float, seed: int = 0, batch_rays: int = 768,
             sampling: RaySamplingSpec | None = None,
             held_out_camera: int = HELD_OUT_CAMERA,
             batches_per_epoch: int | None = None) -> FieldParams:
    """Auto-decoder pretraining: pixelwise squared reconstruction error
    only; latent codes and weights co-trained; every batch samples rays
    across ALL subjects and cameras (held-out camera excluded)."""
    if params.n_subjects != len(dataset.subjects):
        raise ValueError("latent table size does not match dataset subjects")
    spec = sampling or RaySamplingSpec(n_samples=40, near=0.9, far=3.1)
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    n_subj, n_cam, res = (len(dataset.subjects), len(dataset.cameras),
                          dataset.images.shape[2])
    train_cams = [c for c in range(n_cam) if c != held_out_camera]
    rays_by_cam = [camera_rays(dataset.cameras[c]) for c in range(n_cam)]
    if batches_per_epoch is None:
        batches_per_epoch = max(1, (n_subj * len(train_cams) * res * res)
                                // (batch_rays * 8))
    params.epoch_losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        for _b in range(batches_per_epoch):
            subj = rng.integers(0, n_subj, size=batch_rays)
            cam = np.asarray(train_cams)[rng.integers(0, len(train_cams),
                                                      size=batch_rays)]
            pix = rng.integers(0, res * res, size=batch_rays)
            origins = np.stack([rays_by_cam[c][0][p] for c, p in zip(cam, pix)])
            dirs = np.stack([rays_by_cam[c][1][p] for c, p in zip(cam, pix)])
            target = dataset.images[subj, cam].reshape(batch_rays, -1, 3)[
                np.arange(batch_rays), pix]
            scene = _SubjectBatchScene(params, subj, spec.n_samples)
            parts = render_rays(scene, origins, dirs, spec, rng)
            loss = mean(square(parts["color"] - gc.constant(
                target.astype(gc.default_dtype()))))
            grads = backward(loss, params.store)
            opt.step(params.store, grads)
            epoch_loss += float(loss.value)
        params.epoch_losses.append(epoch_loss / batches_per_epoch)
    return params


def reconstruction_psnr(params: FieldParams, dataset: MultiViewDataset,
                        camera_index: int = HELD_OUT_CAMERA,
                        sampling: RaySamplingSpec | None = None) -> float:
    """Mean held-out-view PSNR (dB) over subjects."""
    from .render import render
    spec = sampling or RaySamplingSpec(n_samples=64, near=0.9, far=3.1,
                                       stratified=False)
    errs = []
    for si in range(len(dataset.subjects)):
        latent = params.store["latent_table"][si]
        out = render(params, latent, dataset.cameras[camera_index], spec)
        errs.append(np.mean((out.color - dataset.images[si, camera_index]) ** 2))
    return float(-10.0 * np.log10(np.mean(errs)))


def render_normal_dataset(subject: SceneSpec, n_views: int = 60,
                          resolution: int = 32, seed: int = 0,
                          condition: Condition | None = None,
                          radius: float = 1.9, fov: float = 0.52):
    """World-space normal maps (encoded (n+1)/2) from random views around
    the subject, paired with the reserved learned-token condition when
    given."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n_views):
        az = rng.uniform(0, 2 * np.pi)
        el = rng.uniform(-0.5, 0.9)
        pos = radius * np.array([np.sin(az) * np.cos(el), np.sin(el),
                                 np.cos(az) * np.cos(el)])
        cam = Camera(pos, [0, 0, 0], [0, 1, 0], fov, resolution, resolution)
        images.append(analytic_ray_march(subject, cam)["normal"])
    if condition is None:
        return images
    return [(img, condition) for img in images]
