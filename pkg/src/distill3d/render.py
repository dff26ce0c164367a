"""Cameras, orbit sampling with view descriptors, and differentiable
volume rendering producing color, world-space normal, accumulation and
depth images.

Per ray: alpha_i = 1 - exp(-sigma_i * delta_i), transmittance
T_i = prod_{j<i} (1 - alpha_j) computed as exp of an exclusive cumulative
sum, color = sum T_i alpha_i c_i + (1 - acc) * background. Normals are
composited with the same weights, renormalized, and encoded (n + 1) / 2
with 0.5-gray background below the accumulation threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import gradcore as gc
from . import field as field_mod
from .gradcore import Node, NonFiniteValue, constant, reshape

VIEW_TOKENS = ("front", "side", "overhead", "low-angle", "chin", "mouth",
               "nose", "eyes", "hair", "chest")


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, np.float64)
        self.look_at = np.asarray(self.look_at, np.float64)
        self.up = np.asarray(self.up, np.float64)
        fwd = self.look_at - self.position
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("camera position equals look_at")
        cross = np.cross(fwd / n, self.up / np.linalg.norm(self.up))
        if np.linalg.norm(cross) < 1e-9:
            raise ValueError("up vector is parallel to the view direction")


@dataclass
class OrbitSpec:
    n_orbits: int = 12
    samples_per_orbit: int = 30
    radius_range: tuple = (1.6, 2.4)
    elevation_range: tuple = (-0.35, 0.7)  # radians
    target: tuple = (0.0, 0.0, 0.0)
    vertical_fov: float = 0.6
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.n_orbits < 1 or self.samples_per_orbit < 1:
            raise ValueError("orbit counts must be >= 1")
        if min(self.radius_range) <= 0:
            raise ValueError("orbit radius must be positive")


@dataclass
class RaySamplingSpec:
    n_samples: int = 96
    near: float = 0.5
    far: float = 3.5
    stratified: bool = True
    background_color: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near {self.near} must be < far {self.far}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")


@dataclass
class RenderOutput:
    color: np.ndarray            # H x W x 3 in [0, 1]
    normal: np.ndarray           # H x W x 3, (n + 1) / 2 encoded, bg 0.5
    acc: np.ndarray              # H x W in [0, 1]
    depth: np.ndarray            # H x W, world units
    color_node: Node | None = None
    normal_node: Node | None = None
    acc_node: Node | None = None


def camera_basis(cam: Camera):
    fwd = cam.look_at - cam.position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, cam.up / np.linalg.norm(cam.up))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)  # image rows grow downward
    return right, down, fwd


def camera_rays(cam: Camera):
    """Pinhole rays through pixel centers, row-major pixel order.

    Returns (origins [P, 3], unit directions [P, 3]) with P = H * W.
    """
    right, down, fwd = camera_basis(cam)
    h, w = cam.height, cam.width
    focal = 0.5 * h / np.tan(0.5 * cam.vertical_fov)
    ys, xs = np.mgrid[0:h, 0:w]
    u = (xs + 0.5) - 0.5 * w
    v = (ys + 0.5) - 0.5 * h
    d = (u[..., None] * right + v[..., None] * down + focal * fwd).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.position, d.shape).copy()
    return o, d


def make_orbits(spec: OrbitSpec, seed: int) -> list:
    """Orbit cameras: each orbit is a circle at a sampled elevation and
    radius around the target, with uniformly spaced azimuths."""
    rng = np.random.default_rng(seed)
    target = np.asarray(spec.target, np.float64)
    cams = []
    for _ in range(spec.n_orbits):
        elev = rng.uniform(*spec.elevation_range)
        radius = rng.uniform(*spec.radius_range)
        for k in range(spec.samples_per_orbit):
            az = 2.0 * np.pi * k / spec.samples_per_orbit
            offset = radius * np.array([
                np.sin(az) * np.cos(elev), np.sin(elev), np.cos(az) * np.cos(elev)])
            cams.append(Camera(position=target + offset, look_at=target.copy(),
                               up=np.array([0.0, 1.0, 0.0]),
                               vertical_fov=spec.vertical_fov,
                               width=spec.width, height=spec.height))
    return cams


def view_descriptor(camera: Camera, target, head_radius: float = 0.5) -> str:
    """Bucket a camera into one prompt view token.

    Convention (the underlying thresholds are a declared choice): when the
    camera aims at the head center, elevation/azimuth pick one of
    overhead (el > 60 deg), low-angle (el < -45 deg), side (|az| > 60 deg)
    or front. An off-center aim point buckets by height into
    hair / eyes / nose / mouth / chin / chest.
    """
    target = np.asarray(target, np.float64)
    offset = camera.position - target
    r = np.linalg.norm(offset)
    el = np.degrees(np.arcsin(np.clip(offset[1] / max(r, 1e-12), -1, 1)))
    az = np.degrees(np.arctan2(offset[0], offset[2]))
    aim = camera.look_at - target
    if np.linalg.norm(aim) > 0.15 * head_radius:
        y = aim[1] / head_radius
        if y >= 0.45:
            return "hair"
        if y >= 0.15:
            return "eyes"
        if y >= -0.05:
            return "nose"
        if y >= -0.25:
            return "mouth"
        if y >= -0.5:
            return "chin"
        return "chest"
    if el > 60.0:
        return "overhead"
    if el < -45.0:
        return "low-angle"
    if min(abs(az), 360 - abs(az)) > 60.0:
        return "side"
    return "front"


class FieldScene:
    """Adapter giving the renderer a uniform view of a learned field."""

    def __init__(self, params: field_mod.FieldParams, latent=None):
        self.params = params
        self.latent = latent

    def query(self, positions, directions):
        return field_mod.query_batch(self.params, positions, directions, self.latent)

    def normals(self, positions, epsilon):
        return field_mod.normals_batch(self.params, positions, epsilon, self.latent)


def _as_scene(field, latent):
    if isinstance(field, field_mod.FieldParams):
        return FieldScene(field, latent)
    if latent is not None:
        raise ValueError("latent is only meaningful for FieldParams")
    return field  # any object with query/normals


def _exclusive_cumsum(node: Node) -> Node:
    n = node.shape[1]
    tri = np.triu(np.ones((n, n), gc.default_dtype()), k=1)
    return gc.matmul(node, constant(tri))


def render_rays(scene, origins, dirs, spec: RaySamplingSpec, rng=None,
                normal_epsilon: float | None = None, diag: str = "rays"):
    """Core differentiable ray rendering; returns graph nodes keyed
    color/acc/weights plus numpy depth. Normals only when normal_epsilon
    is given."""
    dt = gc.default_dtype()
    origins = np.asarray(origins, dt)
    dirs = np.asarray(dirs, dt)
    p = origins.shape[0]
    s = spec.n_samples
    if spec.stratified and rng is not None:
        offsets = rng.random((p, s))
    else:
        offsets = np.full((p, s), 0.5)
    step = (spec.far - spec.near) / s
    tvals = (spec.near + (np.arange(s) + offsets) * step).astype(dt)  # [P, S]
    delta = np.concatenate([tvals[:, 1:] - tvals[:, :-1],
                            spec.far - tvals[:, -1:]], axis=1).astype(dt)
    pts = (origins[:, None, :] + tvals[..., None] * dirs[:, None, :]).reshape(-1, 3)
    dirs_flat = np.repeat(dirs, s, axis=0)

    sigma, rgb = scene.query(pts, dirs_flat)
    for name, node in (("density", sigma), ("color", rgb)):
        vals = node.value
        if not np.all(np.isfinite(vals)):
            bad = int(np.argwhere(~np.isfinite(vals.reshape(vals.shape[0], -1)).all(axis=1))[0, 0])
            raise NonFiniteValue(
                f"non-finite {name} at {diag}, ray {bad // s}, sample {bad % s}")

    sig2 = reshape(sigma, (p, s))
    tau = sig2 * constant(delta)
    alpha = constant(1.0) - gc.exp(-tau)
    transmit = gc.exp(-_exclusive_cumsum(tau))
    weights = transmit * alpha                      # [P, S]
    acc = gc.sum_(weights, axis=1)                  # [P]
    w3 = reshape(weights, (p, s, 1))
    rgb3 = reshape(rgb, (p, s, 3))
    bg = constant(np.asarray(spec.background_color, dt))
    color = gc.sum_(w3 * rgb3, axis=1) + reshape(constant(1.0) - acc, (p, 1)) * bg
    depth = np.sum(weights.value * tvals, axis=1)

    out = {"color": color, "acc": acc, "weights": weights, "depth": depth}
    if normal_epsilon is not None:
        n_node, _defined = scene.normals(pts, normal_epsilon)
        n3 = reshape(n_node, (p, s, 3))
        composite = gc.sum_(w3 * n3, axis=1)        # [P, 3]
        sq = gc.sum_(gc.square(composite), axis=1, keepdims=True)
        unit = composite / gc.sqrt(sq + constant(1e-24))
        out["normal_unit"] = unit
    return out


def render(field, latent, camera: Camera, spec: RaySamplingSpec,
           normal_epsilon: float | None = None, rng=None,
           acc_threshold: float = 0.05, camera_index: int = -1) -> RenderOutput:
    """Render one camera view; fully differentiable w.r.t. field
    parameters and latent through the returned graph nodes."""
    scene = _as_scene(field, latent)
    origins, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    parts = render_rays(scene, origins, dirs, spec, rng, normal_epsilon,
                        diag=f"camera {camera_index}")
    color_node, acc_node = parts["color"], parts["acc"]
    normal_node = None
    normal_img = np.full((h, w, 3), 0.5, gc.default_dtype())
    if normal_epsilon is not None:
        # encode to [0, 1]; below the acc threshold the pixel is background
        encoded = (parts["normal_unit"] + constant(1.0)) * constant(0.5)
        mask = (acc_node.value >= acc_threshold).astype(gc.default_dtype())[:, None]
        normal_node = encoded * constant(mask) + constant(0.5 * (1.0 - mask))
        normal_img = normal_node.value.reshape(h, w, 3)
    return RenderOutput(
        color=np.clip(parts["color"].value.reshape(h, w, 3), 0.0, 1.0),
        normal=normal_img,
        acc=parts["acc"].value.reshape(h, w),
        depth=parts["depth"].reshape(h, w),
        color_node=color_node, normal_node=normal_node, acc_node=acc_node)


def accumulation_penalty(output: RenderOutput) -> Node:
    """Mean l1 accumulated opacity per ray (acc is nonnegative)."""
    return gc.mean(output.acc_node)


def save_png(path, image: np.ndarray) -> None:
    from PIL import Image
    arr = np.clip(np.asarray(image, np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def save_raw(path, image: np.ndarray) -> None:
    """Little-endian float dump with shape header (.npy)."""
    np.save(path, np.asarray(image, "<f4" if image.dtype == np.float32 else "<f8"))
