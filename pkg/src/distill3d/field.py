"""Conditional radiance field: (position, direction, identity latent) ->
(density, color), with finite-difference density normals.

One MLP trunk (no proposal/fine pair at desk scale); the identity latent
is concatenated to the input of every layer. Density comes from a
softplus head on the trunk feature, color from a sigmoid branch that
additionally sees the encoded view direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import gradcore as gc
from .container import load_container, save_container
from .gradcore import Node, ParamStore, concat, gather, mlp_apply, positional_encode

NORMAL_UNDEFINED_EPS = 1e-12


@dataclass(frozen=True)
class FieldConfig:
    depth: int = 8
    width: int = 64
    latent_dim: int = 16
    pos_levels: int = 12
    dir_levels: int = 4
    color_width: int = 32
    scene_radius: float = 1.0

    @property
    def pos_dim(self) -> int:
        return 3 * (1 + 2 * self.pos_levels)

    @property
    def dir_dim(self) -> int:
        return 3 * (1 + 2 * self.dir_levels)


@dataclass
class FieldSample:
    density: float
    rgb: np.ndarray


class ActiveLatent:
    """Handle selecting the latent used by subsequent query/render calls:
    a latent-table row or a free optimization variable, never both."""

    def __init__(self, kind: str, index: int = -1, trainable: bool = True):
        self.kind = kind  # "table" | "free"
        self.index = index
        self.trainable = trainable

    def node(self, params: "FieldParams") -> Node:
        if self.kind == "table":
            leaf = params.store.leaf("latent_table")
            return gather(leaf, [self.index], axis=0)
        leaf = params.store.leaf("active_latent")
        return gc.reshape(leaf, (1, -1))

    def value(self, params: "FieldParams") -> np.ndarray:
        if self.kind == "table":
            return params.store["latent_table"][self.index].copy()
        return params.store["active_latent"].copy()

    def trainable_names(self) -> set:
        if not self.trainable:
            return set()
        return {"latent_table"} if self.kind == "table" else {"active_latent"}


class FieldParams:
    """All weights of the conditional field plus the per-subject latent table."""

    def __init__(self, cfg: FieldConfig, store: ParamStore, n_subjects: int):
        self.cfg = cfg
        self.store = store
        self.n_subjects = n_subjects
        self.active: ActiveLatent | None = None

    def weight_names(self) -> set:
        return {n for n in self.store.names()
                if n not in ("latent_table", "active_latent")}


def init_field(cfg: FieldConfig, n_subjects: int, seed: int = 0,
               latent_scale: float = 0.01) -> FieldParams:
    """Fresh field. Trunk and color-hidden layers get scaled-normal init;
    both heads start at zero so an untouched field renders density
    softplus(0) and color 0.5 everywhere."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    dt = gc.default_dtype()

    def dense(name, din, dout, zero=False):
        w = np.zeros((din, dout)) if zero else rng.normal(0, np.sqrt(2.0 / din), (din, dout))
        store.add(f"{name}.w", w.astype(dt))
        store.add(f"{name}.b", np.zeros(dout, dt))

    din = cfg.pos_dim
    for i in range(cfg.depth):
        dense(f"trunk{i}", din + cfg.latent_dim, cfg.width)
        din = cfg.width
    dense("density0", cfg.width + cfg.latent_dim, 1, zero=True)
    dense("color0", cfg.width + cfg.dir_dim + cfg.latent_dim, cfg.color_width)
    dense("color1", cfg.color_width + cfg.latent_dim, 3, zero=True)
    store.add("latent_table",
              (latent_scale * rng.normal(size=(n_subjects, cfg.latent_dim))).astype(dt))
    return FieldParams(cfg, store, n_subjects)


def set_active_latent(params: FieldParams, source, trainable: bool = True) -> ActiveLatent:
    """Select the latent for subsequent query/render calls: a table index
    or a free latent array of length latent_dim."""
    if isinstance(source, (int, np.integer)):
        if not 0 <= source < params.n_subjects:
            raise IndexError(f"latent index {source} out of range "
                             f"[0, {params.n_subjects})")
        handle = ActiveLatent("table", int(source), trainable)
    else:
        arr = np.asarray(source, dtype=gc.default_dtype())
        if arr.shape != (params.cfg.latent_dim,):
            raise ValueError(f"latent shape {arr.shape} != ({params.cfg.latent_dim},)")
        if "active_latent" in params.store:
            params.store.set("active_latent", arr)
        else:
            params.store.add("active_latent", arr)
        handle = ActiveLatent("free", trainable=trainable)
    params.active = handle
    return handle


def _latent_node(params: FieldParams, latent) -> Node:
    if latent is None:
        if params.active is None:
            raise ValueError("no latent given and no active latent set")
        return params.active.node(params)
    if isinstance(latent, Node):
        return latent if latent.value.ndim == 2 else gc.reshape(latent, (1, -1))
    arr = np.asarray(latent, dtype=gc.default_dtype())
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[-1] != params.cfg.latent_dim:
        raise ValueError(f"latent length {arr.shape[-1]} != latent_dim "
                         f"{params.cfg.latent_dim}")
    return gc.constant(arr)


def density_batch(params: FieldParams, positions, latent=None) -> Node:
    """Density graph for a batch of positions [N, 3] -> [N]."""
    z = _latent_node(params, latent)
    pe = positional_encode(gc.constant(np.asarray(positions, gc.default_dtype())),
                           params.cfg.pos_levels)
    h = gc.relu(mlp_apply(params.store, pe, z, prefix="trunk"))
    zz = z if z.shape[0] == h.shape[0] else gc.broadcast_to(z, (h.shape[0], z.shape[1]))
    logit = mlp_apply(params.store, concat([h, zz], axis=1), prefix="density")
    return gc.reshape(gc.softplus(logit), (-1,))


def query_batch(params: FieldParams, positions, directions, latent=None):
    """(density [N], rgb [N, 3]) graph nodes for batched inputs.

    Density depends on position and latent only; color additionally on
    the (unit) view direction.
    """
    z = _latent_node(params, latent)
    pos = np.asarray(positions, gc.default_dtype())
    dirs = np.asarray(directions, gc.default_dtype())
    pe = positional_encode(gc.constant(pos), params.cfg.pos_levels)
    h = gc.relu(mlp_apply(params.store, pe, z, prefix="trunk"))
    zz = z if z.shape[0] == h.shape[0] else gc.broadcast_to(z, (h.shape[0], z.shape[1]))
    logit = mlp_apply(params.store, concat([h, zz], axis=1), prefix="density")
    sigma = gc.reshape(gc.softplus(logit), (-1,))
    de = positional_encode(gc.constant(dirs), params.cfg.dir_levels)
    rgb = gc.sigmoid(mlp_apply(params.store, concat([h, de], axis=1), zz, prefix="color"))
    return sigma, rgb


def query(params: FieldParams, latent, position, direction) -> FieldSample:
    """Single-point query with precondition checks."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit length, |d| = "
                         f"{np.linalg.norm(direction):.8f}")
    if latent is not None and not isinstance(latent, Node):
        lat = np.asarray(latent)
        if lat.shape != (params.cfg.latent_dim,):
            raise ValueError(f"latent length {lat.shape} != latent_dim "
                             f"{params.cfg.latent_dim}")
    sigma, rgb = query_batch(params, np.asarray(position)[None, :],
                             direction[None, :], latent)
    return FieldSample(float(sigma.value[0]), rgb.value[0].copy())


def _density_values(source, latent, positions: np.ndarray) -> np.ndarray:
    if isinstance(source, FieldParams):
        return density_batch(source, positions, latent).value
    return np.asarray(source(positions))  # analytic density callables


def density_normal(source, latent, position, epsilon: float):
    """-grad(sigma)/|grad(sigma)| by central differences, 6 density queries.

    World-space and camera independent. Near-zero gradient magnitude
    (< 1e-12) returns the zero vector flagged as normal-undefined.
    `source` is a FieldParams (with latent) or any positions->densities
    callable, e.g. an analytic test field.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    p = np.asarray(position, dtype=np.float64)
    probes = np.repeat(p[None, :], 6, axis=0)
    for axis in range(3):
        probes[2 * axis, axis] += epsilon
        probes[2 * axis + 1, axis] -= epsilon
    sig = _density_values(source, latent, probes).astype(np.float64)
    grad = (sig[0::2] - sig[1::2]) / (2.0 * epsilon)
    mag = float(np.linalg.norm(grad))
    if mag < NORMAL_UNDEFINED_EPS:
        return np.zeros(3), False
    return -grad / mag, True


def normals_batch(params: FieldParams, positions, epsilon: float, latent=None):
    """In-graph batched finite-difference normals for the renderer.

    Returns (unit normals Node [N, 3], defined mask ndarray [N]); gradient
    of downstream losses flows through all 6 density queries per point.
    Undefined samples carry a zero normal and a False mask entry.
    """
    pos = np.asarray(positions, dtype=gc.default_dtype())
    n = pos.shape[0]
    probes = np.repeat(pos[:, None, :], 6, axis=1)  # [N, 6, 3]
    for axis in range(3):
        probes[:, 2 * axis, axis] += epsilon
        probes[:, 2 * axis + 1, axis] -= epsilon
    sigma = density_batch(params, probes.reshape(-1, 3), latent)
    sig6 = gc.reshape(sigma, (n, 6))
    plus = gather(sig6, [0, 2, 4], axis=1)
    minus = gather(sig6, [1, 3, 5], axis=1)
    grad = (plus - minus) * gc.constant(1.0 / (2.0 * epsilon))
    raw = -grad
    sq = gc.sum_(gc.square(raw), axis=1, keepdims=True)
    mag = np.sqrt(sq.value[:, 0])
    defined = mag >= NORMAL_UNDEFINED_EPS
    unit = raw / gc.sqrt(sq + gc.constant(1e-24))
    masked = unit * gc.constant(defined[:, None].astype(gc.default_dtype()))
    return masked, defined


def save_field(path, params: FieldParams, extra_meta: dict | None = None) -> None:
    meta = {
        "layer_spec": {
            "depth": params.cfg.depth, "width": params.cfg.width,
            "pos_levels": params.cfg.pos_levels, "dir_levels": params.cfg.dir_levels,
            "color_width": params.cfg.color_width,
            "scene_radius": params.cfg.scene_radius,
        },
        "latent_dim": params.cfg.latent_dim,
        "n_subjects": params.n_subjects,
    }
    if params.active is not None:
        meta["active_latent"] = {"kind": params.active.kind,
                                 "index": params.active.index,
                                 "trainable": params.active.trainable}
    if extra_meta:
        meta.update(extra_meta)
    save_container(path, params.store, "field", meta)


def load_field(path) -> FieldParams:
    c = load_container(path)
    if c.kind != "field":
        raise ValueError(f"{path} holds a {c.kind!r} checkpoint, not a field")
    ls = c.meta["layer_spec"]
    cfg = FieldConfig(depth=ls["depth"], width=ls["width"],
                      latent_dim=c.meta["latent_dim"],
                      pos_levels=ls["pos_levels"], dir_levels=ls["dir_levels"],
                      color_width=ls["color_width"],
                      scene_radius=ls.get("scene_radius", 1.0))
    params = FieldParams(cfg, c.store, c.meta["n_subjects"])
    al = c.meta.get("active_latent")
    if al:
        params.active = ActiveLatent(al["kind"], al["index"], al["trainable"])
    return params
